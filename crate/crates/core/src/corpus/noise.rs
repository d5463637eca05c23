use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::rng;

/// Ground truth of an injection: sorted indices of the corrupted pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseInjection {
    pub copy: Vec<usize>,
    pub misalign: Vec<usize>,
}

/// Corrupts `floor(copy_ratio * N)` pairs with a verbatim copy of their source
/// and `floor(misalign_ratio * N)` other pairs with the source side of a
/// different pair. Length and order are preserved.
pub fn inject_noise(
    corpus: &Corpus,
    copy_ratio: f64,
    misalign_ratio: f64,
    seed: u64,
) -> Result<(Corpus, NoiseInjection)> {
    for r in [copy_ratio, misalign_ratio] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("noise ratio {r} outside [0, 1]")));
        }
    }
    if copy_ratio + misalign_ratio > 1.0 {
        return Err(Error::Config(format!(
            "copy_ratio + misalign_ratio = {} exceeds 1",
            copy_ratio + misalign_ratio
        )));
    }
    let n = corpus.len();
    let n_copy = (copy_ratio * n as f64).floor() as usize;
    let n_mis = (misalign_ratio * n as f64).floor() as usize;
    if n_copy + n_mis == 0 {
        return Ok((corpus.clone(), NoiseInjection::default()));
    }

    let mut r = rng::stream(seed, &["inject_noise"], 0);
    let chosen = index::sample(&mut r, n, n_copy + n_mis).into_vec();
    let mut copy: Vec<usize> = chosen[..n_copy].to_vec();
    let mut misalign: Vec<usize> = chosen[n_copy..].to_vec();
    copy.sort_unstable();
    misalign.sort_unstable();

    let mut pairs = corpus.pairs().to_vec();
    for &i in &copy {
        pairs[i].tgt = pairs[i].src.clone();
    }
    let original = corpus.pairs();
    for &i in &misalign {
        let mut donor = None;
        for _ in 0..4 * n {
            let j = r.gen_range(0..n);
            if j != i && original[j].src != original[i].src {
                donor = Some(j);
                break;
            }
        }
        let donor = donor
            .or_else(|| (0..n).find(|&j| original[j].src != original[i].src))
            .ok_or_else(|| Error::Config("misalignment needs at least two distinct source sentences".into()))?;
        pairs[i].tgt = original[donor].src.clone();
    }
    Ok((
        Corpus {
            pairs,
            languages: corpus.languages().clone(),
        },
        NoiseInjection { copy, misalign },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, LanguageTag, SyntheticSpec};
    use proptest::prelude::*;

    fn corpus(n: usize) -> Corpus {
        let spec = SyntheticSpec {
            languages: vec![LanguageTag::new("A").unwrap(), LanguageTag::new("B").unwrap()],
            concept_count: 30,
            overlap_fraction: 0.0,
            sentence_count: n,
            length_range: (2, 6),
            zipf_exponent: 1.0,
            seed: 9,
            directions: vec![(LanguageTag::new("A").unwrap(), LanguageTag::new("B").unwrap())],
        };
        generate_synthetic(&spec).unwrap().into_values().next().unwrap()
    }

    #[test]
    fn exact_copy_count() {
        let c = corpus(100);
        let (noisy, truth) = inject_noise(&c, 0.05, 0.0, 1).unwrap();
        assert_eq!(truth.copy.len(), 5);
        let copies = noisy.pairs().iter().filter(|p| p.src == p.tgt).count();
        assert_eq!(copies, 5);
    }

    #[test]
    fn zero_ratios_identity() {
        let c = corpus(100);
        let (noisy, truth) = inject_noise(&c, 0.0, 0.0, 1).unwrap();
        assert_eq!(noisy, c);
        assert!(truth.copy.is_empty() && truth.misalign.is_empty());
    }

    #[test]
    fn misaligned_targets_are_source_language() {
        let c = corpus(100);
        let (noisy, truth) = inject_noise(&c, 0.0, 0.05, 3).unwrap();
        assert_eq!(truth.misalign.len(), 5);
        for &i in &truth.misalign {
            let p = &noisy.pairs()[i];
            assert!(p.tgt.iter().all(|t| t.starts_with("A_")));
            assert_ne!(p.tgt, p.src);
        }
    }

    #[test]
    fn rejects_excess_ratio() {
        assert!(inject_noise(&corpus(10), 0.6, 0.5, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn preserves_length_and_disjointness(copy in 0.0f64..0.5, mis in 0.0f64..0.5, seed in any::<u64>()) {
            let c = corpus(60);
            let (noisy, truth) = inject_noise(&c, copy, mis, seed).unwrap();
            prop_assert_eq!(noisy.len(), c.len());
            prop_assert_eq!(truth.copy.len(), (copy * 60.0).floor() as usize);
            prop_assert!(truth.copy.iter().all(|i| !truth.misalign.contains(i)));
            for (i, (a, b)) in c.pairs().iter().zip(noisy.pairs()).enumerate() {
                prop_assert_eq!(&a.src, &b.src);
                if !truth.copy.contains(&i) && !truth.misalign.contains(&i) {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
