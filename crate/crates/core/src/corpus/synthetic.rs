use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Corpus, LanguageTag, SentencePair};
use crate::error::{Error, Result};
use crate::rng;

/// A translation direction `(source, target)`.
pub type Direction = (LanguageTag, LanguageTag);

/// Parameters of the synthetic multilingual corpus generator.
///
/// Every language renders concept `c` as the token `<lang>_<c>`, except the
/// first `floor(overlap_fraction * concept_count)` concepts, which render as
/// `sh_<c>` in all languages. Concepts are ranked by frequency: concept 0 is
/// the most frequent under the finite Zipf law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub languages: Vec<LanguageTag>,
    pub concept_count: usize,
    pub overlap_fraction: f64,
    pub sentence_count: usize,
    pub length_range: (usize, usize),
    pub zipf_exponent: f64,
    pub seed: u64,
    /// Directions to generate. Empty means every ordered pair of languages.
    #[serde(default)]
    pub directions: Vec<Direction>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        let unique: BTreeSet<_> = self.languages.iter().collect();
        if self.languages.len() < 2 {
            return bad("at least 2 languages are required");
        }
        if unique.len() != self.languages.len() {
            return bad("duplicate language");
        }
        if self.concept_count == 0 {
            return bad("concept_count must be positive");
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must lie in [0, 1]");
        }
        if self.sentence_count == 0 {
            return bad("sentence_count must be positive");
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return bad("length_range must satisfy 1 <= min <= max");
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be > 0");
        }
        for (s, t) in &self.directions {
            if s == t {
                return bad("a direction must have distinct languages");
            }
            if !unique.contains(s) || !unique.contains(t) {
                return bad("direction uses an undeclared language");
            }
        }
        Ok(())
    }

    pub fn shared_concepts(&self) -> usize {
        (self.overlap_fraction * self.concept_count as f64).floor() as usize
    }

    pub fn resolved_directions(&self) -> Vec<Direction> {
        if !self.directions.is_empty() {
            return self.directions.clone();
        }
        let mut out = Vec::new();
        for s in &self.languages {
            for t in &self.languages {
                if s != t {
                    out.push((s.clone(), t.clone()));
                }
            }
        }
        out
    }

    /// Surface token of `concept` in `lang`.
    pub fn render(&self, concept: usize, lang: &LanguageTag) -> String {
        if concept < self.shared_concepts() {
            format!("sh_{concept}")
        } else {
            format!("{lang}_{concept}")
        }
    }

    fn zipf_cdf(&self) -> Vec<f64> {
        let weights: Vec<f64> = (1..=self.concept_count)
            .map(|rank| (rank as f64).powf(-self.zipf_exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    }
}

fn sample_concepts(spec: &SyntheticSpec, cdf: &[f64], direction: &Direction, index: u64) -> Vec<usize> {
    let mut r = rng::stream(
        spec.seed,
        &["synthetic", direction.0.as_str(), direction.1.as_str()],
        index,
    );
    let len = r.gen_range(spec.length_range.0..=spec.length_range.1);
    (0..len)
        .map(|_| {
            let u: f64 = r.gen();
            cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
        })
        .collect()
}

/// Generates one corpus per requested direction. Pure in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<BTreeMap<Direction, Corpus>> {
    spec.validate()?;
    let cdf = spec.zipf_cdf();
    let mut out = BTreeMap::new();
    for direction in spec.resolved_directions() {
        let pairs: Vec<SentencePair> = (0..spec.sentence_count as u64)
            .into_par_iter()
            .map(|i| {
                let concepts = sample_concepts(spec, &cdf, &direction, i);
                SentencePair {
                    src_lang: direction.0.clone(),
                    tgt_lang: direction.1.clone(),
                    src: concepts.iter().map(|&c| spec.render(c, &direction.0)).collect(),
                    tgt: concepts.iter().map(|&c| spec.render(c, &direction.1)).collect(),
                }
            })
            .collect();
        let languages = [direction.0.clone(), direction.1.clone()].into_iter().collect();
        out.insert(direction, Corpus { pairs, languages });
    }
    Ok(out)
}

/// Re-renders synthetic tokens of language `from` into language `to`.
/// Shared (`sh_*`) and foreign tokens are left untouched.
pub fn rerender(tokens: &[String], from: &LanguageTag, to: &LanguageTag) -> Vec<String> {
    let prefix = format!("{from}_");
    tokens
        .iter()
        .map(|t| match t.strip_prefix(&prefix) {
            Some(rest) if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) => {
                format!("{to}_{rest}")
            }
            _ => t.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(overlap: f64) -> SyntheticSpec {
        SyntheticSpec {
            languages: vec![LanguageTag::new("A").unwrap(), LanguageTag::new("B").unwrap()],
            concept_count: 10,
            overlap_fraction: overlap,
            sentence_count: 50,
            length_range: (1, 6),
            zipf_exponent: 1.0,
            seed: 42,
            directions: vec![],
        }
    }

    #[test]
    fn disjoint_vocabularies_align_positionally() {
        let out = generate_synthetic(&spec(0.0)).unwrap();
        let c = &out[&(LanguageTag::new("A").unwrap(), LanguageTag::new("B").unwrap())];
        assert_eq!(c.len(), 50);
        for p in c.pairs() {
            assert_eq!(p.src.len(), p.tgt.len());
            for (s, t) in p.src.iter().zip(&p.tgt) {
                assert!(s.starts_with("A_") && t.starts_with("B_"));
                assert_eq!(s[2..], t[2..]);
            }
        }
    }

    #[test]
    fn full_overlap_gives_identical_sides() {
        let out = generate_synthetic(&spec(1.0)).unwrap();
        for c in out.values() {
            for p in c.pairs() {
                assert_eq!(p.src, p.tgt);
            }
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let a = generate_synthetic(&spec(0.3)).unwrap();
        let b = generate_synthetic(&spec(0.3)).unwrap();
        assert_eq!(a, b);
        let mut s = spec(0.3);
        s.directions = vec![(LanguageTag::new("B").unwrap(), LanguageTag::new("A").unwrap())];
        let only = generate_synthetic(&s).unwrap();
        let key = s.directions[0].clone();
        assert_eq!(only[&key], a[&key]);
    }

    #[test]
    fn rejects_single_language() {
        let mut s = spec(0.0);
        s.languages.truncate(1);
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn zipf_prefers_low_ranks() {
        let mut s = spec(0.0);
        s.sentence_count = 400;
        let out = generate_synthetic(&s).unwrap();
        let c = out.values().next().unwrap();
        let count = |tok: &str| {
            c.pairs()
                .iter()
                .flat_map(|p| &p.src)
                .filter(|t| t.as_str() == tok)
                .count()
        };
        assert!(count("A_0") > count("A_9"));
    }

    #[test]
    fn rerender_maps_prefix_only() {
        let toks: Vec<String> = ["A_1", "sh_0", "B_2", "A_x"].iter().map(|s| s.to_string()).collect();
        let a = LanguageTag::new("A").unwrap();
        let c = LanguageTag::new("C").unwrap();
        assert_eq!(rerender(&toks, &a, &c), vec!["C_1", "sh_0", "B_2", "A_x"]);
    }
}
