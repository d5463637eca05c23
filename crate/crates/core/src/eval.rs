//! Measurement: off-target ratio, off-target categories, corpus BLEU, beam
//! sweeps, per-position confidence curves and vocabulary-mass partition.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, LanguageTag};
use crate::decode::{decode_batch, masked_softmax, DecodeConfig, Scorer};
use crate::error::{Error, Result};
use crate::langid::LangIdModel;
use crate::vocab::{TokenId, VocabMask};

/// Detected language per hypothesis; `None` for empty hypotheses.
pub fn detect_languages<S: AsRef<str> + Sync>(
    hyps: &[Vec<S>],
    model: &LangIdModel,
) -> Result<Vec<Option<LanguageTag>>> {
    hyps.par_iter()
        .map(|h| {
            let text = detokenize(h);
            if text.trim().is_empty() {
                Ok(None)
            } else {
                model.identify(&text).map(|id| Some(id.language))
            }
        })
        .collect()
}

/// Fraction of hypotheses whose detected language is not `target`. Empty
/// hypotheses count as off-target.
pub fn compute_otr<S: AsRef<str> + Sync>(hyps: &[Vec<S>], target: &LanguageTag, model: &LangIdModel) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("OTR needs at least one hypothesis".into()));
    }
    let detected = detect_languages(hyps, model)?;
    Ok(otr_from_detected(&detected, target))
}

pub fn otr_from_detected(detected: &[Option<LanguageTag>], target: &LanguageTag) -> f64 {
    let empty = detected.iter().filter(|d| d.is_none()).count();
    if empty > 0 {
        warn!("{empty} empty hypotheses counted as off-target");
    }
    let off = detected.iter().filter(|d| d.as_ref() != Some(target)).count();
    off as f64 / detected.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffTargetSplit {
    pub to_source: f64,
    /// Includes empty hypotheses, so that `to_source + to_others = OTR`.
    pub to_others: f64,
}

pub fn categorize_detected(detected: &[Option<LanguageTag>], src: &LanguageTag, tgt: &LanguageTag) -> OffTargetSplit {
    let n = detected.len().max(1) as f64;
    let to_source = detected.iter().filter(|d| d.as_ref() == Some(src)).count();
    let to_others = detected
        .iter()
        .filter(|d| d.as_ref() != Some(src) && d.as_ref() != Some(tgt))
        .count();
    OffTargetSplit {
        to_source: to_source as f64 / n,
        to_others: to_others as f64 / n,
    }
}

/// To-source and to-others ratios, both over all N hypotheses.
pub fn categorize_offtarget<S: AsRef<str> + Sync>(
    hyps: &[Vec<S>],
    src_lang: &LanguageTag,
    tgt_lang: &LanguageTag,
    model: &LangIdModel,
) -> Result<OffTargetSplit> {
    if src_lang == tgt_lang {
        return Err(Error::InvalidPair("source and target language coincide".into()));
    }
    let detected = detect_languages(hyps, model)?;
    Ok(categorize_detected(&detected, src_lang, tgt_lang))
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Clipped n-gram matches and totals for n = 1..=4, plus lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add<T: Eq + Hash>(&mut self, hyp: &[T], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    /// BLEU on a 0–100 scale; zero when any precision is zero.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_prec: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / 4.0;
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp();
        100.0 * bp * log_prec.exp()
    }
}

/// Token-level corpus BLEU-4 with brevity penalty and no smoothing.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            what: "hypotheses vs references",
            left: hyps.len(),
            right: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU needs at least one sentence".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(h, r);
    }
    Ok(stats.score())
}

/// A test set in model-id space for sources and word space for references.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub sources: Vec<Vec<TokenId>>,
    pub references: Vec<Vec<String>>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.src_lang, self.tgt_lang)
    }
}

/// Turns model output ids into words (drops specials, undoes subwords, ...).
pub type Render<'a> = dyn Fn(&[TokenId]) -> Vec<String> + Sync + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionEval {
    pub direction: String,
    pub zero_shot: bool,
    pub n: usize,
    pub bleu: f64,
    pub otr: f64,
    pub to_source: f64,
    pub to_others: f64,
    pub empty_hypotheses: usize,
}

/// Decodes a test set (top hypothesis) and scores it.
pub fn evaluate_direction<S: Scorer + ?Sized>(
    scorer: &S,
    test: &TestSet,
    cfg: &DecodeConfig,
    mask: Option<&VocabMask>,
    langid: &LangIdModel,
    render: &Render<'_>,
    zero_shot: bool,
) -> Result<(DirectionEval, Vec<Vec<String>>)> {
    if test.is_empty() {
        return Err(Error::Empty(format!("test set {} is empty", test.name())));
    }
    let decoded = decode_batch(scorer, &test.sources, &test.tgt_lang, cfg, mask)?;
    let hyps: Vec<Vec<String>> = decoded
        .iter()
        .map(|h| h.first().map(|b| render(&b.tokens)).unwrap_or_default())
        .collect();
    let eval = score_hypotheses(test, &hyps, langid, zero_shot)?;
    Ok((eval, hyps))
}

pub fn score_hypotheses(
    test: &TestSet,
    hyps: &[Vec<String>],
    langid: &LangIdModel,
    zero_shot: bool,
) -> Result<DirectionEval> {
    let detected = detect_languages(hyps, langid)?;
    let split = categorize_detected(&detected, &test.src_lang, &test.tgt_lang);
    Ok(DirectionEval {
        direction: test.name(),
        zero_shot,
        n: hyps.len(),
        bleu: corpus_bleu(hyps, &test.references)?,
        otr: otr_from_detected(&detected, &test.tgt_lang),
        to_source: split.to_source,
        to_others: split.to_others,
        empty_hypotheses: detected.iter().filter(|d| d.is_none()).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beam: usize,
    pub bleu: f64,
    pub otr: f64,
}

/// Decodes the whole test set once per beam size, all else equal.
pub fn beam_sweep<S: Scorer + ?Sized>(
    scorer: &S,
    test: &TestSet,
    beams: &[usize],
    base: &DecodeConfig,
    mask: Option<&VocabMask>,
    langid: &LangIdModel,
    render: &Render<'_>,
) -> Result<Vec<SweepRow>> {
    if beams.is_empty() || beams.contains(&0) {
        return Err(Error::Config("beam sweep needs non-empty beams, each >= 1".into()));
    }
    beams
        .iter()
        .map(|&beam| {
            let (e, _) = evaluate_direction(scorer, test, &base.with_beam(beam), mask, langid, render, false)?;
            Ok(SweepRow {
                beam,
                bleu: e.bleu,
                otr: e.otr,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[(String, Vec<SweepRow>)]) -> std::io::Result<()> {
    writeln!(w, "beam,bleu,otr,condition")?;
    for (condition, sweep) in rows {
        for r in sweep {
            writeln!(w, "{},{:.4},{:.6},{}", r.beam, r.bleu, r.otr, condition)?;
        }
    }
    Ok(())
}

/// Mean teacher-forced probability of the candidate token at each position
/// `1..=max_positions`. `None` where no candidate is that long.
pub fn per_token_confidence<S: Scorer + ?Sized>(
    scorer: &S,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    tag: &LanguageTag,
    mask: Option<&VocabMask>,
    max_positions: usize,
) -> Result<Vec<Option<f64>>> {
    if pairs.is_empty() {
        return Err(Error::Empty("confidence curve needs at least one candidate".into()));
    }
    let per_pair: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|(src, cand)| {
            let mut probs = Vec::new();
            for t in 0..cand.len().min(max_positions) {
                let z = scorer.next_token_logits(src, tag, &cand[..t])?;
                let p = masked_softmax(&z, mask)?;
                probs.push(p[cand[t] as usize]);
            }
            Ok(probs)
        })
        .collect::<Result<_>>()?;
    Ok((0..max_positions)
        .map(|t| {
            let vals: Vec<f64> = per_pair.iter().filter_map(|p| p.get(t).copied()).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect())
}

pub fn write_confidence_csv<W: Write>(mut w: W, curves: &[(String, Vec<Option<f64>>)]) -> std::io::Result<()> {
    writeln!(w, "position,probability,condition")?;
    for (condition, curve) in curves {
        for (i, v) in curve.iter().enumerate() {
            if let Some(v) = v {
                writeln!(w, "{},{:.6},{}", i + 1, v, condition)?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassPartition {
    pub on_mass: f64,
    pub off_mass: f64,
    /// (on, off) at every teacher-forced step.
    pub steps: Vec<(f64, f64)>,
}

/// Splits the predicted mass at every reference position between the target
/// language set `on_set` (V_T ∪ {EOS}) and its complement.
pub fn vocab_mass_partition<S: Scorer + ?Sized>(
    scorer: &S,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    tag: &LanguageTag,
    on_set: &VocabMask,
    mask: Option<&VocabMask>,
) -> Result<MassPartition> {
    if pairs.is_empty() {
        return Err(Error::Empty("mass partition needs at least one pair".into()));
    }
    let per_pair: Vec<Vec<(f64, f64)>> = pairs
        .par_iter()
        .map(|(src, reference)| {
            (0..reference.len())
                .map(|t| {
                    let z = scorer.next_token_logits(src, tag, &reference[..t])?;
                    let p = masked_softmax(&z, mask)?;
                    if on_set.len() != p.len() {
                        return Err(Error::LengthMismatch {
                            what: "vocabulary set vs distribution",
                            left: on_set.len(),
                            right: p.len(),
                        });
                    }
                    let (mut on, mut off) = (0.0, 0.0);
                    for (i, &q) in p.iter().enumerate() {
                        if on_set.allowed[i] {
                            on += q;
                        } else {
                            off += q;
                        }
                    }
                    Ok((on, off))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let steps: Vec<(f64, f64)> = per_pair.into_iter().flatten().collect();
    let n = steps.len().max(1) as f64;
    Ok(MassPartition {
        on_mass: steps.iter().map(|s| s.0).sum::<f64>() / n,
        off_mass: steps.iter().map(|s| s.1).sum::<f64>() / n,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionBleu {
    pub n: usize,
    /// `None` when the partition is empty.
    pub vanilla_bleu: Option<f64>,
    pub improved_bleu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub on_target: PartitionBleu,
    pub off_target: PartitionBleu,
}

/// Partitions items by whether the vanilla hypothesis was on-target and
/// scores both systems on each part.
pub fn split_on_off_eval(
    vanilla: &[Vec<String>],
    improved: &[Vec<String>],
    refs: &[Vec<String>],
    tgt_lang: &LanguageTag,
    model: &LangIdModel,
) -> Result<SplitEval> {
    for (what, other) in [
        ("vanilla vs improved", improved.len()),
        ("vanilla vs references", refs.len()),
    ] {
        if vanilla.len() != other {
            return Err(Error::LengthMismatch {
                what,
                left: vanilla.len(),
                right: other,
            });
        }
    }
    let detected = detect_languages(vanilla, model)?;
    let part = |on: bool| -> Result<PartitionBleu> {
        let idx: Vec<usize> = (0..vanilla.len())
            .filter(|&i| (detected[i].as_ref() == Some(tgt_lang)) == on)
            .collect();
        if idx.is_empty() {
            return Ok(PartitionBleu {
                n: 0,
                vanilla_bleu: None,
                improved_bleu: None,
            });
        }
        let pick = |xs: &[Vec<String>]| -> Vec<Vec<String>> { idx.iter().map(|&i| xs[i].clone()).collect() };
        let r = pick(refs);
        Ok(PartitionBleu {
            n: idx.len(),
            vanilla_bleu: Some(corpus_bleu(&pick(vanilla), &r)?),
            improved_bleu: Some(corpus_bleu(&pick(improved), &r)?),
        })
    };
    Ok(SplitEval {
        on_target: part(true)?,
        off_target: part(false)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::ScoreVector;
    use std::collections::BTreeMap;

    fn tag(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        crate::corpus::tokenize(s)
    }

    fn langid() -> LangIdModel {
        let mut data = BTreeMap::new();
        for l in ["De", "Fr", "En"] {
            data.insert(
                tag(l),
                vec![(0..30).map(|i| format!("{l}_{i}")).collect::<Vec<_>>().join(" ")],
            );
        }
        crate::langid::train_profiles(&data, 3, 0.5).unwrap()
    }

    #[test]
    fn otr_example() {
        let hyps = vec![toks("De_1 De_2"), toks("De_3"), toks("Fr_1 Fr_4"), toks("De_9 De_8")];
        assert_eq!(compute_otr(&hyps, &tag("De"), &langid()).unwrap(), 0.25);
        assert!(compute_otr::<String>(&[], &tag("De"), &langid()).is_err());
    }

    #[test]
    fn empty_hypotheses_are_off_target_others() {
        let hyps = vec![toks("De_1"), vec![], toks("Fr_2"), toks("En_2")];
        let m = langid();
        let otr = compute_otr(&hyps, &tag("De"), &m).unwrap();
        assert_eq!(otr, 0.75);
        let split = categorize_offtarget(&hyps, &tag("Fr"), &tag("De"), &m).unwrap();
        assert_eq!(split.to_source, 0.25);
        assert_eq!(split.to_others, 0.5);
        assert!((split.to_source + split.to_others - otr).abs() < 1e-12);
    }

    #[test]
    fn all_on_target_has_no_categories() {
        let hyps = vec![toks("De_1"), toks("De_2 De_3")];
        let split = categorize_offtarget(&hyps, &tag("Fr"), &tag("De"), &langid()).unwrap();
        assert_eq!((split.to_source, split.to_others), (0.0, 0.0));
    }

    #[test]
    fn bleu_examples() {
        let h = vec![toks("a b c d")];
        let r = vec![toks("a b c d e")];
        let b = corpus_bleu(&h, &r).unwrap();
        assert!((b - 100.0 * (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
        assert_eq!(corpus_bleu(&r, &r).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&[toks("a b c x")], &[toks("a b c d")]).unwrap(), 0.0);
        assert!(corpus_bleu(&h, &[]).is_err());
    }

    #[test]
    fn bleu_is_order_invariant() {
        let h = vec![toks("a b c d e"), toks("x y z w v u"), toks("a b x d e f")];
        let r = vec![toks("a b c d f"), toks("x y z w v"), toks("a b x d e")];
        let b1 = corpus_bleu(&h, &r).unwrap();
        let hr: Vec<_> = h.iter().rev().cloned().collect();
        let rr: Vec<_> = r.iter().rev().cloned().collect();
        assert_eq!(b1, corpus_bleu(&hr, &rr).unwrap());
    }

    struct Uniform(usize);
    impl Scorer for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn eos(&self) -> TokenId {
            1
        }
        fn next_token_logits(&self, _: &[TokenId], _: &LanguageTag, _: &[TokenId]) -> Result<ScoreVector> {
            Ok(ScoreVector(vec![0.0; self.0]))
        }
    }

    #[test]
    fn uniform_confidence_and_mass() {
        let s = Uniform(8);
        let pairs = vec![(vec![2], vec![3, 4, 5]), (vec![2], vec![6])];
        let curve = per_token_confidence(&s, &pairs, &tag("De"), None, 15).unwrap();
        assert_eq!(curve.len(), 15);
        for v in &curve[..3] {
            assert!((v.unwrap() - 1.0 / 8.0).abs() < 1e-15);
        }
        assert!(curve[3].is_none());
        assert!(per_token_confidence(&s, &[], &tag("De"), None, 15).is_err());

        let half = VocabMask {
            language: tag("De"),
            allowed: (0..8).map(|i| i % 2 == 1).collect(),
        };
        let mp = vocab_mass_partition(&s, &pairs, &tag("De"), &half, None).unwrap();
        assert!((mp.on_mass - 0.5).abs() < 1e-12);
        let masked = vocab_mass_partition(&s, &pairs, &tag("De"), &half, Some(&half)).unwrap();
        assert_eq!(masked.off_mass, 0.0);
        assert!(masked.steps.iter().all(|(on, off)| (on + off - 1.0).abs() < 1e-9));
    }

    #[test]
    fn split_eval_partitions() {
        let m = langid();
        let vanilla = vec![toks("De_1 De_2 De_3 De_4"), toks("Fr_1 Fr_2 Fr_3 Fr_4")];
        let refs = vec![toks("De_1 De_2 De_3 De_4"), toks("De_1 De_2 De_3 De_4")];
        let same = split_on_off_eval(&vanilla, &vanilla, &refs, &tag("De"), &m).unwrap();
        assert_eq!(same.on_target.n + same.off_target.n, 2);
        assert_eq!(same.on_target.vanilla_bleu, same.on_target.improved_bleu);
        assert_eq!(same.off_target.vanilla_bleu, same.off_target.improved_bleu);

        let on_only = split_on_off_eval(&refs, &refs, &refs, &tag("De"), &m).unwrap();
        assert_eq!(on_only.off_target.n, 0);
        assert!(on_only.off_target.vanilla_bleu.is_none());
        assert!(split_on_off_eval(&refs, &refs[..1], &refs, &tag("De"), &m).is_err());
    }
}
