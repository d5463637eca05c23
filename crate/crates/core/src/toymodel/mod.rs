//! Desk-scale multilingual translation model: an EM-trained lexical channel
//! combined log-linearly with a target-tag-conditioned n-gram LM over one
//! shared joint vocabulary.
//!
//! For a target token `y` the unnormalized score is
//!
//! ```text
//! z_y = λ · ln p_lex(y | src) + (1 − λ) · ln p_lm(y | prefix, tag)
//! ```
//!
//! where both probabilities are floored at ε. The source is tagged (`<2tag>`
//! prefix) before it reaches the channel. Two channel readings are available:
//!
//! * [`Alignment::Uniform`]: every tagged source position and NULL is equally
//!   likely, `p_lex(y) = (t(y|NULL) + Σ_s t(y|s)) / (|src| + 1)`; EOS gets ε.
//! * [`Alignment::Monotone`]: output step `t` reads NULL, the tag and source
//!   position `t` with equal weight. Past the end of the source the position
//!   slot becomes an end marker that emits EOS with probability one.

mod lex;
mod lm;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tag_corpus, Corpus, LanguageTag};
use crate::decode::{ScoreVector, Scorer};
use crate::error::{Error, Result};
use crate::vocab::{JointVocab, TokenId};

pub use lex::{train_lexical, LexTable, Source};
pub use lm::{train_lm, TagLm, BOS};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Uniform,
    #[default]
    Monotone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::lm_order")]
    pub lm_order: usize,
    #[serde(default = "defaults::lm_alpha")]
    pub lm_alpha: f64,
    #[serde(default = "defaults::em_iterations")]
    pub em_iterations: usize,
    #[serde(default = "defaults::use_null")]
    pub use_null: bool,
    #[serde(default)]
    pub alignment: Alignment,
}

mod defaults {
    pub fn lambda() -> f64 {
        0.5
    }
    pub fn epsilon() -> f64 {
        1e-9
    }
    pub fn lm_order() -> usize {
        2
    }
    pub fn lm_alpha() -> f64 {
        0.1
    }
    pub fn em_iterations() -> usize {
        5
    }
    pub fn use_null() -> bool {
        true
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lambda: defaults::lambda(),
            epsilon: defaults::epsilon(),
            lm_order: defaults::lm_order(),
            lm_alpha: defaults::lm_alpha(),
            em_iterations: defaults::em_iterations(),
            use_null: defaults::use_null(),
            alignment: Alignment::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("model.lambda must lie in [0, 1]".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("model.epsilon must lie in (0, 1)".into()));
        }
        if self.lm_order == 0 {
            return Err(Error::Config("model.lm_order must be positive".into()));
        }
        if !(self.lm_alpha > 0.0 && self.lm_alpha.is_finite()) {
            return Err(Error::Config("model.lm_alpha must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    format_version: u32,
    config: ModelConfig,
    joint: JointVocab,
    lex: LexTable,
    lm: TagLm,
}

/// Training by-products kept for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub log_likelihood: Vec<f64>,
    pub pairs: usize,
}

impl ToyModel {
    /// Trains on untagged corpora. The joint vocabulary covers every token seen
    /// on either side plus the specials of every declared language.
    pub fn train(corpora: &[Corpus], config: &ModelConfig) -> Result<(ToyModel, TrainingTrace)> {
        config.validate()?;
        let merged = Corpus::concat(corpora);
        if merged.is_empty() {
            return Err(Error::Empty("no training pairs".into()));
        }
        let tagged = tag_corpus(&merged)?;
        let joint = JointVocab::build([&tagged])?;
        let (lex, ll) = train_lexical(&tagged, &joint, config.em_iterations, config.use_null)?;
        let tags: Vec<LanguageTag> = {
            let mut t: Vec<LanguageTag> = merged.pairs().iter().map(|p| p.tgt_lang.clone()).collect();
            t.sort();
            t.dedup();
            t
        };
        let lm = train_lm(&merged, &joint, &tags, config.lm_order, config.lm_alpha)?;
        Ok((
            ToyModel::from_parts(joint, lex, lm, config.clone())?,
            TrainingTrace {
                log_likelihood: ll,
                pairs: merged.len(),
            },
        ))
    }

    pub fn from_parts(joint: JointVocab, lex: LexTable, lm: TagLm, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if lm.vocab_size() != joint.len() || lm.eos() != joint.eos() {
            return Err(Error::Config("language model was built for another vocabulary".into()));
        }
        if lex.source_count() > joint.len() || lex.max_target().is_some_and(|m| m as usize >= joint.len()) {
            return Err(Error::Config(
                "lexical table references tokens outside the vocabulary".into(),
            ));
        }
        Ok(ToyModel {
            format_version: FORMAT_VERSION,
            config,
            joint,
            lex,
            lm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn joint(&self) -> &JointVocab {
        &self.joint
    }

    pub fn lex(&self) -> &LexTable {
        &self.lex
    }

    pub fn lm(&self) -> &TagLm {
        &self.lm
    }

    /// A copy with a different interpolation weight / channel reading.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ToyModel { config, ..self.clone() })
    }

    /// Floored channel probabilities for the next position.
    pub fn lexical_distribution(&self, src: &[TokenId], tag: &LanguageTag, step: usize) -> Result<Vec<f64>> {
        let tag_id = self
            .joint
            .tag_id(tag)
            .ok_or_else(|| Error::UnknownLanguage(tag.to_string()))?;
        let eos = self.joint.eos() as usize;
        let mut p = vec![0.0; self.joint.len()];
        let null = self.lex.has_null();
        match self.config.alignment {
            Alignment::Uniform => {
                let n_sources = src.len() + 1 + usize::from(null);
                let w = 1.0 / n_sources as f64;
                if null {
                    self.lex.accumulate(Source::Null, w, &mut p);
                }
                self.lex.accumulate(Source::Token(tag_id), w, &mut p);
                for &s in src {
                    self.lex.accumulate(Source::Token(s), w, &mut p);
                }
                p[eos] = 0.0;
            }
            Alignment::Monotone => {
                let w = 1.0 / (2 + usize::from(null)) as f64;
                if null {
                    self.lex.accumulate(Source::Null, w, &mut p);
                }
                self.lex.accumulate(Source::Token(tag_id), w, &mut p);
                p[eos] = 0.0;
                match src.get(step) {
                    Some(&s) => self.lex.accumulate(Source::Token(s), w, &mut p),
                    None => p[eos] = w,
                }
            }
        }
        let eps = self.config.epsilon;
        p.iter_mut().for_each(|x| *x = x.max(eps));
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ToyModel = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported model format version {}",
                path.display(),
                m.format_version
            )));
        }
        ToyModel::from_parts(m.joint, m.lex, m.lm, m.config)
    }
}

impl Scorer for ToyModel {
    fn vocab_size(&self) -> usize {
        self.joint.len()
    }

    fn eos(&self) -> TokenId {
        self.joint.eos()
    }

    fn next_token_logits(&self, src: &[TokenId], tag: &LanguageTag, prefix: &[TokenId]) -> Result<ScoreVector> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence is empty".into()));
        }
        if !self.lm.has_tag(tag) {
            return Err(Error::UnknownLanguage(tag.to_string()));
        }
        let lex = self.lexical_distribution(src, tag, prefix.len())?;
        let lm = self.lm.distribution(prefix, tag)?;
        let lambda = self.config.lambda;
        let eps = self.config.epsilon;
        let z = lex
            .iter()
            .zip(&lm)
            .map(|(&pl, &pm)| {
                let mut v = 0.0;
                if lambda > 0.0 {
                    v += lambda * pl.ln();
                }
                if lambda < 1.0 {
                    v += (1.0 - lambda) * pm.max(eps).ln();
                }
                v
            })
            .collect();
        Ok(ScoreVector(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SentencePair, SyntheticSpec};
    use crate::decode::masked_softmax;
    use proptest::prelude::*;

    fn tag(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    fn data() -> Vec<Corpus> {
        let spec = SyntheticSpec {
            languages: vec![tag("E"), tag("A"), tag("B")],
            concept_count: 20,
            overlap_fraction: 0.2,
            sentence_count: 60,
            length_range: (2, 5),
            zipf_exponent: 1.0,
            seed: 17,
            directions: vec![(tag("E"), tag("A")), (tag("A"), tag("E")), (tag("E"), tag("B"))],
        };
        generate_synthetic(&spec).unwrap().into_values().collect()
    }

    fn model(cfg: ModelConfig) -> ToyModel {
        ToyModel::train(&data(), &cfg).unwrap().0
    }

    /// Straightforward reimplementation of the scoring formula.
    fn reference_logits(m: &ToyModel, src: &[TokenId], tg: &LanguageTag, prefix: &[TokenId]) -> Vec<f64> {
        let cfg = m.config();
        let j = m.joint();
        let tag_tok = j.tag_id(tg).unwrap();
        let mut sources = vec![Source::Null, Source::Token(tag_tok)];
        let eos = j.eos();
        (0..j.len() as TokenId)
            .map(|y| {
                let plex = match cfg.alignment {
                    Alignment::Uniform => {
                        if y == eos {
                            0.0
                        } else {
                            sources.truncate(2);
                            sources.extend(src.iter().map(|&s| Source::Token(s)));
                            sources.iter().map(|&s| m.lex().prob(y, s)).sum::<f64>() / (src.len() + 2) as f64
                        }
                    }
                    Alignment::Monotone => {
                        let base = if y == eos {
                            0.0
                        } else {
                            m.lex().prob(y, Source::Null) + m.lex().prob(y, Source::Token(tag_tok))
                        };
                        let aligned = match src.get(prefix.len()) {
                            Some(&s) if y != eos => m.lex().prob(y, Source::Token(s)),
                            Some(_) => 0.0,
                            None => f64::from(u8::from(y == eos)),
                        };
                        (base + aligned) / 3.0
                    }
                };
                let plm = m.lm().prob(y, prefix, tg).unwrap();
                cfg.lambda * plex.max(cfg.epsilon).ln() + (1.0 - cfg.lambda) * plm.max(cfg.epsilon).ln()
            })
            .collect()
    }

    #[test]
    fn lambda_zero_is_lm() {
        let m = model(ModelConfig {
            lambda: 0.0,
            ..ModelConfig::default()
        });
        let j = m.joint();
        let src = j.encode(&["A_5", "sh_1"]);
        let prefix = j.encode(&["B_5"]);
        let z = m.next_token_logits(&src, &tag("B"), &prefix).unwrap();
        let p = masked_softmax(&z, None).unwrap();
        let lm = m.lm().distribution(&prefix, &tag("B")).unwrap();
        for (a, b) in p.iter().zip(&lm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_is_floored_channel() {
        for alignment in [Alignment::Uniform, Alignment::Monotone] {
            let m = model(ModelConfig {
                lambda: 1.0,
                alignment,
                ..ModelConfig::default()
            });
            let j = m.joint();
            let src = j.encode(&["E_7", "sh_2", "E_9"]);
            let z = m.next_token_logits(&src, &tag("A"), &[]).unwrap();
            let p = masked_softmax(&z, None).unwrap();
            let lex = m.lexical_distribution(&src, &tag("A"), 0).unwrap();
            let total: f64 = lex.iter().sum();
            for (a, b) in p.iter().zip(&lex) {
                assert!((a - b / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_tag_and_empty_source() {
        let m = model(ModelConfig::default());
        let src = m.joint().encode(&["E_7"]);
        assert!(m.next_token_logits(&src, &tag("Q"), &[]).is_err());
        assert!(m.next_token_logits(&[], &tag("A"), &[]).is_err());
    }

    #[test]
    fn monotone_channel_ends_with_eos() {
        let m = model(ModelConfig::default());
        let j = m.joint();
        let src = j.encode(&["E_7"]);
        let after = m.lexical_distribution(&src, &tag("A"), 1).unwrap();
        let before = m.lexical_distribution(&src, &tag("A"), 0).unwrap();
        assert!((after[j.eos() as usize] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(before[j.eos() as usize], m.config().epsilon);
    }

    #[test]
    fn lexical_rows_normalize() {
        let m = model(ModelConfig::default());
        let rows = (0..m.joint().len() as TokenId).map(Source::Token).chain([Source::Null]);
        for s in rows {
            let row = m.lex().row(s);
            if row.is_empty() {
                continue;
            }
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|(_, p)| *p >= 0.0));
        }
    }

    #[test]
    fn training_is_reproducible_and_serializable() {
        let cfg = ModelConfig::default();
        let (a, ta) = ToyModel::train(&data(), &cfg).unwrap();
        let (b, tb) = ToyModel::train(&data(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        a.save(&path).unwrap();
        assert_eq!(ToyModel::load(&path).unwrap(), a);
    }

    #[test]
    fn copy_noise_creates_identity_mass() {
        let mut corpora = data();
        let clean = ToyModel::train(&corpora, &ModelConfig::default()).unwrap().0;
        let a_e = corpora
            .iter_mut()
            .find(|c| c.direction() == Some((tag("A"), tag("E"))))
            .unwrap();
        let pairs: Vec<SentencePair> = a_e
            .pairs()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i % 5 == 0 {
                    SentencePair {
                        tgt: p.src.clone(),
                        ..p.clone()
                    }
                } else {
                    p.clone()
                }
            })
            .collect();
        *a_e = Corpus::from_pairs(pairs).unwrap();
        let noisy = ToyModel::train(&corpora, &ModelConfig::default()).unwrap().0;
        let j = noisy.joint();
        let a5 = j.id("A_5").unwrap();
        assert_eq!(clean.lex().prob(a5, Source::Token(a5)), 0.0);
        assert!(noisy.lex().prob(a5, Source::Token(a5)) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn logits_match_reference(
            lambda in 0.0f64..=1.0,
            uniform in any::<bool>(),
            src_idx in prop::collection::vec(0usize..1000, 1..6),
            prefix_idx in prop::collection::vec(0usize..1000, 0..7),
        ) {
            let alignment = if uniform { Alignment::Uniform } else { Alignment::Monotone };
            let m = model(ModelConfig { lambda, alignment, ..ModelConfig::default() });
            let n = m.joint().len();
            let src: Vec<TokenId> = src_idx.iter().map(|i| (i % n) as TokenId).collect();
            let prefix: Vec<TokenId> = prefix_idx.iter().map(|i| (i % n) as TokenId).collect();
            let z = m.next_token_logits(&src, &tag("B"), &prefix).unwrap();
            let expect = reference_logits(&m, &src, &tag("B"), &prefix);
            for (a, b) in z.0.iter().zip(&expect) {
                prop_assert!(a.is_finite());
                prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            }
        }
    }
}
