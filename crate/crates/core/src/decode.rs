//! Beam search over any [`Scorer`], with optional target-vocabulary masking.
//!
//! Masking renormalizes the output distribution onto the allowed set:
//! `P(y) = exp(z_y) / Σ_{y' allowed} exp(z_y')` for allowed `y`, else exactly 0.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LanguageTag;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, VocabMask};

/// Unnormalized log-scores over the joint vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Anything that scores the next target token.
pub trait Scorer: Sync {
    fn vocab_size(&self) -> usize;

    fn eos(&self) -> TokenId;

    fn next_token_logits(&self, src: &[TokenId], tag: &LanguageTag, prefix: &[TokenId]) -> Result<ScoreVector>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn eos(&self) -> TokenId {
        (**self).eos()
    }

    fn next_token_logits(&self, src: &[TokenId], tag: &LanguageTag, prefix: &[TokenId]) -> Result<ScoreVector> {
        (**self).next_token_logits(src, tag, prefix)
    }
}

pub fn masked_softmax(z: &ScoreVector, mask: Option<&VocabMask>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != z.len() {
            return Err(Error::LengthMismatch {
                what: "mask vs score vector",
                left: m.len(),
                right: z.len(),
            });
        }
        if m.count_allowed() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    if z.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("score vector has non-finite entries".into()));
    }
    let allowed = |i: usize| mask.is_none_or(|m| m.allowed[i]);
    let max =
        z.0.iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> =
        z.0.iter()
            .enumerate()
            .map(|(i, v)| if allowed(i) { (v - max).exp() } else { 0.0 })
            .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum output length is `max_len_a * |src| + max_len_b`.
    pub max_len_a: usize,
    pub max_len_b: usize,
    /// Exponent α of the length penalty `len^α`.
    pub length_norm: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            max_len_a: 2,
            max_len_b: 5,
            length_norm: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be >= 1".into()));
        }
        if self.max_len_a + self.max_len_b == 0 {
            return Err(Error::Config(
                "max length formula must give >= 1 for a 1-token source".into(),
            ));
        }
        if !(self.length_norm >= 0.0 && self.length_norm.is_finite()) {
            return Err(Error::Config("length normalization exponent must be >= 0".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, src_len: usize) -> usize {
        self.max_len_a * src_len + self.max_len_b
    }

    pub fn with_beam(&self, beam_size: usize) -> Self {
        DecodeConfig {
            beam_size,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output tokens, EOS stripped.
    pub tokens: Vec<TokenId>,
    /// Log-probability of every emitted step, including the EOS step when the
    /// hypothesis ended on EOS.
    pub step_logprobs: Vec<f64>,
    /// `Σ step_logprobs / (|tokens| + 1)^α`.
    pub score: f64,
    pub ended_with_eos: bool,
}

impl Hypothesis {
    pub fn log_prob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }
}

pub fn normalized_score(log_prob: f64, tokens: usize, alpha: f64) -> f64 {
    log_prob / ((tokens + 1) as f64).powf(alpha)
}

struct Live {
    tokens: Vec<TokenId>,
    logps: Vec<f64>,
    total: f64,
}

fn rank(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Standard beam search. Each step expands every live hypothesis with the
/// (masked) distribution and keeps the `beam_size` best expansions by running
/// log-probability; expansions ending on EOS, or reaching the maximum length,
/// are finished. Finished hypotheses are ranked by length-normalized score,
/// ties by token ids. Returns at most `beam_size` hypotheses, best first.
pub fn beam_search<S: Scorer + ?Sized>(
    scorer: &S,
    src: &[TokenId],
    tag: &LanguageTag,
    cfg: &DecodeConfig,
    mask: Option<&VocabMask>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::Empty("source sentence is empty".into()));
    }
    let eos = scorer.eos();
    let max_len = cfg.max_len(src.len());
    let mut live = vec![Live {
        tokens: Vec::new(),
        logps: Vec::new(),
        total: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        // (running log-prob, parent, token, step log-prob)
        let mut cands: Vec<(f64, usize, TokenId, f64)> = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            let z = scorer.next_token_logits(src, tag, &hyp.tokens)?;
            let probs = masked_softmax(&z, mask)?;
            for (y, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    let lp = p.ln();
                    cands.push((hyp.total + lp, pi, y as TokenId, lp));
                }
            }
        }
        let seq = |c: &(f64, usize, TokenId, f64)| {
            let mut s = live[c.1].tokens.clone();
            s.push(c.2);
            s
        };
        let cmp = |a: &(f64, usize, TokenId, f64), b: &(f64, usize, TokenId, f64)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        };
        if cands.len() > cfg.beam_size {
            cands.select_nth_unstable_by(cfg.beam_size - 1, cmp);
            cands.truncate(cfg.beam_size);
        }
        cands.sort_by(cmp);

        let mut next = Vec::with_capacity(cands.len());
        for c in &cands {
            let parent = &live[c.1];
            let mut logps = parent.logps.clone();
            logps.push(c.3);
            if c.2 == eos {
                finished.push(Hypothesis {
                    score: normalized_score(c.0, parent.tokens.len(), cfg.length_norm),
                    tokens: parent.tokens.clone(),
                    step_logprobs: logps,
                    ended_with_eos: true,
                });
                continue;
            }
            let tokens = seq(c);
            if tokens.len() >= max_len {
                finished.push(Hypothesis {
                    score: normalized_score(c.0, tokens.len(), cfg.length_norm),
                    tokens,
                    step_logprobs: logps,
                    ended_with_eos: false,
                });
            } else {
                next.push(Live {
                    tokens,
                    logps,
                    total: c.0,
                });
            }
        }
        live = next;
    }
    finished.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    finished.truncate(cfg.beam_size);
    Ok(finished)
}

/// Decodes many sources in parallel; output order follows input order.
pub fn decode_batch<S: Scorer + ?Sized>(
    scorer: &S,
    sources: &[Vec<TokenId>],
    tag: &LanguageTag,
    cfg: &DecodeConfig,
    mask: Option<&VocabMask>,
) -> Result<Vec<Vec<Hypothesis>>> {
    sources
        .par_iter()
        .map(|src| beam_search(scorer, src, tag, cfg, mask))
        .collect()
}

/// One JSON-lines record of batch decoding output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub index: usize,
    pub src: String,
    pub hypotheses: Vec<DecodedHypothesis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedHypothesis {
    pub text: String,
    pub score: f64,
    pub log_prob: f64,
    pub step_logprobs: Vec<f64>,
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[DecodeRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl output>", e))?;
    }
    Ok(())
}
