//! Additively smoothed n-gram language model per target-language tag.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LanguageTag};
use crate::error::{Error, Result};
use crate::vocab::{JointVocab, TokenId};

/// History padding before the first target token. Never predicted.
pub const BOS: TokenId = TokenId::MAX;

#[derive(Clone, Debug, Default, PartialEq)]
struct HistoryCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TagLmRepr", into = "TagLmRepr")]
pub struct TagLm {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    eos: TokenId,
    tables: BTreeMap<LanguageTag, HashMap<Vec<TokenId>, HistoryCounts>>,
}

type HistoryRow = (Vec<TokenId>, Vec<(TokenId, u64)>);

#[derive(Serialize, Deserialize)]
struct TagLmRepr {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    eos: TokenId,
    tables: BTreeMap<LanguageTag, Vec<HistoryRow>>,
}

impl From<TagLm> for TagLmRepr {
    fn from(lm: TagLm) -> Self {
        let tables = lm
            .tables
            .into_iter()
            .map(|(tag, table)| {
                let mut rows: Vec<HistoryRow> = table
                    .into_iter()
                    .map(|(h, c)| {
                        let mut next: Vec<(TokenId, u64)> = c.next.into_iter().collect();
                        next.sort_unstable();
                        (h, next)
                    })
                    .collect();
                rows.sort_unstable_by(|a, b| a.0.cmp(&b.0));
                (tag, rows)
            })
            .collect();
        TagLmRepr {
            order: lm.order,
            alpha: lm.alpha,
            vocab_size: lm.vocab_size,
            eos: lm.eos,
            tables,
        }
    }
}

impl From<TagLmRepr> for TagLm {
    fn from(r: TagLmRepr) -> Self {
        let tables = r
            .tables
            .into_iter()
            .map(|(tag, rows)| {
                let table = rows
                    .into_iter()
                    .map(|(h, next)| {
                        let total = next.iter().map(|(_, c)| c).sum();
                        (
                            h,
                            HistoryCounts {
                                total,
                                next: next.into_iter().collect(),
                            },
                        )
                    })
                    .collect();
                (tag, table)
            })
            .collect();
        TagLm {
            order: r.order,
            alpha: r.alpha,
            vocab_size: r.vocab_size,
            eos: r.eos,
            tables,
        }
    }
}

/// Trains one model per tag in `tags` from the target sides whose language is
/// that tag. Every target sentence is followed by EOS.
pub fn train_lm(corpus: &Corpus, joint: &JointVocab, tags: &[LanguageTag], order: usize, alpha: f64) -> Result<TagLm> {
    if order == 0 {
        return Err(Error::Config("LM order must be positive".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config("LM smoothing must be > 0".into()));
    }
    let mut tables: BTreeMap<LanguageTag, HashMap<Vec<TokenId>, HistoryCounts>> =
        tags.iter().map(|t| (t.clone(), HashMap::new())).collect();
    for p in corpus.pairs() {
        let Some(table) = tables.get_mut(&p.tgt_lang) else {
            continue;
        };
        let mut seq = vec![BOS; order - 1];
        seq.extend(joint.encode(&p.tgt));
        seq.push(joint.eos());
        for w in seq.windows(order) {
            let entry = table.entry(w[..order - 1].to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(w[order - 1]).or_default() += 1;
        }
    }
    if let Some((tag, _)) = tables.iter().find(|(_, t)| t.is_empty()) {
        return Err(Error::Empty(format!("no target sentences for tag {tag}")));
    }
    Ok(TagLm {
        order,
        alpha,
        vocab_size: joint.len(),
        eos: joint.eos(),
        tables,
    })
}

impl TagLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tags(&self) -> impl Iterator<Item = &LanguageTag> {
        self.tables.keys()
    }

    pub fn has_tag(&self, tag: &LanguageTag) -> bool {
        self.tables.contains_key(tag)
    }

    /// The (order-1)-token history ending at `prefix`, padded with BOS.
    pub fn history(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let k = self.order - 1;
        let mut h = vec![BOS; k.saturating_sub(prefix.len())];
        h.extend_from_slice(&prefix[prefix.len().saturating_sub(k)..]);
        h
    }

    /// Dense p(. | prefix, tag) over the whole joint vocabulary.
    pub fn distribution(&self, prefix: &[TokenId], tag: &LanguageTag) -> Result<Vec<f64>> {
        let table = self
            .tables
            .get(tag)
            .ok_or_else(|| Error::UnknownLanguage(tag.to_string()))?;
        let history = self.history(prefix);
        let counts = table.get(history.as_slice());
        let total = counts.map_or(0, |c| c.total) as f64;
        let denom = total + self.alpha * self.vocab_size as f64;
        let mut dist = vec![self.alpha / denom; self.vocab_size];
        if let Some(c) = counts {
            for (&y, &n) in &c.next {
                dist[y as usize] = (n as f64 + self.alpha) / denom;
            }
        }
        Ok(dist)
    }

    pub fn prob(&self, y: TokenId, prefix: &[TokenId], tag: &LanguageTag) -> Result<f64> {
        Ok(self.distribution(prefix, tag)?[y as usize])
    }

    /// All histories observed for `tag`, for normalization checks.
    pub fn histories(&self, tag: &LanguageTag) -> Vec<Vec<TokenId>> {
        let mut h: Vec<Vec<TokenId>> = self
            .tables
            .get(tag)
            .map(|t| t.keys().cloned().collect())
            .unwrap_or_default();
        h.sort_unstable();
        h
    }

    pub(crate) fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub(crate) fn eos(&self) -> TokenId {
        self.eos
    }
}
