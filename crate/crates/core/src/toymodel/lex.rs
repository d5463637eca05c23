//! Lexical translation table t(target | source) trained by EM with uniform
//! alignment priors and an optional NULL source.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::vocab::{JointVocab, TokenId};

/// Sparse rows: `rows[e]` lists `(f, t(f|e))` sorted by `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexTable {
    rows: Vec<Vec<(TokenId, f64)>>,
    null_row: Option<Vec<(TokenId, f64)>>,
}

/// Which source row to read: a real token or the NULL source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Null,
    Token(TokenId),
}

impl LexTable {
    pub fn has_null(&self) -> bool {
        self.null_row.is_some()
    }

    pub fn row(&self, source: Source) -> &[(TokenId, f64)] {
        match source {
            Source::Null => self.null_row.as_deref().unwrap_or(&[]),
            Source::Token(e) => self.rows.get(e as usize).map(Vec::as_slice).unwrap_or(&[]),
        }
    }

    pub fn prob(&self, target: TokenId, source: Source) -> f64 {
        let row = self.row(source);
        row.binary_search_by_key(&target, |&(f, _)| f)
            .map(|i| row[i].1)
            .unwrap_or(0.0)
    }

    /// Adds `weight * t(.|source)` into a dense vector.
    pub fn accumulate(&self, source: Source, weight: f64, out: &mut [f64]) {
        for &(f, p) in self.row(source) {
            out[f as usize] += weight * p;
        }
    }

    pub fn source_count(&self) -> usize {
        self.rows.len()
    }

    pub(crate) fn max_target(&self) -> Option<TokenId> {
        self.rows
            .iter()
            .chain(self.null_row.iter())
            .filter_map(|r| r.last().map(|&(f, _)| f))
            .max()
    }
}

struct EncodedPair {
    /// For each target position, the parameter slots of every source
    /// (NULL first when enabled).
    slots: Vec<Vec<usize>>,
}

/// Runs `iterations` EM rounds over `corpus` (source sides should already
/// carry their tag token). Returns the table and the corpus log-likelihood
/// measured in each E-step, i.e. under the parameters entering that round.
pub fn train_lexical(
    corpus: &Corpus,
    joint: &JointVocab,
    iterations: usize,
    use_null: bool,
) -> Result<(LexTable, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("lexical training needs at least one pair".into()));
    }
    let null_key = joint.len() as TokenId;
    let encoded: Vec<(Vec<TokenId>, Vec<TokenId>)> = corpus
        .pairs()
        .iter()
        .map(|p| {
            let mut src = Vec::with_capacity(p.src.len() + 1);
            if use_null {
                src.push(null_key);
            }
            src.extend(joint.encode(&p.src));
            (src, joint.encode(&p.tgt))
        })
        .collect();

    // parameter slots for every co-occurring (source, target) pair, in sorted order
    let mut cooc: BTreeSet<(TokenId, TokenId)> = BTreeSet::new();
    for (src, tgt) in &encoded {
        for &e in src {
            for &f in tgt {
                cooc.insert((e, f));
            }
        }
    }
    let keys: Vec<(TokenId, TokenId)> = cooc.into_iter().collect();
    let slot_of = |e: TokenId, f: TokenId| -> usize { keys.binary_search(&(e, f)).expect("co-occurrence recorded") };
    // contiguous row ranges in `keys`
    let mut row_ranges: Vec<(TokenId, usize, usize)> = Vec::new();
    for (i, &(e, _)) in keys.iter().enumerate() {
        match row_ranges.last_mut() {
            Some((last, _, end)) if *last == e => *end = i + 1,
            _ => row_ranges.push((e, i, i + 1)),
        }
    }

    let pairs: Vec<EncodedPair> = encoded
        .iter()
        .map(|(src, tgt)| EncodedPair {
            slots: tgt
                .iter()
                .map(|&f| src.iter().map(|&e| slot_of(e, f)).collect())
                .collect(),
        })
        .collect();

    let mut t = vec![0.0f64; keys.len()];
    for &(_, start, end) in &row_ranges {
        let u = 1.0 / (end - start) as f64;
        t[start..end].iter_mut().for_each(|x| *x = u);
    }

    let mut trace = Vec::with_capacity(iterations);
    let mut counts = vec![0.0f64; keys.len()];
    for _ in 0..iterations {
        counts.iter_mut().for_each(|c| *c = 0.0);
        let mut ll = 0.0;
        for p in &pairs {
            for sources in &p.slots {
                let denom: f64 = sources.iter().map(|&s| t[s]).sum();
                ll += (denom / sources.len() as f64).ln();
                for &s in sources {
                    counts[s] += t[s] / denom;
                }
            }
        }
        trace.push(ll);
        for &(_, start, end) in &row_ranges {
            let total: f64 = counts[start..end].iter().sum();
            for i in start..end {
                t[i] = counts[i] / total;
            }
        }
    }

    let mut rows: Vec<Vec<(TokenId, f64)>> = vec![Vec::new(); joint.len()];
    let mut null_row = use_null.then(Vec::new);
    for &(e, start, end) in &row_ranges {
        let row: Vec<(TokenId, f64)> = (start..end).map(|i| (keys[i].1, t[i])).collect();
        if e == null_key {
            null_row = Some(row);
        } else {
            rows[e as usize] = row;
        }
    }
    Ok((LexTable { rows, null_row }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LanguageTag, SentencePair};

    fn corpus(pairs: &[(&str, &str)]) -> Corpus {
        Corpus::from_pairs(
            pairs
                .iter()
                .map(|(s, t)| {
                    SentencePair::new(
                        LanguageTag::new("X").unwrap(),
                        LanguageTag::new("Y").unwrap(),
                        crate::corpus::tokenize(s),
                        crate::corpus::tokenize(t),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn id(j: &JointVocab, t: &str) -> TokenId {
        j.id(t).unwrap()
    }

    #[test]
    fn single_cooccurrence_without_null() {
        let c = corpus(&[("x", "u")]);
        let j = JointVocab::build([&c]).unwrap();
        let (lex, trace) = train_lexical(&c, &j, 5, false).unwrap();
        assert_eq!(lex.prob(id(&j, "u"), Source::Token(id(&j, "x"))), 1.0);
        assert_eq!(trace.len(), 5);
    }

    #[test]
    fn single_cooccurrence_with_null_normalizes() {
        let c = corpus(&[("x", "u")]);
        let j = JointVocab::build([&c]).unwrap();
        let (lex, _) = train_lexical(&c, &j, 5, true).unwrap();
        assert!((lex.prob(id(&j, "u"), Source::Token(id(&j, "x"))) - 1.0).abs() < 1e-12);
        assert!((lex.prob(id(&j, "u"), Source::Null) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_split() {
        let c = corpus(&[("x", "u"), ("x", "v")]);
        let j = JointVocab::build([&c]).unwrap();
        let (lex, _) = train_lexical(&c, &j, 10, false).unwrap();
        let x = Source::Token(id(&j, "x"));
        assert!((lex.prob(id(&j, "u"), x) - 0.5).abs() < 1e-12);
        assert!((lex.prob(id(&j, "v"), x) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_is_uniform() {
        let c = corpus(&[("x y", "u v w")]);
        let j = JointVocab::build([&c]).unwrap();
        let (lex, trace) = train_lexical(&c, &j, 0, true).unwrap();
        assert!(trace.is_empty());
        let row = lex.row(Source::Token(id(&j, "x")));
        assert_eq!(row.len(), 3);
        assert!(row.iter().all(|&(_, p)| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn learns_consistent_mapping() {
        let c = corpus(&[("a b", "A B"), ("a c", "A C"), ("b c", "B C")]);
        let j = JointVocab::build([&c]).unwrap();
        let (lex, trace) = train_lexical(&c, &j, 30, false).unwrap();
        assert!(lex.prob(id(&j, "A"), Source::Token(id(&j, "a"))) > 0.9);
        assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        assert!(train_lexical(&Corpus::default(), &j, 1, true).is_err());
    }
}
