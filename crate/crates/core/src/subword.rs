//! Byte-pair-encoding learner and applier for the joint subword vocabulary.
//!
//! Words are split into characters and the last character carries the
//! end-of-word marker `</w>`, so `"ab"` starts as `["a", "b</w>"]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_tag_token, Corpus};
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

/// Ordered merge operations; index is the merge rank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeList {
    pub merges: Vec<(String, String)>,
}

impl MergeList {
    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (l, r) in &self.merges {
            writeln!(f, "{l} {r}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut merges = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: "expected `left right`".into(),
                });
            }
            let pair = (parts[0].to_owned(), parts[1].to_owned());
            if !seen.insert(pair.clone()) {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: "duplicate merge".into(),
                });
            }
            merges.push(pair);
        }
        Ok(MergeList { merges })
    }
}

fn split_word(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let r = symbols.remove(i + 1);
            symbols[i].push_str(&r);
        }
        i += 1;
    }
}

/// Learns up to `num_merges` merges over every source and target token of
/// `corpora` (reserved tag tokens are skipped).
///
/// Pair frequencies are counted over word types weighted by corpus frequency.
/// Learning stops early when no pair occurs at least twice. Ties go to the
/// lexicographically smallest `(left, right)`. A pair whose concatenation is
/// already a known symbol is passed over, so every merge adds one new symbol.
pub fn learn_bpe(corpora: &[Corpus], num_merges: usize) -> Result<MergeList> {
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for c in corpora {
        for p in c.pairs() {
            for t in p.src.iter().chain(&p.tgt) {
                if !is_tag_token(t) {
                    *word_freq.entry(t.as_str()).or_default() += 1;
                }
            }
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Empty("BPE learning needs at least one token".into()));
    }
    let mut words: Vec<(Vec<String>, u64)> = word_freq.into_iter().map(|(w, f)| (split_word(w), f)).collect();
    let mut inventory: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (symbols, freq) in &words {
            for w in symbols.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += freq;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), u64)> = None;
        for (&pair, &freq) in &counts {
            if freq < 2 || inventory.contains(&format!("{}{}", pair.0, pair.1)) {
                continue;
            }
            if best.is_none_or(|(_, f)| freq > f) {
                best = Some((pair, freq));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_owned(), r.to_owned());
        for (symbols, _) in &mut words {
            merge_in_place(symbols, &l, &r);
        }
        inventory.insert(format!("{l}{r}"));
        merges.push((l, r));
    }
    Ok(MergeList { merges })
}

/// Applies a merge list by repeatedly merging the lowest-ranked adjacent pair.
#[derive(Clone, Debug)]
pub struct BpeApplier {
    ranks: HashMap<(String, String), usize>,
}

impl BpeApplier {
    pub fn new(merges: &MergeList) -> Self {
        let ranks = merges.merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        BpeApplier { ranks }
    }

    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = split_word(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            match best {
                Some((l, r)) => merge_in_place(&mut symbols, &l, &r),
                None => return symbols,
            }
        }
    }

    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.segment_word(t)).collect()
    }
}

pub fn apply_bpe(tokens: &[String], merges: &MergeList) -> Vec<String> {
    BpeApplier::new(merges).apply(tokens)
}

/// Segments both sides of every pair. Tag tokens pass through untouched.
pub fn apply_bpe_corpus(corpus: &Corpus, applier: &BpeApplier) -> Corpus {
    let seg = |tokens: &[String]| -> Vec<String> {
        tokens
            .iter()
            .flat_map(|t| {
                if is_tag_token(t) {
                    vec![t.clone()]
                } else {
                    applier.segment_word(t)
                }
            })
            .collect()
    };
    let pairs = corpus
        .pairs()
        .iter()
        .map(|p| crate::corpus::SentencePair {
            src: seg(&p.src),
            tgt: seg(&p.tgt),
            ..p.clone()
        })
        .collect();
    Corpus::new(pairs, corpus.languages().clone()).expect("segmentation preserves validity")
}

/// Reassembles words from subwords: a word ends at a piece carrying `</w>`.
/// Trailing pieces without a marker form a final word.
pub fn join_subwords(pieces: &[String]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for p in pieces {
        match p.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            }
            None => current.push_str(p),
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LanguageTag, SentencePair};
    use proptest::prelude::*;

    fn corpus_of(lines: &[(&str, &str)]) -> Corpus {
        let pairs = lines
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
            .collect();
        Corpus::from_pairs(pairs).unwrap()
    }

    #[test]
    fn most_frequent_pair_first() {
        // words ab, ab, ac: (a, b</w>) occurs twice, (a, c</w>) once
        let c = corpus_of(&[("ab", "ab"), ("ac", "zz")]);
        let m = learn_bpe(std::slice::from_ref(&c), 1).unwrap();
        // zz contributes (z, z</w>) once; ab appears twice
        assert_eq!(m.merges, vec![("a".to_string(), "b</w>".to_string())]);
        assert!(learn_bpe(&[c], 0).unwrap().is_empty());
    }

    #[test]
    fn single_char_word_has_no_merges() {
        let c = corpus_of(&[("a", "a")]);
        assert!(learn_bpe(&[c], 10).unwrap().is_empty());
    }

    #[test]
    fn ties_are_lexicographic() {
        // (a,b</w>) and (c,d</w>) both occur twice
        let c = corpus_of(&[("cd ab", "ab cd")]);
        let m = learn_bpe(&[c], 1).unwrap();
        assert_eq!(m.merges[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn full_word_merge() {
        let m = MergeList {
            merges: vec![("a".into(), "b</w>".into())],
        };
        assert_eq!(apply_bpe(&["ab".into()], &m), vec!["ab</w>"]);
        assert_eq!(
            apply_bpe(&["abc".into()], &MergeList::default()),
            vec!["a", "b", "c</w>"]
        );
    }

    #[test]
    fn learned_merges_reproduce_learning_segmentation() {
        let c = corpus_of(&[("lower lowest newer", "wider low low"), ("newest", "lowly")]);
        let m = learn_bpe(&[c], 20).unwrap();
        let seg = apply_bpe(&["low".into()], &m);
        assert_eq!(seg, vec!["low</w>"]);
    }

    #[test]
    fn merges_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        let c = corpus_of(&[("lower lowest newer", "wider low low")]);
        let m = learn_bpe(&[c], 8).unwrap();
        m.save(&path).unwrap();
        assert_eq!(MergeList::load(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn reversible(words in prop::collection::vec("[a-d]{1,6}", 1..6), extra in prop::collection::vec("[a-d]{1,6}", 1..6)) {
            let text = words.join(" ");
            let other = extra.join(" ");
            let c = corpus_of(&[(text.as_str(), other.as_str())]);
            let m = learn_bpe(&[c], 10).unwrap();
            let seg = apply_bpe(&words, &m);
            prop_assert_eq!(join_subwords(&seg), words);
        }

        #[test]
        fn each_merge_adds_one_symbol(words in prop::collection::vec("[a-c]{1,5}", 2..12)) {
            let text = words.join(" ");
            let c = corpus_of(&[(text.as_str(), "x")]);
            let m = learn_bpe(std::slice::from_ref(&c), 30).unwrap();
            let products: BTreeSet<String> = m.merges.iter().map(|(l, r)| format!("{l}{r}")).collect();
            prop_assert_eq!(products.len(), m.len());
            let initial: BTreeSet<String> = words.iter().chain(std::iter::once(&"x".to_string())).flat_map(|w| split_word(w)).collect();
            prop_assert!(products.is_disjoint(&initial));
            prop_assert_eq!(learn_bpe(&[c], 30).unwrap(), m);
        }
    }
}
