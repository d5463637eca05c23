//! Character n-gram naive-Bayes language identifier.
//!
//! Texts are padded with one space on each side before n-gram extraction, so
//! text boundaries look like token boundaries. For a language `l` with total
//! n-gram count `N_l`, an n-gram `g` has probability
//! `(c_l(g) + alpha) / (N_l + alpha * B)` where `B` is the size of the union of
//! all languages' n-gram supports plus one bucket for unseen n-grams.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LanguageTag;
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Profile {
    counts: BTreeMap<String, u64>,
    total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangIdModel {
    order: usize,
    alpha: f64,
    profiles: BTreeMap<LanguageTag, Profile>,
    /// Union of supports plus one unseen bucket. Derived, not serialized.
    #[serde(skip)]
    buckets: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identification {
    pub language: LanguageTag,
    /// Best minus second-best log score; never negative.
    pub margin: f64,
}

pub fn char_ngrams(text: &str, order: usize) -> Vec<String> {
    let padded: Vec<char> = std::iter::once(' ')
        .chain(text.chars())
        .chain(std::iter::once(' '))
        .collect();
    if padded.len() < order {
        return vec![padded.iter().collect()];
    }
    padded.windows(order).map(|w| w.iter().collect()).collect()
}

fn count_ngrams(text: &str, order: usize) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for g in char_ngrams(text, order) {
        *counts.entry(g).or_default() += 1;
    }
    counts
}

/// Trains one smoothed n-gram profile per language with uniform priors.
pub fn train_profiles(labeled: &BTreeMap<LanguageTag, Vec<String>>, order: usize, alpha: f64) -> Result<LangIdModel> {
    if labeled.len() < 2 {
        return Err(Error::Config(
            "language identification needs at least 2 languages".into(),
        ));
    }
    if order == 0 {
        return Err(Error::Config("n-gram order must be positive".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config("smoothing constant must be > 0".into()));
    }
    let mut profiles = BTreeMap::new();
    for (lang, texts) in labeled {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut any = false;
        for text in texts.iter().map(|t| t.trim()).filter(|t| !t.is_empty()) {
            any = true;
            for (g, c) in count_ngrams(text, order) {
                *counts.entry(g).or_default() += c;
            }
        }
        if !any {
            return Err(Error::Empty(format!("language {lang} has no non-empty training text")));
        }
        let total = counts.values().sum();
        profiles.insert(lang.clone(), Profile { counts, total });
    }
    let mut model = LangIdModel {
        order,
        alpha,
        profiles,
        buckets: 0,
    };
    model.refresh_buckets();
    Ok(model)
}

impl LangIdModel {
    fn refresh_buckets(&mut self) {
        let support: BTreeSet<&String> = self.profiles.values().flat_map(|p| p.counts.keys()).collect();
        self.buckets = support.len() as u64 + 1;
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageTag> {
        self.profiles.keys()
    }

    pub fn contains(&self, lang: &LanguageTag) -> bool {
        self.profiles.contains_key(lang)
    }

    /// n-grams with non-zero training count for `lang`.
    pub fn support(&self, lang: &LanguageTag) -> Option<BTreeSet<&str>> {
        self.profiles
            .get(lang)
            .map(|p| p.counts.keys().map(String::as_str).collect())
    }

    /// log p(g | lang) under additive smoothing.
    pub fn log_prob(&self, lang: &LanguageTag, ngram: &str) -> Option<f64> {
        let p = self.profiles.get(lang)?;
        let c = p.counts.get(ngram).copied().unwrap_or(0) as f64;
        let denom = p.total as f64 + self.alpha * self.buckets as f64;
        Some(((c + self.alpha) / denom).ln())
    }

    /// Probability mass left for n-grams outside the union of supports.
    pub fn unseen_mass(&self, lang: &LanguageTag) -> Option<f64> {
        let p = self.profiles.get(lang)?;
        Some(self.alpha / (p.total as f64 + self.alpha * self.buckets as f64))
    }

    /// Per-language log scores (uniform prior included) for an n-gram count vector.
    pub fn score_counts(&self, counts: &BTreeMap<String, u64>) -> Vec<(LanguageTag, f64)> {
        let prior = -(self.profiles.len() as f64).ln();
        self.profiles
            .keys()
            .map(|lang| {
                let mut s = prior;
                for (g, &c) in counts {
                    s += c as f64 * self.log_prob(lang, g).expect("known language");
                }
                (lang.clone(), s)
            })
            .collect()
    }

    pub fn scores(&self, text: &str) -> Vec<(LanguageTag, f64)> {
        self.score_counts(&count_ngrams(text.trim(), self.order))
    }

    /// Most likely language; ties go to the smallest language code.
    pub fn identify(&self, text: &str) -> Result<Identification> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Empty("cannot identify the language of empty text".into()));
        }
        Ok(pick_best(self.scores(text)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut model: LangIdModel = serde_json::from_str(&text)?;
        if model.profiles.len() < 2 || model.profiles.values().any(|p| p.total == 0) {
            return Err(Error::Config(format!(
                "{}: language model needs >= 2 non-empty profiles",
                path.display()
            )));
        }
        model.refresh_buckets();
        Ok(model)
    }
}

/// Relative gap below which two log scores count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

fn pick_best(scores: Vec<(LanguageTag, f64)>) -> Identification {
    // scores come in language-code order; only a clear win displaces an earlier
    // language, so sums that tie up to rounding go to the first code
    let mut best = 0;
    for i in 1..scores.len() {
        let (a, b) = (scores[i].1, scores[best].1);
        if a - b > TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0) {
            best = i;
        }
    }
    let second = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, s)| s.1)
        .fold(f64::NEG_INFINITY, f64::max);
    Identification {
        language: scores[best].0.clone(),
        margin: (scores[best].1 - second).max(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    fn synthetic_model() -> LangIdModel {
        let mut data = BTreeMap::new();
        data.insert(
            tag("A"),
            vec!["A_1 A_2 A_3 sh_1".to_string(), "A_4 A_5 sh_2".to_string()],
        );
        data.insert(
            tag("B"),
            vec!["B_1 B_2 B_3 sh_1".to_string(), "B_4 B_5 sh_2".to_string()],
        );
        train_profiles(&data, 3, 0.5).unwrap()
    }

    #[test]
    fn disjoint_alphabets_have_disjoint_supports() {
        let mut data = BTreeMap::new();
        data.insert(tag("x"), vec!["abc abd".to_string()]);
        data.insert(tag("y"), vec!["xyz xzy".to_string()]);
        let m = train_profiles(&data, 3, 1.0).unwrap();
        let sx = m.support(&tag("x")).unwrap();
        let sy = m.support(&tag("y")).unwrap();
        assert!(sx.is_disjoint(&sy));
    }

    #[test]
    fn needs_two_languages_with_text() {
        let mut data = BTreeMap::new();
        data.insert(tag("x"), vec!["abc".to_string()]);
        assert!(train_profiles(&data, 3, 1.0).is_err());
        data.insert(tag("y"), vec!["   ".to_string()]);
        assert!(train_profiles(&data, 3, 1.0).is_err());
    }

    #[test]
    fn deterministic_training() {
        assert_eq!(synthetic_model(), synthetic_model());
    }

    #[test]
    fn identifies_synthetic_language() {
        let m = synthetic_model();
        let id = m.identify("A_1 A_2 A_3").unwrap();
        assert_eq!(id.language, tag("A"));
        assert!(id.margin > 0.0);
        assert_eq!(m.identify("B_5 B_1").unwrap().language, tag("B"));
    }

    #[test]
    fn shared_only_ties_to_first_language() {
        let m = synthetic_model();
        let id = m.identify("sh_1 sh_2").unwrap();
        assert_eq!(id.language, tag("A"));
        assert_eq!(id.margin, 0.0);
    }

    #[test]
    fn mirrored_tokens_tie_at_any_count_scale() {
        let m = synthetic_model();
        let counts = count_ngrams("sh_6 sh_6 B_5 sh_0 sh_7 sh_3 A_3", 3);
        for k in 1..=4 {
            let scaled: BTreeMap<String, u64> = counts.iter().map(|(g, c)| (g.clone(), k * c)).collect();
            assert_eq!(pick_best(m.score_counts(&scaled)).language, tag("A"), "scale {k}");
        }
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(synthetic_model().identify("  ").is_err());
    }

    #[test]
    fn distributions_normalize() {
        let m = synthetic_model();
        for lang in m.languages() {
            let support: BTreeSet<String> = m.profiles.values().flat_map(|p| p.counts.keys().cloned()).collect();
            let mass: f64 =
                support.iter().map(|g| m.log_prob(lang, g).unwrap().exp()).sum::<f64>() + m.unseen_mass(lang).unwrap();
            assert!((mass - 1.0).abs() < 1e-9, "{lang}: {mass}");
        }
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("langid.json");
        let m = synthetic_model();
        m.save(&path).unwrap();
        let back = LangIdModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.identify("A_3").unwrap(), m.identify("A_3").unwrap());
    }

    proptest! {
        #[test]
        fn finite_scores(text in "[ -~]{1,40}") {
            prop_assume!(!text.trim().is_empty());
            let m = synthetic_model();
            prop_assert!(m.scores(&text).iter().all(|(_, s)| s.is_finite()));
        }

        #[test]
        fn doubled_counts_keep_argmax(tokens in prop::collection::vec("(A|B|sh)_[0-9]", 1..8)) {
            let m = synthetic_model();
            let text = tokens.join(" ");
            let counts = count_ngrams(&text, 3);
            let doubled: BTreeMap<String, u64> = counts.iter().map(|(g, c)| (g.clone(), 2 * c)).collect();
            let single = pick_best(m.score_counts(&counts)).language;
            let double = pick_best(m.score_counts(&doubled)).language;
            prop_assert_eq!(single, double);
        }
    }
}
