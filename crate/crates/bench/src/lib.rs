//! Shared fixtures for the kernel benchmarks.

use std::collections::BTreeMap;

use offtarget_core::corpus::{generate_synthetic, tag_corpus, SyntheticSpec};
use offtarget_core::langid::train_profiles;
use offtarget_core::{Corpus, JointVocab, LangIdModel, LanguageTag, ModelConfig, ToyModel};

pub fn tag(s: &str) -> LanguageTag {
    LanguageTag::new(s).expect("valid tag")
}

/// E<->A and E<->B training corpora over `concepts` concepts.
pub fn corpora(concepts: usize, sentences: usize) -> Vec<Corpus> {
    let dirs = [("E", "A"), ("A", "E"), ("E", "B"), ("B", "E")];
    let spec = SyntheticSpec {
        languages: vec![tag("E"), tag("A"), tag("B")],
        concept_count: concepts,
        overlap_fraction: 0.2,
        sentence_count: sentences,
        length_range: (6, 10),
        zipf_exponent: 0.3,
        seed: 3,
        directions: dirs.iter().map(|(s, t)| (tag(s), tag(t))).collect(),
    };
    generate_synthetic(&spec).expect("valid spec").into_values().collect()
}

pub fn tagged(corpora: &[Corpus]) -> (Corpus, JointVocab) {
    let merged = tag_corpus(&Corpus::concat(corpora)).expect("taggable");
    let joint = JointVocab::build([&merged]).expect("joint vocabulary");
    (merged, joint)
}

pub fn model(concepts: usize) -> ToyModel {
    let config = ModelConfig {
        lambda: 0.65,
        use_null: false,
        ..ModelConfig::default()
    };
    ToyModel::train(&corpora(concepts, 500), &config).expect("trainable").0
}

pub fn langid() -> (LangIdModel, Vec<String>) {
    let mut mono: BTreeMap<LanguageTag, Vec<String>> = BTreeMap::new();
    for c in corpora(200, 300) {
        let p = &c.pairs()[0];
        let lang = p.src_lang.clone();
        mono.entry(lang)
            .or_default()
            .extend(c.pairs().iter().map(|p| p.src_text()));
    }
    let probes = mono.values().flat_map(|v| v.iter().take(100).cloned()).collect();
    (train_profiles(&mono, 3, 0.5).expect("profiles"), probes)
}
