//! Config-driven experiment runs: data preparation, denoising, the
//! four-condition grid, noise ablations, beam sweeps and the confidence and
//! probability-mass analyses. Every command is a pure function of its config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_synthetic, inject_noise, load_parallel, rerender, tokenize, Corpus, Direction, LanguageTag,
    NoiseInjection, SyntheticSpec,
};
use crate::decode::DecodeConfig;
use crate::denoise::{filter_corpus, NoiseLabel, NoiseReport};
use crate::error::{Error, Result};
use crate::eval::{
    beam_sweep, evaluate_direction, per_token_confidence, split_on_off_eval, vocab_mass_partition,
    write_confidence_csv, write_sweep_csv, DirectionEval, SplitEval, SweepRow, TestSet,
};
use crate::langid::{train_profiles, LangIdModel};
use crate::rng::derive_seed;
use crate::subword::{apply_bpe_corpus, join_subwords, learn_bpe, BpeApplier};
use crate::toymodel::{ModelConfig, ToyModel, TrainingTrace};
use crate::vocab::{build_mask, build_vocab_with_threshold, TokenId, VocabMask};

pub const SCHEMA_VERSION: u32 = 1;
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub bpe: BpeConfig,
    #[serde(default)]
    pub langid: LangIdConfig,
    #[serde(default)]
    pub denoise: DenoiseConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub decode: DecodeSettings,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Where commands write; the command line may override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Files(FileData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub languages: Vec<LanguageTag>,
    pub concept_count: usize,
    pub overlap_fraction: f64,
    pub length_range: (usize, usize),
    pub zipf_exponent: f64,
    pub train_directions: Vec<Direction>,
    pub train_sentences: usize,
    #[serde(default)]
    pub copy_ratio: f64,
    #[serde(default)]
    pub misalign_ratio: f64,
    pub zero_shot: Vec<Direction>,
    pub supervised: Vec<Direction>,
    #[serde(default = "SyntheticData::test_sentences")]
    pub test_sentences: usize,
    /// Clean monolingual sentences per language for the language identifier.
    #[serde(default = "SyntheticData::langid_sentences")]
    pub langid_sentences: usize,
}

impl SyntheticData {
    pub fn test_sentences() -> usize {
        300
    }

    pub fn langid_sentences() -> usize {
        500
    }

    fn spec(&self, seed: u64, sentence_count: usize, directions: Vec<Direction>) -> SyntheticSpec {
        SyntheticSpec {
            languages: self.languages.clone(),
            concept_count: self.concept_count,
            overlap_fraction: self.overlap_fraction,
            sentence_count,
            length_range: self.length_range,
            zipf_exponent: self.zipf_exponent,
            seed,
            directions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: Vec<FileCorpus>,
    #[serde(default)]
    pub test: Vec<FileTest>,
    /// One sentence per line per language. Empty: train the identifier on the
    /// training corpora themselves.
    #[serde(default)]
    pub langid: Vec<MonolingualFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileCorpus {
    pub src: LanguageTag,
    pub tgt: LanguageTag,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTest {
    pub src: LanguageTag,
    pub tgt: LanguageTag,
    pub path: PathBuf,
    pub zero_shot: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonolingualFile {
    pub language: LanguageTag,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpeConfig {
    /// Number of merges; 0 disables subword segmentation.
    #[serde(default)]
    pub merges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangIdConfig {
    #[serde(default = "LangIdConfig::order")]
    pub order: usize,
    #[serde(default = "LangIdConfig::alpha")]
    pub alpha: f64,
}

impl LangIdConfig {
    pub fn order() -> usize {
        3
    }

    pub fn alpha() -> f64 {
        0.5
    }
}

impl Default for LangIdConfig {
    fn default() -> Self {
        LangIdConfig {
            order: Self::order(),
            alpha: Self::alpha(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseConfig {
    #[serde(default = "DenoiseConfig::remove")]
    pub remove: BTreeSet<NoiseLabel>,
}

impl DenoiseConfig {
    pub fn remove() -> BTreeSet<NoiseLabel> {
        [NoiseLabel::SourceCopy, NoiseLabel::SourceMisalign].into()
    }
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig { remove: Self::remove() }
    }
}

/// Which training data the per-language vocabularies behind the masks are
/// read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSource {
    Raw,
    #[default]
    Denoised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "MaskConfig::min_count")]
    pub min_count: u64,
    #[serde(default)]
    pub vocab_from: VocabSource,
}

impl MaskConfig {
    pub fn min_count() -> u64 {
        1
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            min_count: Self::min_count(),
            vocab_from: VocabSource::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    #[serde(default = "DecodeSettings::beam_size")]
    pub beam_size: usize,
    #[serde(default = "DecodeSettings::beams")]
    pub beams: Vec<usize>,
    #[serde(default = "DecodeSettings::length_norm")]
    pub length_norm: f64,
    #[serde(default = "DecodeSettings::max_len_a")]
    pub max_len_a: usize,
    #[serde(default = "DecodeSettings::max_len_b")]
    pub max_len_b: usize,
}

impl DecodeSettings {
    pub fn beam_size() -> usize {
        4
    }

    pub fn beams() -> Vec<usize> {
        vec![1, 2, 4, 8, 16]
    }

    pub fn length_norm() -> f64 {
        1.0
    }

    pub fn max_len_a() -> usize {
        2
    }

    pub fn max_len_b() -> usize {
        5
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_len_a: self.max_len_a,
            max_len_b: self.max_len_b,
            length_norm: self.length_norm,
        }
    }
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            beam_size: Self::beam_size(),
            beams: Self::beams(),
            length_norm: Self::length_norm(),
            max_len_a: Self::max_len_a(),
            max_len_b: Self::max_len_b(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "AnalysisConfig::max_position")]
    pub max_position: usize,
    /// Language of the off-target distractors in the confidence curves. By
    /// default, the language the vanilla model most often drifts into.
    #[serde(default)]
    pub distractor: Option<LanguageTag>,
}

impl AnalysisConfig {
    pub fn max_position() -> usize {
        15
    }
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            max_position: Self::max_position(),
            distractor: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(base), DataConfig::Files(files)) = (path.parent(), &mut cfg.data) {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            files.train.iter_mut().for_each(|f| fix(&mut f.path));
            files.test.iter_mut().for_each(|f| fix(&mut f.path));
            files.langid.iter_mut().for_each(|f| fix(&mut f.path));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.data {
            DataConfig::Synthetic(s) => {
                s.spec(self.seed, s.train_sentences, s.train_directions.clone())
                    .validate()?;
                if s.train_directions.is_empty() {
                    return bad("synthetic data needs at least one training direction".into());
                }
                if s.zero_shot.is_empty() && s.supervised.is_empty() {
                    return bad("no test directions declared".into());
                }
                for d in s.zero_shot.iter().chain(&s.supervised) {
                    s.spec(self.seed, 1, vec![d.clone()]).validate()?;
                }
                for d in &s.zero_shot {
                    if s.train_directions.contains(d) {
                        return bad(format!("zero-shot direction {}-{} is also trained", d.0, d.1));
                    }
                }
                if s.test_sentences == 0 || s.langid_sentences == 0 {
                    return bad("test_sentences and langid_sentences must be positive".into());
                }
                if !(0.0..=1.0).contains(&s.copy_ratio)
                    || !(0.0..=1.0).contains(&s.misalign_ratio)
                    || s.copy_ratio + s.misalign_ratio > 1.0
                {
                    return bad("noise ratios must lie in [0, 1] and sum to at most 1".into());
                }
            }
            DataConfig::Files(f) => {
                if f.train.is_empty() {
                    return bad("file data needs at least one training corpus".into());
                }
                let paths = f
                    .train
                    .iter()
                    .map(|c| &c.path)
                    .chain(f.test.iter().map(|t| &t.path))
                    .chain(f.langid.iter().map(|m| &m.path));
                for p in paths {
                    if !p.is_file() {
                        return bad(format!("{} does not exist", p.display()));
                    }
                }
                for (s, t) in f
                    .train
                    .iter()
                    .map(|c| (&c.src, &c.tgt))
                    .chain(f.test.iter().map(|c| (&c.src, &c.tgt)))
                {
                    if s == t {
                        return bad(format!("direction {s}-{t} has identical languages"));
                    }
                }
            }
        }
        if self.langid.order == 0 || !(self.langid.alpha > 0.0 && self.langid.alpha.is_finite()) {
            return bad("langid needs order >= 1 and alpha > 0".into());
        }
        if self.denoise.remove.contains(&NoiseLabel::OnTarget) {
            return Err(Error::RemoveOnTarget);
        }
        if self.mask.min_count == 0 {
            return bad("mask.min_count must be >= 1".into());
        }
        self.model.validate()?;
        self.decode.decode_config().validate()?;
        if self.decode.beams.is_empty() || self.decode.beams.contains(&0) {
            return bad("decode.beams must be non-empty with every beam >= 1".into());
        }
        if self.analysis.max_position == 0 {
            return bad("analysis.max_position must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except the output
    /// location.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            schema_version: SCHEMA_VERSION,
            toolkit_version: crate::VERSION.to_string(),
            config_hash: self.hash(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config_hash: String,
    pub seed: u64,
}

/// A word-level test direction.
#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub zero_shot: bool,
    pub sources: Vec<Vec<String>>,
    pub references: Vec<Vec<String>>,
}

impl TestCase {
    pub fn name(&self) -> String {
        format!("{}-{}", self.src_lang, self.tgt_lang)
    }
}

/// Word-level inputs of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<Corpus>,
    /// Injection ground truth per training corpus (synthetic data only).
    pub injections: Vec<Option<NoiseInjection>>,
    pub langid: LangIdModel,
    pub tests: Vec<TestCase>,
    pub synthetic: bool,
}

fn sorted_unique(dirs: impl IntoIterator<Item = Direction>) -> Vec<Direction> {
    let set: BTreeSet<Direction> = dirs.into_iter().collect();
    set.into_iter().collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Generates or loads corpora, injects noise and trains the language
/// identifier.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    match &cfg.data {
        DataConfig::Synthetic(s) => prepare_synthetic(cfg.seed, s, &cfg.langid),
        DataConfig::Files(f) => prepare_files(f, &cfg.langid),
    }
}

fn prepare_synthetic(seed: u64, s: &SyntheticData, lid: &LangIdConfig) -> Result<Prepared> {
    let train_spec = s.spec(
        derive_seed(seed, &["train"], 0),
        s.train_sentences,
        sorted_unique(s.train_directions.iter().cloned()),
    );
    let clean = generate_synthetic(&train_spec).map_err(|e| e.in_stage("generate"))?;
    let mut train = Vec::with_capacity(clean.len());
    let mut injections = Vec::with_capacity(clean.len());
    for ((src, tgt), corpus) in clean {
        let noise_seed = derive_seed(seed, &["noise", src.as_str(), tgt.as_str()], 0);
        let (noisy, inj) = inject_noise(&corpus, s.copy_ratio, s.misalign_ratio, noise_seed)?;
        train.push(noisy);
        injections.push(Some(inj));
    }

    let langs = &s.languages;
    let cyclic: Vec<Direction> = (0..langs.len())
        .map(|i| (langs[i].clone(), langs[(i + 1) % langs.len()].clone()))
        .collect();
    let mono_spec = s.spec(derive_seed(seed, &["langid"], 0), s.langid_sentences, cyclic);
    let mut mono: BTreeMap<LanguageTag, Vec<String>> = BTreeMap::new();
    for ((src, _), corpus) in generate_synthetic(&mono_spec)? {
        mono.insert(src, corpus.pairs().iter().map(|p| p.src_text()).collect());
    }
    let langid = train_profiles(&mono, lid.order, lid.alpha).map_err(|e| e.in_stage("langid"))?;

    let test_dirs: Vec<(Direction, bool)> = s
        .zero_shot
        .iter()
        .map(|d| (d.clone(), true))
        .chain(s.supervised.iter().map(|d| (d.clone(), false)))
        .collect();
    let test_spec = s.spec(
        derive_seed(seed, &["test"], 0),
        s.test_sentences,
        sorted_unique(test_dirs.iter().map(|(d, _)| d.clone())),
    );
    let generated = generate_synthetic(&test_spec)?;
    let tests = test_dirs
        .into_iter()
        .map(|(d, zero_shot)| {
            let c = &generated[&d];
            TestCase {
                src_lang: d.0.clone(),
                tgt_lang: d.1.clone(),
                zero_shot,
                sources: c.pairs().iter().map(|p| p.src.clone()).collect(),
                references: c.pairs().iter().map(|p| p.tgt.clone()).collect(),
            }
        })
        .collect();
    Ok(Prepared {
        train,
        injections,
        langid,
        tests,
        synthetic: true,
    })
}

fn prepare_files(f: &FileData, lid: &LangIdConfig) -> Result<Prepared> {
    let train: Vec<Corpus> = f
        .train
        .iter()
        .map(|c| load_parallel(&c.path, &c.src, &c.tgt))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("load"))?;
    let mut mono: BTreeMap<LanguageTag, Vec<String>> = BTreeMap::new();
    if f.langid.is_empty() {
        for c in &train {
            for p in c.pairs() {
                mono.entry(p.src_lang.clone()).or_default().push(p.src_text());
                mono.entry(p.tgt_lang.clone()).or_default().push(p.tgt_text());
            }
        }
    } else {
        for m in &f.langid {
            mono.entry(m.language.clone()).or_default().extend(read_lines(&m.path)?);
        }
    }
    let langid = train_profiles(&mono, lid.order, lid.alpha).map_err(|e| e.in_stage("langid"))?;
    let tests = f
        .test
        .iter()
        .map(|t| {
            let c = load_parallel(&t.path, &t.src, &t.tgt)?;
            Ok(TestCase {
                src_lang: t.src.clone(),
                tgt_lang: t.tgt.clone(),
                zero_shot: t.zero_shot,
                sources: c.pairs().iter().map(|p| p.src.clone()).collect(),
                references: c.pairs().iter().map(|p| p.tgt.clone()).collect(),
            })
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("load"))?;
    Ok(Prepared {
        injections: vec![None; train.len()],
        train,
        langid,
        tests,
        synthetic: false,
    })
}

/// Outcome of denoising every training corpus.
#[derive(Clone, Debug)]
pub struct Denoised {
    pub clean: Vec<Corpus>,
    pub labels: Vec<Vec<NoiseLabel>>,
    pub report: NoiseReport,
}

pub fn denoise_all(langid: &LangIdModel, train: &[Corpus], remove: &BTreeSet<NoiseLabel>) -> Result<Denoised> {
    let filtered: Vec<_> = train
        .par_iter()
        .map(|c| filter_corpus(langid, c, remove))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("denoise"))?;
    let report = NoiseReport::merge(filtered.iter().map(|f| f.report.clone()));
    let mut clean = Vec::with_capacity(filtered.len());
    let mut labels = Vec::with_capacity(filtered.len());
    for f in filtered {
        clean.push(f.clean);
        labels.push(f.labels);
    }
    Ok(Denoised { clean, labels, report })
}

/// Precision and recall of the classifier against injection ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub direction: String,
    pub copy_precision: f64,
    pub copy_recall: f64,
    pub misalign_precision: f64,
    pub misalign_recall: f64,
}

fn precision_recall(predicted: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> (f64, f64) {
    let tp = predicted.intersection(truth).count() as f64;
    let p = if predicted.is_empty() {
        1.0
    } else {
        tp / predicted.len() as f64
    };
    let r = if truth.is_empty() { 1.0 } else { tp / truth.len() as f64 };
    (p, r)
}

pub fn recovery(corpus: &Corpus, labels: &[NoiseLabel], injection: &NoiseInjection) -> Recovery {
    let with = |l: NoiseLabel| -> BTreeSet<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == l)
            .map(|(i, _)| i)
            .collect()
    };
    let (cp, cr) = precision_recall(&with(NoiseLabel::SourceCopy), &injection.copy.iter().copied().collect());
    let (mp, mr) = precision_recall(
        &with(NoiseLabel::SourceMisalign),
        &injection.misalign.iter().copied().collect(),
    );
    let direction = corpus
        .direction()
        .map(|(s, t)| format!("{s}-{t}"))
        .unwrap_or_else(|| "mixed".into());
    Recovery {
        direction,
        copy_precision: cp,
        copy_recall: cr,
        misalign_precision: mp,
        misalign_recall: mr,
    }
}

/// Optional subword segmentation shared by training and decoding.
pub struct Segmenter {
    applier: Option<BpeApplier>,
}

impl Segmenter {
    pub fn learn(train: &[Corpus], merges: usize) -> Result<Self> {
        if merges == 0 {
            return Ok(Segmenter { applier: None });
        }
        let list = learn_bpe(train, merges).map_err(|e| e.in_stage("bpe"))?;
        Ok(Segmenter {
            applier: Some(BpeApplier::new(&list)),
        })
    }

    pub fn corpus(&self, c: &Corpus) -> Corpus {
        match &self.applier {
            Some(a) => apply_bpe_corpus(c, a),
            None => c.clone(),
        }
    }

    pub fn tokens(&self, words: &[String]) -> Vec<String> {
        match &self.applier {
            Some(a) => a.apply(words),
            None => words.to_vec(),
        }
    }

    pub fn words(&self, pieces: Vec<String>) -> Vec<String> {
        if self.applier.is_some() {
            join_subwords(&pieces)
        } else {
            pieces
        }
    }
}

/// Model output ids to words: specials dropped, subwords joined.
pub fn render(model: &ToyModel, seg: &Segmenter, ids: &[TokenId]) -> Vec<String> {
    let joint = model.joint();
    let pieces = ids
        .iter()
        .filter(|&&i| !joint.is_special(i))
        .map(|&i| joint.token(i).to_string())
        .collect();
    seg.words(pieces)
}

pub fn test_set(case: &TestCase, model: &ToyModel, seg: &Segmenter) -> TestSet {
    TestSet {
        src_lang: case.src_lang.clone(),
        tgt_lang: case.tgt_lang.clone(),
        sources: case
            .sources
            .iter()
            .map(|s| model.joint().encode(&seg.tokens(s)))
            .collect(),
        references: case.references.clone(),
    }
}

/// One mask per target language, read from `corpora` (already segmented).
pub fn build_masks(
    corpora: &[Corpus],
    model: &ToyModel,
    targets: &BTreeSet<LanguageTag>,
    min_count: u64,
) -> Result<BTreeMap<LanguageTag, VocabMask>> {
    targets
        .iter()
        .map(|lang| {
            let vocab = build_vocab_with_threshold(corpora, lang, min_count)?;
            let (mask, missing) = build_mask(&vocab, model.joint())?;
            if !missing.is_empty() {
                info!("{} {lang} vocabulary tokens are unknown to the model", missing.len());
            }
            Ok((lang.clone(), mask))
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("mask"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Vanilla,
    #[serde(rename = "Data Denoise")]
    DataDenoise,
    #[serde(rename = "Vocab Mask")]
    VocabMask,
    Both,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Vanilla,
        Condition::DataDenoise,
        Condition::VocabMask,
        Condition::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Vanilla => "Vanilla",
            Condition::DataDenoise => "Data Denoise",
            Condition::VocabMask => "Vocab Mask",
            Condition::Both => "Both",
        }
    }

    pub fn denoised(self) -> bool {
        matches!(self, Condition::DataDenoise | Condition::Both)
    }

    pub fn masked(self) -> bool {
        matches!(self, Condition::VocabMask | Condition::Both)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything trained for an experiment, at the model's token level.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub prepared: Prepared,
    pub denoised: Denoised,
    pub segmenter: Segmenter,
    pub raw_model: ToyModel,
    pub raw_trace: TrainingTrace,
    pub clean_model: ToyModel,
    pub clean_trace: TrainingTrace,
    pub raw_masks: BTreeMap<LanguageTag, VocabMask>,
    pub clean_masks: BTreeMap<LanguageTag, VocabMask>,
}

impl Workbench {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let prepared = prepare(cfg)?;
        let denoised = denoise_all(&prepared.langid, &prepared.train, &cfg.denoise.remove)?;
        let segmenter = Segmenter::learn(&prepared.train, cfg.bpe.merges)?;
        let raw_seg: Vec<Corpus> = prepared.train.iter().map(|c| segmenter.corpus(c)).collect();
        let clean_seg: Vec<Corpus> = denoised.clean.iter().map(|c| segmenter.corpus(c)).collect();
        let (raw, clean) = rayon::join(
            || ToyModel::train(&raw_seg, &cfg.model),
            || ToyModel::train(&clean_seg, &cfg.model),
        );
        let (raw_model, raw_trace) = raw.map_err(|e| e.in_stage("train"))?;
        let (clean_model, clean_trace) = clean.map_err(|e| e.in_stage("train"))?;
        let targets: BTreeSet<LanguageTag> = prepared.tests.iter().map(|t| t.tgt_lang.clone()).collect();
        let mask_data = match cfg.mask.vocab_from {
            VocabSource::Raw => &raw_seg,
            VocabSource::Denoised => &clean_seg,
        };
        let raw_masks = build_masks(mask_data, &raw_model, &targets, cfg.mask.min_count)?;
        let clean_masks = build_masks(&clean_seg, &clean_model, &targets, cfg.mask.min_count)?;
        Ok(Workbench {
            config: cfg.clone(),
            prepared,
            denoised,
            segmenter,
            raw_model,
            raw_trace,
            clean_model,
            clean_trace,
            raw_masks,
            clean_masks,
        })
    }

    pub fn model(&self, c: Condition) -> &ToyModel {
        if c.denoised() {
            &self.clean_model
        } else {
            &self.raw_model
        }
    }

    pub fn mask(&self, c: Condition, lang: &LanguageTag) -> Option<&VocabMask> {
        match c {
            Condition::VocabMask => self.raw_masks.get(lang),
            Condition::Both => self.clean_masks.get(lang),
            _ => None,
        }
    }

    pub fn evaluate(&self, c: Condition, case: &TestCase, beam: usize) -> Result<(DirectionEval, Vec<Vec<String>>)> {
        let model = self.model(c);
        let ts = test_set(case, model, &self.segmenter);
        let rend = |ids: &[TokenId]| render(model, &self.segmenter, ids);
        evaluate_direction(
            model,
            &ts,
            &self.config.decode.decode_config().with_beam(beam),
            self.mask(c, &case.tgt_lang),
            &self.prepared.langid,
            &rend,
            case.zero_shot,
        )
        .map_err(|e| e.in_stage(format!("evaluate {} {}", c, case.name())))
    }

    pub fn sweep(&self, c: Condition, case: &TestCase) -> Result<Vec<SweepRow>> {
        let model = self.model(c);
        let ts = test_set(case, model, &self.segmenter);
        let rend = |ids: &[TokenId]| render(model, &self.segmenter, ids);
        beam_sweep(
            model,
            &ts,
            &self.config.decode.beams,
            &self.config.decode.decode_config(),
            self.mask(c, &case.tgt_lang),
            &self.prepared.langid,
            &rend,
        )
        .map_err(|e| e.in_stage(format!("sweep {} {}", c, case.name())))
    }

    fn encode_pairs(
        &self,
        model: &ToyModel,
        case: &TestCase,
        candidates: &[Vec<String>],
    ) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        let j = model.joint();
        case.sources
            .iter()
            .zip(candidates)
            .map(|(s, c)| (j.encode(&self.segmenter.tokens(s)), j.encode(&self.segmenter.tokens(c))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub condition: Condition,
    pub direction: String,
    pub zero_shot: bool,
    pub beam: usize,
    pub mask: bool,
    pub denoise: bool,
    pub n: usize,
    pub bleu: f64,
    pub otr: f64,
    pub to_source: f64,
    pub to_others: f64,
    pub empty_hypotheses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub zero_shot_bleu: Option<f64>,
    pub zero_shot_otr: Option<f64>,
    pub supervised_bleu: Option<f64>,
    pub supervised_otr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub condition: Condition,
    pub direction: String,
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCurve {
    pub direction: String,
    /// `Reference` or `Off-Target`.
    pub candidates: String,
    pub language: LanguageTag,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassRow {
    pub direction: String,
    pub zero_shot: bool,
    pub condition: Condition,
    pub on_mass: f64,
    pub off_mass: f64,
    pub steps: usize,
    /// Largest |on + off - 1| over all steps.
    pub max_conservation_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub direction: String,
    pub improved: Condition,
    pub split: SplitEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub model: String,
    pub pairs: usize,
    pub log_likelihood: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub confidence: Vec<ConfidenceCurve>,
    pub mass: Vec<MassRow>,
    pub split: Vec<SplitRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub noise: NoiseReport,
    pub training: Vec<TrainingSummary>,
    pub grid: Vec<GridRow>,
    pub summary: Vec<ConditionSummary>,
    pub sweeps: Vec<SweepSeries>,
    pub analysis: Analysis,
}

impl ExperimentReport {
    pub fn row(&self, condition: Condition, direction: &str) -> Option<&GridRow> {
        self.grid
            .iter()
            .find(|r| r.condition == condition && r.direction == direction)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Detokenized-by-whitespace outputs for one test set.
pub type Hypotheses = Vec<Vec<String>>;

/// The four-condition grid at the configured beam, plus hypotheses per
/// (condition, test case) in grid order.
pub fn run_grid(wb: &Workbench) -> Result<(Vec<GridRow>, Vec<Hypotheses>)> {
    let beam = wb.config.decode.beam_size;
    let jobs: Vec<(Condition, &TestCase)> = Condition::ALL
        .iter()
        .flat_map(|&c| wb.prepared.tests.iter().map(move |t| (c, t)))
        .collect();
    let results: Vec<(DirectionEval, Vec<Vec<String>>)> = jobs
        .par_iter()
        .map(|(c, t)| wb.evaluate(*c, t, beam))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(jobs.len());
    let mut hyps = Vec::with_capacity(jobs.len());
    for ((c, _), (e, h)) in jobs.iter().zip(results) {
        rows.push(GridRow {
            condition: *c,
            direction: e.direction,
            zero_shot: e.zero_shot,
            beam,
            mask: c.masked(),
            denoise: c.denoised(),
            n: e.n,
            bleu: e.bleu,
            otr: e.otr,
            to_source: e.to_source,
            to_others: e.to_others,
            empty_hypotheses: e.empty_hypotheses,
        });
        hyps.push(h);
    }
    Ok((rows, hyps))
}

pub fn summarize(grid: &[GridRow]) -> Vec<ConditionSummary> {
    Condition::ALL
        .iter()
        .map(|&c| {
            let pick = |zs: bool| grid.iter().filter(move |r| r.condition == c && r.zero_shot == zs);
            ConditionSummary {
                condition: c,
                zero_shot_bleu: mean(pick(true).map(|r| r.bleu)),
                zero_shot_otr: mean(pick(true).map(|r| r.otr)),
                supervised_bleu: mean(pick(false).map(|r| r.bleu)),
                supervised_otr: mean(pick(false).map(|r| r.otr)),
            }
        })
        .collect()
}

/// Beam sweeps for the vanilla and fully mitigated systems on every test
/// direction.
pub fn run_sweeps(wb: &Workbench) -> Result<Vec<SweepSeries>> {
    let jobs: Vec<(Condition, &TestCase)> = [Condition::Vanilla, Condition::Both]
        .iter()
        .flat_map(|&c| wb.prepared.tests.iter().map(move |t| (c, t)))
        .collect();
    jobs.par_iter()
        .map(|(c, t)| {
            Ok(SweepSeries {
                condition: *c,
                direction: t.name(),
                rows: wb.sweep(*c, t)?,
            })
        })
        .collect()
}

fn most_common_off_target(hyps: &[Vec<String>], case: &TestCase, langid: &LangIdModel) -> Result<Option<LanguageTag>> {
    let detected = crate::eval::detect_languages(hyps, langid)?;
    let mut counts: BTreeMap<LanguageTag, usize> = BTreeMap::new();
    for d in detected.into_iter().flatten() {
        if d != case.tgt_lang {
            *counts.entry(d).or_default() += 1;
        }
    }
    let best = counts.values().copied().max();
    Ok(best.and_then(|b| counts.into_iter().find(|(_, c)| *c == b).map(|(l, _)| l)))
}

/// Confidence curves, probability-mass partition and on/off-target split.
/// `vanilla_hyps[i]` and `both_hyps[i]` are the hypotheses for test case `i`.
pub fn run_analysis(
    wb: &Workbench,
    vanilla_hyps: &[Vec<Vec<String>>],
    both_hyps: &[Vec<Vec<String>>],
) -> Result<Analysis> {
    let cfg = &wb.config;
    let langid = &wb.prepared.langid;
    let mut confidence = Vec::new();
    let mut mass = Vec::new();
    let mut split = Vec::new();
    for (i, case) in wb.prepared.tests.iter().enumerate() {
        let model = &wb.raw_model;
        let name = case.name();
        let refs = wb.encode_pairs(model, case, &case.references);
        let stage = |e: Error| e.in_stage(format!("analyze {name}"));

        let mut curves = vec![("Reference".to_string(), case.tgt_lang.clone(), refs.clone())];
        if wb.prepared.synthetic {
            let distractor = match &cfg.analysis.distractor {
                Some(l) => Some(l.clone()),
                None => most_common_off_target(&vanilla_hyps[i], case, langid)?,
            }
            .unwrap_or_else(|| case.src_lang.clone());
            if distractor != case.tgt_lang {
                let cands: Vec<Vec<String>> = case
                    .references
                    .iter()
                    .map(|r| rerender(r, &case.tgt_lang, &distractor))
                    .collect();
                curves.push((
                    "Off-Target".to_string(),
                    distractor,
                    wb.encode_pairs(model, case, &cands),
                ));
            }
        }
        for (label, language, pairs) in curves {
            let values =
                per_token_confidence(model, &pairs, &case.tgt_lang, None, cfg.analysis.max_position).map_err(stage)?;
            confidence.push(ConfidenceCurve {
                direction: name.clone(),
                candidates: label,
                language,
                values,
            });
        }

        if let Some(on_set) = wb.raw_masks.get(&case.tgt_lang) {
            for c in [Condition::Vanilla, Condition::VocabMask] {
                let m = vocab_mass_partition(model, &refs, &case.tgt_lang, on_set, wb.mask(c, &case.tgt_lang))
                    .map_err(stage)?;
                mass.push(MassRow {
                    direction: name.clone(),
                    zero_shot: case.zero_shot,
                    condition: c,
                    on_mass: m.on_mass,
                    off_mass: m.off_mass,
                    steps: m.steps.len(),
                    max_conservation_error: m.steps.iter().map(|(a, b)| (a + b - 1.0).abs()).fold(0.0, f64::max),
                });
            }
        }

        if case.zero_shot {
            split.push(SplitRow {
                direction: name.clone(),
                improved: Condition::Both,
                split: split_on_off_eval(
                    &vanilla_hyps[i],
                    &both_hyps[i],
                    &case.references,
                    &case.tgt_lang,
                    langid,
                )
                .map_err(stage)?,
            });
        }
    }
    Ok(Analysis {
        confidence,
        mass,
        split,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Marks `dir` as incomplete until [`finish_outputs`] runs.
pub fn begin_outputs(dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, "outputs in this directory are partial\n").map_err(|e| Error::io(marker, e))
}

pub fn finish_outputs(dir: &Path) -> Result<()> {
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::remove_file(&marker).map_err(|e| Error::io(marker, e))
}

fn write_grid_csv(path: &Path, grid: &[GridRow]) -> Result<()> {
    write_file(path, |w| {
        writeln!(
            w,
            "condition,direction,zero_shot,beam,mask,denoise,n,bleu,otr,to_source,to_others,empty"
        )?;
        for r in grid {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{:.4},{:.6},{:.6},{:.6},{}",
                r.condition,
                r.direction,
                r.zero_shot,
                r.beam,
                r.mask,
                r.denoise,
                r.n,
                r.bleu,
                r.otr,
                r.to_source,
                r.to_others,
                r.empty_hypotheses
            )?;
        }
        Ok(())
    })
}

fn write_sweeps(dir: &Path, sweeps: &[SweepSeries]) -> Result<()> {
    let rows: Vec<(String, Vec<SweepRow>)> = sweeps
        .iter()
        .map(|s| (format!("{} {}", s.condition, s.direction), s.rows.clone()))
        .collect();
    write_file(&dir.join("sweep.csv"), |w| write_sweep_csv(w, &rows))
}

fn write_analysis(dir: &Path, a: &Analysis) -> Result<()> {
    let curves: Vec<(String, Vec<Option<f64>>)> = a
        .confidence
        .iter()
        .map(|c| {
            (
                format!("{} {} ({})", c.candidates, c.direction, c.language),
                c.values.clone(),
            )
        })
        .collect();
    write_file(&dir.join("confidence.csv"), |w| write_confidence_csv(w, &curves))?;
    write_file(&dir.join("mass.csv"), |w| {
        writeln!(w, "direction,on_mass,off_mass,condition")?;
        for m in &a.mass {
            writeln!(w, "{},{:.6},{:.6},{}", m.direction, m.on_mass, m.off_mass, m.condition)?;
        }
        Ok(())
    })?;
    write_json(&dir.join("split.json"), &a.split)
}

fn write_hypotheses(dir: &Path, wb: &Workbench, hyps: &[Vec<Vec<String>>]) -> Result<()> {
    let sub = dir.join("hypotheses");
    create_dir(&sub)?;
    let jobs = Condition::ALL
        .iter()
        .flat_map(|&c| wb.prepared.tests.iter().map(move |t| (c, t)));
    for ((c, t), h) in jobs.zip(hyps) {
        let name = format!("{}.{}.txt", c.name().replace(' ', "_").to_lowercase(), t.name());
        write_file(&sub.join(name), |w| {
            for line in h {
                writeln!(w, "{}", line.join(" "))?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory given".into()))
}

/// Runs the whole pipeline and writes the report bundle.
pub fn cmd_run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    begin_outputs(&dir)?;
    let wb = Workbench::build(cfg)?;
    let (grid, hyps) = run_grid(&wb)?;
    let n_tests = wb.prepared.tests.len();
    let vanilla_hyps = &hyps[..n_tests];
    let both_hyps = &hyps[3 * n_tests..];
    let sweeps = run_sweeps(&wb)?;
    let analysis = run_analysis(&wb, vanilla_hyps, both_hyps)?;
    let report = ExperimentReport {
        provenance: cfg.provenance(),
        noise: wb.denoised.report.clone(),
        training: vec![
            TrainingSummary {
                model: "raw".into(),
                pairs: wb.raw_trace.pairs,
                log_likelihood: wb.raw_trace.log_likelihood.clone(),
            },
            TrainingSummary {
                model: "denoised".into(),
                pairs: wb.clean_trace.pairs,
                log_likelihood: wb.clean_trace.log_likelihood.clone(),
            },
        ],
        summary: summarize(&grid),
        grid,
        sweeps,
        analysis,
    };
    write_json(&dir.join("report.json"), &report)?;
    write_grid_csv(&dir.join("grid.csv"), &report.grid)?;
    write_file(&dir.join("noise_report.csv"), |w| report.noise.write_csv(w))?;
    write_sweeps(&dir, &report.sweeps)?;
    write_analysis(&dir, &report.analysis)?;
    write_hypotheses(&dir, &wb, &hyps)?;
    finish_outputs(&dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub provenance: Provenance,
    pub remove: BTreeSet<NoiseLabel>,
    pub noise: NoiseReport,
    pub removed: usize,
    /// Present for synthetic data with injected noise.
    pub recovery: Option<Vec<Recovery>>,
}

fn corpus_file_name(prefix: &str, c: &Corpus, index: usize) -> String {
    match c.direction() {
        Some((s, t)) => format!("{prefix}.{s}-{t}.tsv"),
        None => format!("{prefix}.{index}.tsv"),
    }
}

/// Classifies every training pair, writes per-direction clean corpora and
/// the noise report.
pub fn cmd_denoise(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<DenoiseReport> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    begin_outputs(&dir)?;
    let prepared = prepare(cfg)?;
    let d = denoise_all(&prepared.langid, &prepared.train, &cfg.denoise.remove)?;
    let recovery = prepared.synthetic.then(|| {
        prepared
            .train
            .iter()
            .zip(&d.labels)
            .zip(&prepared.injections)
            .filter_map(|((c, l), inj)| inj.as_ref().map(|inj| recovery(c, l, inj)))
            .collect()
    });
    for (i, c) in d.clean.iter().enumerate() {
        c.save(&dir.join(corpus_file_name("clean", c, i)))?;
    }
    let report = DenoiseReport {
        provenance: cfg.provenance(),
        remove: cfg.denoise.remove.clone(),
        removed: prepared.train.iter().map(Corpus::len).sum::<usize>() - d.clean.iter().map(Corpus::len).sum::<usize>(),
        noise: d.report,
        recovery,
    };
    write_json(&dir.join("noise_report.json"), &report)?;
    write_file(&dir.join("noise_report.csv"), |w| report.noise.write_csv(w))?;
    finish_outputs(&dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub provenance: Provenance,
    pub train: Vec<String>,
    pub injections: Vec<(String, NoiseInjection)>,
    pub test: Vec<String>,
    pub langid: Vec<String>,
}

/// Writes the synthetic training corpora (with injected noise), test sets
/// and language-identification text.
pub fn cmd_gen(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<GenReport> {
    cfg.validate()?;
    let DataConfig::Synthetic(s) = &cfg.data else {
        return Err(Error::Config("gen needs synthetic data".into()));
    };
    let dir = output_dir(cfg, out)?;
    begin_outputs(&dir)?;
    let prepared = prepare(cfg)?;
    let mut report = GenReport {
        provenance: cfg.provenance(),
        train: Vec::new(),
        injections: Vec::new(),
        test: Vec::new(),
        langid: Vec::new(),
    };
    for (i, (c, inj)) in prepared.train.iter().zip(&prepared.injections).enumerate() {
        let name = corpus_file_name("train", c, i);
        c.save(&dir.join(&name))?;
        if let Some(inj) = inj {
            report.injections.push((name.clone(), inj.clone()));
        }
        report.train.push(name);
    }
    for t in &prepared.tests {
        let pairs = t
            .sources
            .iter()
            .zip(&t.references)
            .map(|(a, b)| {
                crate::corpus::SentencePair::new(t.src_lang.clone(), t.tgt_lang.clone(), a.clone(), b.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let name = format!("test.{}.tsv", t.name());
        Corpus::from_pairs(pairs)?.save(&dir.join(&name))?;
        report.test.push(name);
    }
    let cyclic: Vec<Direction> = (0..s.languages.len())
        .map(|i| (s.languages[i].clone(), s.languages[(i + 1) % s.languages.len()].clone()))
        .collect();
    let mono = generate_synthetic(&s.spec(derive_seed(cfg.seed, &["langid"], 0), s.langid_sentences, cyclic))?;
    for ((lang, _), c) in mono {
        let name = format!("langid.{lang}.txt");
        write_file(&dir.join(&name), |w| {
            for p in c.pairs() {
                writeln!(w, "{}", p.src_text())?;
            }
            Ok(())
        })?;
        report.langid.push(name);
    }
    write_json(&dir.join("gen_report.json"), &report)?;
    finish_outputs(&dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub remove: Vec<NoiseLabel>,
    pub removed_pairs: usize,
    pub directions: Vec<DirectionEval>,
    pub zero_shot_bleu: Option<f64>,
    pub zero_shot_otr: Option<f64>,
    pub zero_shot_to_source: Option<f64>,
    pub zero_shot_to_others: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub provenance: Provenance,
    pub noise: NoiseReport,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_sets() -> [Vec<NoiseLabel>; 4] {
    [
        vec![],
        vec![NoiseLabel::SourceMisalign],
        vec![NoiseLabel::SourceCopy],
        vec![NoiseLabel::SourceCopy, NoiseLabel::SourceMisalign],
    ]
}

/// Trains and evaluates (unmasked) once per removal set.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<AblationReport> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    begin_outputs(&dir)?;
    let prepared = prepare(cfg)?;
    let total: usize = prepared.train.iter().map(Corpus::len).sum();
    let segmenter = Segmenter::learn(&prepared.train, cfg.bpe.merges)?;
    let dc = cfg.decode.decode_config();
    let rows: Vec<AblationRow> = ablation_sets()
        .par_iter()
        .map(|set| {
            let remove: BTreeSet<NoiseLabel> = set.iter().copied().collect();
            let d = denoise_all(&prepared.langid, &prepared.train, &remove)?;
            let seg: Vec<Corpus> = d.clean.iter().map(|c| segmenter.corpus(c)).collect();
            let (model, _) = ToyModel::train(&seg, &cfg.model).map_err(|e| e.in_stage("train"))?;
            let rend = |ids: &[TokenId]| render(&model, &segmenter, ids);
            let directions = prepared
                .tests
                .iter()
                .map(|case| {
                    let ts = test_set(case, &model, &segmenter);
                    evaluate_direction(&model, &ts, &dc, None, &prepared.langid, &rend, case.zero_shot).map(|r| r.0)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("evaluate"))?;
            let zs = || directions.iter().filter(|d| d.zero_shot);
            Ok(AblationRow {
                remove: set.clone(),
                removed_pairs: total - d.clean.iter().map(Corpus::len).sum::<usize>(),
                zero_shot_bleu: mean(zs().map(|d| d.bleu)),
                zero_shot_otr: mean(zs().map(|d| d.otr)),
                zero_shot_to_source: mean(zs().map(|d| d.to_source)),
                zero_shot_to_others: mean(zs().map(|d| d.to_others)),
                directions,
            })
        })
        .collect::<Result<_>>()?;
    let noise = denoise_all(&prepared.langid, &prepared.train, &BTreeSet::new())?.report;
    let report = AblationReport {
        provenance: cfg.provenance(),
        noise,
        rows,
    };
    write_json(&dir.join("ablation.json"), &report)?;
    write_file(&dir.join("ablation.csv"), |w| {
        writeln!(
            w,
            "remove,removed_pairs,direction,zero_shot,bleu,otr,to_source,to_others"
        )?;
        for r in &report.rows {
            let label = if r.remove.is_empty() {
                "none".to_string()
            } else {
                r.remove.iter().map(|l| l.name()).collect::<Vec<_>>().join("+")
            };
            for d in &r.directions {
                writeln!(
                    w,
                    "{label},{},{},{},{:.4},{:.6},{:.6},{:.6}",
                    r.removed_pairs, d.direction, d.zero_shot, d.bleu, d.otr, d.to_source, d.to_others
                )?;
            }
        }
        Ok(())
    })?;
    finish_outputs(&dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub provenance: Provenance,
    pub sweeps: Vec<SweepSeries>,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SweepReport> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    begin_outputs(&dir)?;
    let wb = Workbench::build(cfg)?;
    let report = SweepReport {
        provenance: cfg.provenance(),
        sweeps: run_sweeps(&wb)?,
    };
    write_json(&dir.join("sweep.json"), &report)?;
    write_sweeps(&dir, &report.sweeps)?;
    finish_outputs(&dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub analysis: Analysis,
}

pub fn cmd_analyze(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<AnalysisReport> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    begin_outputs(&dir)?;
    let wb = Workbench::build(cfg)?;
    let beam = cfg.decode.beam_size;
    let hyps = |c: Condition| -> Result<Vec<Vec<Vec<String>>>> {
        wb.prepared
            .tests
            .par_iter()
            .map(|t| wb.evaluate(c, t, beam).map(|r| r.1))
            .collect()
    };
    let report = AnalysisReport {
        provenance: cfg.provenance(),
        analysis: run_analysis(&wb, &hyps(Condition::Vanilla)?, &hyps(Condition::Both)?)?,
    };
    write_json(&dir.join("analysis.json"), &report)?;
    write_analysis(&dir, &report.analysis)?;
    finish_outputs(&dir)?;
    Ok(report)
}

/// Reads whitespace-tokenized sentences, one per line.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    pub(crate) fn small_config() -> ExperimentConfig {
        let d = |a: &str, b: &str| (tag(a), tag(b));
        ExperimentConfig {
            seed: 5,
            data: DataConfig::Synthetic(SyntheticData {
                languages: vec![tag("E"), tag("A"), tag("B")],
                concept_count: 30,
                overlap_fraction: 0.2,
                length_range: (3, 6),
                zipf_exponent: 0.5,
                train_directions: vec![d("E", "A"), d("A", "E"), d("E", "B"), d("B", "E")],
                train_sentences: 200,
                copy_ratio: 0.05,
                misalign_ratio: 0.05,
                zero_shot: vec![d("A", "B")],
                supervised: vec![d("E", "B")],
                test_sentences: 20,
                langid_sentences: 100,
            }),
            bpe: BpeConfig::default(),
            langid: LangIdConfig::default(),
            denoise: DenoiseConfig::default(),
            mask: MaskConfig::default(),
            model: ModelConfig::default(),
            decode: DecodeSettings {
                beams: vec![1, 4],
                ..DecodeSettings::default()
            },
            analysis: AnalysisConfig::default(),
            output_dir: None,
        }
    }

    #[test]
    fn config_roundtrip_and_hash() {
        let cfg = small_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.output_dir = Some("/tmp/x".into());
        assert_eq!(other.hash(), cfg.hash());
        other.seed = 6;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn seed_is_mandatory_and_unknown_fields_rejected() {
        let mut v = serde_json::to_value(small_config()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        assert!(serde_json::from_value::<ExperimentConfig>(v.clone()).is_err());
        v["seed"] = 1.into();
        v["surprise"] = 1.into();
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = small_config();
        cfg.denoise.remove.insert(NoiseLabel::OnTarget);
        assert!(cfg.validate().is_err());

        let mut cfg = small_config();
        if let DataConfig::Synthetic(s) = &mut cfg.data {
            s.zero_shot = vec![(tag("E"), tag("A"))];
        }
        assert!(cfg.validate().is_err());

        let mut cfg = small_config();
        cfg.data = DataConfig::Files(FileData {
            train: vec![FileCorpus {
                src: tag("A"),
                tgt: tag("B"),
                path: "/definitely/not/here.tsv".into(),
            }],
            test: vec![],
            langid: vec![],
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_has_four_rows_per_direction() {
        let wb = Workbench::build(&small_config()).unwrap();
        let (grid, hyps) = run_grid(&wb).unwrap();
        assert_eq!(grid.len(), 4 * wb.prepared.tests.len());
        assert_eq!(hyps.len(), grid.len());
        for case in &wb.prepared.tests {
            let conds: Vec<_> = grid
                .iter()
                .filter(|r| r.direction == case.name())
                .map(|r| r.condition)
                .collect();
            assert_eq!(conds, Condition::ALL.to_vec());
        }
        for r in &grid {
            assert!((r.to_source + r.to_others - r.otr).abs() < 1e-12);
            assert!((0.0..=100.0).contains(&r.bleu));
        }
    }

    #[test]
    fn masked_outputs_stay_in_target_vocabulary() {
        let wb = Workbench::build(&small_config()).unwrap();
        let case = &wb.prepared.tests[0];
        let model = wb.model(Condition::Both);
        let mask = wb.mask(Condition::Both, &case.tgt_lang).unwrap();
        let ts = test_set(case, model, &wb.segmenter);
        let out = crate::decode::decode_batch(
            model,
            &ts.sources,
            &case.tgt_lang,
            &wb.config.decode.decode_config(),
            Some(mask),
        )
        .unwrap();
        for hyps in out {
            for h in hyps {
                assert!(h.tokens.iter().all(|&t| mask.is_allowed(t)));
            }
        }
    }

    #[test]
    fn empty_removal_set_keeps_everything() {
        let prepared = prepare(&small_config()).unwrap();
        let d = denoise_all(&prepared.langid, &prepared.train, &BTreeSet::new()).unwrap();
        assert_eq!(d.clean, prepared.train);
    }

    #[test]
    fn removing_both_contains_each_single_removal() {
        let prepared = prepare(&small_config()).unwrap();
        let kept = |set: &[NoiseLabel]| {
            denoise_all(&prepared.langid, &prepared.train, &set.iter().copied().collect())
                .unwrap()
                .clean
                .iter()
                .map(Corpus::len)
                .sum::<usize>()
        };
        let total: usize = prepared.train.iter().map(Corpus::len).sum();
        let removed_copy = total - kept(&[NoiseLabel::SourceCopy]);
        let removed_mis = total - kept(&[NoiseLabel::SourceMisalign]);
        let removed_both = total - kept(&[NoiseLabel::SourceCopy, NoiseLabel::SourceMisalign]);
        assert_eq!(removed_both, removed_copy + removed_mis);
    }

    #[test]
    fn file_data_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        cmd_gen(&cfg, Some(dir.path())).unwrap();
        let corpus = |s: &str, t: &str| FileCorpus {
            src: tag(s),
            tgt: tag(t),
            path: format!("train.{s}-{t}.tsv").into(),
        };
        let files = ExperimentConfig {
            data: DataConfig::Files(FileData {
                train: vec![corpus("E", "A"), corpus("A", "E"), corpus("E", "B"), corpus("B", "E")],
                test: vec![FileTest {
                    src: tag("A"),
                    tgt: tag("B"),
                    path: "test.A-B.tsv".into(),
                    zero_shot: true,
                }],
                langid: vec![],
            }),
            ..cfg.clone()
        };
        let path = dir.path().join("files.json");
        fs::write(&path, serde_json::to_string(&files).unwrap()).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        loaded.validate().unwrap();
        let report = cmd_denoise(&loaded, Some(&dir.path().join("den"))).unwrap();
        assert_eq!(report.noise.directions.len(), 4);
        assert!(report.recovery.is_none());
        let total: usize = report.noise.directions.iter().map(|d| d.total).sum();
        assert_eq!(total, 4 * 200);
    }

    #[test]
    fn precision_recall_edges() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
        assert_eq!(precision_recall(&s(&[]), &s(&[])), (1.0, 1.0));
        assert_eq!(precision_recall(&s(&[1, 2]), &s(&[2, 3])), (0.5, 0.5));
        assert_eq!(precision_recall(&s(&[1]), &s(&[])), (0.0, 1.0));
    }
}
