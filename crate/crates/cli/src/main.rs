use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use offtarget_core::corpus::{detokenize, load_with_sidecar, tokenize};
use offtarget_core::decode::{decode_batch, write_jsonl, DecodeRecord, DecodedHypothesis};
use offtarget_core::eval::{score_hypotheses, TestSet};
use offtarget_core::experiment::{self, read_sentences, write_json, ExperimentConfig};
use offtarget_core::langid::train_profiles;
use offtarget_core::subword::{apply_bpe_corpus, join_subwords, learn_bpe, BpeApplier, MergeList};
use offtarget_core::vocab::{build_mask, build_vocab_with_threshold, Vocabulary};
use offtarget_core::{Corpus, DecodeConfig, LangIdModel, LanguageTag, ModelConfig, ToyModel};

/// Off-target analysis toolkit for zero-shot multilingual translation.
///
/// Every global flag can also be set through an environment variable with
/// the `OFFTARGET_` prefix (`OFFTARGET_CONFIG`, `OFFTARGET_OUT`,
/// `OFFTARGET_SEED`, `OFFTARGET_THREADS`).
#[derive(Parser, Debug)]
#[command(name = "offtarget", version, about)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, env = "OFFTARGET_CONFIG")]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true, env = "OFFTARGET_OUT")]
    out: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true, env = "OFFTARGET_SEED")]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "OFFTARGET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic training, test and language-id data.
    Gen,
    /// Classify training pairs and write clean corpora plus a noise report.
    Denoise,
    /// Learn BPE merges from parallel corpora.
    LearnBpe(LearnBpeArgs),
    /// Segment a parallel corpus with learned merges.
    ApplyBpe(ApplyBpeArgs),
    /// Build the vocabulary of one language.
    BuildVocab(BuildVocabArgs),
    /// Train the translation model.
    Train(TrainArgs),
    /// Translate a file of source sentences.
    Translate(TranslateArgs),
    /// Score hypotheses with BLEU and off-target rates.
    Evaluate(EvaluateArgs),
    /// Sweep beam sizes for the vanilla and fully mitigated systems.
    Sweep,
    /// Confidence curves, probability-mass partition and on/off-target split.
    Analyze,
    /// Noise-removal ablation.
    Ablate,
    /// The full four-condition experiment.
    RunExperiment,
}

#[derive(Args, Debug)]
struct LearnBpeArgs {
    #[arg(long)]
    merges: usize,
    #[arg(long)]
    output: PathBuf,
    /// Parallel corpora (`src<TAB>tgt` with a `.meta.json` sidecar).
    #[arg(required = true)]
    corpora: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ApplyBpeArgs {
    #[arg(long)]
    merges: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long)]
    lang: String,
    #[arg(long, default_value_t = 1)]
    min_count: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(required = true)]
    corpora: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(required = true)]
    corpora: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    /// One whitespace-tokenized source sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tgt_lang: String,
    /// JSON-lines output with every beam hypothesis.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    /// Target vocabulary file; restricts output to it.
    #[arg(long)]
    mask_vocab: Option<PathBuf>,
    /// BPE merges applied to the input; output subwords are joined back.
    #[arg(long)]
    bpe: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Plain text, or `.jsonl` from `translate` (best hypothesis used).
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    src_lang: String,
    #[arg(long)]
    tgt_lang: String,
    #[arg(long)]
    zero_shot: bool,
    /// Saved language identifier.
    #[arg(long, conflicts_with = "langid_text")]
    langid_model: Option<PathBuf>,
    /// `LANG=PATH` monolingual text to train the identifier from; repeatable.
    #[arg(long)]
    langid_text: Vec<String>,
    #[arg(long)]
    output: PathBuf,
}

fn tag(s: &str) -> Result<LanguageTag> {
    Ok(LanguageTag::new(s)?)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("this command needs --config")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(cli: &Cli) -> Result<ModelConfig> {
    Ok(match cli.config {
        Some(_) => load_config(cli)?.model,
        None => ModelConfig::default(),
    })
}

fn load_corpora(paths: &[PathBuf]) -> Result<Vec<Corpus>> {
    paths
        .iter()
        .map(|p| load_with_sidecar(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn read_hypotheses(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let r: DecodeRecord = serde_json::from_str(l)?;
                Ok(r.hypotheses.first().map(|h| tokenize(&h.text)).unwrap_or_default())
            })
            .collect()
    } else {
        Ok(text.lines().map(tokenize).collect())
    }
}

fn translate(cli: &Cli, a: &TranslateArgs) -> Result<()> {
    let model = ToyModel::load(&a.model)?;
    let tgt = tag(&a.tgt_lang)?;
    let mut cfg = match cli.config {
        Some(_) => load_config(cli)?.decode.decode_config(),
        None => DecodeConfig::default(),
    };
    if let Some(b) = a.beam {
        cfg = cfg.with_beam(b);
    }
    let applier = a
        .bpe
        .as_deref()
        .map(MergeList::load)
        .transpose()?
        .map(|m| BpeApplier::new(&m));
    let mask = match &a.mask_vocab {
        Some(p) => {
            let vocab = Vocabulary::load(p, tgt.clone())?;
            let (mask, missing) = build_mask(&vocab, model.joint())?;
            if !missing.is_empty() {
                info!("{} vocabulary tokens are unknown to the model", missing.len());
            }
            Some(mask)
        }
        None => None,
    };
    let sentences = read_sentences(&a.input)?;
    let sources: Vec<_> = sentences
        .iter()
        .map(|s| {
            let pieces = applier.as_ref().map_or_else(|| s.clone(), |ap| ap.apply(s));
            model.joint().encode(&pieces)
        })
        .collect();
    let outputs = decode_batch(&model, &sources, &tgt, &cfg, mask.as_ref())?;
    let records: Vec<DecodeRecord> = sentences
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(index, (src, hyps))| DecodeRecord {
            index,
            src: detokenize(src),
            hypotheses: hyps
                .into_iter()
                .map(|h| {
                    let pieces: Vec<String> = h
                        .tokens
                        .iter()
                        .filter(|&&t| !model.joint().is_special(t))
                        .map(|&t| model.joint().token(t).to_string())
                        .collect();
                    let words = if applier.is_some() {
                        join_subwords(&pieces)
                    } else {
                        pieces
                    };
                    DecodedHypothesis {
                        text: detokenize(&words),
                        score: h.score,
                        log_prob: h.log_prob(),
                        step_logprobs: h.step_logprobs,
                    }
                })
                .collect(),
        })
        .collect();
    let file = fs::File::create(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    write_jsonl(BufWriter::new(file), &records)?;
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let langid = match (&a.langid_model, a.langid_text.is_empty()) {
        (Some(p), _) => LangIdModel::load(p)?,
        (None, false) => {
            let lid = match cli.config {
                Some(_) => load_config(cli)?.langid,
                None => Default::default(),
            };
            let mut mono: BTreeMap<LanguageTag, Vec<String>> = BTreeMap::new();
            for spec in &a.langid_text {
                let (lang, path) = spec.split_once('=').context("--langid-text expects LANG=PATH")?;
                let lines = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
                mono.entry(tag(lang)?)
                    .or_default()
                    .extend(lines.lines().filter(|l| !l.trim().is_empty()).map(String::from));
            }
            train_profiles(&mono, lid.order, lid.alpha)?
        }
        (None, true) => bail!("evaluate needs --langid-model or --langid-text"),
    };
    let hyps = read_hypotheses(&a.hyps)?;
    let refs = read_sentences(&a.refs)?;
    let test = TestSet {
        src_lang: tag(&a.src_lang)?,
        tgt_lang: tag(&a.tgt_lang)?,
        sources: vec![Vec::new(); refs.len()],
        references: refs,
    };
    let eval = score_hypotheses(&test, &hyps, &langid, a.zero_shot)?;
    write_json(&a.output, &eval)?;
    println!(
        "{}: BLEU {:.2}  OTR {:.4} (to-source {:.4}, to-others {:.4})",
        eval.direction, eval.bleu, eval.otr, eval.to_source, eval.to_others
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Gen => {
            let r = experiment::cmd_gen(&load_config(cli)?, out)?;
            println!(
                "wrote {} training, {} test and {} language-id files",
                r.train.len(),
                r.test.len(),
                r.langid.len()
            );
        }
        Command::Denoise => {
            let r = experiment::cmd_denoise(&load_config(cli)?, out)?;
            for d in &r.noise.directions {
                println!(
                    "{}: {} pairs, off-target {:.2}%",
                    d.name(),
                    d.total,
                    100.0 * d.off_target_ratio()
                );
            }
            println!(
                "average off-target {:.2}%, removed {}",
                100.0 * r.noise.average_off_target(),
                r.removed
            );
        }
        Command::LearnBpe(a) => {
            let merges = learn_bpe(&load_corpora(&a.corpora)?, a.merges)?;
            merges.save(&a.output)?;
            println!("learned {} merges", merges.len());
        }
        Command::ApplyBpe(a) => {
            let applier = BpeApplier::new(&MergeList::load(&a.merges)?);
            let corpus = load_with_sidecar(&a.input)?;
            apply_bpe_corpus(&corpus, &applier).save(&a.output)?;
        }
        Command::BuildVocab(a) => {
            let vocab = build_vocab_with_threshold(&load_corpora(&a.corpora)?, &tag(&a.lang)?, a.min_count)?;
            vocab.save(&a.output)?;
            println!("{} tokens", vocab.len());
        }
        Command::Train(a) => {
            let (model, trace) = ToyModel::train(&load_corpora(&a.corpora)?, &model_config(cli)?)?;
            model.save(&a.output)?;
            println!(
                "trained on {} pairs, final log-likelihood {:.4}",
                trace.pairs,
                trace.log_likelihood.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Translate(a) => translate(cli, a)?,
        Command::Evaluate(a) => evaluate(cli, a)?,
        Command::Sweep => {
            let r = experiment::cmd_sweep(&load_config(cli)?, out)?;
            for s in &r.sweeps {
                let cells: Vec<String> = s.rows.iter().map(|x| format!("b{} {:.3}", x.beam, x.otr)).collect();
                println!("{} {}: OTR {}", s.condition, s.direction, cells.join(", "));
            }
        }
        Command::Analyze => {
            let r = experiment::cmd_analyze(&load_config(cli)?, out)?;
            for m in &r.analysis.mass {
                println!("{} {}: off-target mass {:.4}", m.condition, m.direction, m.off_mass);
            }
        }
        Command::Ablate => {
            let r = experiment::cmd_ablate(&load_config(cli)?, out)?;
            for row in &r.rows {
                let label: Vec<&str> = row.remove.iter().map(|l| l.name()).collect();
                println!(
                    "remove [{}]: zero-shot BLEU {:.2} OTR {:.4}",
                    label.join(", "),
                    row.zero_shot_bleu.unwrap_or(f64::NAN),
                    row.zero_shot_otr.unwrap_or(f64::NAN)
                );
            }
        }
        Command::RunExperiment => {
            let r = experiment::cmd_run_experiment(&load_config(cli)?, out)?;
            for row in &r.grid {
                println!(
                    "{:<13} {:<6} BLEU {:6.2}  OTR {:.4}",
                    row.condition.name(),
                    row.direction,
                    row.bleu,
                    row.otr
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
