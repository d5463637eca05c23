//! Off-target analysis and mitigation for zero-shot multilingual translation.
//!
//! The pipeline: synthetic or file corpora ([`corpus`]), optional subword
//! segmentation ([`subword`]), language identification ([`langid`]), data
//! denoising ([`denoise`]), per-language vocabularies and masks ([`vocab`]),
//! a small tagged translation model ([`toymodel`]), beam search with optional
//! vocabulary masking ([`decode`]) and evaluation ([`eval`]). [`experiment`]
//! wires them into config-driven runs.

pub mod corpus;
pub mod decode;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod langid;
pub mod rng;
pub mod subword;
pub mod toymodel;
pub mod vocab;

pub use corpus::{Corpus, LanguageTag, SentencePair, SyntheticSpec};
pub use decode::{beam_search, masked_softmax, DecodeConfig, Hypothesis, ScoreVector, Scorer};
pub use denoise::{filter_corpus, NoiseLabel, NoiseReport};
pub use error::{Error, Result};
pub use langid::LangIdModel;
pub use toymodel::{ModelConfig, ToyModel};
pub use vocab::{JointVocab, TokenId, VocabMask, Vocabulary};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
