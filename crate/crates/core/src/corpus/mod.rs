//! Parallel-corpus data model, TSV I/O and target-language tagging.
//!
//! A corpus file holds one pair per line, `src<TAB>tgt`, with tokens separated
//! by whitespace. The declared languages live in a JSON sidecar next to the
//! data file (`<file>.meta.json`).

mod noise;
mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use noise::{inject_noise, NoiseInjection};
pub use synthetic::{generate_synthetic, rerender, Direction, SyntheticSpec};

/// Short language identifier such as `de` or `synA`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() || code.chars().any(char::is_whitespace) {
            return Err(Error::InvalidTag(code));
        }
        Ok(LanguageTag(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The reserved source-side token that requests translation into this language.
    pub fn tag_token(&self) -> String {
        format!("<2{}>", self.0)
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LanguageTag::new(s)
    }
}

impl TryFrom<String> for LanguageTag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        LanguageTag::new(s)
    }
}

impl From<LanguageTag> for String {
    fn from(tag: LanguageTag) -> String {
        tag.0
    }
}

/// Returns true if `token` has the shape of a reserved tag token (`<2xx>`).
pub fn is_tag_token(token: &str) -> bool {
    token.len() > 3 && token.starts_with("<2") && token.ends_with('>')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SentencePair {
    pub fn new(src_lang: LanguageTag, tgt_lang: LanguageTag, src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        let pair = SentencePair {
            src_lang,
            tgt_lang,
            src,
            tgt,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_lang == self.tgt_lang {
            return Err(Error::InvalidPair(format!(
                "source and target language are both {}",
                self.src_lang
            )));
        }
        for (side, tokens) in [("source", &self.src), ("target", &self.tgt)] {
            if tokens.is_empty() {
                return Err(Error::InvalidPair(format!("{side} side is empty")));
            }
            if let Some(bad) = tokens
                .iter()
                .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
            {
                return Err(Error::InvalidPair(format!(
                    "{side} token {bad:?} is empty or contains whitespace"
                )));
            }
        }
        Ok(())
    }

    pub fn src_text(&self) -> String {
        detokenize(&self.src)
    }

    pub fn tgt_text(&self) -> String {
        detokenize(&self.tgt)
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pairs: Vec<SentencePair>,
    languages: BTreeSet<LanguageTag>,
}

impl Corpus {
    pub fn new(pairs: Vec<SentencePair>, languages: BTreeSet<LanguageTag>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            p.validate().map_err(|e| Error::InvalidPair(format!("pair {i}: {e}")))?;
            for lang in [&p.src_lang, &p.tgt_lang] {
                if !languages.contains(lang) {
                    return Err(Error::InvalidPair(format!(
                        "pair {i}: language {lang} not declared by the corpus"
                    )));
                }
            }
        }
        Ok(Corpus { pairs, languages })
    }

    /// Builds a corpus whose language set is exactly the languages used by `pairs`.
    pub fn from_pairs(pairs: Vec<SentencePair>) -> Result<Self> {
        let languages = pairs
            .iter()
            .flat_map(|p| [p.src_lang.clone(), p.tgt_lang.clone()])
            .collect();
        Corpus::new(pairs, languages)
    }

    pub fn empty(languages: BTreeSet<LanguageTag>) -> Self {
        Corpus {
            pairs: Vec::new(),
            languages,
        }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn languages(&self) -> &BTreeSet<LanguageTag> {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn into_pairs(self) -> Vec<SentencePair> {
        self.pairs
    }

    /// Concatenates corpora in order; the language set is the union.
    pub fn concat<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Corpus {
        let mut out = Corpus::default();
        for c in corpora {
            out.pairs.extend(c.pairs.iter().cloned());
            out.languages.extend(c.languages.iter().cloned());
        }
        out
    }

    /// Keeps the pairs at the given positions, preserving order.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Corpus {
        Corpus {
            pairs: self
                .pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, p)| p.clone())
                .collect(),
            languages: self.languages.clone(),
        }
    }

    /// Writes the corpus as `src<TAB>tgt` lines. Does not write a sidecar.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.pairs {
            writeln!(w, "{}\t{}", p.src_text(), p.tgt_text()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes the TSV data file plus its `.meta.json` sidecar. The corpus must
    /// hold a single direction.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (src_lang, tgt_lang) = match self.direction() {
            Some(d) => d,
            None => {
                return Err(Error::InvalidPair(
                    "only single-direction corpora can be saved with a sidecar".into(),
                ))
            }
        };
        self.save_tsv(path)?;
        let meta = CorpusMeta { src_lang, tgt_lang };
        let meta_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&meta)?;
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(meta_path, e))
    }

    /// The single (src, tgt) direction of this corpus, or `None` if it is
    /// empty without declared languages or mixes directions.
    pub fn direction(&self) -> Option<(LanguageTag, LanguageTag)> {
        let first = self.pairs.first()?;
        let d = (first.src_lang.clone(), first.tgt_lang.clone());
        self.pairs
            .iter()
            .all(|p| p.src_lang == d.0 && p.tgt_lang == d.1)
            .then_some(d)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Reads a `src<TAB>tgt` file. Blank lines are skipped; any other line must
/// have exactly two non-empty tab-separated fields.
pub fn load_parallel(path: &Path, src_lang: &LanguageTag, tgt_lang: &LanguageTag) -> Result<Corpus> {
    if src_lang == tgt_lang {
        return Err(Error::InvalidPair(format!(
            "source and target language are both {src_lang}"
        )));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: lineno,
            message,
        };
        if fields.len() != 2 {
            return Err(parse_err(format!(
                "expected 2 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let pair = SentencePair::new(
            src_lang.clone(),
            tgt_lang.clone(),
            tokenize(fields[0]),
            tokenize(fields[1]),
        )
        .map_err(|e| parse_err(e.to_string()))?;
        pairs.push(pair);
    }
    Ok(Corpus {
        pairs,
        languages: [src_lang.clone(), tgt_lang.clone()].into_iter().collect(),
    })
}

/// Loads a corpus file using the languages declared in its sidecar.
pub fn load_with_sidecar(path: &Path) -> Result<Corpus> {
    let meta_path = sidecar_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_str(&text)?;
    load_parallel(path, &meta.src_lang, &meta.tgt_lang)
}

/// Prefixes every source side with the reserved `<2tgt>` token.
pub fn tag_corpus(corpus: &Corpus) -> Result<Corpus> {
    let reserved: BTreeSet<String> = corpus.languages.iter().map(LanguageTag::tag_token).collect();
    for p in &corpus.pairs {
        if let Some(tok) = p.src.iter().chain(&p.tgt).find(|t| reserved.contains(t.as_str())) {
            return Err(Error::ReservedCollision { token: tok.clone() });
        }
    }
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| {
            let mut src = Vec::with_capacity(p.src.len() + 1);
            src.push(p.tgt_lang.tag_token());
            src.extend(p.src.iter().cloned());
            SentencePair { src, ..p.clone() }
        })
        .collect();
    Ok(Corpus {
        pairs,
        languages: corpus.languages.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    #[test]
    fn tag_rejects_whitespace_and_empty() {
        assert!(LanguageTag::new("").is_err());
        assert!(LanguageTag::new("d e").is_err());
        assert_eq!(tag("de").tag_token(), "<2de>");
    }

    #[test]
    fn load_single_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "a b\tc d\n").unwrap();
        let c = load_parallel(&path, &tag("X"), &tag("Y")).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pairs()[0].src, vec!["a", "b"]);
        assert_eq!(c.pairs()[0].tgt, vec!["c", "d"]);
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "").unwrap();
        let c = load_parallel(&path, &tag("X"), &tag("Y")).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn load_missing_tab_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "a b c\n").unwrap();
        match load_parallel(&path, &tag("X"), &tag("Y")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "a\tb\n\nx\ty\tz\n").unwrap();
        match load_parallel(&path, &tag("X"), &tag("Y")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn save_and_reload_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let text = "a b\tc d\ne\tf g h\n";
        fs::write(&path, text).unwrap();
        let c = load_parallel(&path, &tag("X"), &tag("Y")).unwrap();
        let out = dir.path().join("d.tsv");
        c.save(&out).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), text);
        assert_eq!(load_with_sidecar(&out).unwrap(), c);
    }

    #[test]
    fn tagging_prefixes_source() {
        let p = SentencePair::new(tag("A"), tag("B"), vec!["x".into()], vec!["u".into()]).unwrap();
        let c = Corpus::from_pairs(vec![p]).unwrap();
        let t = tag_corpus(&c).unwrap();
        assert_eq!(t.pairs()[0].src, vec!["<2B>", "x"]);
        assert_eq!(t.pairs()[0].tgt, vec!["u"]);
        assert!(tag_corpus(&Corpus::default()).unwrap().is_empty());
    }

    #[test]
    fn tagging_detects_collision() {
        let p = SentencePair::new(tag("A"), tag("B"), vec!["<2B>".into()], vec!["u".into()]).unwrap();
        let c = Corpus::from_pairs(vec![p]).unwrap();
        assert!(matches!(tag_corpus(&c), Err(Error::ReservedCollision { .. })));
    }

    #[test]
    fn pair_invariants() {
        assert!(SentencePair::new(tag("A"), tag("A"), vec!["x".into()], vec!["y".into()]).is_err());
        assert!(SentencePair::new(tag("A"), tag("B"), vec![], vec!["y".into()]).is_err());
        assert!(SentencePair::new(tag("A"), tag("B"), vec!["x".into()], vec!["".into()]).is_err());
    }
}
