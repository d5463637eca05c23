//! Per-language vocabularies, the joint model vocabulary, and target-language masks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{is_tag_token, Corpus, LanguageTag};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";

/// Tokens observed on every side declared as `language`, with counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub language: LanguageTag,
    pub counts: BTreeMap<String, u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.counts.contains_key(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    /// `token<TAB>count` lines, by descending count then token.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<(&String, &u64)> = self.counts.iter().collect();
        rows.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (t, c) in rows {
            writeln!(f, "{t}\t{c}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, language: LanguageTag) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut counts = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: message.to_owned(),
            };
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>count"))?;
            let count: u64 = count.parse().map_err(|_| parse_err("count is not an integer"))?;
            if tok.is_empty() || count == 0 {
                return Err(parse_err("empty token or zero count"));
            }
            counts.insert(tok.to_owned(), count);
        }
        Ok(Vocabulary { language, counts })
    }
}

/// Builds V_lang with membership threshold 1.
pub fn build_vocab(corpora: &[Corpus], lang: &LanguageTag) -> Result<Vocabulary> {
    build_vocab_with_threshold(corpora, lang, 1)
}

/// Builds V_lang keeping tokens seen at least `min_count` times. Reserved tag
/// tokens are excluded.
pub fn build_vocab_with_threshold(corpora: &[Corpus], lang: &LanguageTag, min_count: u64) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut seen_side = false;
    for c in corpora {
        for p in c.pairs() {
            for (side_lang, tokens) in [(&p.src_lang, &p.src), (&p.tgt_lang, &p.tgt)] {
                if side_lang != lang {
                    continue;
                }
                seen_side = true;
                for t in tokens.iter().filter(|t| !is_tag_token(t)) {
                    *counts.entry(t.clone()).or_default() += 1;
                }
            }
        }
    }
    if !seen_side {
        return Err(Error::UnknownLanguage(lang.to_string()));
    }
    counts.retain(|_, c| *c >= min_count.max(1));
    Ok(Vocabulary {
        language: lang.clone(),
        counts,
    })
}

/// Dense token inventory shared by all languages.
///
/// Layout: `<unk>`, `</s>`, one `<2xx>` tag per language (sorted by code),
/// then every corpus token in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "JointVocabRepr", into = "JointVocabRepr")]
pub struct JointVocab {
    tokens: Vec<String>,
    languages: Vec<LanguageTag>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct JointVocabRepr {
    languages: Vec<LanguageTag>,
    tokens: Vec<String>,
}

impl From<JointVocabRepr> for JointVocab {
    fn from(r: JointVocabRepr) -> Self {
        JointVocab::from_parts(r.tokens, r.languages)
    }
}

impl From<JointVocab> for JointVocabRepr {
    fn from(j: JointVocab) -> Self {
        JointVocabRepr {
            languages: j.languages,
            tokens: j.tokens,
        }
    }
}

impl JointVocab {
    fn from_parts(tokens: Vec<String>, languages: Vec<LanguageTag>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        JointVocab {
            tokens,
            languages,
            index,
        }
    }

    pub fn build<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Result<Self> {
        let mut languages = BTreeSet::new();
        let mut words = BTreeSet::new();
        for c in corpora {
            languages.extend(c.languages().iter().cloned());
            for p in c.pairs() {
                for t in p.src.iter().chain(&p.tgt) {
                    if t == UNK || t == EOS {
                        return Err(Error::ReservedCollision { token: t.clone() });
                    }
                    if !is_tag_token(t) {
                        words.insert(t.clone());
                    }
                }
            }
        }
        let tags: BTreeSet<String> = languages.iter().map(LanguageTag::tag_token).collect();
        if let Some(t) = words.iter().find(|w| tags.contains(*w)) {
            return Err(Error::ReservedCollision { token: t.clone() });
        }
        let mut tokens = vec![UNK.to_owned(), EOS.to_owned()];
        tokens.extend(tags);
        tokens.extend(words);
        Ok(JointVocab::from_parts(tokens, languages.into_iter().collect()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &[LanguageTag] {
        &self.languages
    }

    pub fn unk(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn special_count(&self) -> usize {
        2 + self.languages.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.special_count()
    }

    pub fn tag_id(&self, lang: &LanguageTag) -> Option<TokenId> {
        self.languages.binary_search(lang).ok().map(|i| (2 + i) as TokenId)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids; unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_owned()).collect()
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Allowed output tokens for one target language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabMask {
    pub language: LanguageTag,
    pub allowed: Vec<bool>,
}

impl VocabMask {
    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn is_allowed(&self, id: TokenId) -> bool {
        self.allowed.get(id as usize).copied().unwrap_or(false)
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }

    pub fn all_allowed(language: LanguageTag, size: usize) -> Self {
        VocabMask {
            language,
            allowed: vec![true; size],
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.allowed.len().div_ceil(8)];
        for (i, a) in self.allowed.iter().enumerate() {
            if *a {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        bytes
    }

    /// Writes `{language, size, bits, joint_checksum}` as JSON; `bits` is a
    /// base64 little-endian bitset (bit i of byte i/8 is token i).
    pub fn save(&self, path: &Path, joint: &JointVocab) -> Result<()> {
        if joint.len() != self.len() {
            return Err(Error::MaskMismatch("mask length differs from joint vocabulary".into()));
        }
        let file = MaskFile {
            language: self.language.clone(),
            size: self.len(),
            bits: BASE64.encode(self.to_bytes()),
            joint_checksum: joint.checksum(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, joint: &JointVocab) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MaskFile = serde_json::from_str(&text)?;
        if file.joint_checksum != joint.checksum() || file.size != joint.len() {
            return Err(Error::MaskMismatch(format!(
                "{} was built for a different joint vocabulary",
                path.display()
            )));
        }
        let bytes = BASE64
            .decode(file.bits.as_bytes())
            .map_err(|e| Error::MaskMismatch(format!("bad bitset: {e}")))?;
        if bytes.len() != file.size.div_ceil(8) {
            return Err(Error::MaskMismatch("bitset length does not match size".into()));
        }
        let allowed = (0..file.size).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(VocabMask {
            language: file.language,
            allowed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    language: LanguageTag,
    size: usize,
    bits: String,
    joint_checksum: String,
}

/// Derives the mask `V_T ∪ {EOS}` over `joint`. Tags and `<unk>` are never
/// allowed. Vocabulary tokens missing from `joint` are returned alongside.
pub fn build_mask(vocab: &Vocabulary, joint: &JointVocab) -> Result<(VocabMask, Vec<String>)> {
    let mut allowed = vec![false; joint.len()];
    let mut missing = Vec::new();
    let mut any_regular = false;
    for tok in vocab.tokens() {
        match joint.id(tok) {
            Some(id) if joint.is_special(id) => {}
            Some(id) => {
                allowed[id as usize] = true;
                any_regular = true;
            }
            None => missing.push(tok.to_owned()),
        }
    }
    if !any_regular {
        return Err(Error::EmptyMask);
    }
    allowed[joint.eos() as usize] = true;
    Ok((
        VocabMask {
            language: vocab.language.clone(),
            allowed,
        },
        missing,
    ))
}
