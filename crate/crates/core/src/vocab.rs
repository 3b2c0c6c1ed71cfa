//! Shared word-level vocabulary and the two input layouts the models consume.
//!
//! Tokens are whitespace-delimited and lowercased. Ids 0-3 are reserved for
//! `[CLS]`, `[SEP]`, `[PAD]` and `[UNK]`; corpus tokens follow in order of
//! descending frequency, ties broken lexicographically, so the same corpus
//! always yields the same ids.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];
pub const FORMAT_VERSION: u32 = 1;

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_frequency: usize,
}

/// On-disk layout of a vocabulary file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    min_frequency: usize,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<'s, I>(corpus: I, min_frequency: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'s str>,
    {
        if min_frequency == 0 {
            return Err(Error::Config("min_frequency must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut sentences = 0usize;
        for sentence in corpus {
            sentences += 1;
            for tok in tokenize(sentence) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if sentences == 0 {
            return Err(Error::Empty("vocabulary corpus has no sentences".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_frequency && !SPECIALS.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t)).collect();
        Ok(Self::from_tokens(tokens, min_frequency))
    }

    fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index, min_frequency }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of an already-lowercased token, `UNK` when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id(&t)).collect()
    }

    /// Cross-encoder layout: `[CLS] source [SEP] target [SEP]`, padded.
    ///
    /// Over-length pairs lose tokens from the end of the currently longer
    /// side, one at a time (the target side on ties).
    pub fn encode_pair(&self, source: &str, target: &str, max_seq_len: usize) -> Result<EncodedPair> {
        if max_seq_len < 5 {
            return Err(Error::Config(format!("max_seq_len must be at least 5, got {max_seq_len}")));
        }
        let mut src = self.ids(source);
        let mut tgt = self.ids(target);
        let budget = max_seq_len - 3;
        while src.len() + tgt.len() > budget {
            if src.len() > tgt.len() {
                src.pop();
            } else {
                tgt.pop();
            }
        }
        let mut ids = Vec::with_capacity(max_seq_len);
        ids.push(CLS);
        ids.extend_from_slice(&src);
        ids.push(SEP);
        let split = ids.len();
        ids.extend_from_slice(&tgt);
        ids.push(SEP);
        let real = ids.len();
        let segment_mask = (0..max_seq_len).map(|i| u8::from(i >= split && i < real)).collect();
        Ok(EncodedPair::finish(ids, segment_mask, max_seq_len))
    }

    /// Single-sentence layout: `[CLS] tokens [SEP]`, tail-truncated and padded.
    pub fn encode_single(&self, sentence: &str, max_seq_len: usize) -> Result<EncodedPair> {
        if max_seq_len < 5 {
            return Err(Error::Config(format!("max_seq_len must be at least 5, got {max_seq_len}")));
        }
        let mut toks = self.ids(sentence);
        toks.truncate(max_seq_len - 2);
        let mut ids = Vec::with_capacity(max_seq_len);
        ids.push(CLS);
        ids.extend_from_slice(&toks);
        ids.push(SEP);
        Ok(EncodedPair::finish(ids, vec![0; max_seq_len], max_seq_len))
    }

    /// In-vocabulary content tokens of an encoding; specials, padding and `[UNK]` are dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().filter(|&&i| i > UNK).filter_map(|&i| self.token(i)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { version: FORMAT_VERSION, min_frequency: v.min_frequency, tokens: v.tokens }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabFile) -> Result<Self> {
        if file.version != FORMAT_VERSION {
            return Err(Error::Version { found: file.version, expected: FORMAT_VERSION });
        }
        if file.tokens.len() < SPECIALS.len() || file.tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with the four special tokens".into()));
        }
        let vocab = Vocabulary::from_tokens(file.tokens, file.min_frequency);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

/// Token ids with segment and attention masks, all of equal length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<u32>,
    /// 0 for the source side (including `[CLS]` and the first `[SEP]`), 1 for the target side.
    pub segment_mask: Vec<u8>,
    /// 1 for real positions, 0 for padding.
    pub attention_mask: Vec<u8>,
}

impl EncodedPair {
    fn finish(mut ids: Vec<u32>, segment_mask: Vec<u8>, max_seq_len: usize) -> Self {
        let real = ids.len();
        ids.resize(max_seq_len, PAD);
        let attention_mask = (0..max_seq_len).map(|i| u8::from(i < real)).collect();
        EncodedPair { ids, segment_mask, attention_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions; real positions always form a prefix.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}
