//! Toy language encoder: closed-vocabulary tokenizer and a mean-pooled embedding network.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary with `<PAD>` = 0, `<UNK>` = 1 and `words` after them in order.
    /// Words are lowercased; duplicates are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: BTreeMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD);
        v.index.insert(UNK_TOKEN.to_string(), UNK);
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len());
                v.tokens.push(w);
            }
        }
        v
    }

    /// Parses the one-token-per-line file format.
    pub fn from_lines(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(Error::data("vocabulary must start with <PAD> and <UNK> lines"));
        }
        let v = Vocabulary::new(lines[2..].iter().copied());
        if v.len() != lines.len() {
            return Err(Error::data("vocabulary contains duplicate or non-lowercase tokens"));
        }
        Ok(v)
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token_at(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn non_pad(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }
}

/// Splits into lowercase words on whitespace and ASCII punctuation.
pub fn words(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Tokenizes, truncating or PAD-filling to `max_len`.
pub fn tokenize(prompt: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<usize> = words(prompt).take(max_len).map(|w| vocab.lookup(&w)).collect();
    ids.resize(max_len, PAD);
    TokenSequence { ids }
}

pub const EMBEDDING: &str = "text_encoder.embedding";
pub const PROJ_WEIGHT: &str = "text_encoder.proj.weight";
pub const PROJ_BIAS: &str = "text_encoder.proj.bias";

/// `tanh(mean(E[non-PAD ids]) W + b)` as a `[D]` value.
pub fn encode_text(tape: &mut Tape, seq: &TokenSequence, store: &ParamStore) -> Result<Var> {
    let table = tape.param(store, EMBEDDING)?;
    let d = tape.value(table).shape()[1];
    let pooled = tape.embed_mean(table, &seq.ids, PAD)?;
    let row = tape.reshape(pooled, &[1, d])?;
    let w = tape.param(store, PROJ_WEIGHT)?;
    let proj = tape.matmul(row, w)?;
    let dout = tape.value(proj).shape()[1];
    let flat = tape.reshape(proj, &[dout])?;
    let b = tape.param(store, PROJ_BIAS)?;
    let pre = tape.add(flat, b)?;
    Ok(tape.tanh(pre))
}
