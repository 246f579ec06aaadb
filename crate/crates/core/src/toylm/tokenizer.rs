//! Closed word-level vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fcn::io::write_atomic;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const FCN: &str = "<fcn>";

pub const SPECIALS: [&str; 6] = [PAD, UNK, BOS, EOS, SEP, FCN];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Specials take ids 0..6 in the order of [`SPECIALS`]; the remaining
    /// words are deduplicated and sorted so ids do not depend on input order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut rest = BTreeSet::new();
        for w in words {
            for part in w.as_ref().split_whitespace() {
                if !SPECIALS.contains(&part) {
                    rest.insert(part.to_string());
                }
            }
        }
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.unk())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn unk(&self) -> usize {
        1
    }
    pub fn bos(&self) -> usize {
        2
    }
    pub fn eos(&self) -> usize {
        3
    }
    pub fn sep(&self) -> usize {
        4
    }
    pub fn fcn(&self) -> usize {
        5
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::format(
                path,
                "vocabulary must start with the special tokens",
            ));
        }
        let tok = Self::from_words(words.iter().skip(SPECIALS.len()));
        if tok.words != words {
            return Err(Error::format(path, "vocabulary is not sorted and unique"));
        }
        Ok(tok)
    }
}
