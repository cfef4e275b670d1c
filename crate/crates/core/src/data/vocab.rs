use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this (in chars) map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// Subword vocabulary. The line number of a token in a vocab file is its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
    cls: usize,
    sep: usize,
}

impl Vocab {
    /// `[PAD]` must be id 0; `[UNK]`, `[CLS]` and `[SEP]` must be present.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocab entry {t:?}")));
            }
        }
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(Error::Config(format!("vocab id 0 must be {PAD}")));
        }
        let find = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocab is missing {t}")))
        };
        let (unk, cls, sep) = (find(UNK)?, find(CLS)?, find(SEP)?);
        Ok(Self {
            tokens,
            index,
            unk,
            cls,
            sep,
        })
    }

    /// Reserved tokens followed by each distinct word in first-seen order.
    /// Every listed word tokenizes to itself.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Self::new(tokens).expect("reserved tokens present")
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    /// Greedy longest-match-first WordPiece over one word. Pieces after the
    /// first are looked up with the `##` prefix. A word with any unmatchable
    /// remainder becomes a single `[UNK]`.
    pub fn wordpiece_ids(&self, word: &str) -> Vec<usize> {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![self.unk];
        }
        let mut boundaries: Vec<usize> = chars.iter().map(|(b, _)| *b).collect();
        boundaries.push(word.len());

        let mut ids = Vec::new();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION_PREFIX);
                }
                piece.push_str(&word[boundaries[start]..boundaries[end]]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => ids.push(id),
                None => return vec![self.unk],
            }
            start = end;
        }
        ids
    }
}

/// Subword strings of `word` under greedy longest-match WordPiece.
pub fn wordpiece_tokenize(word: &str, vocab: &Vocab) -> Vec<String> {
    vocab
        .wordpiece_ids(word)
        .into_iter()
        .map(|id| vocab.tokens[id].clone())
        .collect()
}
