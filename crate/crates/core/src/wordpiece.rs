//! Greedy longest-match-first WordPiece tokenization.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const CONTINUATION: &str = "##";
pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

/// Piece vocabulary in BERT `vocab.txt` format (one piece per line).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordpieceVocab {
    pieces: HashSet<String>,
}

impl WordpieceVocab {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_pieces(text.lines().map(str::trim_end).filter(|l| !l.is_empty()))
    }

    pub fn from_pieces<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let pieces: HashSet<String> = pieces.into_iter().map(Into::into).collect();
        for required in [UNK, PAD] {
            if !pieces.contains(required) {
                return Err(Error::Data(format!("wordpiece vocabulary lacks {required}")));
            }
        }
        Ok(WordpieceVocab { pieces })
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.pieces.contains(piece)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// Splits `word` into the longest vocabulary prefixes, left to right;
/// non-initial pieces carry the `##` prefix. Any unmatched remainder, or a
/// word longer than `max_word_chars`, yields `[UNK]` for the whole word.
pub fn wordpiece_tokenize(word: &str, vocab: &WordpieceVocab, max_word_chars: usize) -> Result<Vec<String>> {
    if word.is_empty() {
        return Err(Error::Data("cannot tokenize an empty word".into()));
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > max_word_chars {
        return Ok(vec![UNK.to_string()]);
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start > 0 {
                format!("{CONTINUATION}{body}")
            } else {
                body
            };
            if vocab.contains(&candidate) {
                found = Some((candidate, end));
                break;
            }
        }
        match found {
            Some((piece, end)) => {
                pieces.push(piece);
                start = end;
            }
            None => return Ok(vec![UNK.to_string()]),
        }
    }
    Ok(pieces)
}

/// A wordpiece sequence with its alignment back to source words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordpieceSeq {
    pub pieces: Vec<String>,
    pub word_index: Vec<usize>,
    pub is_pad: Vec<bool>,
}

impl WordpieceSeq {
    /// One piece per word.
    pub fn identity(words: &[String]) -> Self {
        WordpieceSeq {
            pieces: words.to_vec(),
            word_index: (0..words.len()).collect(),
            is_pad: vec![false; words.len()],
        }
    }

    pub fn tokenize(words: &[String], vocab: &WordpieceVocab, max_word_chars: usize) -> Result<Self> {
        let mut seq = WordpieceSeq::default();
        for (w, word) in words.iter().enumerate() {
            for piece in wordpiece_tokenize(word, vocab, max_word_chars)? {
                seq.pieces.push(piece);
                seq.word_index.push(w);
                seq.is_pad.push(false);
            }
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Checks the alignment invariants against a sentence of `num_words` words.
    pub fn validate(&self, num_words: usize) -> Result<()> {
        if self.word_index.len() != self.pieces.len() || self.is_pad.len() != self.pieces.len() {
            return Err(Error::Data("wordpiece alignment arrays differ in length".into()));
        }
        if self.word_index.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("word_index is not non-decreasing".into()));
        }
        let mut covered = vec![false; num_words];
        for (&w, &pad) in self.word_index.iter().zip(&self.is_pad) {
            if pad {
                continue;
            }
            if w >= num_words {
                return Err(Error::Data(format!("piece maps to word {w} of {num_words}")));
            }
            covered[w] = true;
        }
        if let Some(w) = covered.iter().position(|c| !c) {
            return Err(Error::Data(format!("word {w} has no wordpieces")));
        }
        Ok(())
    }

    /// Keeps the first `max_len` pieces.
    pub fn truncate(&mut self, max_len: usize) {
        self.pieces.truncate(max_len);
        self.word_index.truncate(max_len);
        self.is_pad.truncate(max_len);
    }

    /// Piece range `[first, last]` covering words `start..end`.
    pub fn piece_span(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let mut first = None;
        let mut last = None;
        for (i, (&w, &pad)) in self.word_index.iter().zip(&self.is_pad).enumerate() {
            if !pad && (start..end).contains(&w) {
                first.get_or_insert(i);
                last = Some(i);
            }
        }
        Some((first?, last?))
    }
}
