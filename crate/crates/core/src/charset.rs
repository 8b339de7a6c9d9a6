//! Polytonic character inventory and the character <-> class-index bijection.
//!
//! Class index 0 is the CTC blank and never maps to a printable character.
//! Characters occupy indices `1..=N` in file line order.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// The shipped polytonic charset (space, punctuation, Greek and Greek Extended letters).
pub const POLYTONIC_CHARSET: &str = include_str!("../assets/polytonic.charset");

/// Class index reserved for the CTC blank.
pub const BLANK: usize = 0;

#[derive(Debug, Error)]
pub enum CharsetError {
    #[error("charset file is empty")]
    Empty,
    #[error("line {line}: expected exactly one character, found {found:?}")]
    MultiCharacter { line: usize, found: String },
    #[error("line {line}: character {ch:?} (U+{code:04X}) already defined on line {first}")]
    Duplicate {
        line: usize,
        first: usize,
        ch: char,
        code: u32,
    },
    #[error("line {line}: character U+{code:04X} is not in composed (NFC) form")]
    NotComposed { line: usize, code: u32 },
    #[error("character {ch:?} (U+{code:04X}) at position {position} is not in the charset")]
    OutOfCharset {
        ch: char,
        code: u32,
        position: usize,
    },
    #[error("class index {0} cannot be decoded (blank or out of range)")]
    BadIndex(usize),
    #[error("invalid code point {0:#x}")]
    BadCodePoint(u32),
    #[error("charset file is not valid UTF-8: {0}")]
    Io(#[from] std::io::Error),
}

/// A ground-truth label sequence: class indices in `1..=N`, never blank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LabelSeq(pub Vec<usize>);

impl LabelSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for LabelSeq {
    fn from(v: Vec<usize>) -> Self {
        LabelSeq(v)
    }
}

/// Bijection between characters and class indices; immutable once built.
#[derive(Clone, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl fmt::Debug for Charset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Charset")
            .field("size", &self.size())
            .finish()
    }
}

/// NFC-normalize text. Applied to every transcript at ingestion.
pub fn normalize(text: &str) -> String {
    text.nfc().collect()
}

/// Folds oxia-accented code points onto their tonos equivalents.
///
/// NFC performs this mapping already; the table exists for callers that
/// post-process text which bypassed normalization (e.g. raw external output).
pub fn fold_oxia(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{1F71}' => 'ά',
            '\u{1F73}' => 'έ',
            '\u{1F75}' => 'ή',
            '\u{1F77}' => 'ί',
            '\u{1F79}' => 'ό',
            '\u{1F7B}' => 'ύ',
            '\u{1F7D}' => 'ώ',
            '\u{1FBB}' => 'Ά',
            '\u{1FC9}' => 'Έ',
            '\u{1FCB}' => 'Ή',
            '\u{1FDB}' => 'Ί',
            '\u{1FF9}' => 'Ό',
            '\u{1FEB}' => 'Ύ',
            '\u{1FFB}' => 'Ώ',
            '\u{1FD3}' => 'ΐ',
            '\u{1FE3}' => 'ΰ',
            other => other,
        })
        .collect()
}

impl Charset {
    /// Builds a charset from an ordered character list (index `k` ↦ class `k + 1`).
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self, CharsetError> {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for (i, ch) in chars.into_iter().enumerate() {
            let line = i + 1;
            let composed: String = ch.to_string().nfc().collect();
            if composed.chars().count() != 1 || composed.chars().next() != Some(ch) {
                return Err(CharsetError::NotComposed {
                    line,
                    code: ch as u32,
                });
            }
            if let Some(&first) = index.get(&ch) {
                return Err(CharsetError::Duplicate {
                    line,
                    first,
                    ch,
                    code: ch as u32,
                });
            }
            index.insert(ch, line);
            list.push(ch);
        }
        if list.is_empty() {
            return Err(CharsetError::Empty);
        }
        Ok(Charset { chars: list, index })
    }

    /// Parses the charset file format: UTF-8, one character per non-empty line.
    pub fn parse(text: &str) -> Result<Self, CharsetError> {
        let mut chars = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let mut it = line.chars();
            let ch = it.next().expect("non-empty line");
            if it.next().is_some() {
                return Err(CharsetError::MultiCharacter {
                    line: i + 1,
                    found: line.to_string(),
                });
            }
            chars.push(ch);
        }
        Self::from_chars(chars)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CharsetError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// The charset shipped with the crate (≥ 200 polytonic characters).
    pub fn polytonic() -> Self {
        Self::parse(POLYTONIC_CHARSET).expect("shipped charset is valid")
    }

    pub fn from_code_points(points: &[u32]) -> Result<Self, CharsetError> {
        let chars = points
            .iter()
            .map(|&p| char::from_u32(p).ok_or(CharsetError::BadCodePoint(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_chars(chars)
    }

    pub fn code_points(&self) -> Vec<u32> {
        self.chars.iter().map(|&c| c as u32).collect()
    }

    /// Number of printable characters (N).
    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    /// Total class count including blank (N + 1).
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn blank_index(&self) -> usize {
        BLANK
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, ch: char) -> bool {
        self.index.contains_key(&ch)
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        if index == BLANK {
            return None;
        }
        self.chars.get(index - 1).copied()
    }

    /// Encodes NFC-normalized `text`; fails on the first out-of-charset character.
    pub fn encode(&self, text: &str) -> Result<LabelSeq, CharsetError> {
        normalize(text)
            .chars()
            .enumerate()
            .map(|(position, ch)| {
                self.index_of(ch).ok_or(CharsetError::OutOfCharset {
                    ch,
                    code: ch as u32,
                    position,
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(LabelSeq)
    }

    pub fn decode(&self, seq: &LabelSeq) -> Result<String, CharsetError> {
        self.decode_indices(seq.as_slice())
    }

    pub fn decode_indices(&self, indices: &[usize]) -> Result<String, CharsetError> {
        indices
            .iter()
            .map(|&i| self.char_at(i).ok_or(CharsetError::BadIndex(i)))
            .collect()
    }

    /// Distinct characters of `text` (after NFC) that the charset lacks, in first-seen order.
    pub fn missing_chars(&self, text: &str) -> Vec<char> {
        let mut out: Vec<char> = Vec::new();
        for ch in normalize(text).chars() {
            if !self.contains(ch) && !out.contains(&ch) {
                out.push(ch);
            }
        }
        out
    }

    /// Serializes to the charset file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::with_capacity(self.chars.len() * 3);
        for ch in &self.chars {
            s.push(*ch);
            s.push('\n');
        }
        s
    }
}
