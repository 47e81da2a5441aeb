//! Character-level tokenization of Tibetan text, plus Wylie romanization.

mod wylie;

pub use wylie::wylie_transliterate;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_RESERVED: usize = 4;

/// 216 characters plus the four reserved ids.
pub const DEFAULT_VOCAB_SIZE: usize = 216 + NUM_RESERVED;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Character ↔ id map. Ids 0..4 are PAD, UNK, BOS, EOS; characters follow densely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

/// A tokenized utterance: `BOS`, one id per character, `EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

impl Vocab {
    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + NUM_RESERVED) as u32))
            .collect();
        Vocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    /// The character for a non-reserved id.
    pub fn char(&self, id: u32) -> Option<char> {
        (id as usize)
            .checked_sub(NUM_RESERVED)
            .and_then(|i| self.chars.get(i).copied())
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Writes the vocab file: one `id<TAB>codepoint-hex` line per entry;
    /// reserved ids are written as `<pad>`, `<unk>`, `<bos>`, `<eos>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{name}");
        }
        for (i, c) in self.chars.iter().enumerate() {
            let _ = writeln!(s, "{}\t{:04X}", i + NUM_RESERVED, *c as u32);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut chars = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let n = i + 1;
            let (id, entry) = line
                .split_once('\t')
                .ok_or((n, "expected id<TAB>entry".to_string()))?;
            let id: usize = id.trim().parse().map_err(|e| (n, format!("bad id: {e}")))?;
            if id < NUM_RESERVED {
                if entry != RESERVED_NAMES[id] {
                    return Err((n, format!("id {id} must be {}", RESERVED_NAMES[id])));
                }
                continue;
            }
            if id != chars.len() + NUM_RESERVED {
                return Err((n, format!("ids must be dense, found {id}")));
            }
            let cp = u32::from_str_radix(entry.trim(), 16)
                .map_err(|e| (n, format!("bad codepoint {entry:?}: {e}")))?;
            let c = char::from_u32(cp).ok_or((n, format!("invalid codepoint {cp:X}")))?;
            if chars.contains(&c) {
                return Err((n, format!("duplicate character U+{cp:04X}")));
            }
            chars.push(c);
        }
        Ok(Vocab::from_chars(chars))
    }
}

/// Builds a vocab from character frequencies. Ties break by code point.
/// `max_size` counts the reserved ids and must be at least 4.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot build a vocab from an empty corpus".into()));
    }
    if max_size < NUM_RESERVED {
        return Err(Error::InvalidArgument(format!(
            "vocab size {max_size} cannot hold the {NUM_RESERVED} reserved ids"
        )));
    }
    let mut counts: HashMap<char, usize> = HashMap::new();
    for line in corpus {
        for c in line.as_ref().chars() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Ok(Vocab::from_chars(ranked.into_iter().map(|(c, _)| c).collect()))
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.chars().count() + 2);
    ids.push(BOS);
    ids.extend(text.chars().map(|c| vocab.id(c).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSequence {
        ids,
        source_text: text.to_string(),
    }
}

/// Inverse of [`tokenize`]: PAD/BOS/EOS are dropped, UNK renders as U+FFFD.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut s = String::new();
    for &id in ids {
        match id {
            PAD | BOS | EOS => {}
            UNK => s.push(char::REPLACEMENT_CHARACTER),
            _ => s.push(vocab.char(id).ok_or_else(|| {
                Error::InvalidArgument(format!("token id {id} outside vocab of size {}", vocab.len()))
            })?),
        }
    }
    Ok(s)
}
