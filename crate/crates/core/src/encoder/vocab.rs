use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const MASK: u32 = 2;
pub const PAD: u32 = 3;
pub const UNK: u32 = 4;

pub const RESERVED: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];
pub const MASK_TOKEN: &str = "[MASK]";

/// Splits text into lowercased word and punctuation tokens.
///
/// Whitespace-delimited reserved literals such as `[MASK]` are kept whole.
pub fn split_words(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        if RESERVED.contains(&chunk) {
            tokens.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '_' || ch == '\'' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Word-level vocabulary with the reserved block at ids 0..5.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for word in words {
            if index.contains_key(&word) {
                return Err(Error::Config(format!("duplicate vocabulary entry `{word}`")));
            }
            index.insert(word.clone(), tokens.len() as u32);
            tokens.push(word);
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from training text. Tokens are ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for token in split_words(text) {
                if !RESERVED.contains(&token.as_str()) {
                    *counts.entry(token).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t)).expect("counted tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; line `i` holds id `i + 5`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for token in &self.tokens[RESERVED.len()..] {
            writeln!(out, "{token}").expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}

/// Maps text to token ids; unknown words become `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    split_words(text).iter().map(|t| vocab.id(t)).collect()
}

/// `[CLS] history [SEP] target`, with a parallel special-token mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    special: Vec<bool>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn special_mask(&self) -> &[bool] {
        &self.special
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Returns a copy with the given non-special positions replaced by `[MASK]`.
    pub fn with_masked(&self, positions: &[bool]) -> Self {
        debug_assert_eq!(positions.len(), self.ids.len());
        let ids = self
            .ids
            .iter()
            .zip(positions)
            .zip(&self.special)
            .map(|((&id, &m), &s)| if m && !s { MASK } else { id })
            .collect();
        Self {
            ids,
            special: self.special.clone(),
        }
    }
}

/// Packs history and target tokens into one sequence of at most `max_len`.
///
/// On overflow the oldest history tokens are dropped; the target is never
/// truncated.
pub fn pack_sequence(history: &[u32], target: &[u32], max_len: usize) -> Result<TokenSequence> {
    if target.is_empty() {
        return Err(Error::Sequence("target must contain at least one token".into()));
    }
    if target.len() + 2 > max_len {
        return Err(Error::Sequence(format!(
            "target of {} tokens plus [CLS] and [SEP] exceeds max_len {max_len}",
            target.len()
        )));
    }
    let room = max_len - target.len() - 2;
    let history = &history[history.len().saturating_sub(room)..];
    let n = history.len() + target.len() + 2;
    let mut ids = Vec::with_capacity(n);
    let mut special = Vec::with_capacity(n);
    ids.push(CLS);
    special.push(true);
    ids.extend_from_slice(history);
    special.extend(std::iter::repeat_n(false, history.len()));
    ids.push(SEP);
    special.push(true);
    ids.extend_from_slice(target);
    special.extend(std::iter::repeat_n(false, target.len()));
    Ok(TokenSequence { ids, special })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_words_handles_punctuation_and_reserved() {
        assert_eq!(split_words("Hello, world"), vec!["hello", ",", "world"]);
        assert_eq!(split_words("a [MASK] b"), vec!["a", "[MASK]", "b"]);
        assert_eq!(split_words("it's ok?!"), vec!["it's", "ok", "?", "!"]);
        assert!(split_words("").is_empty());
    }

    #[test]
    fn tokenize_maps_unknowns() {
        let vocab = Vocabulary::build(["hello , world", "hello"], 1);
        assert_eq!(vocab.id("hello"), 5);
        let ids = tokenize("Hello, world", &vocab);
        assert_eq!(ids, vec![vocab.id("hello"), vocab.id(","), vocab.id("world")]);
        assert_eq!(tokenize("zebra", &vocab), vec![UNK]);
        assert_eq!(tokenize("[MASK] hello", &vocab), vec![MASK, 5]);
        assert!(tokenize("", &vocab).is_empty());
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = Vocabulary::build(["b a a c c c"], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "c\na\nb\n");
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    }

    #[test]
    fn pack_fits() {
        let seq = pack_sequence(&[10, 11, 12], &[20, 21], 256).unwrap();
        assert_eq!(seq.ids(), &[CLS, 10, 11, 12, SEP, 20, 21]);
        assert_eq!(seq.special_mask(), &[true, false, false, false, true, false, false]);
    }

    #[test]
    fn pack_truncates_history_front() {
        let history: Vec<u32> = (0..300).map(|i| 100 + i).collect();
        let target: Vec<u32> = vec![7; 10];
        let seq = pack_sequence(&history, &target, 256).unwrap();
        assert_eq!(seq.len(), 256);
        assert_eq!(seq.ids()[1], 100 + 56);
        assert_eq!(seq.ids()[244], 399);
        assert_eq!(seq.ids()[245], SEP);
    }

    #[test]
    fn pack_rejects_bad_targets() {
        assert!(pack_sequence(&[1], &[], 10).is_err());
        assert!(pack_sequence(&[], &[9; 9], 10).is_err());
        assert_eq!(pack_sequence(&[5; 4], &[9; 8], 10).unwrap().len(), 10);
    }
}
