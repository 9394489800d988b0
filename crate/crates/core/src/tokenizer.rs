//! Text normalization and greedy longest-match WordPiece encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
const RESERVED: [&str; 3] = [PAD, UNK, CLS];

/// Words longer than this many characters encode to a single `[UNK]`.
pub const MAX_WORD_LEN: usize = 100;

/// Continuation-piece marker.
pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens; ids start at 3.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::invalid(format!("vocab line {i} must be {want}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("vocab token {i} is empty or contains whitespace")));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocab token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_full_list(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("valid regex"))
}

/// Lowercases, replaces every Unicode punctuation codepoint with a space,
/// collapses whitespace runs and trims.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let spaced = punctuation().replace_all(&lower, " ");
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Greedy longest-match-first WordPiece over a single whitespace-free word.
pub fn wordpiece(word: &str, vocab: &Vocabulary, max_word_len: usize) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > max_word_len {
        return vec![UNK_ID];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece.insert_str(0, CONTINUATION);
            }
            if let Some(id) = vocab.id(&piece) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => pieces.push(id),
            None => return vec![UNK_ID],
        }
        start = end;
    }
    pieces
}

/// Normalizes, splits on whitespace and WordPiece-encodes each word.
pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    normalize(text)
        .split(' ')
        .flat_map(|w| wordpiece(w, vocab, MAX_WORD_LEN))
        .collect()
}

/// Reserved tokens followed by the most frequent normalized words, up to
/// `target_size` entries in total. Ties break lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary> {
    if target_size <= RESERVED.len() {
        return Err(Error::invalid(format!("vocab size must exceed {}", RESERVED.len())));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for w in normalize(doc.as_ref()).split_whitespace() {
            if RESERVED.contains(&w) {
                continue;
            }
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(target_size - RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(w, _)| w))
}
