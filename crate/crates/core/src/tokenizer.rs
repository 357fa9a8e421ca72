//! Atom-level SMILES lexing and the token vocabulary.
//!
//! Bracket atoms (`[O-]`, `[C@@H]`), the two-letter halogens `Cl`/`Br`, and
//! two-digit ring closures (`%12`) are single tokens; every other character is
//! its own token.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("empty SMILES string")]
    Empty,
    #[error("unterminated bracket atom starting at byte {0}")]
    UnterminatedBracket(usize),
    #[error("character {ch:?} at byte {pos} is outside the SMILES alphabet")]
    InvalidChar { ch: char, pos: usize },
    #[error("ring closure '%' at byte {0} must be followed by two digits")]
    BadPercentClosure(usize),
}

/// Lexical problem reported by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LexFault {
    Token(TokenizeError),
    /// `)` with no matching `(`.
    UnmatchedCloseParen { pos: usize },
    /// `(` never closed.
    UnclosedParen { pos: usize },
    /// Ring-closure label opened but never closed.
    UnclosedRing { label: String },
}

impl fmt::Display for LexFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LexFault::Token(e) => write!(f, "{e}"),
            LexFault::UnmatchedCloseParen { pos } => {
                write!(f, "unbalanced parenthesis: ')' at byte {pos} has no opening '('")
            }
            LexFault::UnclosedParen { pos } => {
                write!(f, "unbalanced parenthesis: '(' at byte {pos} is never closed")
            }
            LexFault::UnclosedRing { label } => {
                write!(f, "ring closure {label} opened, never closed")
            }
        }
    }
}

/// Content tokens of one SMILES string (no special tokens).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    /// Sequence length once BOS and EOS are added.
    pub fn len_with_specials(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn joined(&self) -> String {
        self.tokens.concat()
    }
}

// `H` is deliberately absent: outside brackets it is not an organic-subset atom.
const SINGLE_CHAR: &str = "BCNOPSFIbcnops0123456789()=#$:/\\.-+@*";

fn is_single_char_token(c: char) -> bool {
    SINGLE_CHAR.contains(c)
}

/// Splits a SMILES string into atom-level tokens.
pub fn tokenize(smiles: &str) -> Result<TokenSequence, TokenizeError> {
    if smiles.is_empty() {
        return Err(TokenizeError::Empty);
    }
    let bytes = smiles.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < smiles.len() {
        let c = smiles[pos..].chars().next().expect("in bounds");
        let len = match c {
            '[' => match smiles[pos + 1..].find(']') {
                Some(close) => {
                    let inner = &smiles[pos + 1..pos + 1 + close];
                    if inner.is_empty() || inner.contains('[') {
                        return Err(TokenizeError::UnterminatedBracket(pos));
                    }
                    if let Some((off, ch)) = inner
                        .char_indices()
                        .find(|(_, ch)| !(ch.is_ascii_alphanumeric() || "+-@:.#=$/\\*".contains(*ch)))
                    {
                        return Err(TokenizeError::InvalidChar {
                            ch,
                            pos: pos + 1 + off,
                        });
                    }
                    close + 2
                }
                None => return Err(TokenizeError::UnterminatedBracket(pos)),
            },
            'C' if bytes.get(pos + 1) == Some(&b'l') => 2,
            'B' if bytes.get(pos + 1) == Some(&b'r') => 2,
            '%' => {
                let digits = bytes.get(pos + 1..pos + 3);
                match digits {
                    Some(d) if d.iter().all(u8::is_ascii_digit) => 3,
                    _ => return Err(TokenizeError::BadPercentClosure(pos)),
                }
            }
            c if is_single_char_token(c) => 1,
            ch => return Err(TokenizeError::InvalidChar { ch, pos }),
        };
        tokens.push(smiles[pos..pos + len].to_string());
        pos += len;
    }
    Ok(TokenSequence { tokens })
}

fn is_ring_label(token: &str) -> bool {
    (token.len() == 1 && token.as_bytes()[0].is_ascii_digit()) || token.starts_with('%')
}

/// Lexical well-formedness check. An empty result means the string is valid.
pub fn validate(smiles: &str) -> Vec<LexFault> {
    let seq = match tokenize(smiles) {
        Ok(seq) => seq,
        Err(e) => return vec![LexFault::Token(e)],
    };
    let mut faults = Vec::new();
    let mut open_parens = Vec::new();
    let mut open_rings: Vec<&str> = Vec::new();
    let mut pos = 0;
    for tok in &seq.tokens {
        match tok.as_str() {
            "(" => open_parens.push(pos),
            ")" => {
                if open_parens.pop().is_none() {
                    faults.push(LexFault::UnmatchedCloseParen { pos });
                }
            }
            t if is_ring_label(t) => {
                if let Some(i) = open_rings.iter().position(|r| *r == t) {
                    open_rings.remove(i);
                } else {
                    open_rings.push(t);
                }
            }
            _ => {}
        }
        pos += tok.len();
    }
    faults.extend(open_parens.into_iter().map(|pos| LexFault::UnclosedParen { pos }));
    faults.extend(open_rings.into_iter().map(|label| LexFault::UnclosedRing {
        label: label.to_string(),
    }));
    faults
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no corpus row could be tokenized")]
    NothingTokenized,
    #[error("sequence of length {needed} (with BOS/EOS) exceeds max_len {max_len}")]
    TooLong { needed: usize, max_len: usize },
    #[error("vocabulary line {line}: {reason}")]
    BadFile { line: usize, reason: String },
}

/// Token ↔ id map. Ids `0..4` are PAD, BOS, EOS, UNK; learned tokens follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Fixed-length id row plus validity flags (1 on non-PAD positions).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub valid: Vec<u8>,
}

impl Vocabulary {
    /// One id per distinct token, ordered by descending frequency and then
    /// lexicographically. Rows that fail to tokenize are ignored.
    pub fn build<'a, I>(corpus: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut rows = 0;
        let mut ok = 0;
        for smiles in corpus {
            rows += 1;
            if let Ok(seq) = tokenize(smiles) {
                ok += 1;
                for t in seq.tokens {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        if rows == 0 {
            return Err(VocabError::EmptyCorpus);
        }
        if ok == 0 {
            return Err(VocabError::NothingTokenized);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(VocabError::BadFile {
                    line: i + 1,
                    reason: "empty or multi-line token".into(),
                });
            }
            if index.insert(t.clone(), (i + RESERVED) as u32).is_some() {
                return Err(VocabError::BadFile {
                    line: i + 1,
                    reason: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    /// Parses the on-disk form: one token per line, id = line index + 4.
    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    /// Total number of ids including the reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            UNK => Some("<unk>"),
            _ => self.tokens.get(id as usize - RESERVED).map(String::as_str),
        }
    }

    /// BOS + tokens + EOS, then PAD up to `max_len`.
    pub fn encode(&self, seq: &TokenSequence, max_len: usize) -> Result<Encoded, VocabError> {
        let needed = seq.len_with_specials();
        if needed > max_len {
            return Err(VocabError::TooLong { needed, max_len });
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(seq.tokens.iter().map(|t| self.id(t)));
        ids.push(EOS);
        let mut valid = vec![1; ids.len()];
        ids.resize(max_len, PAD);
        valid.resize(max_len, 0);
        Ok(Encoded { ids, valid })
    }

    /// Content tokens for an id row; PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }
}
