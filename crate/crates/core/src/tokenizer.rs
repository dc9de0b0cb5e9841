//! Deterministic word/punctuation tokenizer over a closed vocabulary.
//!
//! Every piece keeps its leading space (if any), so decoding is plain
//! concatenation and `decode(encode(x)) == x` for every input.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
/// End-of-meeting marker; no natural text ever encodes to it.
pub const EOM_ID: TokenId = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[EOM]"];

fn piece_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r" ?[A-Za-z0-9_']+| ?[^\sA-Za-z0-9_']|\s+").unwrap())
}

/// Splits text into surface pieces. Concatenating the pieces gives back the input.
pub fn pieces(text: &str) -> impl Iterator<Item = &str> {
    piece_pattern().find_iter(text).map(|m| m.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    /// Maximum vocabulary size including reserved entries.
    limit: Option<usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(None)
    }
}

impl Tokenizer {
    pub fn new(limit: Option<usize>) -> Self {
        let mut tok = Tokenizer {
            tokens: Vec::new(),
            index: HashMap::new(),
            limit,
        };
        for r in RESERVED {
            tok.index.insert(r.to_string(), tok.tokens.len() as TokenId);
            tok.tokens.push(r.to_string());
        }
        tok
    }

    /// Builds a vocabulary from `texts` in first-seen order.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, limit: Option<usize>) -> Result<Self> {
        let mut tok = Self::new(limit);
        for text in texts {
            tok.encode_extend(text)?;
        }
        Ok(tok)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes text, adding unseen pieces to the vocabulary.
    pub fn encode_extend(&mut self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for p in pieces(text) {
            let id = match self.index.get(p) {
                Some(&id) => id,
                None => {
                    if let Some(limit) = self.limit {
                        if self.tokens.len() >= limit {
                            return Err(Error::VocabOverflow {
                                limit,
                                token: p.to_string(),
                            });
                        }
                    }
                    let id = self.tokens.len() as TokenId;
                    self.tokens.push(p.to_string());
                    self.index.insert(p.to_string(), id);
                    id
                }
            };
            out.push(id);
        }
        Ok(out)
    }

    /// Encodes text against the frozen vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        pieces(text)
            .map(|p| self.id(p).ok_or_else(|| Error::UnknownToken(p.to_string())))
            .collect()
    }

    /// Concatenates pieces. `[PAD]`, `[BOS]` and `[EOS]` render as nothing.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            if let Some(p) = self.piece(id) {
                out.push_str(p);
            }
        }
        out
    }

    /// Piece text with its leading space removed, for display.
    pub fn display_piece(&self, id: TokenId) -> &str {
        self.piece(id).map(str::trim_start).unwrap_or("")
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut tok: Tokenizer = serde_json::from_str(s)?;
        if tok.tokens.len() < RESERVED.len()
            || tok.tokens[..RESERVED.len()] != RESERVED.map(String::from)
        {
            return Err(Error::InvalidArgument(
                "vocabulary does not start with the reserved entries".into(),
            ));
        }
        tok.rebuild_index();
        Ok(tok)
    }
}
