//! Token inventory: the dense set of frame-level labels.
//!
//! One token is the word separator; an optional repetition token stands in
//! for the second of two identical consecutive letters so that run-collapse
//! decoding stays unambiguous.

use crate::error::{CoreError, Result};
use std::collections::HashMap;

pub type TokenId = usize;

pub const SEPARATOR_SYMBOL: &str = "<sep>";
pub const REPETITION_SYMBOL: &str = "<rep>";

#[derive(Clone, Debug)]
pub struct TokenSet {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    separator: TokenId,
    repetition: Option<TokenId>,
}

impl TokenSet {
    /// Builds a token set from single-character symbols plus the separator
    /// and, optionally, the repetition token (appended in that order).
    pub fn from_chars(chars: &str, with_repetition: bool) -> Result<Self> {
        let mut symbols: Vec<String> = Vec::new();
        for c in chars.chars() {
            symbols.push(c.to_string());
        }
        symbols.push(SEPARATOR_SYMBOL.to_string());
        if with_repetition {
            symbols.push(REPETITION_SYMBOL.to_string());
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(CoreError::data(format!("duplicate token symbol {s:?}")));
            }
        }
        let separator = index[SEPARATOR_SYMBOL];
        let repetition = index.get(REPETITION_SYMBOL).copied();
        Ok(TokenSet {
            symbols,
            index,
            separator,
            repetition,
        })
    }

    /// The default inventory: a–z, apostrophe, period, separator (29 tokens)
    /// plus the repetition token.
    pub fn english() -> Self {
        TokenSet::from_chars("abcdefghijklmnopqrstuvwxyz'.", true).expect("static symbols")
    }

    /// Rebuilds a token set from an explicit symbol list (one separator
    /// required, repetition optional); the order fixes the token indices.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(CoreError::data(format!("duplicate token symbol {s:?}")));
            }
        }
        let separator = *index
            .get(SEPARATOR_SYMBOL)
            .ok_or_else(|| CoreError::data("token list lacks the separator symbol"))?;
        let repetition = index.get(REPETITION_SYMBOL).copied();
        Ok(TokenSet {
            symbols,
            index,
            separator,
            repetition,
        })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn separator(&self) -> TokenId {
        self.separator
    }

    pub fn repetition(&self) -> Option<TokenId> {
        self.repetition
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id]
    }

    pub fn lookup(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn token_for_char(&self, c: char) -> Result<TokenId> {
        self.lookup(&c.to_string())
            .ok_or_else(|| CoreError::data(format!("character {c:?} is not in the token set")))
    }

    /// Collapses runs of identical tokens into single occurrences.
    pub fn collapse(&self, path: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(path.len());
        for &t in path {
            if out.last() != Some(&t) {
                out.push(t);
            }
        }
        out
    }

    /// Turns a frame-level token path into words: collapse runs, split on the
    /// separator, expand repetition tokens back into doubled letters.
    pub fn path_to_words(&self, path: &[TokenId]) -> Vec<String> {
        let collapsed = self.collapse(path);
        let mut words = Vec::new();
        let mut word = String::new();
        let mut last_char: Option<char> = None;
        for &t in &collapsed {
            if t == self.separator {
                if !word.is_empty() {
                    words.push(std::mem::take(&mut word));
                }
                last_char = None;
            } else if Some(t) == self.repetition {
                if let Some(c) = last_char {
                    word.push(c);
                }
            } else {
                let c = self.symbols[t].chars().next().unwrap();
                word.push(c);
                last_char = Some(c);
            }
        }
        if !word.is_empty() {
            words.push(word);
        }
        words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn english_has_29_tokens_plus_repetition() {
        let ts = TokenSet::english();
        assert_eq!(ts.size(), 30);
        assert_eq!(ts.symbol(ts.separator()), SEPARATOR_SYMBOL);
        assert!(ts.repetition().is_some());
    }

    #[test]
    fn collapse_dedups_runs() {
        let ts = TokenSet::from_chars("ab", false).unwrap();
        let a = ts.lookup("a").unwrap();
        let b = ts.lookup("b").unwrap();
        assert_eq!(ts.collapse(&[a, a, b, b, b, a]), vec![a, b, a]);
    }

    #[test]
    fn path_to_words_expands_repetition() {
        let ts = TokenSet::english();
        let ids: Vec<TokenId> = ["h", "e", "l", REPETITION_SYMBOL, "o"]
            .iter()
            .map(|s| ts.lookup(s).unwrap())
            .collect();
        let mut path = vec![ts.separator()];
        path.extend_from_slice(&ids);
        path.extend_from_slice(&[ts.separator(), ids[0], ids[0]]); // trailing "h h" run
        assert_eq!(
            ts.path_to_words(&path),
            vec!["hello".to_string(), "h".to_string()]
        );
    }

    #[test]
    fn unknown_char_is_an_error() {
        let ts = TokenSet::from_chars("ab", false).unwrap();
        assert!(ts.token_for_char('z').is_err());
    }
}
