//! Word lexicon and the prefix trie that constrains beam search to valid
//! words.
//!
//! Spellings are character tokens with the second of two identical
//! consecutive letters replaced by the repetition token, so no spelling ever
//! carries two equal consecutive tokens and run-collapse decoding stays
//! unambiguous. The separator token never appears inside a spelling; word
//! completion on a separator is the decoder's job, not the trie's.

use crate::error::{CoreError, Result};
use crate::token::{TokenId, TokenSet};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub type WordId = usize;

/// Spells a word as token indices, substituting the repetition token for the
/// second of two identical consecutive letters ("hello" -> h e l <rep> o).
pub fn spell(word: &str, tokens: &TokenSet) -> Result<Vec<TokenId>> {
    if word.is_empty() {
        return Err(CoreError::data("cannot spell an empty word"));
    }
    let mut out = Vec::with_capacity(word.len());
    let mut prev: Option<char> = None;
    for c in word.chars() {
        let tok = tokens.token_for_char(c)?;
        if tok == tokens.separator() {
            return Err(CoreError::data(format!(
                "word {word:?} contains the separator character"
            )));
        }
        // "sss" spells s <rep> s: a letter maps to <rep> only when it repeats
        // the previous character and the previous emitted token was concrete.
        if prev == Some(c) && *out.last().unwrap() != tokens.repetition().unwrap_or(usize::MAX) {
            match tokens.repetition() {
                Some(rep) => out.push(rep),
                None => {
                    return Err(CoreError::data(format!(
                        "word {word:?} has a doubled letter but the token set \
                         has no repetition token"
                    )))
                }
            }
        } else {
            out.push(tok);
        }
        prev = Some(c);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    words: Vec<String>,
    spellings: Vec<Vec<TokenId>>,
    index: HashMap<String, WordId>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon {
            words: Vec::new(),
            spellings: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Builds a lexicon by spelling each word with [`spell`].
    pub fn from_words<'a>(
        words: impl IntoIterator<Item = &'a str>,
        tokens: &TokenSet,
    ) -> Result<Self> {
        let mut lex = Lexicon::new();
        for w in words {
            let spelling = spell(w, tokens)?;
            lex.add(w, spelling)?;
        }
        Ok(lex)
    }

    pub fn add(&mut self, word: &str, spelling: Vec<TokenId>) -> Result<WordId> {
        if self.index.contains_key(word) {
            return Err(CoreError::data(format!("duplicate lexicon word {word:?}")));
        }
        if spelling.is_empty() {
            return Err(CoreError::data(format!("empty spelling for word {word:?}")));
        }
        if spelling.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::data(format!(
                "spelling of {word:?} has two equal consecutive tokens"
            )));
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.spellings.push(spelling);
        self.index.insert(word.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id]
    }

    pub fn spelling(&self, id: WordId) -> &[TokenId] {
        &self.spellings[id]
    }

    pub fn word_id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|s| s.as_str())
    }

    /// Token string for a word sequence: spellings joined by single
    /// separator tokens. This is the target representation the alignment
    /// criteria score against.
    pub fn target_tokens(&self, words: &[&str], tokens: &TokenSet) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let id = self
                .word_id(w)
                .ok_or_else(|| CoreError::data(format!("word {w:?} is not in the lexicon")))?;
            if i > 0 {
                out.push(tokens.separator());
            }
            out.extend_from_slice(&self.spellings[id]);
        }
        Ok(out)
    }

    /// Word ids for a transcript; errors on out-of-lexicon words.
    pub fn word_ids(&self, words: &[&str]) -> Result<Vec<WordId>> {
        words
            .iter()
            .map(|w| {
                self.word_id(w)
                    .ok_or_else(|| CoreError::data(format!("word {w:?} is not in the lexicon")))
            })
            .collect()
    }

    /// Writes `word<TAB>tok tok tok` lines.
    pub fn save(&self, path: &Path, tokens: &TokenSet) -> Result<()> {
        let mut out = String::new();
        out.push_str("# lexicon: word<TAB>token token token\n");
        for (w, sp) in self.words.iter().zip(&self.spellings) {
            let toks: Vec<&str> = sp.iter().map(|&t| tokens.symbol(t)).collect();
            writeln!(out, "{w}\t{}", toks.join(" ")).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Parses the format written by [`Lexicon::save`]. `#` starts a comment.
    pub fn load(path: &Path, tokens: &TokenSet) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lex = Lexicon::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            if line.trim().is_empty() {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| {
                CoreError::data(format!(
                    "{}:{}: expected word<TAB>tokens",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let mut spelling = Vec::new();
            for sym in rest.split_whitespace() {
                let tok = tokens.lookup(sym).ok_or_else(|| {
                    CoreError::data(format!(
                        "{}:{}: unknown token {sym:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                spelling.push(tok);
            }
            lex.add(word.trim(), spelling)?;
        }
        if lex.is_empty() {
            return Err(CoreError::data(format!(
                "lexicon {} has no entries",
                path.display()
            )));
        }
        Ok(lex)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::new()
    }
}

/// A trie node handle; `DEAD` marks a fallen-off-the-trie state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrieState(pub u32);

impl TrieState {
    pub const DEAD: TrieState = TrieState(u32::MAX);
    pub const ROOT: TrieState = TrieState(0);

    #[inline]
    pub fn is_dead(self) -> bool {
        self == TrieState::DEAD
    }
}

/// Prefix tree over lexicon spellings with dense child tables for O(1)
/// stepping.
#[derive(Clone, Debug)]
pub struct Trie {
    n_tokens: usize,
    /// children[node * n_tokens + tok] = child id or u32::MAX
    children: Vec<u32>,
    /// incoming edge label per node; the root carries the separator
    labels: Vec<TokenId>,
    /// word ids completed exactly at each node
    completions: Vec<Vec<WordId>>,
}

const NO_CHILD: u32 = u32::MAX;

impl Trie {
    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Token on the edge into `node`; for the root this is the separator,
    /// which doubles as "previous token" for hypotheses sitting between
    /// words.
    #[inline]
    pub fn label(&self, node: TrieState) -> TokenId {
        self.labels[node.0 as usize]
    }

    #[inline]
    pub fn completions(&self, node: TrieState) -> &[WordId] {
        &self.completions[node.0 as usize]
    }

    #[inline]
    pub fn is_completing(&self, node: TrieState) -> bool {
        !self.completions[node.0 as usize].is_empty()
    }

    /// Follows the `tok` edge; returns `DEAD` when there is none.
    #[inline]
    pub fn step(&self, state: TrieState, tok: TokenId) -> TrieState {
        debug_assert!(!state.is_dead(), "stepping a dead trie state");
        let child = self.children[state.0 as usize * self.n_tokens + tok];
        if child == NO_CHILD {
            TrieState::DEAD
        } else {
            TrieState(child)
        }
    }
}

/// Compiles the lexicon into a trie; spellings sharing prefixes share nodes.
pub fn build_trie(lex: &Lexicon, tokens: &TokenSet) -> Result<Trie> {
    if lex.is_empty() {
        return Err(CoreError::data("cannot build a trie from an empty lexicon"));
    }
    let n_tokens = tokens.size();
    let mut trie = Trie {
        n_tokens,
        children: vec![NO_CHILD; n_tokens],
        labels: vec![tokens.separator()],
        completions: vec![Vec::new()],
    };
    for wid in 0..lex.len() {
        let mut node = 0usize;
        for &tok in lex.spelling(wid) {
            if tok == tokens.separator() {
                return Err(CoreError::data(format!(
                    "spelling of {:?} contains the separator token",
                    lex.word(wid)
                )));
            }
            let slot = node * n_tokens + tok;
            if trie.children[slot] == NO_CHILD {
                let id = trie.labels.len() as u32;
                trie.children[slot] = id;
                trie.labels.push(tok);
                trie.completions.push(Vec::new());
                trie.children
                    .extend(std::iter::repeat_n(NO_CHILD, n_tokens));
            }
            node = trie.children[slot] as usize;
        }
        trie.completions[node].push(wid);
    }
    Ok(trie)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn charset() -> TokenSet {
        TokenSet::english()
    }

    #[test]
    fn spell_plain_word() {
        let ts = charset();
        let got = spell("cat", &ts).unwrap();
        let want: Vec<TokenId> = "cat"
            .chars()
            .map(|c| ts.token_for_char(c).unwrap())
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn spell_doubled_letter_uses_repetition_token() {
        let ts = charset();
        let got = spell("hello", &ts).unwrap();
        let rep = ts.repetition().unwrap();
        let l = ts.token_for_char('l').unwrap();
        assert_eq!(got[2], l);
        assert_eq!(got[3], rep);
        assert_eq!(got.len(), 5);
        // tripled letters alternate letter / rep / letter
        let sss = spell("sss", &ts).unwrap();
        let s = ts.token_for_char('s').unwrap();
        assert_eq!(sss, vec![s, rep, s]);
    }

    #[test]
    fn spell_single_letter() {
        let ts = charset();
        assert_eq!(
            spell("a", &ts).unwrap(),
            vec![ts.token_for_char('a').unwrap()]
        );
    }

    #[test]
    fn spell_unknown_char_names_it() {
        let ts = charset();
        let err = spell("naïve", &ts).unwrap_err().to_string();
        assert!(err.contains('ï'), "error should name the character: {err}");
    }

    #[test]
    fn trie_shares_prefixes() {
        let ts = charset();
        let lex = Lexicon::from_words(["cat", "car"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        // root, c, a, t, r
        assert_eq!(trie.n_nodes(), 5);
    }

    #[test]
    fn prefix_word_completes_at_inner_node() {
        let ts = charset();
        let lex = Lexicon::from_words(["a", "an"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        assert_eq!(trie.n_nodes(), 3);
        let a = trie.step(TrieState::ROOT, ts.token_for_char('a').unwrap());
        assert_eq!(trie.completions(a), &[lex.word_id("a").unwrap()]);
        let an = trie.step(a, ts.token_for_char('n').unwrap());
        assert_eq!(trie.completions(an), &[lex.word_id("an").unwrap()]);
    }

    #[test]
    fn stepping_off_the_trie_is_dead() {
        let ts = charset();
        let lex = Lexicon::from_words(["cat"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        let c = trie.step(TrieState::ROOT, ts.token_for_char('c').unwrap());
        assert!(!c.is_dead());
        assert!(trie.step(c, ts.token_for_char('z').unwrap()).is_dead());
        assert!(trie
            .step(TrieState::ROOT, ts.token_for_char('x').unwrap())
            .is_dead());
    }

    #[test]
    fn every_word_reaches_its_completion() {
        let ts = charset();
        let words = ["cat", "car", "a", "an", "hello", "add"];
        let lex = Lexicon::from_words(words, &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        for wid in 0..lex.len() {
            let mut s = TrieState::ROOT;
            for &tok in lex.spelling(wid) {
                s = trie.step(s, tok);
                assert!(!s.is_dead());
            }
            assert!(trie.completions(s).contains(&wid));
        }
    }

    #[test]
    fn duplicate_word_rejected() {
        let ts = charset();
        assert!(Lexicon::from_words(["cat", "cat"], &ts).is_err());
    }

    #[test]
    fn node_count_is_one_plus_distinct_prefixes() {
        let ts = charset();
        let words = ["cab", "cable", "car", "cart", "dog", "dot", "a"];
        let lex = Lexicon::from_words(words, &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        let mut prefixes = std::collections::HashSet::new();
        for wid in 0..lex.len() {
            let sp = lex.spelling(wid);
            for k in 1..=sp.len() {
                prefixes.insert(sp[..k].to_vec());
            }
        }
        assert_eq!(trie.n_nodes(), 1 + prefixes.len());
    }

    #[test]
    fn lexicon_file_round_trip() {
        let ts = charset();
        let lex = Lexicon::from_words(["cat", "hello", "a"], &ts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lexicon.txt");
        lex.save(&path, &ts).unwrap();
        let back = Lexicon::load(&path, &ts).unwrap();
        assert_eq!(back.len(), lex.len());
        for wid in 0..lex.len() {
            assert_eq!(back.word(wid), lex.word(wid));
            assert_eq!(back.spelling(wid), lex.spelling(wid));
        }
    }
}
