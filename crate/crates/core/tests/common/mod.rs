//! Brute-force enumeration oracles shared by the integration tests.
//!
//! Everything here walks all |D|^T frame-level token paths explicitly and
//! never touches the dynamic programming or beam machinery it is used to
//! check.

#![allow(dead_code)]

use dbeam_core::align::{EmissionTable, TransitionMatrix};
use dbeam_core::lexicon::Lexicon;
use dbeam_core::lm::WordLm;
use dbeam_core::lognum::{logadd, NEG_INF};
use dbeam_core::token::{TokenId, TokenSet};
use std::collections::HashMap;

/// Iterates every token path of length `frames` over `n_tokens` labels.
pub fn for_each_path(n_tokens: usize, frames: usize, mut f: impl FnMut(&[TokenId])) {
    let mut path = vec![0usize; frames];
    loop {
        f(&path);
        let mut i = 0;
        loop {
            if i == frames {
                return;
            }
            path[i] += 1;
            if path[i] < n_tokens {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Frame + transition score of one explicit path.
pub fn path_score(em: &EmissionTable, g: &TransitionMatrix, path: &[TokenId]) -> f64 {
    let mut s = em.get(0, path[0]) + g.start_score(path[0]);
    for t in 1..path.len() {
        s += em.get(t, path[t]) + g.score(path[t], path[t - 1]);
    }
    s
}

pub fn collapse(path: &[TokenId]) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::new();
    for &t in path {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// Parses a collapsed token string as a word sequence: segments between
/// separators must be exact spellings; leading and trailing separators are
/// allowed, as is the empty sequence. `None` means the path is not a valid
/// word sequence.
pub fn parse_words(
    collapsed: &[TokenId],
    tokens: &TokenSet,
    lexicon: &Lexicon,
) -> Option<Vec<usize>> {
    let mut spelling_to_word: HashMap<&[TokenId], usize> = HashMap::new();
    for wid in 0..lexicon.len() {
        spelling_to_word.insert(lexicon.spelling(wid), wid);
    }
    let sep = tokens.separator();
    let mut words = Vec::new();
    let mut segment: Vec<TokenId> = Vec::new();
    for &t in collapsed.iter().chain(std::iter::once(&sep)) {
        if t == sep {
            if !segment.is_empty() {
                match spelling_to_word.get(&segment[..]) {
                    Some(&wid) => words.push(wid),
                    None => return None,
                }
                segment.clear();
            }
        } else {
            segment.push(t);
        }
    }
    Some(words)
}

/// Exact logadd over all paths (ASG normalizer semantics).
pub fn exact_asg_normalizer(em: &EmissionTable, g: &TransitionMatrix) -> f64 {
    let mut z = NEG_INF;
    for_each_path(em.cols(), em.rows(), |p| {
        z = logadd(z, path_score(em, g, p));
    });
    z
}

/// Exact logadd over paths whose collapsed token string equals `y`.
pub fn exact_forward(em: &EmissionTable, g: &TransitionMatrix, y: &[TokenId]) -> f64 {
    let mut z = NEG_INF;
    for_each_path(em.cols(), em.rows(), |p| {
        if collapse(p) == y {
            z = logadd(z, path_score(em, g, p));
        }
    });
    z
}

/// Exact max over paths collapsing to `y`.
pub fn exact_viterbi(em: &EmissionTable, g: &TransitionMatrix, y: &[TokenId]) -> f64 {
    let mut best = NEG_INF;
    for_each_path(em.cols(), em.rows(), |p| {
        if collapse(p) == y {
            best = best.max(path_score(em, g, p));
        }
    });
    best
}

/// Exact normalizer over all valid word-sequence paths, word-model scores
/// included.
pub fn exact_valid_normalizer(
    em: &EmissionTable,
    g: &TransitionMatrix,
    tokens: &TokenSet,
    lexicon: &Lexicon,
    lm: &WordLm,
    apply_eos: bool,
) -> f64 {
    let mut z = NEG_INF;
    for_each_path(em.cols(), em.rows(), |p| {
        if let Some(words) = parse_words(&collapse(p), tokens, lexicon) {
            let s = path_score(em, g, p) + lm.sequence_score(&words, apply_eos);
            z = logadd(z, s);
        }
    });
    z
}

/// Exact numerator: paths collapsing to `y` plus the target's word-model
/// score.
pub fn exact_numerator(
    em: &EmissionTable,
    g: &TransitionMatrix,
    y: &[TokenId],
    target_words: &[usize],
    lm: &WordLm,
    apply_eos: bool,
) -> f64 {
    exact_forward(em, g, y) + lm.sequence_score(target_words, apply_eos)
}

/// Exact Forward-score decoding: the word sequence whose alignments sum
/// highest; ties break toward the lexicographically smaller sequence.
pub fn exact_decode(
    em: &EmissionTable,
    g: &TransitionMatrix,
    tokens: &TokenSet,
    lexicon: &Lexicon,
    lm: &WordLm,
    apply_eos: bool,
) -> (Vec<usize>, f64) {
    let mut groups: HashMap<Vec<usize>, f64> = HashMap::new();
    for_each_path(em.cols(), em.rows(), |p| {
        if let Some(words) = parse_words(&collapse(p), tokens, lexicon) {
            let s = path_score(em, g, p) + lm.sequence_score(&words, apply_eos);
            groups
                .entry(words)
                .and_modify(|z| *z = logadd(*z, s))
                .or_insert(s);
        }
    });
    let mut entries: Vec<(Vec<usize>, f64)> = groups.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (words, score) in entries {
        match &best {
            Some((_, s)) if score <= *s => {}
            _ => best = Some((words, score)),
        }
    }
    best.expect("at least the empty sequence is valid")
}

/// Deterministic random instances shared across oracle tests.
pub struct TinyInstance {
    pub tokens: TokenSet,
    pub lexicon: Lexicon,
    pub em: EmissionTable,
    pub g: TransitionMatrix,
    pub target_words: Vec<usize>,
    pub y: Vec<TokenId>,
}

pub fn tiny_instance(seed: u64) -> TinyInstance {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // |D| ≤ 4 counting the separator: either 3 letters + sep, or
    // 2 letters + sep + repetition
    let (tokens, pool): (TokenSet, &[&str]) = if seed.is_multiple_of(2) {
        (
            TokenSet::from_chars("abc", false).unwrap(),
            &["a", "b", "ab", "ca", "cb", "c"],
        )
    } else {
        (
            TokenSet::from_chars("ab", true).unwrap(),
            &["a", "b", "ab", "aa", "bb", "ba"],
        )
    };
    let n_words = rng.gen_range(1..=3);
    let mut chosen: Vec<&str> = Vec::new();
    while chosen.len() < n_words {
        let w = pool[rng.gen_range(0..pool.len())];
        if !chosen.contains(&w) {
            chosen.push(w);
        }
    }
    let lexicon = Lexicon::from_words(chosen.iter().copied(), &tokens).unwrap();
    let n_target = rng.gen_range(1..=2);
    let target_words: Vec<usize> = (0..n_target)
        .map(|_| rng.gen_range(0..lexicon.len()))
        .collect();
    let word_strs: Vec<&str> = target_words.iter().map(|&w| lexicon.word(w)).collect();
    let y = lexicon.target_tokens(&word_strs, &tokens).unwrap();
    let min_frames = y.len();
    let frames = rng.gen_range(min_frames.max(2)..=6.max(min_frames));
    let n = tokens.size();
    let em = dbeam_core::Mat::from_fn(frames, n, |_, _| rng.gen_range(-1.5..1.5));
    let mut g = TransitionMatrix::zeros(n);
    g.weights = dbeam_core::Mat::from_fn(n, n, |_, _| rng.gen_range(-0.6..0.6));
    g.start = (0..n).map(|_| rng.gen_range(-0.6..0.6)).collect();
    TinyInstance {
        tokens,
        lexicon,
        em,
        g,
        target_words,
        y,
    }
}
