//! Differentiable lexicon-constrained beam search.
//!
//! The training forward pass runs a beam over (trie state, LM state, target
//! position) tuples, merging hypotheses that share all three by logadd and
//! recording every retained hypothesis and back edge in a lattice. The
//! final beam yields the approximate normalizer; tracking which hypotheses
//! still spell a prefix of the target gives the beam∩target term, and the
//! corrected normalizer swaps that intersection out for the exact Forward
//! numerator so the target's paths are counted exactly once. Backpropagation
//! replays the lattice in reverse; a frozen replay of the same lattice under
//! perturbed parameters is what makes finite-difference checks of the
//! gradient well-posed despite the discrete pruning decisions.

mod backward;

pub use backward::{dbd_backward, dbd_loss, frozen_replay, DbdGrad};

use crate::align::{forward_score, EmissionTable, TargetTokens, TransitionMatrix};
use crate::error::{CoreError, Result};
use crate::lexicon::{Trie, TrieState, WordId};
use crate::lm::{LmState, WordLm};
use crate::lognum::{logadd, logsubexp, LogScore, NEG_INF};
use crate::token::TokenId;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

/// Position reached in the target token string; `None` once the emitted
/// token string has stopped being a prefix of the target.
pub type TargetPos = Option<u32>;

/// Knobs shared by training and inference passes.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOpts {
    pub beam_size: usize,
    /// score the end of sequence with the LM's finish term
    pub apply_eos: bool,
}

impl Default for DecoderOpts {
    fn default() -> Self {
        DecoderOpts {
            beam_size: 500,
            apply_eos: true,
        }
    }
}

/// One recorded back edge: who extended, with which token, and whether a
/// word was completed (the LM context and word are kept so the edge score
/// can be recomputed and differentiated later).
#[derive(Clone, Debug)]
pub struct LatticeEdge {
    /// predecessor node index; `None` marks a path start at the first frame
    pub pred: Option<u32>,
    pub tok: TokenId,
    /// token the predecessor was emitting; `None` means the start-score
    /// vector applies
    pub prev_tok: Option<TokenId>,
    /// word completion on this edge: (LM context before the word, word)
    pub lm_word: Option<(LmState, WordId)>,
    /// cached edge score under the forward-pass parameters
    pub score: f64,
}

/// A retained hypothesis: merge key, merged score, incoming edges.
#[derive(Clone, Debug)]
pub struct LatticeNode {
    pub frame: usize,
    pub trie: TrieState,
    pub lm: LmState,
    pub target_pos: TargetPos,
    /// logadd over all merged incoming path scores
    pub score: LogScore,
    pub edges: Vec<LatticeEdge>,
}

/// Terminal aggregation edge applied to a final-frame hypothesis at a word
/// boundary.
#[derive(Clone, Debug)]
pub struct FinalEdge {
    pub node: u32,
    /// end-of-utterance word completion, if the node sits on a completing
    /// trie node rather than at the root
    pub lm_word: Option<(LmState, WordId)>,
    /// LM state the finish term is scored on
    pub finish_state: LmState,
    /// full target spelled exactly when this path ended
    pub on_target: bool,
    /// node score + completion + finish under forward-pass parameters
    pub score: LogScore,
}

/// The frozen record of one beam forward pass: everything needed to replay
/// scores under new parameters or to backpropagate exactly.
#[derive(Clone, Debug)]
pub struct DecodeLattice {
    pub nodes: Vec<LatticeNode>,
    pub finals: Vec<FinalEdge>,
    pub target: TargetTokens,
    pub target_words: Vec<WordId>,
    pub frames: usize,
    pub n_tokens: usize,
    pub apply_eos: bool,
}

/// Per-utterance loss decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// exact logadd over all target alignments, including the word-model
    /// score of the target
    pub numerator: LogScore,
    /// logadd over the final beam
    pub beam_z: LogScore,
    /// logadd over final beam paths that spell the target exactly
    pub intersect_z: LogScore,
    /// logadd over (beam \ beam∩target) ∪ target
    pub corrected_z: LogScore,
    pub loss: f64,
}

fn lm_state_hash(s: &LmState) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

fn advance_pos(pos: TargetPos, tok: TokenId, y: &TargetTokens) -> TargetPos {
    match pos {
        Some(p) if (p as usize) < y.len() && y.get(p as usize) == tok => Some(p + 1),
        _ => None,
    }
}

/// Candidate pool for one frame: merge map plus insertion-ordered nodes.
struct FrameMerge {
    map: HashMap<(TrieState, LmState, TargetPos), usize>,
    cands: Vec<LatticeNode>,
}

impl FrameMerge {
    fn new() -> Self {
        FrameMerge {
            map: HashMap::new(),
            cands: Vec::new(),
        }
    }

    fn push(
        &mut self,
        frame: usize,
        trie: TrieState,
        lm: LmState,
        target_pos: TargetPos,
        path_score: f64,
        edge: LatticeEdge,
    ) {
        match self.map.entry((trie, lm.clone(), target_pos)) {
            std::collections::hash_map::Entry::Occupied(e) => {
                let node = &mut self.cands[*e.get()];
                node.score = logadd(node.score, path_score);
                node.edges.push(edge);
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(self.cands.len());
                self.cands.push(LatticeNode {
                    frame,
                    trie,
                    lm,
                    target_pos,
                    score: path_score,
                    edges: vec![edge],
                });
            }
        }
    }

    /// Keeps the top `beam_size` merged keys; deterministic tie-break by
    /// (trie id, LM state hash, target position).
    fn prune(mut self, beam_size: usize) -> Vec<LatticeNode> {
        let mut order: Vec<usize> = (0..self.cands.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&self.cands[a], &self.cands[b]);
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then(x.trie.cmp(&y.trie))
                .then(lm_state_hash(&x.lm).cmp(&lm_state_hash(&y.lm)))
                .then(pos_rank(x.target_pos).cmp(&pos_rank(y.target_pos)))
        });
        order.truncate(beam_size);
        let mut kept = Vec::with_capacity(order.len());
        let mut taken: Vec<Option<LatticeNode>> = self.cands.drain(..).map(Some).collect();
        for idx in order {
            kept.push(taken[idx].take().unwrap());
        }
        kept
    }
}

fn pos_rank(p: TargetPos) -> u64 {
    match p {
        Some(v) => v as u64,
        None => u64::MAX,
    }
}

/// Runs the recorded training beam pass and assembles the corrected loss.
///
/// `target_words` must be the transcript whose spelled token string is `y`;
/// the numerator's word-model score is computed from it analytically.
pub fn dbd_forward(
    em: &EmissionTable,
    g: &TransitionMatrix,
    trie: &Trie,
    lm: &WordLm,
    y: &TargetTokens,
    target_words: &[WordId],
    opts: &DecoderOpts,
) -> Result<(LossReport, DecodeLattice)> {
    if opts.beam_size == 0 {
        return Err(CoreError::data("beam size must be at least 1"));
    }
    let frames = em.rows();
    let n_tokens = em.cols();
    if y.len() > frames {
        return Err(CoreError::Unalignable {
            target_len: y.len(),
            frames,
        });
    }

    let separator = trie.label(TrieState::ROOT);
    let mut nodes: Vec<LatticeNode> = Vec::new();
    let mut beam: Vec<u32> = Vec::new();

    for t in 0..frames {
        let mut merge = FrameMerge::new();
        if t == 0 {
            let lm0 = lm.start();
            for tok in 0..n_tokens {
                let (next_trie, ok) = if tok == separator {
                    (TrieState::ROOT, true)
                } else {
                    let s = trie.step(TrieState::ROOT, tok);
                    (s, !s.is_dead())
                };
                if !ok {
                    continue;
                }
                let score = em.get(0, tok) + g.start_score(tok);
                merge.push(
                    0,
                    next_trie,
                    lm0.clone(),
                    advance_pos(Some(0), tok, y),
                    score,
                    LatticeEdge {
                        pred: None,
                        tok,
                        prev_tok: None,
                        lm_word: None,
                        score,
                    },
                );
            }
        } else {
            for &h_idx in &beam {
                let (h_trie, h_lm, h_pos, h_score) = {
                    let h = &nodes[h_idx as usize];
                    (h.trie, h.lm.clone(), h.target_pos, h.score)
                };
                let prev_tok = trie.label(h_trie);

                // run continuation: same token, nothing else moves
                let cont = em.get(t, prev_tok) + g.score(prev_tok, prev_tok);
                merge.push(
                    t,
                    h_trie,
                    h_lm.clone(),
                    h_pos,
                    h_score + cont,
                    LatticeEdge {
                        pred: Some(h_idx),
                        tok: prev_tok,
                        prev_tok: Some(prev_tok),
                        lm_word: None,
                        score: cont,
                    },
                );

                for tok in 0..n_tokens {
                    if tok == prev_tok {
                        continue;
                    }
                    if tok == separator {
                        // word completion: only a completing trie node may
                        // consume the separator
                        for &word in trie.completions(h_trie) {
                            let (lm_next, lm_sc) = lm.step(&h_lm, word);
                            let edge_score = em.get(t, tok) + g.score(tok, prev_tok) + lm_sc;
                            merge.push(
                                t,
                                TrieState::ROOT,
                                lm_next,
                                advance_pos(h_pos, tok, y),
                                h_score + edge_score,
                                LatticeEdge {
                                    pred: Some(h_idx),
                                    tok,
                                    prev_tok: Some(prev_tok),
                                    lm_word: Some((h_lm.clone(), word)),
                                    score: edge_score,
                                },
                            );
                        }
                    } else {
                        let next_trie = trie.step(h_trie, tok);
                        if next_trie.is_dead() {
                            continue;
                        }
                        let edge_score = em.get(t, tok) + g.score(tok, prev_tok);
                        merge.push(
                            t,
                            next_trie,
                            h_lm.clone(),
                            advance_pos(h_pos, tok, y),
                            h_score + edge_score,
                            LatticeEdge {
                                pred: Some(h_idx),
                                tok,
                                prev_tok: Some(prev_tok),
                                lm_word: None,
                                score: edge_score,
                            },
                        );
                    }
                }
            }
        }

        let kept = merge.prune(opts.beam_size);
        if kept.is_empty() {
            return Err(CoreError::BeamExhausted { frame: t });
        }
        beam.clear();
        for node in kept {
            beam.push(nodes.len() as u32);
            nodes.push(node);
        }
    }

    // terminal aggregation: word boundaries only
    let full = Some(y.len() as u32);
    let mut finals: Vec<FinalEdge> = Vec::new();
    for &idx in &beam {
        let h = &nodes[idx as usize];
        if h.trie == TrieState::ROOT {
            let fin = lm.finish(&h.lm, opts.apply_eos);
            finals.push(FinalEdge {
                node: idx,
                lm_word: None,
                finish_state: h.lm.clone(),
                on_target: h.target_pos == full,
                score: h.score + fin,
            });
        } else if trie.is_completing(h.trie) {
            for &word in trie.completions(h.trie) {
                let (lm_next, lm_sc) = lm.step(&h.lm, word);
                let fin = lm.finish(&lm_next, opts.apply_eos);
                finals.push(FinalEdge {
                    node: idx,
                    lm_word: Some((h.lm.clone(), word)),
                    finish_state: lm_next,
                    on_target: h.target_pos == full,
                    score: h.score + lm_sc + fin,
                });
            }
        }
    }
    if finals.is_empty() {
        return Err(CoreError::BeamExhausted { frame: frames - 1 });
    }

    let lattice = DecodeLattice {
        nodes,
        finals,
        target: y.clone(),
        target_words: target_words.to_vec(),
        frames,
        n_tokens,
        apply_eos: opts.apply_eos,
    };
    let report = assemble_loss(&lattice, em, g, lm)?;
    Ok((report, lattice))
}

/// Folds the final edges and the exact numerator into the corrected loss.
/// The frozen replay reuses the same folds so a zero perturbation
/// reproduces this report bitwise.
pub(crate) fn assemble_loss(
    lat: &DecodeLattice,
    em: &EmissionTable,
    g: &TransitionMatrix,
    lm: &WordLm,
) -> Result<LossReport> {
    let mut beam_z = NEG_INF;
    let mut intersect_z = NEG_INF;
    for f in &lat.finals {
        beam_z = logadd(beam_z, f.score);
        if f.on_target {
            intersect_z = logadd(intersect_z, f.score);
        }
    }
    let numerator =
        forward_score(em, g, &lat.target) + lm.sequence_score(&lat.target_words, lat.apply_eos);
    finalize_report(beam_z, intersect_z, numerator)
}

/// Checks the corrected-normalizer invariants and assembles the report.
pub(crate) fn finalize_report(
    beam_z: LogScore,
    intersect_z: LogScore,
    numerator: LogScore,
) -> Result<LossReport> {
    if numerator == NEG_INF {
        return Err(CoreError::numeric("target numerator is log(0)"));
    }
    if intersect_z > numerator + 1e-6 {
        return Err(CoreError::numeric(format!(
            "beam∩target score {intersect_z} exceeds the exact numerator {numerator}"
        )));
    }
    let outside = logsubexp(beam_z, intersect_z)?;
    let corrected_z = logadd(outside, numerator);
    let loss = corrected_z - numerator;
    if loss < -1e-9 {
        return Err(CoreError::numeric(format!("negative loss {loss}")));
    }
    Ok(LossReport {
        numerator,
        beam_z,
        intersect_z,
        corrected_z,
        loss,
    })
}

/// How final hypotheses with the same word sequence are aggregated at
/// inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// logadd over a word sequence's alignments (Forward-score decoding)
    Forward,
    /// plain Viterbi: best single alignment wins
    Viterbi,
}

/// Inference beam: no target tracking, each hypothesis carries its word
/// history, and merging only combines identical histories. Returns the best
/// word sequence and its aggregated score.
pub fn dbd_decode(
    em: &EmissionTable,
    g: &TransitionMatrix,
    trie: &Trie,
    lm: &WordLm,
    opts: &DecoderOpts,
    agg: Aggregation,
) -> Result<(Vec<WordId>, LogScore)> {
    if opts.beam_size == 0 {
        return Err(CoreError::data("beam size must be at least 1"));
    }
    let frames = em.rows();
    let n_tokens = em.cols();
    let separator = trie.label(TrieState::ROOT);
    let combine = |a: f64, b: f64| match agg {
        Aggregation::Forward => logadd(a, b),
        Aggregation::Viterbi => a.max(b),
    };

    #[derive(Clone)]
    struct Hyp {
        trie: TrieState,
        lm: LmState,
        words: Vec<u32>,
        score: f64,
    }

    let mut beam: Vec<Hyp> = Vec::new();
    for t in 0..frames {
        let mut map: HashMap<(TrieState, Vec<u32>), usize> = HashMap::new();
        let mut cands: Vec<Hyp> = Vec::new();
        let push =
            |map: &mut HashMap<(TrieState, Vec<u32>), usize>, cands: &mut Vec<Hyp>, hyp: Hyp| {
                match map.entry((hyp.trie, hyp.words.clone())) {
                    std::collections::hash_map::Entry::Occupied(e) => {
                        let kept = &mut cands[*e.get()];
                        kept.score = combine(kept.score, hyp.score);
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(cands.len());
                        cands.push(hyp);
                    }
                }
            };

        if t == 0 {
            let lm0 = lm.start();
            for tok in 0..n_tokens {
                let (next_trie, ok) = if tok == separator {
                    (TrieState::ROOT, true)
                } else {
                    let s = trie.step(TrieState::ROOT, tok);
                    (s, !s.is_dead())
                };
                if !ok {
                    continue;
                }
                push(
                    &mut map,
                    &mut cands,
                    Hyp {
                        trie: next_trie,
                        lm: lm0.clone(),
                        words: Vec::new(),
                        score: em.get(0, tok) + g.start_score(tok),
                    },
                );
            }
        } else {
            for h in &beam {
                let prev_tok = trie.label(h.trie);
                push(
                    &mut map,
                    &mut cands,
                    Hyp {
                        trie: h.trie,
                        lm: h.lm.clone(),
                        words: h.words.clone(),
                        score: h.score + em.get(t, prev_tok) + g.score(prev_tok, prev_tok),
                    },
                );
                for tok in 0..n_tokens {
                    if tok == prev_tok {
                        continue;
                    }
                    if tok == separator {
                        for &word in trie.completions(h.trie) {
                            let (lm_next, lm_sc) = lm.step(&h.lm, word);
                            let mut words = h.words.clone();
                            words.push(word as u32);
                            push(
                                &mut map,
                                &mut cands,
                                Hyp {
                                    trie: TrieState::ROOT,
                                    lm: lm_next,
                                    words,
                                    score: h.score
                                        + em.get(t, tok)
                                        + g.score(tok, prev_tok)
                                        + lm_sc,
                                },
                            );
                        }
                    } else {
                        let next_trie = trie.step(h.trie, tok);
                        if next_trie.is_dead() {
                            continue;
                        }
                        push(
                            &mut map,
                            &mut cands,
                            Hyp {
                                trie: next_trie,
                                lm: h.lm.clone(),
                                words: h.words.clone(),
                                score: h.score + em.get(t, tok) + g.score(tok, prev_tok),
                            },
                        );
                    }
                }
            }
        }

        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&cands[a], &cands[b]);
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then(x.trie.cmp(&y.trie))
                .then(x.words.cmp(&y.words))
        });
        order.truncate(opts.beam_size);
        let mut taken: Vec<Option<Hyp>> = cands.into_iter().map(Some).collect();
        beam = order
            .into_iter()
            .map(|i| taken[i].take().unwrap())
            .collect();
        if beam.is_empty() {
            return Err(CoreError::BeamExhausted { frame: t });
        }
    }

    // group final word-boundary hypotheses by word sequence
    let mut groups: HashMap<Vec<u32>, f64> = HashMap::new();
    let fold = |words: Vec<u32>, score: f64, groups: &mut HashMap<Vec<u32>, f64>| {
        groups
            .entry(words)
            .and_modify(|s| *s = combine(*s, score))
            .or_insert(score);
    };
    for h in &beam {
        if h.trie == TrieState::ROOT {
            fold(
                h.words.clone(),
                h.score + lm.finish(&h.lm, opts.apply_eos),
                &mut groups,
            );
        } else if trie.is_completing(h.trie) {
            for &word in trie.completions(h.trie) {
                let (lm_next, lm_sc) = lm.step(&h.lm, word);
                let mut words = h.words.clone();
                words.push(word as u32);
                fold(
                    words,
                    h.score + lm_sc + lm.finish(&lm_next, opts.apply_eos),
                    &mut groups,
                );
            }
        }
    }
    if groups.is_empty() {
        return Err(CoreError::BeamExhausted { frame: frames - 1 });
    }
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut entries: Vec<(Vec<u32>, f64)> = groups.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    for (words, score) in entries {
        match &best {
            Some((_, s)) if score <= *s => {}
            _ => best = Some((words, score)),
        }
    }
    let (words, score) = best.unwrap();
    Ok((words.into_iter().map(|w| w as usize).collect(), score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{build_trie, Lexicon};
    use crate::tensor::Mat;
    use crate::token::TokenSet;

    fn tiny() -> (TokenSet, Lexicon, Trie) {
        let ts = TokenSet::from_chars("act", false).unwrap();
        let lex = Lexicon::from_words(["a", "cat"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        (ts, lex, trie)
    }

    #[test]
    fn single_word_lexicon_beam_covers_target_exactly() {
        let ts = TokenSet::from_chars("a", false).unwrap();
        let lex = Lexicon::from_words(["a"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        let em = Mat::from_rows(&[vec![0.4, -0.1], vec![-0.3, 0.2]]).unwrap();
        let g = TransitionMatrix::zeros(2);
        let y = TargetTokens::new(vec![0]).unwrap();
        let lm = WordLm::Zero;
        let opts = DecoderOpts {
            beam_size: 64,
            apply_eos: true,
        };
        let (rep, _) = dbd_forward(&em, &g, &trie, &lm, &y, &[0], &opts).unwrap();
        // paths reaching a word boundary at T: (a,a) on target; (a,sep),
        // (sep,a) spell "a" too but with separators -> competitors
        assert!(rep.loss >= -1e-9);
        assert!(rep.intersect_z <= rep.beam_z + 1e-9);
        assert!(rep.corrected_z >= rep.numerator - 1e-9);
    }

    #[test]
    fn beam_of_pure_target_paths_has_zero_loss() {
        // beam size 1 with emissions peaked on the target keeps exactly the
        // target alignment; the corrected normalizer then collapses onto the
        // numerator
        let ts = TokenSet::from_chars("a", false).unwrap();
        let lex = Lexicon::from_words(["a"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        let a = ts.lookup("a").unwrap();
        let em = Mat::from_fn(3, 2, |_, i| if i == a { 4.0 } else { -4.0 });
        let g = TransitionMatrix::zeros(2);
        let y = TargetTokens::new(vec![a]).unwrap();
        let opts = DecoderOpts {
            beam_size: 1,
            apply_eos: true,
        };
        let (rep, _) = dbd_forward(&em, &g, &trie, &WordLm::Zero, &y, &[0], &opts).unwrap();
        assert_eq!(rep.beam_z, rep.intersect_z);
        assert!(rep.loss.abs() < 1e-9, "loss {}", rep.loss);
    }

    #[test]
    fn two_word_target_over_five_frames_has_one_alignment() {
        // lexicon {a, cat}, target "a cat", five frames: the spelled target
        // a <sep> c a t fills every frame, so the numerator is that single
        // path's score plus the word-model score of the transcript
        let (ts, lex, trie) = tiny();
        let n = ts.size();
        let em = Mat::from_fn(5, n, |t, i| ((t * n + i) as f64 * 0.43).sin());
        let mut g = TransitionMatrix::zeros(n);
        g.weights = Mat::from_fn(n, n, |a, b| ((a * 5 + b) as f64 * 0.19).cos() * 0.4);
        g.start = (0..n).map(|i| (i as f64 * 0.31).sin() * 0.3).collect();
        let y_tokens = lex.target_tokens(&["a", "cat"], &ts).unwrap();
        assert_eq!(y_tokens.len(), 5);
        let y = TargetTokens::new(y_tokens.clone()).unwrap();
        let words = lex.word_ids(&["a", "cat"]).unwrap();

        let corpus: Vec<Vec<String>> = vec![vec!["a".into(), "cat".into()]];
        let base = crate::lm::ngram_train(&corpus, 2, Default::default()).unwrap();
        let lm = WordLm::Pretrained(
            crate::lm::PretrainedWrapper::new(base, 0.9, 0.2, &lex).unwrap(),
        );

        let mut path_score = em.get(0, y_tokens[0]) + g.start_score(y_tokens[0]);
        for t in 1..5 {
            path_score += em.get(t, y_tokens[t]) + g.score(y_tokens[t], y_tokens[t - 1]);
        }
        let h = lm.sequence_score(&words, true);

        let opts = DecoderOpts {
            beam_size: 4096,
            apply_eos: true,
        };
        let (rep, _) = dbd_forward(&em, &g, &trie, &lm, &y, &words, &opts).unwrap();
        assert!((rep.numerator - (path_score + h)).abs() < 1e-12);
        // the denominator carries every valid word-sequence path, so it
        // strictly dominates the single-path numerator here
        assert!(rep.corrected_z > rep.numerator);
        assert!(rep.loss > 0.0);
        assert!((rep.intersect_z - rep.numerator).abs() < 1e-9);
    }

    #[test]
    fn unalignable_target_is_rejected() {
        let (ts, lex, trie) = tiny();
        let em = Mat::zeros(2, ts.size());
        let g = TransitionMatrix::zeros(ts.size());
        let y = TargetTokens::new(lex.target_tokens(&["cat"], &ts).unwrap()).unwrap();
        let r = dbd_forward(
            &em,
            &g,
            &trie,
            &WordLm::Zero,
            &y,
            &[lex.word_id("cat").unwrap()],
            &DecoderOpts::default(),
        );
        assert!(matches!(r, Err(CoreError::Unalignable { .. })));
    }

    #[test]
    fn decode_single_word_lexicon_returns_it() {
        let ts = TokenSet::from_chars("a", false).unwrap();
        let lex = Lexicon::from_words(["a"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        let em = Mat::from_fn(3, 2, |t, i| ((t + i) as f64) * 0.21 - 0.3);
        let g = TransitionMatrix::zeros(2);
        let (words, _) = dbd_decode(
            &em,
            &g,
            &trie,
            &WordLm::Zero,
            &DecoderOpts {
                beam_size: 32,
                apply_eos: true,
            },
            Aggregation::Forward,
        )
        .unwrap();
        // "a" is the only word; an all-separator path would decode to the
        // empty sequence but scores below any run containing the peak
        assert!(words == vec![lex.word_id("a").unwrap()] || words.is_empty());
    }

    #[test]
    fn decode_finds_strongly_peaked_target() {
        let (ts, lex, trie) = tiny();
        let n = ts.size();
        // peak emissions exactly on the spelled target "a cat"
        let y = lex.target_tokens(&["a", "cat"], &ts).unwrap();
        let frames = y.len() + 2;
        let mut path = vec![y[0]];
        path.extend_from_slice(&y);
        path.push(*y.last().unwrap());
        let em = Mat::from_fn(frames, n, |t, i| if path[t] == i { 5.0 } else { -5.0 });
        let g = TransitionMatrix::zeros(n);
        let (words, _) = dbd_decode(
            &em,
            &g,
            &trie,
            &WordLm::Zero,
            &DecoderOpts {
                beam_size: 64,
                apply_eos: true,
            },
            Aggregation::Forward,
        )
        .unwrap();
        let got: Vec<&str> = words.iter().map(|&w| lex.word(w)).collect();
        assert_eq!(got, vec!["a", "cat"]);
    }
}
