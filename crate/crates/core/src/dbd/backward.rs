//! Exact backpropagation through a recorded beam lattice, and the frozen
//! replay used to validate it.

use super::{finalize_report, DecodeLattice, DecoderOpts, LossReport};
use crate::align::{forward_grad, forward_score, EmissionTable, TransitionMatrix};
use crate::error::{CoreError, Result};
use crate::lm::{LmGrad, LmState, WordLm};
use crate::lognum::{logadd, NEG_INF};
use crate::tensor::Mat;

/// Gradient of the corrected loss w.r.t. every parameter family.
#[derive(Clone, Debug)]
pub struct DbdGrad {
    pub emissions: Mat,
    pub transitions: TransitionMatrix,
    pub lm: LmGrad,
}

impl DbdGrad {
    pub fn zeros(frames: usize, n_tokens: usize, lm: &WordLm) -> Self {
        DbdGrad {
            emissions: Mat::zeros(frames, n_tokens),
            transitions: TransitionMatrix::zeros(n_tokens),
            lm: lm.zero_grad(),
        }
    }
}

/// One reverse sweep over the lattice: accumulates `scale · ∂total/∂θ`
/// where `total` is the logadd over the selected final edges. Every edge is
/// visited exactly once; the local weight of an edge at its node is the
/// softmax of merged incoming path scores.
pub(crate) fn sweep_lattice(
    lat: &DecodeLattice,
    lm: &WordLm,
    on_target_only: bool,
    total: f64,
    scale: f64,
    grad: &mut DbdGrad,
) {
    if total == NEG_INF || scale == 0.0 {
        return;
    }
    let mut weight = vec![0.0f64; lat.nodes.len()];
    for f in &lat.finals {
        if on_target_only && !f.on_target {
            continue;
        }
        let w = (f.score - total).exp();
        if w == 0.0 {
            continue;
        }
        weight[f.node as usize] += w;
        if let Some((ctx, word)) = &f.lm_word {
            lm.accumulate_step_grad(&mut grad.lm, ctx, *word, scale * w);
        }
        lm.accumulate_finish_grad(&mut grad.lm, &f.finish_state, lat.apply_eos, scale * w);
    }
    for v in (0..lat.nodes.len()).rev() {
        let w_node = weight[v];
        if w_node == 0.0 {
            continue;
        }
        let node = &lat.nodes[v];
        for edge in &node.edges {
            let path = match edge.pred {
                Some(u) => lat.nodes[u as usize].score + edge.score,
                None => edge.score,
            };
            let ew = w_node * (path - node.score).exp();
            if ew == 0.0 {
                continue;
            }
            grad.emissions.add(node.frame, edge.tok, scale * ew);
            match edge.prev_tok {
                Some(pt) => grad.transitions.weights.add(edge.tok, pt, scale * ew),
                None => grad.transitions.start[edge.tok] += scale * ew,
            }
            if let Some((ctx, word)) = &edge.lm_word {
                lm.accumulate_step_grad(&mut grad.lm, ctx, *word, scale * ew);
            }
            if let Some(u) = edge.pred {
                weight[u as usize] += ew;
            }
        }
    }
}

/// Gradient of the recorded loss. The corrected normalizer contributes its
/// three terms with signed posterior weights; the numerator contributes
/// through the exact Forward gradient and the target's word-model score.
pub fn dbd_backward(
    lat: &DecodeLattice,
    em: &EmissionTable,
    g: &TransitionMatrix,
    lm: &WordLm,
    rep: &LossReport,
) -> Result<DbdGrad> {
    let mut grad = DbdGrad::zeros(lat.frames, lat.n_tokens, lm);

    let u_beam = (rep.beam_z - rep.corrected_z).exp();
    let u_intersect = -((rep.intersect_z - rep.corrected_z).exp());
    let u_target = (rep.numerator - rep.corrected_z).exp();

    sweep_lattice(lat, lm, false, rep.beam_z, u_beam, &mut grad);
    sweep_lattice(lat, lm, true, rep.intersect_z, u_intersect, &mut grad);

    // numerator appears positively in the corrected normalizer and
    // negatively as the log-likelihood's first term
    let num_scale = u_target - 1.0;
    if num_scale != 0.0 {
        let (_, align) = forward_grad(em, g, &lat.target)?;
        grad.emissions.add_scaled(&align.emissions, num_scale);
        grad.transitions
            .weights
            .add_scaled(&align.transitions.weights, num_scale);
        for (a, b) in grad
            .transitions
            .start
            .iter_mut()
            .zip(&align.transitions.start)
        {
            *a += num_scale * b;
        }
        let mut state = lm.start();
        for &w in &lat.target_words {
            lm.accumulate_step_grad(&mut grad.lm, &state, w, num_scale);
            state = lm.step(&state, w).0;
        }
        lm.accumulate_finish_grad(&mut grad.lm, &state, lat.apply_eos, num_scale);
    }
    Ok(grad)
}

/// Recomputes every recorded path score and the loss under perturbed
/// parameters, over the frozen set of beam decisions. Piecewise smooth in
/// the parameters, so central finite differences of this function converge
/// to [`dbd_backward`]'s output.
pub fn frozen_replay(
    lat: &DecodeLattice,
    em: &EmissionTable,
    g: &TransitionMatrix,
    lm: &WordLm,
) -> Result<LossReport> {
    if em.rows() != lat.frames || em.cols() != lat.n_tokens {
        return Err(CoreError::data(format!(
            "replay emissions are {}×{}, lattice was recorded over {}×{}",
            em.rows(),
            em.cols(),
            lat.frames,
            lat.n_tokens
        )));
    }
    if g.n_tokens() != lat.n_tokens {
        return Err(CoreError::data(
            "replay transition matrix has the wrong token count",
        ));
    }
    let kind_matches = matches!(
        (&lm.start(), lat.finals.first().map(|f| &f.finish_state)),
        (LmState::Unit, Some(LmState::Unit))
            | (LmState::Context(_), Some(LmState::Context(_)))
            | (_, None)
    );
    if !kind_matches {
        return Err(CoreError::data(
            "replay word model kind differs from the recorded one",
        ));
    }

    let mut scores = vec![0.0f64; lat.nodes.len()];
    for (v, node) in lat.nodes.iter().enumerate() {
        let mut merged = NEG_INF;
        for (i, edge) in node.edges.iter().enumerate() {
            let e_score = match (&edge.prev_tok, &edge.lm_word) {
                (None, _) => em.get(node.frame, edge.tok) + g.start_score(edge.tok),
                (Some(pt), None) => em.get(node.frame, edge.tok) + g.score(edge.tok, *pt),
                (Some(pt), Some((ctx, word))) => {
                    em.get(node.frame, edge.tok) + g.score(edge.tok, *pt) + lm.step(ctx, *word).1
                }
            };
            let path = match edge.pred {
                Some(u) => scores[u as usize] + e_score,
                None => e_score,
            };
            merged = if i == 0 { path } else { logadd(merged, path) };
        }
        scores[v] = merged;
    }

    let mut beam_z = NEG_INF;
    let mut intersect_z = NEG_INF;
    for f in &lat.finals {
        let mut s = scores[f.node as usize];
        if let Some((ctx, word)) = &f.lm_word {
            s += lm.step(ctx, *word).1;
        }
        s += lm.finish(&f.finish_state, lat.apply_eos);
        beam_z = logadd(beam_z, s);
        if f.on_target {
            intersect_z = logadd(intersect_z, s);
        }
    }
    let numerator =
        forward_score(em, g, &lat.target) + lm.sequence_score(&lat.target_words, lat.apply_eos);
    finalize_report(beam_z, intersect_z, numerator)
}

/// Convenience wrapper: forward pass discarding the lattice.
pub fn dbd_loss(
    em: &EmissionTable,
    g: &TransitionMatrix,
    trie: &crate::lexicon::Trie,
    lm: &WordLm,
    y: &crate::align::TargetTokens,
    target_words: &[crate::lexicon::WordId],
    opts: &DecoderOpts,
) -> Result<LossReport> {
    super::dbd_forward(em, g, trie, lm, y, target_words, opts).map(|(rep, _)| rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::TargetTokens;
    use crate::dbd::dbd_forward;
    use crate::lexicon::{build_trie, Lexicon};
    use crate::token::TokenSet;

    fn setup() -> (TokenSet, Lexicon, crate::lexicon::Trie) {
        let ts = TokenSet::from_chars("act", false).unwrap();
        let lex = Lexicon::from_words(["a", "cat"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        (ts, lex, trie)
    }

    fn wavy_em(frames: usize, n: usize, phase: f64) -> Mat {
        Mat::from_fn(frames, n, |t, i| ((t * n + i) as f64 * phase).sin())
    }

    #[test]
    fn zero_perturbation_replays_bitwise() {
        let (ts, lex, trie) = setup();
        let n = ts.size();
        let em = wavy_em(5, n, 0.61);
        let mut g = TransitionMatrix::zeros(n);
        g.weights = Mat::from_fn(n, n, |a, b| ((a * n + b) as f64 * 0.17).cos() * 0.4);
        g.start = (0..n).map(|i| (i as f64 * 0.29).sin() * 0.2).collect();
        let y = TargetTokens::new(lex.target_tokens(&["a", "cat"], &ts).unwrap()).unwrap();
        let words = lex.word_ids(&["a", "cat"]).unwrap();
        let lm = WordLm::Zero;
        let opts = DecoderOpts {
            beam_size: 8,
            apply_eos: true,
        };
        let (rep, lat) = dbd_forward(&em, &g, &trie, &lm, &y, &words, &opts).unwrap();
        let replayed = frozen_replay(&lat, &em, &g, &lm).unwrap();
        assert_eq!(rep, replayed);
    }

    #[test]
    fn replay_shape_mismatch_is_an_error() {
        let (ts, lex, trie) = setup();
        let n = ts.size();
        let em = wavy_em(4, n, 0.37);
        let g = TransitionMatrix::zeros(n);
        let y = TargetTokens::new(lex.target_tokens(&["a"], &ts).unwrap()).unwrap();
        let (_, lat) = dbd_forward(
            &em,
            &g,
            &trie,
            &WordLm::Zero,
            &y,
            &lex.word_ids(&["a"]).unwrap(),
            &DecoderOpts {
                beam_size: 4,
                apply_eos: true,
            },
        )
        .unwrap();
        let bad = Mat::zeros(5, n);
        assert!(frozen_replay(&lat, &bad, &g, &WordLm::Zero).is_err());
    }

    #[test]
    fn pure_target_beam_has_zero_gradients() {
        let ts = TokenSet::from_chars("a", false).unwrap();
        let lex = Lexicon::from_words(["a"], &ts).unwrap();
        let trie = build_trie(&lex, &ts).unwrap();
        let a = ts.lookup("a").unwrap();
        let em = Mat::from_fn(3, 2, |_, i| if i == a { 4.0 } else { -4.0 });
        let g = TransitionMatrix::zeros(2);
        let y = TargetTokens::new(vec![a]).unwrap();
        let lm = WordLm::Zero;
        let opts = DecoderOpts {
            beam_size: 1,
            apply_eos: true,
        };
        let (rep, lat) = dbd_forward(&em, &g, &trie, &lm, &y, &[0], &opts).unwrap();
        assert!(rep.loss.abs() < 1e-9);
        let grad = dbd_backward(&lat, &em, &g, &lm, &rep).unwrap();
        assert!(grad.emissions.data().iter().all(|v| v.abs() < 1e-9));
        assert!(grad
            .transitions
            .weights
            .data()
            .iter()
            .all(|v| v.abs() < 1e-9));
        assert!(grad.transitions.start.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn beam_sweep_posteriors_sum_to_one_per_frame() {
        let (ts, lex, trie) = setup();
        let n = ts.size();
        let em = wavy_em(6, n, 0.43);
        let mut g = TransitionMatrix::zeros(n);
        g.weights = Mat::from_fn(n, n, |a, b| ((a + 2 * b) as f64 * 0.21).sin() * 0.3);
        let y = TargetTokens::new(lex.target_tokens(&["cat"], &ts).unwrap()).unwrap();
        let words = lex.word_ids(&["cat"]).unwrap();
        let lm = WordLm::Zero;
        let (rep, lat) = dbd_forward(
            &em,
            &g,
            &trie,
            &lm,
            &y,
            &words,
            &DecoderOpts {
                beam_size: 16,
                apply_eos: true,
            },
        )
        .unwrap();
        let mut grad = DbdGrad::zeros(lat.frames, lat.n_tokens, &lm);
        sweep_lattice(&lat, &lm, false, rep.beam_z, 1.0, &mut grad);
        for t in 0..lat.frames {
            let sum: f64 = grad.emissions.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "frame {t}: {sum}");
        }
    }
}
