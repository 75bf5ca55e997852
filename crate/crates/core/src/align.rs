//! Alignment-graph criteria over the frame trellis.
//!
//! The numerator shared by both training criteria is the Forward score: the
//! logadd over every monotonic alignment of a target token string onto the
//! frames, where each target position occupies at least one consecutive
//! frame and every frame is covered. The ASG criterion normalizes that
//! against the logadd over all unconstrained token sequences. Both scores
//! and their exact gradients are computed by log-semiring dynamic
//! programming; gradients of a logadd reduce to softmax weights over the
//! merged operands.

use crate::error::{CoreError, Result};
use crate::lognum::{logadd, logadd_many, LogScore, NEG_INF};
use crate::tensor::Mat;
use crate::token::TokenId;

/// T×|D| table of unnormalized frame scores.
pub type EmissionTable = Mat;

/// Trainable token-transition scores plus the start-score vector used at
/// the first frame, where no previous token exists.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    /// weights.get(to, from) scores a step from `from` to `to`
    pub weights: Mat,
    pub start: Vec<f64>,
}

impl TransitionMatrix {
    pub fn zeros(n_tokens: usize) -> Self {
        TransitionMatrix {
            weights: Mat::zeros(n_tokens, n_tokens),
            start: vec![0.0; n_tokens],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.start.len()
    }

    #[inline]
    pub fn score(&self, to: TokenId, from: TokenId) -> f64 {
        self.weights.get(to, from)
    }

    #[inline]
    pub fn start_score(&self, to: TokenId) -> f64 {
        self.start[to]
    }

    pub fn all_finite(&self) -> bool {
        self.weights.all_finite() && self.start.iter().all(|v| v.is_finite())
    }
}

/// A validated target token string: non-empty, no two equal consecutive
/// tokens (the repetition-token preprocessing guarantees this for spelled
/// words).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetTokens(Vec<TokenId>);

impl TargetTokens {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CoreError::data("target token string is empty"));
        }
        if tokens.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::data(
                "target token string has two equal consecutive tokens",
            ));
        }
        Ok(TargetTokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        // the constructor rejects empty token strings
        false
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    #[inline]
    pub fn get(&self, i: usize) -> TokenId {
        self.0[i]
    }
}

/// Gradients of a criterion with respect to emissions and transition
/// parameters; buffers mirror the parameter shapes.
#[derive(Clone, Debug)]
pub struct AlignGrad {
    pub emissions: Mat,
    pub transitions: TransitionMatrix,
}

impl AlignGrad {
    pub fn zeros(frames: usize, n_tokens: usize) -> Self {
        AlignGrad {
            emissions: Mat::zeros(frames, n_tokens),
            transitions: TransitionMatrix::zeros(n_tokens),
        }
    }
}

fn check_dims(em: &EmissionTable, g: &TransitionMatrix) {
    assert_eq!(
        em.cols(),
        g.n_tokens(),
        "emission table and transition matrix disagree on token count"
    );
}

/// Reachability bounds: at frame `t`, target positions `lo..=hi` can be
/// active given that all earlier positions need ≥1 frame each and all later
/// ones still have to fit.
#[inline]
fn active_range(t: usize, frames: usize, len: usize) -> (usize, usize) {
    let lo = (len + t).saturating_sub(frames); // l >= len - (frames - t)
    let hi = t.min(len - 1);
    (lo, hi)
}

fn forward_trellis(em: &EmissionTable, g: &TransitionMatrix, y: &TargetTokens) -> Mat {
    let frames = em.rows();
    let len = y.len();
    let mut alpha = Mat::zeros(frames, len);
    alpha.fill(NEG_INF);
    alpha.set(0, 0, em.get(0, y.get(0)) + g.start_score(y.get(0)));
    for t in 1..frames {
        let (lo, hi) = active_range(t, frames, len);
        for l in lo..=hi {
            let tok = y.get(l);
            let stay = alpha.get(t - 1, l) + g.score(tok, tok);
            let advance = if l > 0 {
                alpha.get(t - 1, l - 1) + g.score(tok, y.get(l - 1))
            } else {
                NEG_INF
            };
            alpha.set(t, l, em.get(t, tok) + logadd(stay, advance));
        }
    }
    alpha
}

/// Logadd over all monotonic alignments of `y` onto the frames.
///
/// Returns `NEG_INF` when the target is longer than the utterance (no
/// alignment exists).
pub fn forward_score(em: &EmissionTable, g: &TransitionMatrix, y: &TargetTokens) -> LogScore {
    check_dims(em, g);
    if y.len() > em.rows() {
        return NEG_INF;
    }
    let alpha = forward_trellis(em, g, y);
    alpha.get(em.rows() - 1, y.len() - 1)
}

/// Gradients of [`forward_score`] w.r.t. every emission and transition
/// entry, by a backward sweep over the same trellis. Unreachable trellis
/// nodes contribute nothing.
pub fn forward_grad(
    em: &EmissionTable,
    g: &TransitionMatrix,
    y: &TargetTokens,
) -> Result<(LogScore, AlignGrad)> {
    check_dims(em, g);
    let frames = em.rows();
    let len = y.len();
    if len > frames {
        return Err(CoreError::Unalignable {
            target_len: len,
            frames,
        });
    }
    let alpha = forward_trellis(em, g, y);
    let score = alpha.get(frames - 1, len - 1);
    if score == NEG_INF {
        return Err(CoreError::numeric(
            "forward score is log(0); cannot differentiate",
        ));
    }

    // beta[t][l]: logadd over path suffixes leaving (t, l), excluding the
    // emission at (t, l) itself.
    let mut beta = Mat::zeros(frames, len);
    beta.fill(NEG_INF);
    beta.set(frames - 1, len - 1, 0.0);
    for t in (0..frames - 1).rev() {
        let (lo, hi) = active_range(t, frames, len);
        for l in lo..=hi {
            let tok = y.get(l);
            let stay = g.score(tok, tok) + em.get(t + 1, tok) + beta.get(t + 1, l);
            let advance = if l + 1 < len {
                let next = y.get(l + 1);
                g.score(next, tok) + em.get(t + 1, next) + beta.get(t + 1, l + 1)
            } else {
                NEG_INF
            };
            beta.set(t, l, logadd(stay, advance));
        }
    }

    let mut grad = AlignGrad::zeros(frames, em.cols());
    for t in 0..frames {
        let (lo, hi) = active_range(t, frames, len);
        for l in lo..=hi {
            let node = alpha.get(t, l) + beta.get(t, l);
            if node == NEG_INF {
                continue;
            }
            let tok = y.get(l);
            grad.emissions.add(t, tok, (node - score).exp());
            if t == 0 {
                grad.transitions.start[tok] += (node - score).exp();
            } else {
                // split the node posterior over its two incoming edges
                let stay_in = alpha.get(t - 1, l) + g.score(tok, tok);
                let adv_in = if l > 0 {
                    alpha.get(t - 1, l - 1) + g.score(tok, y.get(l - 1))
                } else {
                    NEG_INF
                };
                let em_beta = em.get(t, tok) + beta.get(t, l);
                if stay_in != NEG_INF {
                    grad.transitions
                        .weights
                        .add(tok, tok, (stay_in + em_beta - score).exp());
                }
                if adv_in != NEG_INF {
                    grad.transitions.weights.add(
                        tok,
                        y.get(l - 1),
                        (adv_in + em_beta - score).exp(),
                    );
                }
            }
        }
    }
    Ok((score, grad))
}

/// Logadd of the alignment score over all |D|^T unconstrained token
/// sequences, in O(T·|D|²).
pub fn asg_normalizer(em: &EmissionTable, g: &TransitionMatrix) -> LogScore {
    check_dims(em, g);
    let (z, _, _) = asg_normalizer_trellis(em, g);
    z
}

fn asg_normalizer_trellis(em: &EmissionTable, g: &TransitionMatrix) -> (LogScore, Mat, Mat) {
    let frames = em.rows();
    let n = em.cols();
    let mut alpha = Mat::zeros(frames, n);
    for i in 0..n {
        alpha.set(0, i, em.get(0, i) + g.start_score(i));
    }
    let mut buf = vec![NEG_INF; n];
    for t in 1..frames {
        for to in 0..n {
            for (from, slot) in buf.iter_mut().enumerate() {
                *slot = alpha.get(t - 1, from) + g.score(to, from);
            }
            alpha.set(t, to, em.get(t, to) + logadd_many(buf.iter().copied()));
        }
    }
    let z = logadd_many(alpha.row(frames - 1).iter().copied());

    let mut beta = Mat::zeros(frames, n);
    for t in (0..frames.saturating_sub(1)).rev() {
        for from in 0..n {
            for (to, slot) in buf.iter_mut().enumerate() {
                *slot = g.score(to, from) + em.get(t + 1, to) + beta.get(t + 1, to);
            }
            beta.set(t, from, logadd_many(buf.iter().copied()));
        }
    }
    (z, alpha, beta)
}

/// [`asg_normalizer`] together with its gradient (the per-frame token
/// posteriors and expected transition counts).
pub fn asg_normalizer_grad(em: &EmissionTable, g: &TransitionMatrix) -> (LogScore, AlignGrad) {
    check_dims(em, g);
    let frames = em.rows();
    let n = em.cols();
    let (z, alpha, beta) = asg_normalizer_trellis(em, g);
    let mut grad = AlignGrad::zeros(frames, n);
    for t in 0..frames {
        for i in 0..n {
            grad.emissions
                .add(t, i, (alpha.get(t, i) + beta.get(t, i) - z).exp());
        }
    }
    for i in 0..n {
        grad.transitions.start[i] += (alpha.get(0, i) + beta.get(0, i) - z).exp();
    }
    for t in 1..frames {
        for to in 0..n {
            let em_beta = em.get(t, to) + beta.get(t, to);
            for from in 0..n {
                let w = (alpha.get(t - 1, from) + g.score(to, from) + em_beta - z).exp();
                grad.transitions.weights.add(to, from, w);
            }
        }
    }
    (z, grad)
}

/// Everything the ASG criterion reports for one utterance.
#[derive(Clone, Debug)]
pub struct AsgLoss {
    pub loss: f64,
    pub numerator: LogScore,
    pub normalizer: LogScore,
    pub grad: AlignGrad,
}

/// ASG loss `normalizer − forward_score` (≥ 0) and its gradient: normalizer
/// posteriors minus numerator posteriors.
pub fn asg_loss(em: &EmissionTable, g: &TransitionMatrix, y: &TargetTokens) -> Result<AsgLoss> {
    let (numerator, num_grad) = forward_grad(em, g, y)?;
    let (normalizer, mut grad) = asg_normalizer_grad(em, g);
    grad.emissions.add_scaled(&num_grad.emissions, -1.0);
    grad.transitions
        .weights
        .add_scaled(&num_grad.transitions.weights, -1.0);
    for (a, b) in grad
        .transitions
        .start
        .iter_mut()
        .zip(&num_grad.transitions.start)
    {
        *a -= b;
    }
    Ok(AsgLoss {
        loss: normalizer - numerator,
        numerator,
        normalizer,
        grad,
    })
}

/// Best alignment of `y` onto the frames and the frame-level token path it
/// induces.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// token emitted at each frame
    pub path: Vec<TokenId>,
    /// position in `y` occupied at each frame
    pub positions: Vec<usize>,
    pub score: LogScore,
}

/// Max-semiring analogue of [`forward_score`] with backpointers. Ties break
/// toward the earlier token advance (the run already in progress wins).
pub fn viterbi_align(
    em: &EmissionTable,
    g: &TransitionMatrix,
    y: &TargetTokens,
) -> Result<Alignment> {
    check_dims(em, g);
    let frames = em.rows();
    let len = y.len();
    if len > frames {
        return Err(CoreError::Unalignable {
            target_len: len,
            frames,
        });
    }
    let mut best = Mat::zeros(frames, len);
    best.fill(NEG_INF);
    let mut advanced = vec![false; frames * len];
    best.set(0, 0, em.get(0, y.get(0)) + g.start_score(y.get(0)));
    for t in 1..frames {
        let (lo, hi) = active_range(t, frames, len);
        for l in lo..=hi {
            let tok = y.get(l);
            let stay = best.get(t - 1, l) + g.score(tok, tok);
            let advance = if l > 0 {
                best.get(t - 1, l - 1) + g.score(tok, y.get(l - 1))
            } else {
                NEG_INF
            };
            // strict '>' keeps the stay predecessor on ties: that path
            // advanced into position l earlier
            if advance > stay {
                best.set(t, l, em.get(t, tok) + advance);
                advanced[t * len + l] = true;
            } else {
                best.set(t, l, em.get(t, tok) + stay);
            }
        }
    }
    let score = best.get(frames - 1, len - 1);
    let mut positions = vec![0usize; frames];
    let mut l = len - 1;
    for t in (0..frames).rev() {
        positions[t] = l;
        if t > 0 && advanced[t * len + l] {
            l -= 1;
        }
    }
    let path = positions.iter().map(|&p| y.get(p)).collect();
    Ok(Alignment {
        path,
        positions,
        score,
    })
}

/// Unconstrained best-path decode: the max-scoring token sequence over all
/// |D|^T, no lexicon and no beam. Ties break toward the lower token id.
pub fn viterbi_decode(em: &EmissionTable, g: &TransitionMatrix) -> (Vec<TokenId>, LogScore) {
    check_dims(em, g);
    let frames = em.rows();
    let n = em.cols();
    let mut best: Vec<f64> = (0..n).map(|i| em.get(0, i) + g.start_score(i)).collect();
    let mut back = vec![0usize; frames * n];
    let mut next = vec![NEG_INF; n];
    for t in 1..frames {
        for to in 0..n {
            let mut arg = 0usize;
            let mut hi = NEG_INF;
            for (from, &b) in best.iter().enumerate() {
                let s = b + g.score(to, from);
                if s > hi {
                    hi = s;
                    arg = from;
                }
            }
            next[to] = em.get(t, to) + hi;
            back[t * n + to] = arg;
        }
        std::mem::swap(&mut best, &mut next);
    }
    let (mut tok, mut score) = (0usize, NEG_INF);
    for (i, &s) in best.iter().enumerate() {
        if s > score {
            score = s;
            tok = i;
        }
    }
    let mut path = vec![0usize; frames];
    path[frames - 1] = tok;
    for t in (1..frames).rev() {
        tok = back[t * n + tok];
        path[t - 1] = tok;
    }
    (path, score)
}
