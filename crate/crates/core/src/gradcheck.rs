//! Central finite-difference suites for every differentiable path in the
//! crate.
//!
//! Checking gradients directly through a beam pass is ill-posed: pruning
//! decisions flip under perturbation. The beam suite therefore freezes a
//! recorded lattice and differentiates the replayed loss, which is smooth,
//! so central differences must agree with the analytic backward pass.

use crate::align::{asg_loss, forward_grad, forward_score, TargetTokens, TransitionMatrix};
use crate::dbd::{dbd_backward, dbd_forward, frozen_replay, DecoderOpts};
use crate::error::{CoreError, Result};
use crate::lexicon::{build_trie, Lexicon};
use crate::lm::{ngram_train, BilinearLm, LmGrad, PretrainedWrapper, SmoothingConfig, WordLm};
use crate::lognum::{dlogadd, logadd_many};
use crate::scorer::{GluArch, GluConvScorer, Scorer};
use crate::tensor::Mat;
use crate::token::TokenSet;
use crate::train::{lm_tensors_mut, model_tensors, model_tensors_mut, Model};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub suite: &'static str,
    pub case: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(suite: &'static str, case: String, max_rel_err: f64, tol: f64) -> Self {
        CheckReport {
            suite,
            case,
            max_rel_err,
            tol,
            passed: max_rel_err <= tol,
        }
    }
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// |analytic − fd| relative to the larger magnitude, with an absolute floor
/// so true-zero gradients compare absolutely.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4)
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn rand_transitions(rng: &mut ChaCha8Rng, n: usize) -> TransitionMatrix {
    let mut g = TransitionMatrix::zeros(n);
    g.weights = rand_mat(rng, n, n, 0.5);
    g.start = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    g
}

/// Max relative error of `analytic` against central differences of `f`
/// over every slot that `view` exposes.
fn fd_over_slots(f: &mut dyn FnMut(&[f64]) -> f64, base: &[f64], analytic: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut work = base.to_vec();
    for i in 0..base.len() {
        work[i] = base[i] + FD_STEP;
        let hi = f(&work);
        work[i] = base[i] - FD_STEP;
        let lo = f(&work);
        work[i] = base[i];
        let fd = (hi - lo) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

// ---------------------------------------------------------------------------
// suites
// ---------------------------------------------------------------------------

pub fn check_lognum(seed: u64, cases: usize) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64));
        let n = rng.gen_range(2..8);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let w = dlogadd(&xs).expect("finite inputs");
        let mut f = |v: &[f64]| logadd_many(v.iter().copied());
        let worst = fd_over_slots(&mut f, &xs, &w);
        out.push(CheckReport::new(
            "lognum",
            format!("case{case}"),
            worst,
            1e-6,
        ));
    }
    out
}

pub fn check_align(seed: u64, cases: usize) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64).wrapping_mul(7919));
        let n = rng.gen_range(2..=4);
        let frames = rng.gen_range(2..=6);
        let len = rng.gen_range(1..=frames.min(4));
        let mut target = Vec::with_capacity(len);
        for i in 0..len {
            loop {
                let t = rng.gen_range(0..n);
                if i == 0 || target[i - 1] != t {
                    target.push(t);
                    break;
                }
            }
        }
        let y = TargetTokens::new(target).unwrap();
        let em = rand_mat(&mut rng, frames, n, 1.0);
        let g = rand_transitions(&mut rng, n);

        // forward numerator gradient, flattened over (emissions, weights, start)
        let (_, grad) = forward_grad(&em, &g, &y).unwrap();
        let pack = |em: &Mat, g: &TransitionMatrix| {
            let mut v = em.data().to_vec();
            v.extend_from_slice(g.weights.data());
            v.extend_from_slice(&g.start);
            v
        };
        let unpack = |v: &[f64]| {
            let mut em2 = em.clone();
            em2.data_mut().copy_from_slice(&v[..frames * n]);
            let mut g2 = TransitionMatrix::zeros(n);
            g2.weights
                .data_mut()
                .copy_from_slice(&v[frames * n..frames * n + n * n]);
            g2.start.copy_from_slice(&v[frames * n + n * n..]);
            (em2, g2)
        };
        let base = pack(&em, &g);
        let analytic = pack(&grad.emissions, &grad.transitions);
        let mut f = |v: &[f64]| {
            let (em2, g2) = unpack(v);
            forward_score(&em2, &g2, &y)
        };
        let worst_fwd = fd_over_slots(&mut f, &base, &analytic);
        out.push(CheckReport::new(
            "align",
            format!("forward case{case}"),
            worst_fwd,
            FD_TOL,
        ));

        let loss = asg_loss(&em, &g, &y).unwrap();
        let analytic = pack(&loss.grad.emissions, &loss.grad.transitions);
        let mut f = |v: &[f64]| {
            let (em2, g2) = unpack(v);
            asg_loss(&em2, &g2, &y).unwrap().loss
        };
        let worst_asg = fd_over_slots(&mut f, &base, &analytic);
        out.push(CheckReport::new(
            "align",
            format!("asg case{case}"),
            worst_asg,
            FD_TOL,
        ));
    }
    out
}

pub fn check_lm(seed: u64, cases: usize) -> Vec<CheckReport> {
    let ts = TokenSet::english();
    let lex = Lexicon::from_words(["ba", "cab", "ac"], &ts).unwrap();
    let corpus: Vec<Vec<String>> = ["ba cab", "cab ac ba", "ac ac", "ba ba cab"]
        .iter()
        .map(|s| s.split_whitespace().map(str::to_string).collect())
        .collect();
    let base = ngram_train(&corpus, 2, SmoothingConfig::default()).unwrap();

    let mut out = Vec::new();
    for case in 0..cases {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64).wrapping_mul(104729));
        let n_words = rng.gen_range(1..=4);
        let words: Vec<usize> = (0..n_words).map(|_| rng.gen_range(0..lex.len())).collect();
        let apply_eos = rng.gen_bool(0.5);

        // wrapper: h is linear in λ and γ
        let lam = rng.gen_range(-1.0..1.0);
        let gam = rng.gen_range(-1.0..1.0);
        let wrapper =
            WordLm::Pretrained(PretrainedWrapper::new(base.clone(), lam, gam, &lex).unwrap());
        let (d_lam, d_gam) = match wrapper.sequence_grad(&words, apply_eos, 1.0) {
            LmGrad::Wrapper { lambda, gamma } => (lambda, gamma),
            _ => unreachable!(),
        };
        let mut f = |v: &[f64]| {
            let lm =
                WordLm::Pretrained(PretrainedWrapper::new(base.clone(), v[0], v[1], &lex).unwrap());
            lm.sequence_score(&words, apply_eos)
        };
        let worst = fd_over_slots(&mut f, &[lam, gam], &[d_lam, d_gam]);
        out.push(CheckReport::new(
            "lm",
            format!("wrapper case{case}"),
            worst,
            1e-6,
        ));

        // bilinear: every embedding and matrix entry
        let bl = BilinearLm::new(lex.len(), 2, 2, seed.wrapping_add(case as u64)).unwrap();
        let lm = WordLm::Bilinear(bl.clone());
        let grad = match lm.sequence_grad(&words, false, 1.0) {
            LmGrad::Bilinear(g) => g,
            _ => unreachable!(),
        };
        let pack = |b: &BilinearLm| {
            let mut v = b.embeddings.data().to_vec();
            for m in &b.mats {
                v.extend_from_slice(m.data());
            }
            v
        };
        let base_v = pack(&bl);
        let mut analytic = grad.embeddings.data().to_vec();
        for m in &grad.mats {
            analytic.extend_from_slice(m.data());
        }
        let mut f = |v: &[f64]| {
            let mut b2 = bl.clone();
            let ne = b2.embeddings.data().len();
            b2.embeddings.data_mut().copy_from_slice(&v[..ne]);
            let mut off = ne;
            for m in &mut b2.mats {
                let len = m.data().len();
                m.data_mut().copy_from_slice(&v[off..off + len]);
                off += len;
            }
            WordLm::Bilinear(b2).sequence_score(&words, false)
        };
        let worst = fd_over_slots(&mut f, &base_v, &analytic);
        out.push(CheckReport::new(
            "lm",
            format!("bilinear case{case}"),
            worst,
            1e-6,
        ));
    }
    out
}

pub fn check_scorer(seed: u64, cases: usize) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64).wrapping_mul(31));
        let frames = 5;
        let feat = 3;
        let n_tokens = 3;
        let arch = GluArch {
            feature_dim: feat,
            n_tokens,
            layers: vec![(3, 3), (2, 3)],
        };
        let scorer = Scorer::GluConv(GluConvScorer::new(&arch, seed.wrapping_add(case as u64)));
        let x = rand_mat(&mut rng, frames, feat, 1.0);
        let upstream = rand_mat(&mut rng, frames, n_tokens, 1.0);

        let analytic_scorer = scorer.score_backward(&x, &upstream);
        let mut model = Model {
            scorer,
            transitions: TransitionMatrix::zeros(n_tokens),
        };
        let grad_model = Model {
            scorer: analytic_scorer,
            transitions: TransitionMatrix::zeros(n_tokens),
        };
        // flatten all scorer tensors
        let named = model_tensors(&grad_model);
        let mut analytic: Vec<f64> = Vec::new();
        for (_, _, d) in &named {
            analytic.extend_from_slice(d);
        }
        let base: Vec<f64> = model_tensors(&model)
            .iter()
            .flat_map(|(_, _, d)| d.iter().copied())
            .collect();
        let x_ref = &x;
        let upstream_ref = &upstream;
        let mut f = |v: &[f64]| {
            let mut off = 0;
            for (_, view) in model_tensors_mut(&mut model) {
                view.copy_from_slice(&v[off..off + view.len()]);
                off += view.len();
            }
            let em = model.scorer.score(x_ref);
            em.data()
                .iter()
                .zip(upstream_ref.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let worst = fd_over_slots(&mut f, &base, &analytic);
        out.push(CheckReport::new(
            "scorer",
            format!("glu case{case}"),
            worst,
            FD_TOL,
        ));
    }
    out
}

/// Random tiny decoding instance; the word model cycles through all three
/// kinds.
fn dbd_case(
    seed: u64,
    case: usize,
) -> (
    TokenSet,
    Lexicon,
    Mat,
    TransitionMatrix,
    WordLm,
    Vec<usize>,
    usize,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64).wrapping_mul(65537));
    let ts = TokenSet::from_chars("abc", true).unwrap();
    let pool = ["a", "b", "ca", "ab", "bb", "c", "cab"];
    let n_words = rng.gen_range(1..=3);
    let mut chosen: Vec<&str> = Vec::new();
    while chosen.len() < n_words {
        let w = pool[rng.gen_range(0..pool.len())];
        if !chosen.contains(&w) {
            chosen.push(w);
        }
    }
    let lex = Lexicon::from_words(chosen.iter().copied(), &ts).unwrap();
    let n = ts.size();
    let n_target = rng.gen_range(1..=2);
    let target_words: Vec<usize> = (0..n_target).map(|_| rng.gen_range(0..lex.len())).collect();
    let spelled: usize = target_words
        .iter()
        .map(|&w| lex.spelling(w).len())
        .sum::<usize>()
        + (n_target - 1);
    let frames = rng.gen_range(spelled.max(3)..=spelled.max(3) + 2);
    let em = rand_mat(&mut rng, frames, n, 1.0);
    let g = rand_transitions(&mut rng, n);
    let lm = match case % 3 {
        0 => WordLm::Zero,
        1 => {
            // one sentence covering every word keeps the wrapper total
            let mut corpus: Vec<Vec<String>> =
                vec![(0..lex.len()).map(|w| lex.word(w).to_string()).collect()];
            corpus.extend((0..3).map(|_| {
                (0..rng.gen_range(1..=3))
                    .map(|_| lex.word(rng.gen_range(0..lex.len())).to_string())
                    .collect()
            }));
            let base = ngram_train(&corpus, 2, SmoothingConfig::default()).unwrap();
            WordLm::Pretrained(
                PretrainedWrapper::new(
                    base,
                    rng.gen_range(-0.5..1.0),
                    rng.gen_range(-0.5..0.5),
                    &lex,
                )
                .unwrap(),
            )
        }
        _ => WordLm::Bilinear(
            BilinearLm::new(lex.len(), 2, 2, seed.wrapping_add(case as u64)).unwrap(),
        ),
    };
    (ts, lex, em, g, lm, target_words, frames)
}

pub fn check_dbd(seed: u64, cases: usize) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for case in 0..cases {
        let (ts, lex, em, g, lm, target_words, frames) = dbd_case(seed, case);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64).wrapping_mul(3));
        let trie = build_trie(&lex, &ts)?;
        let word_strs: Vec<&str> = target_words.iter().map(|&w| lex.word(w)).collect();
        let y = TargetTokens::new(lex.target_tokens(&word_strs, &ts)?)?;
        let mut opts = DecoderOpts {
            beam_size: rng.gen_range(2..=8),
            apply_eos: rng.gen_bool(0.5),
        };
        // tiny beams exercise pruned lattices; grow on exhaustion so every
        // case still yields a gradient to check
        let (rep, lat) = loop {
            match dbd_forward(&em, &g, &trie, &lm, &y, &target_words, &opts) {
                Ok(x) => break x,
                Err(CoreError::BeamExhausted { .. }) => opts.beam_size *= 2,
                Err(e) => return Err(e),
            }
        };
        let grad = dbd_backward(&lat, &em, &g, &lm, &rep)?;
        let _ = frames;

        // emissions + transitions + start, then LM trainables
        let mut base = em.data().to_vec();
        base.extend_from_slice(g.weights.data());
        base.extend_from_slice(&g.start);
        let mut analytic = grad.emissions.data().to_vec();
        analytic.extend_from_slice(grad.transitions.weights.data());
        analytic.extend_from_slice(&grad.transitions.start);

        let n = ts.size();
        let t_len = em.rows();
        let lat_ref = &lat;
        let lm_ref = &lm;
        let mut f = |v: &[f64]| {
            let mut em2 = em.clone();
            em2.data_mut().copy_from_slice(&v[..t_len * n]);
            let mut g2 = TransitionMatrix::zeros(n);
            g2.weights
                .data_mut()
                .copy_from_slice(&v[t_len * n..t_len * n + n * n]);
            g2.start.copy_from_slice(&v[t_len * n + n * n..]);
            frozen_replay(lat_ref, &em2, &g2, lm_ref).unwrap().loss
        };
        let worst_model = fd_over_slots(&mut f, &base, &analytic);
        out.push(CheckReport::new(
            "dbd",
            format!("model case{case}"),
            worst_model,
            FD_TOL,
        ));

        // LM trainables, when present
        let (lm_base, lm_analytic): (Vec<f64>, Vec<f64>) = match (&lm, &grad.lm) {
            (WordLm::Zero, LmGrad::Zero) => (Vec::new(), Vec::new()),
            (WordLm::Pretrained(w), LmGrad::Wrapper { lambda, gamma }) => {
                (vec![w.lambda, w.gamma], vec![*lambda, *gamma])
            }
            (WordLm::Bilinear(b), LmGrad::Bilinear(gb)) => {
                let mut base = b.embeddings.data().to_vec();
                for m in &b.mats {
                    base.extend_from_slice(m.data());
                }
                let mut an = gb.embeddings.data().to_vec();
                for m in &gb.mats {
                    an.extend_from_slice(m.data());
                }
                (base, an)
            }
            _ => unreachable!(),
        };
        if !lm_base.is_empty() {
            let mut f = |v: &[f64]| {
                let mut lm2 = lm.clone();
                let mut off = 0;
                for (_, view) in lm_tensors_mut(&mut lm2) {
                    view.copy_from_slice(&v[off..off + view.len()]);
                    off += view.len();
                }
                frozen_replay(lat_ref, &em, &g, &lm2).unwrap().loss
            };
            let worst_lm = fd_over_slots(&mut f, &lm_base, &lm_analytic);
            out.push(CheckReport::new(
                "dbd",
                format!("lm case{case}"),
                worst_lm,
                FD_TOL,
            ));
        }
    }
    Ok(out)
}

/// Runs one named suite with `cases` random instances.
pub fn run_suite(name: &str, seed: u64, cases: usize) -> Result<Vec<CheckReport>> {
    match name {
        "lognum" => Ok(check_lognum(seed, cases)),
        "align" => Ok(check_align(seed, cases)),
        "lm" => Ok(check_lm(seed, cases)),
        "scorer" => Ok(check_scorer(seed, cases)),
        "dbd" => check_dbd(seed, cases),
        other => Err(CoreError::data(format!(
            "unknown gradcheck suite {other:?} (want lognum|align|lm|scorer|dbd)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lognum_suite_passes() {
        assert!(all_passed(&check_lognum(7, 10)));
    }

    #[test]
    fn align_suite_passes() {
        let reports = check_align(11, 10);
        for r in &reports {
            assert!(r.passed, "{}: {} err {}", r.suite, r.case, r.max_rel_err);
        }
    }

    #[test]
    fn lm_suite_passes() {
        assert!(all_passed(&check_lm(13, 6)));
    }

    #[test]
    fn scorer_suite_passes() {
        let reports = check_scorer(17, 4);
        for r in &reports {
            assert!(r.passed, "{}: {} err {}", r.suite, r.case, r.max_rel_err);
        }
    }

    #[test]
    fn dbd_suite_passes() {
        let reports = check_dbd(19, 9).unwrap();
        for r in &reports {
            assert!(r.passed, "{}: {} err {}", r.suite, r.case, r.max_rel_err);
        }
    }
}
