//! Trainable unnormalized bilinear word model.
//!
//! The score of a word is its embedding dotted against a per-lag linear map
//! of each of the K most recent word embeddings. There is no normalization
//! over the vocabulary, which is what keeps it cheap; missing history at
//! the start of a sequence is filled by a learned begin-of-sentence
//! embedding.

use crate::error::{CoreError, Result};
use crate::lexicon::WordId;
use crate::tensor::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct BilinearLm {
    /// context length K ≥ 2
    order: usize,
    dim: usize,
    n_words: usize,
    /// (n_words + 1) × dim; the extra last row is the begin-of-sentence
    /// embedding
    pub embeddings: Mat,
    /// K matrices, dim × dim; mats[n−1] transforms the (n)-th most recent
    /// word
    pub mats: Vec<Mat>,
}

/// Gradient buffers mirroring [`BilinearLm`]'s trainable tensors.
#[derive(Clone, Debug)]
pub struct BilinearGrad {
    pub embeddings: Mat,
    pub mats: Vec<Mat>,
}

impl BilinearGrad {
    pub fn non_finite_tensor(&self) -> Option<&'static str> {
        if !self.embeddings.all_finite() {
            return Some("lm.embeddings");
        }
        if self.mats.iter().any(|m| !m.all_finite()) {
            return Some("lm.mats");
        }
        None
    }
}

impl BilinearLm {
    /// Seeded uniform init: embeddings in ±1/√dim, matrices in ±1/dim.
    pub fn new(n_words: usize, order: usize, dim: usize, seed: u64) -> Result<Self> {
        if order < 2 {
            return Err(CoreError::data("bilinear order K must be at least 2"));
        }
        if dim == 0 || n_words == 0 {
            return Err(CoreError::data("bilinear model needs words and dimensions"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e_scale = 1.0 / (dim as f64).sqrt();
        let m_scale = 1.0 / dim as f64;
        let embeddings = Mat::from_fn(n_words + 1, dim, |_, _| rng.gen_range(-e_scale..e_scale));
        let mats = (0..order)
            .map(|_| Mat::from_fn(dim, dim, |_, _| rng.gen_range(-m_scale..m_scale)))
            .collect();
        Ok(BilinearLm {
            order,
            dim,
            n_words,
            embeddings,
            mats,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    /// Row index of the begin-of-sentence embedding.
    pub fn bos_row(&self) -> usize {
        self.n_words
    }

    pub fn start_context(&self) -> Vec<u32> {
        vec![self.bos_row() as u32; self.order]
    }

    pub fn next_context(&self, ctx: &[u32], word: WordId) -> Vec<u32> {
        let mut next = ctx.to_vec();
        next.push(word as u32);
        next.drain(..next.len() - self.order);
        next
    }

    /// Score of `word` given `ctx` (length K, oldest first):
    /// e_word · Σ_n M_n e_{n-th most recent}.
    pub fn score(&self, ctx: &[u32], word: WordId) -> f64 {
        debug_assert_eq!(ctx.len(), self.order);
        let target = self.embeddings.row(word);
        let mut total = 0.0;
        for n in 1..=self.order {
            let prev = self.embeddings.row(ctx[self.order - n] as usize);
            let m = &self.mats[n - 1];
            for (r, &t) in target.iter().enumerate() {
                let mut dot = 0.0;
                let row = m.row(r);
                for c in 0..self.dim {
                    dot += row[c] * prev[c];
                }
                total += t * dot;
            }
        }
        total
    }

    pub fn zero_grad(&self) -> BilinearGrad {
        BilinearGrad {
            embeddings: Mat::zeros(self.n_words + 1, self.dim),
            mats: (0..self.order)
                .map(|_| Mat::zeros(self.dim, self.dim))
                .collect(),
        }
    }

    /// Adds `weight · ∂score(ctx, word)/∂params` to `grad`.
    pub fn accumulate_score_grad(
        &self,
        grad: &mut BilinearGrad,
        ctx: &[u32],
        word: WordId,
        weight: f64,
    ) {
        debug_assert_eq!(ctx.len(), self.order);
        let d = self.dim;
        for n in 1..=self.order {
            let prev_row = ctx[self.order - n] as usize;
            let m = &self.mats[n - 1];
            // d(score)/dM_n = target ⊗ prev
            for r in 0..d {
                let t = self.embeddings.get(word, r);
                for c in 0..d {
                    grad.mats[n - 1].add(r, c, weight * t * self.embeddings.get(prev_row, c));
                }
            }
            // d(score)/d(target) = M_n · prev ; d(score)/d(prev) = M_nᵀ · target
            for r in 0..d {
                let mut mp = 0.0;
                let mut mt = 0.0;
                for c in 0..d {
                    mp += m.get(r, c) * self.embeddings.get(prev_row, c);
                    mt += m.get(c, r) * self.embeddings.get(word, c);
                }
                grad.embeddings.add(word, r, weight * mp);
                grad.embeddings.add(prev_row, r, weight * mt);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-buildable model: d=1, K=2.
    fn scalar_model(w: &[f64], m1: f64, m2: f64) -> BilinearLm {
        let mut lm = BilinearLm::new(w.len(), 2, 1, 0).unwrap();
        for (i, &v) in w.iter().enumerate() {
            lm.embeddings.set(i, 0, v);
        }
        lm.embeddings.set(w.len(), 0, 0.0); // zero BOS
        lm.mats[0].set(0, 0, m1);
        lm.mats[1].set(0, 0, m2);
        lm
    }

    #[test]
    fn scalar_score_by_hand() {
        // w0=2, w1=3, M1=1, M2=0: score(w1 after w0) = 3·(1·2) = 6
        let lm = scalar_model(&[2.0, 3.0], 1.0, 0.0);
        let ctx = lm.next_context(&lm.start_context(), 0);
        assert!((lm.score(&ctx, 1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrices_leave_embedding_grads_zero() {
        let mut lm = BilinearLm::new(3, 2, 2, 7).unwrap();
        for m in &mut lm.mats {
            m.fill(0.0);
        }
        let words = [0usize, 2, 1];
        let g = crate::lm::bilinear_grad(&lm, &words, 1.0);
        assert!(g.embeddings.data().iter().all(|&v| v == 0.0));
        // dM_n accumulates outer products of (target, n-th previous)
        let mut want = lm.zero_grad();
        let mut ctx = lm.start_context();
        for &w in &words {
            for n in 1..=2 {
                let prev = ctx[2 - n] as usize;
                for r in 0..2 {
                    for c in 0..2 {
                        want.mats[n - 1].add(
                            r,
                            c,
                            lm.embeddings.get(w, r) * lm.embeddings.get(prev, c),
                        );
                    }
                }
            }
            ctx = lm.next_context(&ctx, w);
        }
        for n in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    assert!((g.mats[n].get(r, c) - want.mats[n].get(r, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_zeroes_everything() {
        let lm = BilinearLm::new(4, 2, 3, 11).unwrap();
        let g = crate::lm::bilinear_grad(&lm, &[1, 3, 0, 2], 0.0);
        assert!(g.embeddings.data().iter().all(|&v| v == 0.0));
        assert!(g.mats.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn incremental_steps_sum_to_monolithic_score() {
        let lm = BilinearLm::new(5, 3, 4, 23).unwrap();
        let words = [2usize, 0, 4, 4, 1];
        let via_steps = crate::lm::WordLm::Bilinear(lm.clone()).sequence_score(&words, true);
        // h(τ) written out as the double sum over positions and lags,
        // begin-of-sentence rows standing in for missing history
        let mut direct = 0.0;
        for (j, &w) in words.iter().enumerate() {
            for n in 1..=lm.order() {
                let prev = if j >= n { words[j - n] } else { lm.bos_row() };
                let mut s = 0.0;
                for r in 0..lm.dim() {
                    for c in 0..lm.dim() {
                        s += lm.embeddings.get(w, r)
                            * lm.mats[n - 1].get(r, c)
                            * lm.embeddings.get(prev, c);
                    }
                }
                direct += s;
            }
        }
        assert!((via_steps - direct).abs() < 1e-10);
    }
}
