//! Word-level transition models.
//!
//! Three interchangeable models score word sequences incrementally as the
//! decoder completes words: a zero model (lexicon constraint only), a
//! pretrained smoothed n-gram wrapped by a trainable weight and a trainable
//! per-word insertion score, and a fully trainable unnormalized bilinear
//! model. All scores are unnormalized log-domain scalars.

mod arpa;
mod bilinear;
mod ngram;

pub use arpa::{arpa_load, arpa_save};
pub use bilinear::{BilinearGrad, BilinearLm};
pub use ngram::{ngram_train, NGramLm, SmoothingConfig};

use crate::error::{CoreError, Result};
use crate::lexicon::{Lexicon, WordId};

/// Opaque per-model context handle. Two equal states induce identical
/// scores for every continuation, which is what hypothesis merging relies
/// on.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum LmState {
    /// the zero model's single state
    Unit,
    /// recent-word context, most recent last; n-gram states hold order−1
    /// ids, bilinear states hold exactly K ids (begin-of-sentence padded)
    Context(Vec<u32>),
}

/// Pretrained n-gram behind a trainable weight `lambda` and insertion score
/// `gamma`; the base model stays frozen.
#[derive(Clone, Debug)]
pub struct PretrainedWrapper {
    pub base: NGramLm,
    pub lambda: f64,
    pub gamma: f64,
    /// `gamma` per emitted word (default) or once per utterance at finish
    pub per_word_gamma: bool,
    /// map lexicon word id -> base-model vocab id
    lex_to_lm: Vec<u32>,
}

impl PretrainedWrapper {
    pub fn new(base: NGramLm, lambda: f64, gamma: f64, lexicon: &Lexicon) -> Result<Self> {
        let mut lex_to_lm = Vec::with_capacity(lexicon.len());
        for wid in 0..lexicon.len() {
            let word = lexicon.word(wid);
            match base.vocab_id(word).or_else(|| base.unk_id()) {
                Some(id) => lex_to_lm.push(id),
                None => {
                    return Err(CoreError::data(format!(
                        "word {word:?} is out of the language model vocabulary \
                         and the model has no <unk>"
                    )))
                }
            }
        }
        Ok(PretrainedWrapper {
            base,
            lambda,
            gamma,
            per_word_gamma: true,
            lex_to_lm,
        })
    }

    fn lm_word(&self, word: WordId) -> u32 {
        self.lex_to_lm[word]
    }
}

/// Gradient buffers for whichever word LM is active.
#[derive(Clone, Debug)]
pub enum LmGrad {
    Zero,
    Wrapper { lambda: f64, gamma: f64 },
    Bilinear(BilinearGrad),
}

impl LmGrad {
    pub fn non_finite_tensor(&self) -> Option<&'static str> {
        match self {
            LmGrad::Zero => None,
            LmGrad::Wrapper { lambda, gamma } => {
                if !lambda.is_finite() {
                    Some("lm.lambda")
                } else if !gamma.is_finite() {
                    Some("lm.gamma")
                } else {
                    None
                }
            }
            LmGrad::Bilinear(b) => b.non_finite_tensor(),
        }
    }
}

/// The word transition model the decoder scores with.
#[derive(Clone, Debug)]
pub enum WordLm {
    Zero,
    Pretrained(PretrainedWrapper),
    Bilinear(BilinearLm),
}

impl WordLm {
    /// State before any word has been emitted.
    pub fn start(&self) -> LmState {
        match self {
            WordLm::Zero => LmState::Unit,
            WordLm::Pretrained(w) => LmState::Context(w.base.start_context()),
            WordLm::Bilinear(b) => LmState::Context(b.start_context()),
        }
    }

    /// Scores `word` in context and returns the successor state.
    pub fn step(&self, state: &LmState, word: WordId) -> (LmState, f64) {
        match (self, state) {
            (WordLm::Zero, LmState::Unit) => (LmState::Unit, 0.0),
            (WordLm::Pretrained(w), LmState::Context(ctx)) => {
                let lm_word = w.lm_word(word);
                let logp = w.base.cond_log_prob(ctx, lm_word);
                let gamma = if w.per_word_gamma { w.gamma } else { 0.0 };
                (
                    LmState::Context(w.base.next_context(ctx, lm_word)),
                    w.lambda * logp + gamma,
                )
            }
            (WordLm::Bilinear(b), LmState::Context(ctx)) => {
                let score = b.score(ctx, word);
                (LmState::Context(b.next_context(ctx, word)), score)
            }
            _ => unreachable!("state kind does not match model kind"),
        }
    }

    /// End-of-sequence score. For the wrapper this is the weighted
    /// end-of-sentence probability (plus `gamma` in per-utterance mode);
    /// zero and bilinear models have no end-of-sequence term.
    pub fn finish(&self, state: &LmState, apply_eos: bool) -> f64 {
        match (self, state) {
            (WordLm::Pretrained(w), LmState::Context(ctx)) => {
                let mut s = if w.per_word_gamma { 0.0 } else { w.gamma };
                if apply_eos {
                    s += w.lambda * w.base.eos_log_prob(ctx);
                }
                s
            }
            _ => 0.0,
        }
    }

    /// Monolithic h(τ): the sum of incremental step scores plus the finish
    /// term.
    pub fn sequence_score(&self, words: &[WordId], apply_eos: bool) -> f64 {
        let mut state = self.start();
        let mut total = 0.0;
        for &w in words {
            let (next, s) = self.step(&state, w);
            total += s;
            state = next;
        }
        total + self.finish(&state, apply_eos)
    }

    pub fn zero_grad(&self) -> LmGrad {
        match self {
            WordLm::Zero => LmGrad::Zero,
            WordLm::Pretrained(_) => LmGrad::Wrapper {
                lambda: 0.0,
                gamma: 0.0,
            },
            WordLm::Bilinear(b) => LmGrad::Bilinear(b.zero_grad()),
        }
    }

    /// Accumulates `weight · ∂step_score/∂params` for one step into `grad`.
    pub fn accumulate_step_grad(
        &self,
        grad: &mut LmGrad,
        state: &LmState,
        word: WordId,
        weight: f64,
    ) {
        match (self, state, grad) {
            (WordLm::Zero, _, LmGrad::Zero) => {}
            (WordLm::Pretrained(w), LmState::Context(ctx), LmGrad::Wrapper { lambda, gamma }) => {
                let logp = w.base.cond_log_prob(ctx, w.lm_word(word));
                *lambda += weight * logp;
                if w.per_word_gamma {
                    *gamma += weight;
                }
            }
            (WordLm::Bilinear(b), LmState::Context(ctx), LmGrad::Bilinear(g)) => {
                b.accumulate_score_grad(g, ctx, word, weight);
            }
            _ => unreachable!("grad kind does not match model kind"),
        }
    }

    /// Accumulates `weight · ∂finish_score/∂params` into `grad`.
    pub fn accumulate_finish_grad(
        &self,
        grad: &mut LmGrad,
        state: &LmState,
        apply_eos: bool,
        weight: f64,
    ) {
        if let (WordLm::Pretrained(w), LmState::Context(ctx), LmGrad::Wrapper { lambda, gamma }) =
            (self, state, grad)
        {
            if apply_eos {
                *lambda += weight * w.base.eos_log_prob(ctx);
            }
            if !w.per_word_gamma {
                *gamma += weight;
            }
        }
    }

    /// Gradient of h(τ) for a whole sequence, scaled by `upstream`.
    pub fn sequence_grad(&self, words: &[WordId], apply_eos: bool, upstream: f64) -> LmGrad {
        let mut grad = self.zero_grad();
        let mut state = self.start();
        for &w in words {
            self.accumulate_step_grad(&mut grad, &state, w, upstream);
            state = self.step(&state, w).0;
        }
        self.accumulate_finish_grad(&mut grad, &state, apply_eos, upstream);
        grad
    }
}

/// Gradient of a bilinear model's h(τ) w.r.t. embeddings and matrices,
/// scaled by `upstream`.
pub fn bilinear_grad(lm: &BilinearLm, words: &[WordId], upstream: f64) -> BilinearGrad {
    let model = WordLm::Bilinear(lm.clone());
    match model.sequence_grad(words, false, upstream) {
        LmGrad::Bilinear(g) => g,
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicon;
    use crate::token::TokenSet;

    fn toy_lexicon() -> (TokenSet, Lexicon) {
        let ts = TokenSet::english();
        let lex = Lexicon::from_words(["a", "cat", "sat"], &ts).unwrap();
        (ts, lex)
    }

    #[test]
    fn zero_lm_scores_nothing() {
        let lm = WordLm::Zero;
        let s0 = lm.start();
        let (s1, sc) = lm.step(&s0, 2);
        assert_eq!(sc, 0.0);
        assert_eq!(s1, LmState::Unit);
        assert_eq!(lm.finish(&s1, true), 0.0);
        assert_eq!(lm.sequence_score(&[0, 1, 2, 1], true), 0.0);
    }

    #[test]
    fn wrapper_steps_sum_to_sequence_log_prob() {
        let (_ts, lex) = toy_lexicon();
        // corpus over the same three words
        let corpus: Vec<Vec<String>> = ["a cat", "a sat", "a cat", "cat sat a"]
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect();
        let ngram = ngram_train(&corpus, 2, SmoothingConfig::default()).unwrap();
        let lm = WordLm::Pretrained(PretrainedWrapper::new(ngram.clone(), 1.0, 0.0, &lex).unwrap());

        let words = lex.word_ids(&["a", "cat"]).unwrap();
        let mut state = lm.start();
        let mut total = 0.0;
        for &w in &words {
            let (next, s) = lm.step(&state, w);
            total += s;
            state = next;
        }
        total += lm.finish(&state, true);

        // direct probability computation on the same model
        let a = ngram.vocab_id("a").unwrap();
        let cat = ngram.vocab_id("cat").unwrap();
        let direct = ngram.cond_log_prob(&ngram.start_context(), a)
            + ngram.cond_log_prob(&[a], cat)
            + ngram.eos_log_prob(&[cat]);
        assert!((total - direct).abs() < 1e-10);
        assert!((lm.sequence_score(&words, true) - total).abs() < 1e-12);
    }

    #[test]
    fn wrapper_gamma_counts_words() {
        let (_ts, lex) = toy_lexicon();
        let corpus: Vec<Vec<String>> = vec![vec!["a".into(), "cat".into(), "sat".into()]];
        let ngram = ngram_train(&corpus, 2, SmoothingConfig::default()).unwrap();
        let lam0 =
            WordLm::Pretrained(PretrainedWrapper::new(ngram.clone(), 0.0, 0.5, &lex).unwrap());
        let words = lex.word_ids(&["a", "cat", "sat"]).unwrap();
        assert!((lam0.sequence_score(&words, true) - 1.5).abs() < 1e-12);
        // gradient: dh/dλ = log P_lm(τ), dh/dγ = |τ|
        let lam1 =
            WordLm::Pretrained(PretrainedWrapper::new(ngram.clone(), 1.0, 0.0, &lex).unwrap());
        match lam1.sequence_grad(&words, true, 1.0) {
            LmGrad::Wrapper { lambda, gamma } => {
                let zero =
                    WordLm::Pretrained(PretrainedWrapper::new(ngram, 1.0, 0.0, &lex).unwrap());
                let logp = zero.sequence_score(&words, true);
                assert!((lambda - logp).abs() < 1e-10);
                assert!((gamma - words.len() as f64).abs() < 1e-12);
            }
            _ => panic!("wrong grad kind"),
        }
    }

    #[test]
    fn equal_states_score_continuations_identically() {
        let (_ts, lex) = toy_lexicon();
        let corpus: Vec<Vec<String>> = ["a cat sat", "cat a", "sat cat a cat"]
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect();
        let ngram = ngram_train(&corpus, 2, SmoothingConfig::default()).unwrap();
        let lm = WordLm::Pretrained(PretrainedWrapper::new(ngram, 0.8, -0.2, &lex).unwrap());
        // exhaustive over two-word histories on the toy vocab
        let all: Vec<WordId> = (0..lex.len()).collect();
        for &w1 in &all {
            for &w2 in &all {
                for &v1 in &all {
                    for &v2 in &all {
                        let s_a = {
                            let s = lm.step(&lm.start(), w1).0;
                            lm.step(&s, w2).0
                        };
                        let s_b = {
                            let s = lm.step(&lm.start(), v1).0;
                            lm.step(&s, v2).0
                        };
                        if s_a == s_b {
                            for &cont in &all {
                                let (_, sa) = lm.step(&s_a, cont);
                                let (_, sb) = lm.step(&s_b, cont);
                                assert_eq!(sa, sb);
                            }
                            assert_eq!(lm.finish(&s_a, true), lm.finish(&s_b, true));
                        }
                    }
                }
            }
        }
    }
}
