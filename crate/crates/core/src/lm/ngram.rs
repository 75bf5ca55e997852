//! Backoff n-gram model with an internal add-k trainer.
//!
//! Probabilities and backoff weights live in natural log internally and in
//! log10 on disk (the ARPA convention). Scoring is longest-match with
//! backoff: an unseen n-gram costs the context's backoff weight plus the
//! shortened-context probability.

use crate::error::{CoreError, Result};
use std::collections::HashMap;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Stored probability (and backoff weight, when the n-gram can be a
/// context) in natural log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NGramEntry {
    pub log_prob: f64,
    pub backoff: f64,
}

#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// tables[m-1] maps an m-gram (word ids, oldest first) to its entry
    tables: Vec<HashMap<Vec<u32>, NGramEntry>>,
    bos: u32,
    eos: u32,
    unk: Option<u32>,
}

impl NGramLm {
    pub(crate) fn from_parts(
        order: usize,
        vocab: Vec<String>,
        tables: Vec<HashMap<Vec<u32>, NGramEntry>>,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(CoreError::data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        let bos = *index
            .get(BOS)
            .ok_or_else(|| CoreError::data("vocabulary lacks <s>"))?;
        let eos = *index
            .get(EOS)
            .ok_or_else(|| CoreError::data("vocabulary lacks </s>"))?;
        let unk = index.get(UNK).copied();
        Ok(NGramLm {
            order,
            vocab,
            index,
            tables,
            bos,
            eos,
            unk,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk
    }

    pub fn entry(&self, ngram: &[u32]) -> Option<&NGramEntry> {
        self.tables.get(ngram.len() - 1)?.get(ngram)
    }

    pub fn n_entries(&self, order: usize) -> usize {
        self.tables[order - 1].len()
    }

    /// Context after a sentence start: order−1 copies of `<s>`.
    pub fn start_context(&self) -> Vec<u32> {
        vec![self.bos; self.order.saturating_sub(1)]
    }

    /// Shifts `word` into the context window.
    pub fn next_context(&self, ctx: &[u32], word: u32) -> Vec<u32> {
        if self.order <= 1 {
            return Vec::new();
        }
        let mut next = ctx.to_vec();
        next.push(word);
        if next.len() > self.order - 1 {
            next.drain(..next.len() - (self.order - 1));
        }
        next
    }

    /// Natural-log P(word | ctx) with longest-match backoff. The context is
    /// oldest-first and may be shorter than order−1.
    pub fn cond_log_prob(&self, ctx: &[u32], word: u32) -> f64 {
        let ctx = if ctx.len() > self.order - 1 {
            &ctx[ctx.len() - (self.order - 1)..]
        } else {
            ctx
        };
        self.backoff_prob(ctx, word)
    }

    fn backoff_prob(&self, ctx: &[u32], word: u32) -> f64 {
        let mut ngram = Vec::with_capacity(ctx.len() + 1);
        ngram.extend_from_slice(ctx);
        ngram.push(word);
        if let Some(e) = self.entry(&ngram) {
            return e.log_prob;
        }
        if ctx.is_empty() {
            // word not even in the unigram table: fall back to <unk>
            if let Some(unk) = self.unk {
                if unk != word {
                    return self.backoff_prob(ctx, unk);
                }
            }
            return f64::NEG_INFINITY;
        }
        let bow = self.entry(ctx).map_or(0.0, |e| e.backoff);
        bow + self.backoff_prob(&ctx[1..], word)
    }

    /// Natural-log P(</s> | ctx).
    pub fn eos_log_prob(&self, ctx: &[u32]) -> f64 {
        self.cond_log_prob(ctx, self.eos)
    }

    /// Per-word perplexity over sentences (end-of-sentence counted).
    pub fn perplexity(&self, sentences: &[Vec<String>]) -> Result<f64> {
        let mut total = 0.0;
        let mut n_words = 0usize;
        for sent in sentences {
            let mut ctx = self.start_context();
            for w in sent {
                let id = self
                    .vocab_id(w)
                    .or(self.unk)
                    .ok_or_else(|| CoreError::data(format!("out-of-vocabulary word {w:?}")))?;
                total += self.cond_log_prob(&ctx, id);
                ctx = self.next_context(&ctx, id);
                n_words += 1;
            }
            total += self.eos_log_prob(&ctx);
            n_words += 1;
        }
        Ok((-total / n_words as f64).exp())
    }

    /// Σ_w P(w|ctx) over the predictable vocabulary (everything but `<s>`);
    /// should be 1 for a well-formed model.
    pub fn context_prob_mass(&self, ctx: &[u32]) -> f64 {
        (0..self.vocab.len() as u32)
            .filter(|&w| w != self.bos)
            .map(|w| self.cond_log_prob(ctx, w).exp())
            .sum()
    }

    pub(crate) fn tables(&self) -> &[HashMap<Vec<u32>, NGramEntry>] {
        &self.tables
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SmoothingConfig {
    /// additive smoothing constant
    pub add_k: f64,
    /// reserve an `<unk>` entry so out-of-vocabulary words can be scored
    pub with_unk: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            add_k: 0.1,
            with_unk: false,
        }
    }
}

/// Trains an add-k smoothed backoff model. Observed n-grams get explicit
/// probabilities; each context's backoff weight is the single scalar that
/// routes its remaining smoothed mass through the shorter context, so every
/// conditional distribution normalizes. Deterministic given corpus order.
pub fn ngram_train(
    corpus: &[Vec<String>],
    order: usize,
    smoothing: SmoothingConfig,
) -> Result<NGramLm> {
    if order < 1 {
        return Err(CoreError::data("n-gram order must be at least 1"));
    }
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(CoreError::data("empty training corpus"));
    }
    let k = smoothing.add_k;

    // vocabulary in first-appearance order, specials up front
    let mut vocab: Vec<String> = vec![BOS.to_string(), EOS.to_string()];
    if smoothing.with_unk {
        vocab.push(UNK.to_string());
    }
    let mut index: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32))
        .collect();
    for sent in corpus {
        for w in sent {
            if w == BOS || w == EOS || w == UNK {
                return Err(CoreError::data(format!(
                    "corpus contains the reserved word {w:?}"
                )));
            }
            if !index.contains_key(w) {
                index.insert(w.clone(), vocab.len() as u32);
                vocab.push(w.clone());
            }
        }
    }
    let bos = index[BOS];

    // m-gram counts over <s>-padded sentences
    let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for sent in corpus {
        let mut ids: Vec<u32> = vec![bos; order - 1];
        for w in sent {
            ids.push(index[w]);
        }
        ids.push(index[EOS]);
        for m in 1..=order {
            for win in ids.windows(m) {
                // never predict <s>
                if *win.last().unwrap() == bos {
                    continue;
                }
                *counts[m - 1].entry(win.to_vec()).or_insert(0) += 1;
            }
        }
    }

    // predictable vocabulary: everything but <s>
    let n_predictable = (vocab.len() - 1) as f64;

    // context totals per order
    let mut ctx_totals: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for m in 1..=order {
        for (ngram, &c) in &counts[m - 1] {
            *ctx_totals[m - 1]
                .entry(ngram[..m - 1].to_vec())
                .or_insert(0) += c;
        }
    }

    let mut tables: Vec<HashMap<Vec<u32>, NGramEntry>> = vec![HashMap::new(); order];

    // unigrams cover the whole predictable vocabulary, plus <s> as a
    // context-only entry
    let uni_total = *ctx_totals[0].get(&Vec::new()).unwrap_or(&0) as f64;
    let uni_denom = uni_total + k * n_predictable;
    for id in 0..vocab.len() as u32 {
        if id == bos {
            continue;
        }
        let c = *counts[0].get(&vec![id]).unwrap_or(&0) as f64;
        let p = if k > 0.0 || c > 0.0 {
            ((c + k) / uni_denom).ln()
        } else {
            f64::NEG_INFINITY
        };
        tables[0].insert(
            vec![id],
            NGramEntry {
                log_prob: p,
                backoff: 0.0,
            },
        );
    }
    tables[0].insert(
        vec![bos],
        NGramEntry {
            log_prob: -99.0 * std::f64::consts::LN_10,
            backoff: 0.0,
        },
    );

    // higher orders: explicit probabilities for observed n-grams
    for m in 2..=order {
        let mut table = HashMap::new();
        for (ngram, &c) in &counts[m - 1] {
            let total = ctx_totals[m - 1][&ngram[..m - 1]] as f64;
            let denom = total + k * n_predictable;
            table.insert(
                ngram.clone(),
                NGramEntry {
                    log_prob: ((c as f64 + k) / denom).ln(),
                    backoff: 0.0,
                },
            );
        }
        tables[m - 1] = table;
    }

    let mut lm = NGramLm::from_parts(order, vocab, tables)?;

    // backoff weights bottom-up: for every context of order m−1 that has
    // observed successors at order m, route the unexplained mass through
    // the shortened context
    for m in 2..=order {
        let mut updates: Vec<(Vec<u32>, f64)> = Vec::new();
        let mut successors: HashMap<Vec<u32>, Vec<u32>> = HashMap::new();
        for ngram in lm.tables[m - 1].keys() {
            successors
                .entry(ngram[..m - 1].to_vec())
                .or_default()
                .push(*ngram.last().unwrap());
        }
        for (ctx, mut words) in successors {
            // fixed summation order: table iteration order is not stable
            // across runs and float sums must be reproducible
            words.sort_unstable();
            let mut observed_mass = 0.0;
            let mut ngram = ctx.clone();
            ngram.push(0);
            for &w in &words {
                *ngram.last_mut().unwrap() = w;
                observed_mass += lm.tables[m - 1][&ngram].log_prob.exp();
            }
            let lower_mass: f64 = words
                .iter()
                .map(|&w| lm.backoff_prob(&ctx[1..], w).exp())
                .sum();
            let bow = if (1.0 - lower_mass).abs() < 1e-12 {
                1.0
            } else {
                (1.0 - observed_mass) / (1.0 - lower_mass)
            };
            updates.push((ctx, bow.max(0.0).ln()));
        }
        for (ctx, bow) in updates {
            if let Some(e) = lm.tables[m - 2].get_mut(&ctx) {
                e.backoff = bow;
            }
        }
    }

    Ok(lm)
}
