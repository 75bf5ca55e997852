//! Optimization harness: clipped SGD over named tensors, length-sorted
//! batching, the bootstrap training phase and beam fine-tuning, metrics and
//! checkpoints.
//!
//! Utterances inside a batch run in parallel against immutable parameters;
//! per-utterance gradients are merged in utterance order so runs are
//! deterministic regardless of thread count.

use crate::align::{asg_loss, viterbi_decode, TargetTokens, TransitionMatrix};
use crate::config::Config;
use crate::data::Utterance;
use crate::dbd::{dbd_backward, dbd_decode, dbd_forward, Aggregation, DecoderOpts};
use crate::error::{CoreError, Result};
use crate::lexicon::{build_trie, Lexicon, Trie};
use crate::lm::{BilinearLm, LmGrad, NGramLm, PretrainedWrapper, WordLm};
use crate::metrics::ErrorRateAccumulator;
use crate::scorer::{GluArch, GluConvScorer, LinearScorer, Scorer};
use crate::token::TokenSet;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Asg,
    Dbd,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beam_size: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub apply_eos: bool,
    pub per_word_gamma: bool,
    pub freeze_lambda: bool,
    pub lambda_init: f64,
    pub gamma_init: f64,
    pub bilinear_order: usize,
    pub bilinear_dim: usize,
    pub scorer_kind: String,
    pub glu_layers: Vec<(usize, usize)>,
    pub config_hash: u64,
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "lr",
    "clip",
    "batch_size",
    "epochs",
    "beam_size",
    "seed",
    "init_seed",
    "apply_eos",
    "per_word_gamma",
    "freeze_lambda",
    "lambda_init",
    "gamma_init",
    "bilinear_order",
    "bilinear_dim",
    "scorer",
    "glu_layers",
];

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            clip: 5.0,
            batch_size: 16,
            epochs: 20,
            beam_size: 500,
            seed: 1,
            init_seed: 1,
            apply_eos: true,
            per_word_gamma: true,
            freeze_lambda: false,
            lambda_init: 0.0,
            gamma_init: 0.0,
            bilinear_order: 2,
            bilinear_dim: 8,
            scorer_kind: "linear".to_string(),
            glu_layers: vec![(16, 3)],
            config_hash: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        c.ensure_known(TRAIN_CONFIG_KEYS)?;
        let d = TrainConfig::default();
        let glu_layers = parse_glu_layers(&c.get_str("glu_layers", "16:3"))?;
        let cfg = TrainConfig {
            lr: c.get_f64("lr", d.lr)?,
            clip: c.get_f64("clip", d.clip)?,
            batch_size: c.get_usize("batch_size", d.batch_size)?,
            epochs: c.get_usize("epochs", d.epochs)?,
            beam_size: c.get_usize("beam_size", d.beam_size)?,
            seed: c.get_u64("seed", d.seed)?,
            init_seed: c.get_u64("init_seed", d.init_seed)?,
            apply_eos: c.get_bool("apply_eos", d.apply_eos)?,
            per_word_gamma: c.get_bool("per_word_gamma", d.per_word_gamma)?,
            freeze_lambda: c.get_bool("freeze_lambda", d.freeze_lambda)?,
            lambda_init: c.get_f64("lambda_init", d.lambda_init)?,
            gamma_init: c.get_f64("gamma_init", d.gamma_init)?,
            bilinear_order: c.get_usize("bilinear_order", d.bilinear_order)?,
            bilinear_dim: c.get_usize("bilinear_dim", d.bilinear_dim)?,
            scorer_kind: c.get_str("scorer", &d.scorer_kind),
            glu_layers,
            config_hash: c.content_hash(),
        };
        if cfg.lr <= 0.0 || cfg.clip <= 0.0 || cfg.batch_size == 0 || cfg.beam_size == 0 {
            return Err(CoreError::data(
                "lr, clip, batch_size and beam_size must be positive",
            ));
        }
        Ok(cfg)
    }

    pub fn decoder_opts(&self) -> DecoderOpts {
        DecoderOpts {
            beam_size: self.beam_size,
            apply_eos: self.apply_eos,
        }
    }
}

fn parse_glu_layers(s: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (ch, k) = part.split_once(':').ok_or_else(|| {
            CoreError::data(format!("glu layer spec {part:?}, want channels:kernel"))
        })?;
        let ch: usize = ch
            .parse()
            .map_err(|_| CoreError::data(format!("bad channel count in {part:?}")))?;
        let k: usize = k
            .parse()
            .map_err(|_| CoreError::data(format!("bad kernel width in {part:?}")))?;
        out.push((ch, k));
    }
    if out.is_empty() {
        return Err(CoreError::data("empty glu layer spec"));
    }
    Ok(out)
}

/// Frame scorer plus token transitions: the parameters both criteria train.
#[derive(Clone, Debug)]
pub struct Model {
    pub scorer: Scorer,
    pub transitions: TransitionMatrix,
}

impl Model {
    pub fn new(cfg: &TrainConfig, feature_dim: usize, n_tokens: usize) -> Result<Self> {
        let scorer = match cfg.scorer_kind.as_str() {
            "linear" => Scorer::Linear(LinearScorer::new(feature_dim, n_tokens, cfg.init_seed)),
            "glu" => Scorer::GluConv(GluConvScorer::new(
                &GluArch {
                    feature_dim,
                    n_tokens,
                    layers: cfg.glu_layers.clone(),
                },
                cfg.init_seed,
            )),
            other => {
                return Err(CoreError::data(format!(
                    "unknown scorer kind {other:?} (want linear or glu)"
                )))
            }
        };
        Ok(Model {
            scorer,
            transitions: TransitionMatrix::zeros(n_tokens),
        })
    }

    pub fn zeros_like(&self) -> Model {
        Model {
            scorer: self.scorer.zeros_like(),
            transitions: TransitionMatrix::zeros(self.transitions.n_tokens()),
        }
    }

    pub fn add_scaled(&mut self, other: &Model, scale: f64) {
        scorer_add_scaled(&mut self.scorer, &other.scorer, scale);
        self.transitions
            .weights
            .add_scaled(&other.transitions.weights, scale);
        for (a, b) in self
            .transitions
            .start
            .iter_mut()
            .zip(&other.transitions.start)
        {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, view) in model_tensors_mut(self) {
            for v in view {
                *v *= factor;
            }
        }
    }
}

fn scorer_add_scaled(dst: &mut Scorer, src: &Scorer, scale: f64) {
    match (dst, src) {
        (Scorer::Linear(a), Scorer::Linear(b)) => {
            a.weight.add_scaled(&b.weight, scale);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        (Scorer::GluConv(a), Scorer::GluConv(b)) => {
            for (la, lb) in a.layers.iter_mut().zip(&b.layers) {
                la.value.weight.add_scaled(&lb.value.weight, scale);
                la.gate.weight.add_scaled(&lb.gate.weight, scale);
                for (x, y) in la.value.bias.iter_mut().zip(&lb.value.bias) {
                    *x += scale * y;
                }
                for (x, y) in la.gate.bias.iter_mut().zip(&lb.gate.bias) {
                    *x += scale * y;
                }
            }
            a.proj.weight.add_scaled(&b.proj.weight, scale);
            for (x, y) in a.proj.bias.iter_mut().zip(&b.proj.bias) {
                *x += scale * y;
            }
        }
        _ => panic!("scorer kind mismatch in gradient merge"),
    }
}

// ---------------------------------------------------------------------------
// named tensor views
// ---------------------------------------------------------------------------

pub fn model_tensors(m: &Model) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = scorer_tensors(&m.scorer);
    out.push((
        "transitions.weights".to_string(),
        vec![m.transitions.weights.rows(), m.transitions.weights.cols()],
        m.transitions.weights.data(),
    ));
    out.push((
        "transitions.start".to_string(),
        vec![m.transitions.start.len()],
        &m.transitions.start,
    ));
    out
}

pub fn model_tensors_mut(m: &mut Model) -> Vec<(String, &mut [f64])> {
    let mut out = scorer_tensors_mut(&mut m.scorer);
    out.push((
        "transitions.weights".to_string(),
        m.transitions.weights.data_mut(),
    ));
    out.push(("transitions.start".to_string(), &mut m.transitions.start));
    out
}

fn scorer_tensors(s: &Scorer) -> Vec<(String, Vec<usize>, &[f64])> {
    match s {
        Scorer::Linear(l) => vec![
            (
                "scorer.weight".to_string(),
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.data(),
            ),
            ("scorer.bias".to_string(), vec![l.bias.len()], &l.bias[..]),
        ],
        Scorer::GluConv(g) => {
            let mut out = Vec::new();
            for (i, layer) in g.layers.iter().enumerate() {
                out.push((
                    format!("scorer.layer{i}.value.weight"),
                    vec![layer.value.weight.rows(), layer.value.weight.cols()],
                    layer.value.weight.data(),
                ));
                out.push((
                    format!("scorer.layer{i}.value.bias"),
                    vec![layer.value.bias.len()],
                    &layer.value.bias[..],
                ));
                out.push((
                    format!("scorer.layer{i}.gate.weight"),
                    vec![layer.gate.weight.rows(), layer.gate.weight.cols()],
                    layer.gate.weight.data(),
                ));
                out.push((
                    format!("scorer.layer{i}.gate.bias"),
                    vec![layer.gate.bias.len()],
                    &layer.gate.bias[..],
                ));
            }
            out.push((
                "scorer.proj.weight".to_string(),
                vec![g.proj.weight.rows(), g.proj.weight.cols()],
                g.proj.weight.data(),
            ));
            out.push((
                "scorer.proj.bias".to_string(),
                vec![g.proj.bias.len()],
                &g.proj.bias[..],
            ));
            out
        }
    }
}

fn scorer_tensors_mut(s: &mut Scorer) -> Vec<(String, &mut [f64])> {
    match s {
        Scorer::Linear(l) => vec![
            ("scorer.weight".to_string(), l.weight.data_mut()),
            ("scorer.bias".to_string(), &mut l.bias[..]),
        ],
        Scorer::GluConv(g) => {
            let mut out = Vec::new();
            for (i, layer) in g.layers.iter_mut().enumerate() {
                out.push((
                    format!("scorer.layer{i}.value.weight"),
                    layer.value.weight.data_mut(),
                ));
                out.push((
                    format!("scorer.layer{i}.value.bias"),
                    &mut layer.value.bias[..],
                ));
                out.push((
                    format!("scorer.layer{i}.gate.weight"),
                    layer.gate.weight.data_mut(),
                ));
                out.push((
                    format!("scorer.layer{i}.gate.bias"),
                    &mut layer.gate.bias[..],
                ));
            }
            out.push(("scorer.proj.weight".to_string(), g.proj.weight.data_mut()));
            out.push(("scorer.proj.bias".to_string(), &mut g.proj.bias[..]));
            out
        }
    }
}

pub fn lm_tensors(lm: &WordLm) -> Vec<(String, Vec<usize>, &[f64])> {
    match lm {
        WordLm::Zero => Vec::new(),
        WordLm::Pretrained(w) => vec![
            (
                "lm.lambda".to_string(),
                vec![1],
                std::slice::from_ref(&w.lambda),
            ),
            (
                "lm.gamma".to_string(),
                vec![1],
                std::slice::from_ref(&w.gamma),
            ),
        ],
        WordLm::Bilinear(b) => {
            let mut out = vec![(
                "lm.embeddings".to_string(),
                vec![b.embeddings.rows(), b.embeddings.cols()],
                b.embeddings.data(),
            )];
            for (n, m) in b.mats.iter().enumerate() {
                out.push((format!("lm.mats.{n}"), vec![m.rows(), m.cols()], m.data()));
            }
            out
        }
    }
}

pub fn lm_tensors_mut(lm: &mut WordLm) -> Vec<(String, &mut [f64])> {
    match lm {
        WordLm::Zero => Vec::new(),
        WordLm::Pretrained(w) => vec![
            ("lm.lambda".to_string(), std::slice::from_mut(&mut w.lambda)),
            ("lm.gamma".to_string(), std::slice::from_mut(&mut w.gamma)),
        ],
        WordLm::Bilinear(b) => {
            let mut out = vec![("lm.embeddings".to_string(), b.embeddings.data_mut())];
            for (n, m) in b.mats.iter_mut().enumerate() {
                out.push((format!("lm.mats.{n}"), m.data_mut()));
            }
            out
        }
    }
}

fn lm_grad_tensors(g: &LmGrad) -> Vec<(String, &[f64])> {
    match g {
        LmGrad::Zero => Vec::new(),
        LmGrad::Wrapper { lambda, gamma } => vec![
            ("lm.lambda".to_string(), std::slice::from_ref(lambda)),
            ("lm.gamma".to_string(), std::slice::from_ref(gamma)),
        ],
        LmGrad::Bilinear(b) => {
            let mut out = vec![("lm.embeddings".to_string(), b.embeddings.data())];
            for (n, m) in b.mats.iter().enumerate() {
                out.push((format!("lm.mats.{n}"), m.data()));
            }
            out
        }
    }
}

fn lm_grad_scale(g: &mut LmGrad, factor: f64) {
    match g {
        LmGrad::Zero => {}
        LmGrad::Wrapper { lambda, gamma } => {
            *lambda *= factor;
            *gamma *= factor;
        }
        LmGrad::Bilinear(b) => {
            for v in b.embeddings.data_mut() {
                *v *= factor;
            }
            for m in &mut b.mats {
                for v in m.data_mut() {
                    *v *= factor;
                }
            }
        }
    }
}

fn lm_grad_add_scaled(dst: &mut LmGrad, src: &LmGrad, scale: f64) {
    match (dst, src) {
        (LmGrad::Zero, LmGrad::Zero) => {}
        (
            LmGrad::Wrapper { lambda, gamma },
            LmGrad::Wrapper {
                lambda: l2,
                gamma: g2,
            },
        ) => {
            *lambda += scale * l2;
            *gamma += scale * g2;
        }
        (LmGrad::Bilinear(a), LmGrad::Bilinear(b)) => {
            a.embeddings.add_scaled(&b.embeddings, scale);
            for (x, y) in a.mats.iter_mut().zip(&b.mats) {
                x.add_scaled(y, scale);
            }
        }
        _ => panic!("word-model gradient kind mismatch"),
    }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// Clipped SGD: if the global L2 norm of all gradients exceeds `clip`, every
/// gradient is scaled by `clip/norm` before the update. Non-finite
/// gradients abort, naming the offending tensor.
pub fn sgd_step(
    params: &mut [(String, &mut [f64])],
    grads: &[(String, &[f64])],
    lr: f64,
    clip: f64,
) -> Result<()> {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient list mismatch"
    );
    let mut sq = 0.0;
    for ((pname, p), (gname, g)) in params.iter().zip(grads) {
        assert_eq!(pname, gname, "tensor order mismatch in sgd_step");
        assert_eq!(p.len(), g.len(), "tensor {pname} length mismatch");
        for &v in g.iter() {
            if !v.is_finite() {
                return Err(CoreError::numeric(format!(
                    "non-finite gradient in tensor {gname}"
                )));
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    for ((_, p), (_, g)) in params.iter_mut().zip(grads) {
        for (x, &v) in p.iter_mut().zip(g.iter()) {
            *x -= lr * scale * v;
        }
    }
    Ok(())
}

/// Length-sorted batches (indices into the dataset), before any shuffling.
pub fn make_batches(frame_counts: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..frame_counts.len()).collect();
    order.sort_by_key(|&i| (frame_counts[i], i));
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Deterministic per-epoch batch-order shuffle.
pub fn shuffle_batches(batches: &mut [Vec<usize>], seed: u64, epoch: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch.wrapping_mul(0x9e3779b97f4a7c15)));
    for i in (1..batches.len()).rev() {
        let j = rng.gen_range(0..=i);
        batches.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"DBEAMCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub epoch: u32,
    pub phase: Phase,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        lm: Option<&WordLm>,
        cfg: &TrainConfig,
        epoch: u32,
        phase: Phase,
        feature_dim: usize,
    ) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert(
            "scorer".to_string(),
            match &model.scorer {
                Scorer::Linear(_) => "linear".to_string(),
                Scorer::GluConv(_) => "glu".to_string(),
            },
        );
        if let Scorer::GluConv(g) = &model.scorer {
            let spec: Vec<String> = g
                .layers
                .iter()
                .map(|l| format!("{}:{}", l.value.weight.rows(), l.value.kernel))
                .collect();
            meta.insert("glu_layers".to_string(), spec.join(","));
        }
        meta.insert("feature_dim".to_string(), feature_dim.to_string());
        meta.insert(
            "n_tokens".to_string(),
            model.transitions.n_tokens().to_string(),
        );
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = model_tensors(model)
            .into_iter()
            .map(|(n, s, d)| (n, s, d.to_vec()))
            .collect();
        if let Some(lm) = lm {
            meta.insert(
                "lm".to_string(),
                match lm {
                    WordLm::Zero => "zero".to_string(),
                    WordLm::Pretrained(_) => "wrapper".to_string(),
                    WordLm::Bilinear(_) => "bilinear".to_string(),
                },
            );
            if let WordLm::Bilinear(b) = lm {
                meta.insert("bilinear_order".to_string(), b.order().to_string());
                meta.insert("bilinear_dim".to_string(), b.dim().to_string());
                meta.insert("bilinear_words".to_string(), b.n_words().to_string());
            }
            if let WordLm::Pretrained(w) = lm {
                meta.insert("per_word_gamma".to_string(), w.per_word_gamma.to_string());
            }
            tensors.extend(
                lm_tensors(lm)
                    .into_iter()
                    .map(|(n, s, d)| (n, s, d.to_vec())),
            );
        }
        Checkpoint {
            version: 1,
            config_hash: cfg.config_hash,
            epoch,
            phase,
            meta,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&self.config_hash.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.push(match self.phase {
            Phase::Asg => 0,
            Phase::Dbd => 1,
        });
        let mut meta = String::new();
        for (k, v) in &self.meta {
            writeln!(meta, "{k}={v}").expect("string write");
        }
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(CoreError::data(format!(
                    "{}: truncated checkpoint",
                    path.display()
                )));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CKPT_MAGIC {
            return Err(CoreError::data(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let config_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let epoch = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let phase = match take(&mut pos, 1)?[0] {
            0 => Phase::Asg,
            1 => Phase::Dbd,
            other => {
                return Err(CoreError::data(format!(
                    "{}: unknown phase byte {other}",
                    path.display()
                )))
            }
        };
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta_text = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
            .map_err(|_| CoreError::data("checkpoint meta is not utf-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| CoreError::data("tensor name is not utf-8"))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            tensors.push((name, shape, data));
        }
        Ok(Checkpoint {
            version,
            config_hash,
            epoch,
            phase,
            meta,
            tensors,
        })
    }

    fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CoreError::data(format!("checkpoint meta lacks {key}")))
    }

    /// Rebuilds the model skeleton from the recorded architecture and fills
    /// every tensor by name.
    pub fn restore_model(&self) -> Result<Model> {
        let feature_dim = self.meta_usize("feature_dim")?;
        let n_tokens = self.meta_usize("n_tokens")?;
        let scorer = match self.meta.get("scorer").map(String::as_str) {
            Some("linear") => Scorer::Linear(LinearScorer::new(feature_dim, n_tokens, 0)),
            Some("glu") => {
                let layers = parse_glu_layers(
                    self.meta
                        .get("glu_layers")
                        .ok_or_else(|| CoreError::data("checkpoint meta lacks glu_layers"))?,
                )?;
                Scorer::GluConv(GluConvScorer::new(
                    &GluArch {
                        feature_dim,
                        n_tokens,
                        layers,
                    },
                    0,
                ))
            }
            other => {
                return Err(CoreError::data(format!(
                    "checkpoint meta has unusable scorer kind {other:?}"
                )))
            }
        };
        let mut model = Model {
            scorer,
            transitions: TransitionMatrix::zeros(n_tokens),
        };
        self.fill(model_tensors_mut(&mut model))?;
        Ok(model)
    }

    /// Rebuilds the trainable word model. The wrapper needs the frozen base
    /// model supplied from its ARPA file.
    pub fn restore_lm(&self, base: Option<NGramLm>, lexicon: &Lexicon) -> Result<WordLm> {
        match self.meta.get("lm").map(String::as_str) {
            None | Some("zero") => Ok(WordLm::Zero),
            Some("wrapper") => {
                let base = base.ok_or_else(|| {
                    CoreError::data("checkpoint stores a wrapper LM; supply its ARPA base model")
                })?;
                let mut w = PretrainedWrapper::new(base, 0.0, 0.0, lexicon)?;
                if let Some(v) = self.meta.get("per_word_gamma") {
                    w.per_word_gamma = v == "true";
                }
                let mut lm_tmp = WordLm::Pretrained(w.clone());
                self.fill(lm_tensors_mut(&mut lm_tmp))?;
                if let WordLm::Pretrained(filled) = lm_tmp {
                    w = filled;
                }
                Ok(WordLm::Pretrained(w))
            }
            Some("bilinear") => {
                let order = self.meta_usize("bilinear_order")?;
                let dim = self.meta_usize("bilinear_dim")?;
                let n_words = self.meta_usize("bilinear_words")?;
                if n_words != lexicon.len() {
                    return Err(CoreError::data(format!(
                        "checkpoint bilinear LM covers {n_words} words, lexicon has {}",
                        lexicon.len()
                    )));
                }
                let mut lm = WordLm::Bilinear(BilinearLm::new(n_words, order, dim, 0)?);
                self.fill(lm_tensors_mut(&mut lm))?;
                Ok(lm)
            }
            Some(other) => Err(CoreError::data(format!(
                "checkpoint meta has unusable lm kind {other:?}"
            ))),
        }
    }

    fn fill(&self, views: Vec<(String, &mut [f64])>) -> Result<()> {
        for (name, view) in views {
            let (_, _, data) = self
                .tensor(&name)
                .ok_or_else(|| CoreError::data(format!("checkpoint lacks tensor {name}")))?;
            if data.len() != view.len() {
                return Err(CoreError::data(format!(
                    "tensor {name}: checkpoint has {} values, model wants {}",
                    data.len(),
                    view.len()
                )));
            }
            view.copy_from_slice(data);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

fn word_refs(u: &Utterance) -> Vec<&str> {
    u.words.iter().map(String::as_str).collect()
}

/// Unconstrained best-path transcription (no lexicon, no beam).
pub fn greedy_transcribe(model: &Model, tokens: &TokenSet, u: &Utterance) -> Vec<String> {
    let em = model.scorer.score(&u.features);
    let (path, _) = viterbi_decode(&em, &model.transitions);
    tokens.path_to_words(&path)
}

pub fn evaluate_greedy(model: &Model, tokens: &TokenSet, utts: &[Utterance]) -> (f64, f64) {
    let results: Vec<Vec<String>> = utts
        .par_iter()
        .map(|u| greedy_transcribe(model, tokens, u))
        .collect();
    let mut acc = ErrorRateAccumulator::new();
    for (hyp, u) in results.iter().zip(utts) {
        acc.push(hyp, &u.words);
    }
    (acc.cer(), acc.wer())
}

/// Lexicon-constrained beam transcription.
pub fn beam_transcribe(
    model: &Model,
    lm: &WordLm,
    trie: &Trie,
    lexicon: &Lexicon,
    opts: &DecoderOpts,
    agg: Aggregation,
    u: &Utterance,
) -> Result<Vec<String>> {
    let em = model.scorer.score(&u.features);
    let (words, _) = dbd_decode(&em, &model.transitions, trie, lm, opts, agg)?;
    Ok(words
        .into_iter()
        .map(|w| lexicon.word(w).to_string())
        .collect())
}

pub fn evaluate_beam(
    model: &Model,
    lm: &WordLm,
    trie: &Trie,
    lexicon: &Lexicon,
    opts: &DecoderOpts,
    agg: Aggregation,
    utts: &[Utterance],
) -> Result<(f64, f64)> {
    let results: Vec<Result<Vec<String>>> = utts
        .par_iter()
        .map(|u| beam_transcribe(model, lm, trie, lexicon, opts, agg, u))
        .collect();
    let mut acc = ErrorRateAccumulator::new();
    for (hyp, u) in results.into_iter().zip(utts) {
        match hyp {
            Ok(h) => acc.push(&h, &u.words),
            // an exhausted beam produces no transcript: count it as an
            // empty hypothesis rather than aborting the whole evaluation
            Err(CoreError::BeamExhausted { .. }) => acc.push(&[], &u.words),
            Err(e) => return Err(e),
        }
    }
    Ok((acc.cer(), acc.wer()))
}

/// Decoding grid search for a pretrained n-gram: returns the (weight,
/// insertion score) pair with the best WER, ties resolved toward the first
/// grid entry.
#[allow(clippy::too_many_arguments)]
pub fn grid_search_decode(
    model: &Model,
    base: &NGramLm,
    trie: &Trie,
    lexicon: &Lexicon,
    opts: &DecoderOpts,
    utts: &[Utterance],
    lambdas: &[f64],
    gammas: &[f64],
) -> Result<(f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for &lam in lambdas {
        for &gam in gammas {
            let lm = WordLm::Pretrained(PretrainedWrapper::new(base.clone(), lam, gam, lexicon)?);
            let (_, wer) =
                evaluate_beam(model, &lm, trie, lexicon, opts, Aggregation::Forward, utts)?;
            if best.is_none_or(|(_, _, b)| wer < b) {
                best = Some((lam, gam, wer));
            }
        }
    }
    best.ok_or_else(|| CoreError::data("empty decoding grid"))
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

/// Spelled target and word ids for every utterance; unalignable or
/// out-of-lexicon utterances are dropped with a note.
pub struct PreparedData {
    pub utts: Vec<Utterance>,
    pub targets: Vec<TargetTokens>,
    pub word_ids: Vec<Vec<usize>>,
    pub skipped: Vec<String>,
}

pub fn prepare(utts: Vec<Utterance>, tokens: &TokenSet, lexicon: &Lexicon) -> Result<PreparedData> {
    let mut out = PreparedData {
        utts: Vec::new(),
        targets: Vec::new(),
        word_ids: Vec::new(),
        skipped: Vec::new(),
    };
    for u in utts {
        let refs = word_refs(&u);
        let spelled = match lexicon.target_tokens(&refs, tokens) {
            Ok(s) => s,
            Err(e) => {
                out.skipped.push(format!("{}: {e}", u.id));
                continue;
            }
        };
        if spelled.len() > u.features.rows() || spelled.is_empty() {
            out.skipped.push(format!(
                "{}: target spells {} tokens over {} frames",
                u.id,
                spelled.len(),
                u.features.rows()
            ));
            continue;
        }
        out.targets.push(TargetTokens::new(spelled)?);
        out.word_ids.push(lexicon.word_ids(&refs)?);
        out.utts.push(u);
    }
    Ok(out)
}

/// One epoch record, mirroring a metrics-file line.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_wer: f64,
    pub valid_cer: f64,
    pub valid_wer: f64,
    pub wallclock_s: f64,
}

pub fn write_metrics(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut out = String::from("# epoch\tloss\ttrain_wer\tvalid_cer\tvalid_wer\twallclock_s\n");
    for s in stats {
        writeln!(
            out,
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.3}",
            s.epoch, s.loss, s.train_wer, s.valid_cer, s.valid_wer, s.wallclock_s
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct UttGrad {
    loss: f64,
    model: Model,
    lm: Option<LmGrad>,
}

fn asg_utterance(model: &Model, data: &PreparedData, idx: usize) -> Result<UttGrad> {
    let u = &data.utts[idx];
    let em = model.scorer.score(&u.features);
    let out = asg_loss(&em, &model.transitions, &data.targets[idx])?;
    let scorer_grad = model
        .scorer
        .score_backward(&u.features, &out.grad.emissions);
    Ok(UttGrad {
        loss: out.loss,
        model: Model {
            scorer: scorer_grad,
            transitions: out.grad.transitions,
        },
        lm: None,
    })
}

fn dbd_utterance(
    model: &Model,
    lm: &WordLm,
    trie: &Trie,
    opts: &DecoderOpts,
    data: &PreparedData,
    idx: usize,
) -> Result<UttGrad> {
    let u = &data.utts[idx];
    let em = model.scorer.score(&u.features);
    let (rep, lat) = dbd_forward(
        &em,
        &model.transitions,
        trie,
        lm,
        &data.targets[idx],
        &data.word_ids[idx],
        opts,
    )?;
    let grads = dbd_backward(&lat, &em, &model.transitions, lm, &rep)?;
    let scorer_grad = model.scorer.score_backward(&u.features, &grads.emissions);
    Ok(UttGrad {
        loss: rep.loss,
        model: Model {
            scorer: scorer_grad,
            transitions: grads.transitions,
        },
        lm: Some(grads.lm),
    })
}

/// Shared epoch driver for both phases.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    cfg: &TrainConfig,
    phase: Phase,
    model: &mut Model,
    lm: &mut Option<WordLm>,
    trie: Option<&Trie>,
    train: &PreparedData,
    valid: &[Utterance],
    tokens: &TokenSet,
    lexicon: &Lexicon,
    out_dir: &Path,
    feature_dim: usize,
) -> Result<Vec<EpochStats>> {
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let frame_counts: Vec<usize> = train.utts.iter().map(|u| u.features.rows()).collect();
    let base_batches = make_batches(&frame_counts, cfg.batch_size);
    let opts = cfg.decoder_opts();
    let mut stats = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut batches = base_batches.clone();
        shuffle_batches(&mut batches, cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        let mut exhausted = 0usize;
        for batch in &batches {
            let results: Vec<Result<UttGrad>> = match phase {
                Phase::Asg => batch
                    .par_iter()
                    .map(|&i| asg_utterance(model, train, i))
                    .collect(),
                Phase::Dbd => {
                    let lm_ref = lm.as_ref().expect("beam phase needs a word model");
                    let trie_ref = trie.expect("beam phase needs a trie");
                    batch
                        .par_iter()
                        .map(|&i| dbd_utterance(model, lm_ref, trie_ref, &opts, train, i))
                        .collect()
                }
            };
            let mut grad = model.zeros_like();
            let mut lm_grad = lm.as_ref().map(|l| l.zero_grad());
            let mut merged = 0usize;
            for (res, &i) in results.into_iter().zip(batch.iter()) {
                let g = match res {
                    Ok(g) => g,
                    // the beam lost every finishable hypothesis: skip the
                    // utterance, the small-beam pathology is reported below
                    Err(CoreError::BeamExhausted { .. }) => {
                        exhausted += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if !g.loss.is_finite() {
                    return Err(CoreError::numeric(format!(
                        "non-finite loss on utterance {}",
                        train.utts[i].id
                    )));
                }
                epoch_loss += g.loss;
                grad.add_scaled(&g.model, 1.0);
                if let (Some(acc), Some(g_lm)) = (lm_grad.as_mut(), g.lm.as_ref()) {
                    lm_grad_add_scaled(acc, g_lm, 1.0);
                }
                merged += 1;
            }
            counted += merged;
            if merged == 0 {
                continue;
            }
            let inv = 1.0 / merged as f64;
            grad.scale(inv);
            if let Some(acc) = lm_grad.as_mut() {
                lm_grad_scale(acc, inv);
            }
            if cfg.freeze_lambda {
                if let Some(LmGrad::Wrapper { lambda, .. }) = lm_grad.as_mut() {
                    *lambda = 0.0;
                }
            }

            let mut params = model_tensors_mut(model);
            let grad_named: Vec<(String, Vec<usize>, &[f64])> = model_tensors(&grad);
            let mut grads: Vec<(String, &[f64])> =
                grad_named.into_iter().map(|(n, _, d)| (n, d)).collect();
            if let (Some(lm_model), Some(acc)) = (lm.as_mut(), lm_grad.as_ref()) {
                params.extend(lm_tensors_mut(lm_model));
                grads.extend(lm_grad_tensors(acc));
            }
            sgd_step(&mut params, &grads, cfg.lr, cfg.clip)?;
        }

        if exhausted > 0 {
            eprintln!(
                "warning: epoch {epoch}: beam exhausted on {exhausted} utterance(s); skipped"
            );
        }
        if counted == 0 {
            return Err(CoreError::numeric(format!(
                "epoch {epoch}: the beam lost every utterance; training diverged"
            )));
        }
        let loss = epoch_loss / counted as f64;
        let (train_wer, valid_cer, valid_wer) = match phase {
            Phase::Asg => {
                let (_, tw) = evaluate_greedy(model, tokens, &train.utts);
                let (vc, vw) = evaluate_greedy(model, tokens, valid);
                (tw, vc, vw)
            }
            Phase::Dbd => {
                let lm_ref = lm.as_ref().unwrap();
                let trie_ref = trie.unwrap();
                let (_, tw) = evaluate_beam(
                    model,
                    lm_ref,
                    trie_ref,
                    lexicon,
                    &opts,
                    Aggregation::Forward,
                    &train.utts,
                )?;
                let (vc, vw) = evaluate_beam(
                    model,
                    lm_ref,
                    trie_ref,
                    lexicon,
                    &opts,
                    Aggregation::Forward,
                    valid,
                )?;
                (tw, vc, vw)
            }
        };
        stats.push(EpochStats {
            epoch,
            loss,
            train_wer,
            valid_cer,
            valid_wer,
            wallclock_s: started.elapsed().as_secs_f64(),
        });
        let ckpt = Checkpoint::capture(model, lm.as_ref(), cfg, epoch as u32, phase, feature_dim);
        ckpt.save(&out_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        ckpt.save(&out_dir.join("checkpoint.ckpt"))?;
        write_metrics(&out_dir.join("metrics.tsv"), &stats)?;
    }
    Ok(stats)
}

/// Bootstrap phase: trains scorer and transitions against the
/// all-sequences normalizer. Returns the per-epoch stats; checkpoints and
/// metrics land in `out_dir`.
pub fn train_asg(
    cfg: &TrainConfig,
    model: &mut Model,
    train: &PreparedData,
    valid: &[Utterance],
    tokens: &TokenSet,
    lexicon: &Lexicon,
    out_dir: &Path,
) -> Result<Vec<EpochStats>> {
    let feature_dim = model.scorer.feature_dim();
    let mut no_lm = None;
    run_epochs(
        cfg,
        Phase::Asg,
        model,
        &mut no_lm,
        None,
        train,
        valid,
        tokens,
        lexicon,
        out_dir,
        feature_dim,
    )
}

/// Beam fine-tuning from a bootstrap checkpoint: trains scorer,
/// transitions and the word model jointly through the decoder.
#[allow(clippy::too_many_arguments)]
pub fn train_dbd(
    cfg: &TrainConfig,
    model: &mut Model,
    lm: &mut WordLm,
    train: &PreparedData,
    valid: &[Utterance],
    tokens: &TokenSet,
    lexicon: &Lexicon,
    out_dir: &Path,
) -> Result<Vec<EpochStats>> {
    let trie = build_trie(lexicon, tokens)?;
    let feature_dim = model.scorer.feature_dim();
    let mut lm_opt = Some(std::mem::replace(lm, WordLm::Zero));
    let result = run_epochs(
        cfg,
        Phase::Dbd,
        model,
        &mut lm_opt,
        Some(&trie),
        train,
        valid,
        tokens,
        lexicon,
        out_dir,
        feature_dim,
    );
    *lm = lm_opt.expect("word model survives training");
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = [0.0; 3];
        let mut params = vec![("w".to_string(), &mut p[..])];
        let grads = vec![("w".to_string(), &g[..])];
        sgd_step(&mut params, &grads, 0.5, 1.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn sgd_clips_above_threshold_only() {
        // norm exactly at the threshold: no scaling
        let mut p = vec![0.0, 0.0];
        let g = [3.0, 4.0]; // norm 5
        let mut params = vec![("w".to_string(), &mut p[..])];
        let grads = vec![("w".to_string(), &g[..])];
        sgd_step(&mut params, &grads, 1.0, 5.0).unwrap();
        assert_eq!(p, vec![-3.0, -4.0]);

        // norm at twice the threshold: update halves
        let mut p2 = vec![0.0, 0.0];
        let g2 = [6.0, 8.0]; // norm 10, clip 5
        let mut params2 = vec![("w".to_string(), &mut p2[..])];
        let grads2 = vec![("w".to_string(), &g2[..])];
        sgd_step(&mut params2, &grads2, 1.0, 5.0).unwrap();
        assert_eq!(p2, vec![-3.0, -4.0]);
    }

    #[test]
    fn sgd_clipping_is_invariant_to_gradient_scale() {
        let run = |scale: f64| {
            let mut p = vec![1.0, 1.0];
            let g = [30.0 * scale, 40.0 * scale];
            let mut params = vec![("w".to_string(), &mut p[..])];
            let grads = vec![("w".to_string(), &g[..])];
            sgd_step(&mut params, &grads, 0.1, 5.0).unwrap();
            p
        };
        assert_eq!(run(1.0), run(7.5));
    }

    #[test]
    fn sgd_rejects_non_finite_and_names_the_tensor() {
        let mut p = [0.0];
        let g = [f64::NAN];
        let mut params = vec![("scorer.weight".to_string(), &mut p[..])];
        let grads = vec![("scorer.weight".to_string(), &g[..])];
        let e = sgd_step(&mut params, &grads, 0.1, 1.0)
            .unwrap_err()
            .to_string();
        assert!(e.contains("scorer.weight"), "{e}");
    }

    #[test]
    fn batches_sort_by_length_then_chunk() {
        let batches = make_batches(&[5, 3, 9], 2);
        assert_eq!(batches, vec![vec![1, 0], vec![2]]);
        assert_eq!(make_batches(&[4], 16), vec![vec![0]]);
    }

    #[test]
    fn batch_shuffle_is_seed_deterministic() {
        let mut a = make_batches(&[1, 2, 3, 4, 5, 6, 7], 2);
        let mut b = a.clone();
        shuffle_batches(&mut a, 9, 3);
        shuffle_batches(&mut b, 9, 3);
        assert_eq!(a, b);
        let mut c = make_batches(&[1, 2, 3, 4, 5, 6, 7], 2);
        shuffle_batches(&mut c, 9, 4);
        // different epoch, very likely different order; only check stability
        // of the contract: same multiset of batches
        let mut a_sorted = a.clone();
        a_sorted.sort();
        let mut c_sorted = c.clone();
        c_sorted.sort();
        assert_eq!(a_sorted, c_sorted);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = TrainConfig::default();
        let model = Model::new(
            &TrainConfig {
                scorer_kind: "glu".to_string(),
                glu_layers: vec![(3, 3)],
                ..cfg.clone()
            },
            4,
            5,
        )
        .unwrap();
        let lm = WordLm::Bilinear(BilinearLm::new(6, 2, 3, 17).unwrap());
        let ckpt = Checkpoint::capture(&model, Some(&lm), &cfg, 7, Phase::Dbd, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        let restored = back.restore_model().unwrap();
        for ((n1, _, d1), (n2, _, d2)) in model_tensors(&model)
            .iter()
            .zip(model_tensors(&restored).iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn grad_merge_averages() {
        let cfg = TrainConfig::default();
        let model = Model::new(&cfg, 2, 3).unwrap();
        let mut acc = model.zeros_like();
        let mut one = model.zeros_like();
        one.transitions.weights = Mat::from_fn(3, 3, |_, _| 2.0);
        acc.add_scaled(&one, 1.0);
        acc.add_scaled(&one, 1.0);
        acc.scale(0.5);
        assert!((acc.transitions.weights.get(0, 0) - 2.0).abs() < 1e-15);
    }
}
