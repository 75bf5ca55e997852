//! Trainable frame scorers: feature sequences in, unnormalized per-token
//! frame scores out.
//!
//! Two flavors: a per-frame linear map, and a stack of gated 1-D
//! convolution layers (each layer is the element-wise product of a value
//! convolution and a sigmoid gate convolution) followed by a linear
//! projection onto the token set. Convolutions use same-length zero padding
//! so the emission table always has one row per input frame.

use crate::align::EmissionTable;
use crate::tensor::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// T×F input features.
pub type FeatureSequence = Mat;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 1-D convolution parameters; weight layout is out_ch × (in_ch · kernel)
/// with the kernel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub in_ch: usize,
    pub kernel: usize,
}

impl Conv1d {
    fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            weight: Mat::from_fn(out_ch, in_ch * kernel, |_, _| rng.gen_range(-scale..scale)),
            bias: (0..out_ch).map(|_| rng.gen_range(-scale..scale)).collect(),
            in_ch,
            kernel,
        }
    }

    fn zeros_like(&self) -> Self {
        Conv1d {
            weight: Mat::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
            in_ch: self.in_ch,
            kernel: self.kernel,
        }
    }

    fn out_ch(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Mat) -> Mat {
        let t_len = x.rows();
        let pad = (self.kernel - 1) / 2;
        let mut out = Mat::zeros(t_len, self.out_ch());
        for t in 0..t_len {
            for o in 0..self.out_ch() {
                let wrow = self.weight.row(o);
                let mut acc = self.bias[o];
                for dt in 0..self.kernel {
                    let src = t + dt;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    let xrow = x.row(src - pad);
                    for c in 0..self.in_ch {
                        acc += wrow[c * self.kernel + dt] * xrow[c];
                    }
                }
                out.set(t, o, acc);
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns dX.
    fn backward(&self, x: &Mat, d_out: &Mat, grad: &mut Conv1d) -> Mat {
        let t_len = x.rows();
        let pad = (self.kernel - 1) / 2;
        let mut dx = Mat::zeros(t_len, self.in_ch);
        for t in 0..t_len {
            for o in 0..self.out_ch() {
                let g = d_out.get(t, o);
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let wrow = self.weight.row(o);
                for dt in 0..self.kernel {
                    let src = t + dt;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    let src = src - pad;
                    for c in 0..self.in_ch {
                        grad.weight.add(o, c * self.kernel + dt, g * x.get(src, c));
                        dx.add(src, c, g * wrow[c * self.kernel + dt]);
                    }
                }
            }
        }
        dx
    }
}

/// One gated layer: value conv ⊗ σ(gate conv).
#[derive(Clone, Debug, PartialEq)]
pub struct GluLayer {
    pub value: Conv1d,
    pub gate: Conv1d,
}

impl GluLayer {
    fn forward(&self, x: &Mat) -> (Mat, Mat, Mat) {
        let v = self.value.forward(x);
        let g = self.gate.forward(x);
        let mut out = Mat::zeros(v.rows(), v.cols());
        for t in 0..v.rows() {
            for c in 0..v.cols() {
                out.set(t, c, v.get(t, c) * sigmoid(g.get(t, c)));
            }
        }
        (out, v, g)
    }
}

/// Per-frame affine scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScorer {
    /// n_tokens × feature_dim
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl LinearScorer {
    pub fn new(feature_dim: usize, n_tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (feature_dim as f64).sqrt();
        LinearScorer {
            weight: Mat::from_fn(n_tokens, feature_dim, |_, _| rng.gen_range(-scale..scale)),
            bias: (0..n_tokens)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        }
    }
}

/// Gated convolution stack topped by a linear projection to token scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GluConvScorer {
    pub layers: Vec<GluLayer>,
    pub proj: LinearScorer,
}

/// Hidden-layer shape of the gated stack: (channels, kernel width) per
/// layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GluArch {
    pub feature_dim: usize,
    pub n_tokens: usize,
    pub layers: Vec<(usize, usize)>,
}

impl GluConvScorer {
    pub fn new(arch: &GluArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_ch = arch.feature_dim;
        for &(out_ch, kernel) in &arch.layers {
            layers.push(GluLayer {
                value: Conv1d::new(in_ch, out_ch, kernel, &mut rng),
                gate: Conv1d::new(in_ch, out_ch, kernel, &mut rng),
            });
            in_ch = out_ch;
        }
        let scale = 1.0 / (in_ch as f64).sqrt();
        let proj = LinearScorer {
            weight: Mat::from_fn(arch.n_tokens, in_ch, |_, _| rng.gen_range(-scale..scale)),
            bias: (0..arch.n_tokens)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        };
        GluConvScorer { layers, proj }
    }

    /// 1 + Σ (kernel − 1) over the stack.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .layers
            .iter()
            .map(|l| l.value.kernel - 1)
            .sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scorer {
    Linear(LinearScorer),
    GluConv(GluConvScorer),
}

impl Scorer {
    pub fn n_tokens(&self) -> usize {
        match self {
            Scorer::Linear(l) => l.weight.rows(),
            Scorer::GluConv(g) => g.proj.weight.rows(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Scorer::Linear(l) => l.weight.cols(),
            Scorer::GluConv(g) => g
                .layers
                .first()
                .map_or(g.proj.weight.cols(), |l| l.value.in_ch),
        }
    }

    /// A same-shape all-zero copy, used as a gradient buffer.
    pub fn zeros_like(&self) -> Scorer {
        match self {
            Scorer::Linear(l) => Scorer::Linear(LinearScorer {
                weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            }),
            Scorer::GluConv(g) => Scorer::GluConv(GluConvScorer {
                layers: g
                    .layers
                    .iter()
                    .map(|l| GluLayer {
                        value: l.value.zeros_like(),
                        gate: l.gate.zeros_like(),
                    })
                    .collect(),
                proj: LinearScorer {
                    weight: Mat::zeros(g.proj.weight.rows(), g.proj.weight.cols()),
                    bias: vec![0.0; g.proj.bias.len()],
                },
            }),
        }
    }

    /// T×|D| emission table for a feature sequence.
    pub fn score(&self, x: &FeatureSequence) -> EmissionTable {
        match self {
            Scorer::Linear(l) => linear_forward(l, x),
            Scorer::GluConv(g) => {
                let mut h = x.clone();
                for layer in &g.layers {
                    h = layer.forward(&h).0;
                }
                linear_forward(&g.proj, &h)
            }
        }
    }

    /// Reverse-mode gradients of Σ (dEm ⊙ score(x)) w.r.t. all parameters.
    /// The activations are recomputed; `d_em` must match the score shape.
    pub fn score_backward(&self, x: &FeatureSequence, d_em: &Mat) -> Scorer {
        let mut grad = self.zeros_like();
        match (self, &mut grad) {
            (Scorer::Linear(l), Scorer::Linear(gl)) => {
                linear_backward(l, x, d_em, gl);
            }
            (Scorer::GluConv(net), Scorer::GluConv(gnet)) => {
                // forward again, keeping per-layer inputs and pre-gate values
                let mut inputs = vec![x.clone()];
                let mut values = Vec::new();
                let mut gates = Vec::new();
                for layer in &net.layers {
                    let (out, v, g) = layer.forward(inputs.last().unwrap());
                    values.push(v);
                    gates.push(g);
                    inputs.push(out);
                }
                let hidden = inputs.last().unwrap();
                let mut d_h = linear_backward(&net.proj, hidden, d_em, &mut gnet.proj);
                for (i, layer) in net.layers.iter().enumerate().rev() {
                    let (v, g) = (&values[i], &gates[i]);
                    let mut dv = Mat::zeros(v.rows(), v.cols());
                    let mut dg = Mat::zeros(v.rows(), v.cols());
                    for t in 0..v.rows() {
                        for c in 0..v.cols() {
                            let s = sigmoid(g.get(t, c));
                            let up = d_h.get(t, c);
                            dv.set(t, c, up * s);
                            dg.set(t, c, up * v.get(t, c) * s * (1.0 - s));
                        }
                    }
                    let dx_v = layer
                        .value
                        .backward(&inputs[i], &dv, &mut gnet.layers[i].value);
                    let mut dx = layer
                        .gate
                        .backward(&inputs[i], &dg, &mut gnet.layers[i].gate);
                    dx.add_scaled(&dx_v, 1.0);
                    d_h = dx;
                }
            }
            _ => unreachable!(),
        }
        grad
    }
}

fn linear_forward(l: &LinearScorer, x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows(), l.weight.rows());
    for t in 0..x.rows() {
        let xrow = x.row(t);
        for o in 0..l.weight.rows() {
            let wrow = l.weight.row(o);
            let mut acc = l.bias[o];
            for c in 0..xrow.len() {
                acc += wrow[c] * xrow[c];
            }
            out.set(t, o, acc);
        }
    }
    out
}

/// Accumulates into `grad` and returns dX.
fn linear_backward(l: &LinearScorer, x: &Mat, d_out: &Mat, grad: &mut LinearScorer) -> Mat {
    let mut dx = Mat::zeros(x.rows(), l.weight.cols());
    for t in 0..x.rows() {
        let xrow = x.row(t);
        for o in 0..l.weight.rows() {
            let g = d_out.get(t, o);
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let wrow = l.weight.row(o);
            for c in 0..xrow.len() {
                grad.weight.add(o, c, g * xrow[c]);
                dx.add(t, c, g * wrow[c]);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_passes_features_through() {
        let n = 3;
        let mut l = LinearScorer::new(n, n, 0);
        l.weight = Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });
        l.bias = vec![0.0; n];
        let x = Mat::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let em = Scorer::Linear(l).score(&x);
        assert_eq!(em.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(em.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gate_halves_the_value_path() {
        let arch = GluArch {
            feature_dim: 2,
            n_tokens: 2,
            layers: vec![(2, 3)],
        };
        let mut net = GluConvScorer::new(&arch, 3);
        net.layers[0].gate.weight.fill(0.0);
        net.layers[0].gate.bias.fill(0.0);
        let x = Mat::from_fn(4, 2, |t, c| ((t * 2 + c) as f64 * 0.3).sin());
        let (out, v, _) = net.layers[0].forward(&x);
        for t in 0..4 {
            for c in 0..2 {
                assert!((out.get(t, c) - 0.5 * v.get(t, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_glu_layer_matches_hand_arithmetic() {
        // 1 channel in/out, kernel 1: out = (w·x + b) · σ(w'·x + b')
        let arch = GluArch {
            feature_dim: 1,
            n_tokens: 1,
            layers: vec![(1, 1)],
        };
        let mut net = GluConvScorer::new(&arch, 0);
        net.layers[0].value.weight.set(0, 0, 2.0);
        net.layers[0].value.bias[0] = 0.5;
        net.layers[0].gate.weight.set(0, 0, -1.0);
        net.layers[0].gate.bias[0] = 0.25;
        net.proj.weight.set(0, 0, 1.0);
        net.proj.bias[0] = 0.0;
        let x = Mat::from_rows(&[vec![0.3], vec![-0.7], vec![1.1]]).unwrap();
        let em = Scorer::GluConv(net).score(&x);
        for t in 0..3 {
            let xv = x.get(t, 0);
            let want = (2.0 * xv + 0.5) * sigmoid(-xv + 0.25);
            assert!((em.get(t, 0) - want).abs() < 1e-12, "frame {t}");
        }
    }

    #[test]
    fn output_shape_is_frames_by_tokens() {
        let arch = GluArch {
            feature_dim: 5,
            n_tokens: 7,
            layers: vec![(4, 3), (6, 5)],
        };
        let net = Scorer::GluConv(GluConvScorer::new(&arch, 1));
        let x = Mat::zeros(9, 5);
        let em = net.score(&x);
        assert_eq!((em.rows(), em.cols()), (9, 7));
    }

    #[test]
    fn deterministic_given_seed() {
        let arch = GluArch {
            feature_dim: 3,
            n_tokens: 4,
            layers: vec![(4, 3)],
        };
        let a = GluConvScorer::new(&arch, 42);
        let b = GluConvScorer::new(&arch, 42);
        assert_eq!(a, b);
        let x = Mat::from_fn(6, 3, |t, c| (t as f64 - c as f64) * 0.21);
        let ea = Scorer::GluConv(a).score(&x);
        let eb = Scorer::GluConv(b).score(&x);
        assert_eq!(ea, eb);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let arch = GluArch {
            feature_dim: 3,
            n_tokens: 2,
            layers: vec![(3, 3)],
        };
        let net = Scorer::GluConv(GluConvScorer::new(&arch, 5));
        let x = Mat::from_fn(4, 3, |t, c| (t + c) as f64 * 0.1);
        let grad = net.score_backward(&x, &Mat::zeros(4, 2));
        if let Scorer::GluConv(g) = grad {
            assert!(g.proj.weight.data().iter().all(|&v| v == 0.0));
            assert!(g.layers[0].value.weight.data().iter().all(|&v| v == 0.0));
        } else {
            panic!()
        }
    }

    #[test]
    fn linear_gradient_is_feature_outer_product() {
        let l = LinearScorer::new(3, 2, 9);
        let sc = Scorer::Linear(l);
        let x = Mat::from_fn(4, 3, |t, c| ((t + 2 * c) as f64 * 0.37).cos());
        let d_em = Mat::from_fn(4, 2, |t, o| ((t * 2 + o) as f64 * 0.53).sin());
        let grad = sc.score_backward(&x, &d_em);
        if let Scorer::Linear(g) = grad {
            for o in 0..2 {
                for c in 0..3 {
                    let want: f64 = (0..4).map(|t| d_em.get(t, o) * x.get(t, c)).sum();
                    assert!((g.weight.get(o, c) - want).abs() < 1e-12);
                }
            }
        } else {
            panic!()
        }
    }

    #[test]
    fn receptive_field_sums_kernels() {
        let arch = GluArch {
            feature_dim: 2,
            n_tokens: 2,
            layers: vec![(2, 3), (2, 5), (2, 1)],
        };
        assert_eq!(GluConvScorer::new(&arch, 0).receptive_field(), 7);
    }
}
