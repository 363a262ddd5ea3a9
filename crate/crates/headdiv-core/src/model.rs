//! Toy sequence classifier: token embedding plus fixed sinusoidal
//! positions, a stack of residual attention layers, and a per-frame
//! linear classifier.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::attention::{
    layer_backward, layer_forward, HeadMechanism, HeadParams, HeadTrace, LayerGrads, LayerParams,
    ScaleMode, TraceGrads,
};
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{matmul_vjp, Matrix};
use crate::rng::SeededRng;

/// All trainable parameters plus the fixed positional table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Token embedding table, vocab × D.
    pub embed: Matrix,
    /// Attention stack.
    pub layers: Vec<LayerParams>,
    /// Per-frame readout, D × num_classes.
    pub classifier: Matrix,
    /// Sinusoidal position table, T × D; not trained.
    pub positional: Matrix,
}

/// Shape of the model; everything needed to initialize parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub mechanisms: Vec<HeadMechanism>,
}

/// Standard sinusoidal position table.
pub fn sinusoidal_table(seq_len: usize, model_dim: usize) -> Matrix {
    Matrix::from_fn(seq_len, model_dim, |t, c| {
        let pair = (c / 2) as f64;
        let rate = math::powf(10_000.0, -2.0 * pair / model_dim as f64);
        let angle = t as f64 * rate;
        if c % 2 == 0 {
            math::sin(angle)
        } else {
            math::cos(angle)
        }
    })
}

fn uniform_init(rng: &mut SeededRng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let s = 1.0 / math::sqrt(fan_in as f64);
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-s, s))
}

/// Seeded uniform init, scale 1/sqrt(fan_in) per matrix.
pub fn init_model(dims: &ModelDims, seed: u64) -> ModelParams {
    let mut rng = SeededRng::from_seed(seed);
    let d = dims.model_dim;
    let h = dims.head_dim;
    let n = dims.num_heads;
    let embed = uniform_init(&mut rng, dims.vocab, d, d);
    let layers = (0..dims.num_layers)
        .map(|_| LayerParams {
            heads: dims
                .mechanisms
                .iter()
                .map(|mech| {
                    (
                        HeadParams {
                            w_query: uniform_init(&mut rng, d, h, d),
                            w_key: uniform_init(&mut rng, d, h, d),
                            w_value: uniform_init(&mut rng, d, h, d),
                        },
                        mech.clone(),
                    )
                })
                .collect(),
            w_out: uniform_init(&mut rng, n * h, d, n * h),
        })
        .collect();
    let classifier = uniform_init(&mut rng, d, dims.num_classes, d);
    ModelParams {
        embed,
        layers,
        classifier,
        positional: sinusoidal_table(dims.seq_len, d),
    }
}

/// Cached tensors from one forward pass.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    /// Input to each attention layer (X_0 .. X_{P-1}).
    pub layer_inputs: Vec<Matrix>,
    /// Per-layer head traces.
    pub head_traces: Vec<Vec<HeadTrace>>,
    /// Features after the last residual block.
    pub features: Matrix,
}

/// Gradients for every trainable parameter.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub embed: Matrix,
    pub layers: Vec<LayerGrads>,
    pub classifier: Matrix,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ModelGrads {
            embed: Matrix::zeros(params.embed.rows(), params.embed.cols()),
            layers: params.layers.iter().map(LayerGrads::zeros_like).collect(),
            classifier: Matrix::zeros(params.classifier.rows(), params.classifier.cols()),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        self.embed.add_assign(&other.embed)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b)?;
        }
        self.classifier.add_assign(&other.classifier)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.embed = self.embed.scale(s);
        for l in &mut self.layers {
            l.scale_in_place(s);
        }
        self.classifier = self.classifier.scale(s);
    }
}

/// Embedding + positions, then P residual attention layers, then the
/// per-frame classifier. Token ids must be below the embedding rows.
pub fn model_forward(
    params: &ModelParams,
    tokens: &[usize],
    scale_mode: ScaleMode,
    materialize_a: bool,
) -> Result<(Matrix, ModelTrace)> {
    let d = params.embed.cols();
    let t_len = tokens.len();
    let mut x = Matrix::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let emb = params.embed.row(tok);
        let pos = params.positional.row(t);
        let dst = &mut x.data_mut()[t * d..(t + 1) * d];
        for ((dst, &e), &p) in dst.iter_mut().zip(emb).zip(pos) {
            *dst = e + p;
        }
    }

    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut head_traces = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (attn_out, traces) = layer_forward(&x, layer, scale_mode, materialize_a)?;
        layer_inputs.push(x.clone());
        head_traces.push(traces);
        x = x.add(&attn_out)?;
    }

    let logits = x.matmul(&params.classifier)?;
    Ok((
        logits,
        ModelTrace {
            layer_inputs,
            head_traces,
            features: x,
        },
    ))
}

/// Mean per-frame cross-entropy and its gradient on the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let probs = logits.row_softmax();
    let t_len = logits.rows() as f64;
    let mut loss = 0.0;
    let mut d_logits = probs.clone();
    for (t, &label) in labels.iter().enumerate() {
        loss -= math::ln(probs[(t, label)]);
        d_logits[(t, label)] -= 1.0;
    }
    Ok((loss / t_len, d_logits.scale(1.0 / t_len)))
}

/// Fraction of frames whose argmax matches the label (ties resolve to the
/// lowest class index).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (t, &label) in labels.iter().enumerate() {
        let row = logits.row(t);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Exact gradients of a scalar loss with upstream `d_logits`, optionally
/// seeded with per-layer per-head gradients on cached trace tensors.
pub fn model_backward(
    params: &ModelParams,
    tokens: &[usize],
    trace: &ModelTrace,
    d_logits: &Matrix,
    scale_mode: ScaleMode,
    trace_seeds: Option<&[Vec<TraceGrads>]>,
) -> Result<ModelGrads> {
    if let Some(seeds) = trace_seeds {
        if seeds.len() != params.layers.len() {
            return Err(Error::TraceMismatch {
                expected: params.layers.len(),
                got: seeds.len(),
            });
        }
    }

    let (mut d_x, d_classifier) = matmul_vjp(&trace.features, &params.classifier, d_logits)?;

    let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let seeds = trace_seeds.map(|s| s[l].as_slice());
        let (grads, d_x_attn) = layer_backward(
            &d_x,
            &trace.layer_inputs[l],
            layer,
            &trace.head_traces[l],
            scale_mode,
            seeds,
        )?;
        // Residual: X_{l+1} = X_l + attn(X_l).
        d_x.add_assign(&d_x_attn)?;
        layer_grads.push(grads);
    }
    layer_grads.reverse();

    let mut d_embed = Matrix::zeros(params.embed.rows(), params.embed.cols());
    let d = params.embed.cols();
    for (t, &tok) in tokens.iter().enumerate() {
        let src = &d_x.data()[t * d..(t + 1) * d];
        let dst_start = tok * d;
        for (i, &v) in src.iter().enumerate() {
            d_embed.data_mut()[dst_start + i] += v;
        }
    }

    Ok(ModelGrads {
        embed: d_embed,
        layers: layer_grads,
        classifier: d_classifier,
    })
}

/// One SGD step: `theta -= lr * grad` for every trainable matrix. The
/// positional table is fixed.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelGrads, lr: f64) {
    apply(&mut params.embed, &grads.embed, lr);
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        for ((head, _), hg) in layer.heads.iter_mut().zip(&g.heads) {
            apply(&mut head.w_query, &hg.w_query, lr);
            apply(&mut head.w_key, &hg.w_key, lr);
            apply(&mut head.w_value, &hg.w_value, lr);
        }
        apply(&mut layer.w_out, &g.w_out, lr);
    }
    apply(&mut params.classifier, &grads.classifier, lr);
}

fn apply(param: &mut Matrix, grad: &Matrix, lr: f64) {
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HeadMechanism;

    fn dims(num_layers: usize) -> ModelDims {
        ModelDims {
            num_layers,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            vocab: 5,
            num_classes: 6,
            seq_len: 6,
            mechanisms: alloc::vec![HeadMechanism::SoftmaxFull; 2],
        }
    }

    #[test]
    fn zero_layers_is_linear_readout() {
        let params = init_model(&dims(0), 3);
        let tokens = [0usize, 2, 4, 1, 3, 0];
        let (logits, trace) = model_forward(&params, &tokens, ScaleMode::Paper, false).unwrap();
        let expected = trace.features.matmul(&params.classifier).unwrap();
        assert_eq!(logits, expected);
        // Features are exactly embed + positional when no layers run.
        for (t, &tok) in tokens.iter().enumerate() {
            for c in 0..8 {
                let want = params.embed[(tok, c)] + params.positional[(t, c)];
                assert!((trace.features[(t, c)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_cross_entropy() {
        let mut params = init_model(&dims(1), 4);
        params.classifier = Matrix::zeros(8, 6);
        let tokens = [1usize, 0, 3, 2, 4, 4];
        let labels = [0usize, 1, 2, 3, 4, 5];
        let (logits, _) = model_forward(&params, &tokens, ScaleMode::Paper, false).unwrap();
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        assert!((loss - (6.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_breaks_ties_toward_low_index() {
        let logits = Matrix::from_rows(&[vec![0.5, 0.5, 0.1]]).unwrap();
        assert_eq!(accuracy(&logits, &[0]), 1.0);
        assert_eq!(accuracy(&logits, &[1]), 0.0);
    }
}
