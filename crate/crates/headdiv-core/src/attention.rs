//! Multi-head self-attention layer with a heterogeneous mechanism per head.
//!
//! Each head owns D×H query/key/value projections; the layer concatenates
//! the per-head T×H context matrices along the feature axis and
//! down-projects with a shared NH×D output matrix. Heads can run full
//! softmax attention, softmax restricted to a left/right time window, or
//! FAVOR random-feature attention. Every forward caches the per-head
//! tensors needed both for diversity analysis and for the exact analytic
//! backward pass.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{matmul_vjp, row_softmax_vjp, Matrix};
use crate::rng::SeededRng;

/// Additive mask value; large enough that softmax maps it to exactly 0
/// after max subtraction.
pub const MASK_NEG_INF: f64 = -1e30;

/// How query-key dot products are scaled before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Divide by the head dimension H.
    Paper,
    /// Divide by sqrt(H).
    Standard,
}

impl ScaleMode {
    pub fn scale(self, head_dim: usize) -> f64 {
        match self {
            ScaleMode::Paper => 1.0 / head_dim as f64,
            ScaleMode::Standard => 1.0 / math::sqrt(head_dim as f64),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScaleMode::Paper => "paper",
            ScaleMode::Standard => "standard",
        }
    }
}

/// Per-head attention mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadMechanism {
    /// Softmax attention over the whole sequence.
    SoftmaxFull,
    /// Softmax attention limited to `left` steps back and `right` steps
    /// ahead. A bound of `t_len` or more means unbounded on that side.
    SoftmaxWindow { left: usize, right: usize },
    /// Random-feature attention; `num_features` positive features drawn
    /// once from `feature_seed` and frozen.
    Favor { num_features: usize, feature_seed: u64 },
}

/// Query/key/value projections of one head; all D×H.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
}

impl HeadParams {
    pub fn dims(&self) -> (usize, usize) {
        self.w_query.shape()
    }
}

/// One attention layer: N (params, mechanism) pairs plus the NH×D output
/// projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<(HeadParams, HeadMechanism)>,
    pub w_out: Matrix,
}

impl LayerParams {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].0.w_query.cols()
    }
}

/// Extra tensors a FAVOR head caches for its backward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FavorCache {
    /// Feature matrix H×r (columns are the frozen ω draws).
    pub omega: Matrix,
    /// φ(Q·√scale), T×r.
    pub phi_q: Matrix,
    /// φ(K·√scale), T×r.
    pub phi_k: Matrix,
    /// Row normalizers ρ = Φ_q (Φ_kᵀ 1), length T.
    pub rho: Vec<f64>,
}

/// Cached per-head forward tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities; absent on the FAVOR fast path.
    pub a: Option<Matrix>,
    pub y: Matrix,
    /// FAVOR-only cache; `None` for softmax heads.
    pub favor: Option<FavorCache>,
}

/// Gradients of one head's projections.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParamGrads {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
}

/// Gradients of a whole layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub heads: Vec<HeadParamGrads>,
    pub w_out: Matrix,
}

/// Additional upstream gradients injected directly on a head's cached
/// representations (used by the diversity auxiliary loss, which reads
/// Q/K/V/A/Y out of the trace rather than the layer output).
#[derive(Clone, Debug, Default)]
pub struct TraceGrads {
    pub q: Option<Matrix>,
    pub k: Option<Matrix>,
    pub v: Option<Matrix>,
    pub a: Option<Matrix>,
    pub y: Option<Matrix>,
}

impl TraceGrads {
    pub fn is_empty(&self) -> bool {
        self.q.is_none()
            && self.k.is_none()
            && self.v.is_none()
            && self.a.is_none()
            && self.y.is_none()
    }
}

/// Binary context mask: `mask[t][s] = 1` iff `t - left <= s <= t + right`.
/// Bounds of `t_len` or more are treated as unbounded on that side.
pub fn build_context_mask(t_len: usize, left: usize, right: usize) -> Matrix {
    Matrix::from_fn(t_len, t_len, |t, s| {
        let in_left = s + left >= t;
        let in_right = s <= t + right;
        if in_left && in_right {
            1.0
        } else {
            0.0
        }
    })
}

fn project_qkv(x: &Matrix, p: &HeadParams) -> Result<(Matrix, Matrix, Matrix)> {
    let q = x.matmul(&p.w_query)?;
    let k = x.matmul(&p.w_key)?;
    let v = x.matmul(&p.w_value)?;
    Ok((q, k, v))
}

/// Softmax attention head: logits = scale·QKᵀ, masked positions forced to
/// exactly zero probability, Y = A·V.
pub fn head_forward_softmax(
    x: &Matrix,
    p: &HeadParams,
    mask: &Matrix,
    scale: f64,
) -> Result<HeadTrace> {
    let (q, k, v) = project_qkv(x, p)?;
    let mut logits = q.matmul(&k.transpose())?.scale(scale);
    if logits.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "head_forward_softmax mask",
            left: logits.shape(),
            right: mask.shape(),
        });
    }
    for (l, &m) in logits.data_mut().iter_mut().zip(mask.data()) {
        if m == 0.0 {
            *l = MASK_NEG_INF;
        }
    }
    let a = logits.row_softmax();
    let y = a.matmul(&v)?;
    Ok(HeadTrace {
        q,
        k,
        v,
        a: Some(a),
        y,
        favor: None,
    })
}

/// Draws the H×r FAVOR feature matrix: i.i.d. standard normal columns,
/// fixed by `feature_seed`. Columns are drawn one ω_j at a time, so for a
/// given seed the first r columns are shared between feature counts r and
/// r' > r.
pub fn favor_omega(head_dim: usize, num_features: usize, feature_seed: u64) -> Matrix {
    let mut rng = SeededRng::from_seed(feature_seed);
    let mut omega = Matrix::zeros(head_dim, num_features);
    for j in 0..num_features {
        for i in 0..head_dim {
            omega[(i, j)] = rng.standard_normal();
        }
    }
    omega
}

/// Positive random feature map: φ(x)_j = r^(-1/2)·exp(ω_jᵀx - ||x||²/2).
pub fn favor_feature_map(m: &Matrix, omega: &Matrix) -> Result<Matrix> {
    if m.cols() != omega.rows() {
        return Err(Error::ShapeMismatch {
            op: "favor_feature_map",
            left: m.shape(),
            right: omega.shape(),
        });
    }
    let r = omega.cols();
    let inv_sqrt_r = 1.0 / math::sqrt(r as f64);
    let proj = m.matmul(omega)?;
    let mut phi = Matrix::zeros(m.rows(), r);
    for t in 0..m.rows() {
        let half_sq: f64 = m.row(t).iter().map(|v| v * v).sum::<f64>() / 2.0;
        for j in 0..r {
            phi[(t, j)] = inv_sqrt_r * math::exp(proj[(t, j)] - half_sq);
        }
    }
    Ok(phi)
}

/// FAVOR attention head. The softmax kernel exp(scale·qᵀk) is approximated
/// by φ(q√scale)ᵀφ(k√scale), so Y = diag(ρ)⁻¹·Φ_q(Φ_kᵀV) with
/// ρ = Φ_q(Φ_kᵀ1). Positive features keep every normalizer nonzero. When
/// `materialize_a` is set the implied row-stochastic attention matrix is
/// stored for analysis.
pub fn head_forward_favor(
    x: &Matrix,
    p: &HeadParams,
    num_features: usize,
    feature_seed: u64,
    scale: f64,
    materialize_a: bool,
) -> Result<HeadTrace> {
    let (q, k, v) = project_qkv(x, p)?;
    let sqrt_scale = math::sqrt(scale);
    let omega = favor_omega(p.w_query.cols(), num_features, feature_seed);
    let phi_q = favor_feature_map(&q.scale(sqrt_scale), &omega)?;
    let phi_k = favor_feature_map(&k.scale(sqrt_scale), &omega)?;

    let kv = phi_k.transpose().matmul(&v)?;
    let numer = phi_q.matmul(&kv)?;
    let k_sums: Vec<f64> = (0..phi_k.cols())
        .map(|j| (0..phi_k.rows()).map(|t| phi_k[(t, j)]).sum())
        .collect();
    let rho: Vec<f64> = (0..phi_q.rows())
        .map(|t| {
            phi_q
                .row(t)
                .iter()
                .zip(&k_sums)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();

    let mut y = numer;
    for t in 0..y.rows() {
        let inv = 1.0 / rho[t];
        for c in 0..y.cols() {
            y[(t, c)] *= inv;
        }
    }

    let a = if materialize_a {
        let mut a = phi_q.matmul(&phi_k.transpose())?;
        for t in 0..a.rows() {
            let inv = 1.0 / rho[t];
            for s in 0..a.cols() {
                a[(t, s)] *= inv;
            }
        }
        Some(a)
    } else {
        None
    };

    Ok(HeadTrace {
        q,
        k,
        v,
        a,
        y,
        favor: Some(FavorCache {
            omega,
            phi_q,
            phi_k,
            rho,
        }),
    })
}

fn head_forward(
    x: &Matrix,
    p: &HeadParams,
    mech: &HeadMechanism,
    scale: f64,
    materialize_a: bool,
) -> Result<HeadTrace> {
    match mech {
        HeadMechanism::SoftmaxFull => {
            let mask = Matrix::filled(x.rows(), x.rows(), 1.0);
            head_forward_softmax(x, p, &mask, scale)
        }
        HeadMechanism::SoftmaxWindow { left, right } => {
            let mask = build_context_mask(x.rows(), *left, *right);
            head_forward_softmax(x, p, &mask, scale)
        }
        HeadMechanism::Favor {
            num_features,
            feature_seed,
        } => head_forward_favor(x, p, *num_features, *feature_seed, scale, materialize_a),
    }
}

/// Full layer forward: per-head contexts concatenated along the feature
/// axis (T×NH) and projected by `w_out` to T×D. Traces are returned in
/// head order.
pub fn layer_forward(
    x: &Matrix,
    params: &LayerParams,
    scale_mode: ScaleMode,
    materialize_a: bool,
) -> Result<(Matrix, Vec<HeadTrace>)> {
    let scale = scale_mode.scale(params.head_dim());
    let mut traces = Vec::with_capacity(params.heads.len());
    for (p, mech) in &params.heads {
        traces.push(head_forward(x, p, mech, scale, materialize_a)?);
    }
    let ys: Vec<&Matrix> = traces.iter().map(|t| &t.y).collect();
    let concat = Matrix::concat_cols(&ys)?;
    let y = concat.matmul(&params.w_out)?;
    Ok((y, traces))
}

/// Backward through one softmax head. `d_y` is the gradient on the head's
/// context matrix; `extra` may add gradients directly on Q/K/V/A.
fn head_backward_softmax(
    x: &Matrix,
    p: &HeadParams,
    trace: &HeadTrace,
    scale: f64,
    d_y: &Matrix,
    extra: Option<&TraceGrads>,
    d_x: &mut Matrix,
) -> Result<HeadParamGrads> {
    let a = trace.a.as_ref().expect("softmax trace always has A");

    // Y = A V
    let (mut d_a, mut d_v) = matmul_vjp(a, &trace.v, d_y)?;
    if let Some(e) = extra {
        if let Some(ea) = &e.a {
            d_a.add_assign(ea)?;
        }
        if let Some(ev) = &e.v {
            d_v.add_assign(ev)?;
        }
    }

    // A = softmax(logits); masked logits are constants, and the VJP emits
    // exact zeros there because the corresponding probabilities are zero.
    let d_logits = row_softmax_vjp(a, &d_a)?;

    // logits = scale · Q Kᵀ
    let mut d_q = d_logits.matmul(&trace.k)?.scale(scale);
    let mut d_k = d_logits.transpose().matmul(&trace.q)?.scale(scale);
    if let Some(e) = extra {
        if let Some(eq) = &e.q {
            d_q.add_assign(eq)?;
        }
        if let Some(ek) = &e.k {
            d_k.add_assign(ek)?;
        }
    }

    // Q = X Wq, K = X Wk, V = X Wv
    let (dx_q, d_wq) = matmul_vjp(x, &p.w_query, &d_q)?;
    let (dx_k, d_wk) = matmul_vjp(x, &p.w_key, &d_k)?;
    let (dx_v, d_wv) = matmul_vjp(x, &p.w_value, &d_v)?;
    d_x.add_assign(&dx_q)?;
    d_x.add_assign(&dx_k)?;
    d_x.add_assign(&dx_v)?;

    Ok(HeadParamGrads {
        w_query: d_wq,
        w_key: d_wk,
        w_value: d_wv,
    })
}

/// Backward of the feature map at fixed ω: for φ(x)_j = c·exp(ω_jᵀx - ||x||²/2),
/// dx = (dφ ⊙ φ)·ωᵀ - rowsum(dφ ⊙ φ)·x.
fn feature_map_vjp(input: &Matrix, phi: &Matrix, omega: &Matrix, d_phi: &Matrix) -> Result<Matrix> {
    let weighted = d_phi.hadamard(phi)?;
    let mut d_input = weighted.matmul(&omega.transpose())?;
    for t in 0..input.rows() {
        let row_sum: f64 = weighted.row(t).iter().sum();
        for c in 0..input.cols() {
            d_input[(t, c)] -= row_sum * input[(t, c)];
        }
    }
    Ok(d_input)
}

/// Backward through one FAVOR head; differentiates through the feature
/// maps with ω held fixed. Supports extra gradients on the materialized A.
fn head_backward_favor(
    x: &Matrix,
    p: &HeadParams,
    trace: &HeadTrace,
    scale: f64,
    d_y: &Matrix,
    extra: Option<&TraceGrads>,
    d_x: &mut Matrix,
) -> Result<HeadParamGrads> {
    let cache = trace
        .favor
        .as_ref()
        .expect("favor trace always has a cache");
    let phi_q = &cache.phi_q;
    let phi_k = &cache.phi_k;
    let rho = &cache.rho;
    let t_len = phi_q.rows();
    let r = phi_q.cols();

    // Recompute the cheap intermediates of the forward pass.
    let kv = phi_k.transpose().matmul(&trace.v)?; // r×H
    let k_sums: Vec<f64> = (0..r)
        .map(|j| (0..phi_k.rows()).map(|t| phi_k[(t, j)]).sum())
        .collect();

    // Y[t] = numer[t] / rho[t] with numer = Φq (Φkᵀ V), rho = Φq (Φkᵀ 1).
    let mut d_numer = Matrix::zeros(t_len, trace.v.cols());
    let mut d_rho = vec![0.0; t_len];
    for t in 0..t_len {
        let inv = 1.0 / rho[t];
        for c in 0..trace.v.cols() {
            let g = d_y[(t, c)];
            d_numer[(t, c)] = g * inv;
            d_rho[t] -= g * trace.y[(t, c)] * inv;
        }
    }

    let mut d_phi_q = d_numer.matmul(&kv.transpose())?; // T×r
    let d_kv = phi_q.transpose().matmul(&d_numer)?; // r×H
    let mut d_k_sums = vec![0.0; r];
    for t in 0..t_len {
        for j in 0..r {
            d_phi_q[(t, j)] += d_rho[t] * k_sums[j];
            d_k_sums[j] += d_rho[t] * phi_q[(t, j)];
        }
    }

    let mut d_v = phi_k.matmul(&d_kv)?; // from kv = Φkᵀ V
    let mut d_phi_k = trace.v.matmul(&d_kv.transpose())?; // T×r
    for t in 0..phi_k.rows() {
        for j in 0..r {
            d_phi_k[(t, j)] += d_k_sums[j];
        }
    }

    if let Some(e) = extra {
        if let Some(ev) = &e.v {
            d_v.add_assign(ev)?;
        }
        if let Some(ea) = &e.a {
            // A[t][s] = Φq[t]·Φk[s] / rho[t]; gradients reuse the same
            // rho/k_sums plumbing as the Y path.
            let a = trace
                .a
                .as_ref()
                .ok_or(Error::AttentionUnavailable { head: usize::MAX })?;
            let mut d_rho_a = vec![0.0; t_len];
            for t in 0..t_len {
                let inv = 1.0 / rho[t];
                for s in 0..phi_k.rows() {
                    let g = ea[(t, s)];
                    if g == 0.0 {
                        continue;
                    }
                    d_rho_a[t] -= g * a[(t, s)] * inv;
                    for j in 0..r {
                        d_phi_q[(t, j)] += g * inv * phi_k[(s, j)];
                        d_phi_k[(s, j)] += g * inv * phi_q[(t, j)];
                    }
                }
            }
            let mut d_k_sums_a = vec![0.0; r];
            for t in 0..t_len {
                if d_rho_a[t] == 0.0 {
                    continue;
                }
                for j in 0..r {
                    d_phi_q[(t, j)] += d_rho_a[t] * k_sums[j];
                    d_k_sums_a[j] += d_rho_a[t] * phi_q[(t, j)];
                }
            }
            for s in 0..phi_k.rows() {
                for j in 0..r {
                    d_phi_k[(s, j)] += d_k_sums_a[j];
                }
            }
        }
    }

    // Through the feature maps into the scaled projections.
    let sqrt_scale = math::sqrt(scale);
    let q_scaled = trace.q.scale(sqrt_scale);
    let k_scaled = trace.k.scale(sqrt_scale);
    let mut d_q = feature_map_vjp(&q_scaled, phi_q, &cache.omega, &d_phi_q)?.scale(sqrt_scale);
    let mut d_k = feature_map_vjp(&k_scaled, phi_k, &cache.omega, &d_phi_k)?.scale(sqrt_scale);

    if let Some(e) = extra {
        if let Some(eq) = &e.q {
            d_q.add_assign(eq)?;
        }
        if let Some(ek) = &e.k {
            d_k.add_assign(ek)?;
        }
    }

    let (dx_q, d_wq) = matmul_vjp(x, &p.w_query, &d_q)?;
    let (dx_k, d_wk) = matmul_vjp(x, &p.w_key, &d_k)?;
    let (dx_v, d_wv) = matmul_vjp(x, &p.w_value, &d_v)?;
    d_x.add_assign(&dx_q)?;
    d_x.add_assign(&dx_k)?;
    d_x.add_assign(&dx_v)?;

    Ok(HeadParamGrads {
        w_query: d_wq,
        w_key: d_wk,
        w_value: d_wv,
    })
}

/// Exact gradients of a scalar loss through the layer. `d_y` is the
/// upstream gradient on the layer output; `extra`, when present, supplies
/// per-head gradients on cached trace tensors (one entry per head, in
/// order). Returns the parameter gradients and the gradient on `x`.
pub fn layer_backward(
    d_y: &Matrix,
    x: &Matrix,
    params: &LayerParams,
    traces: &[HeadTrace],
    scale_mode: ScaleMode,
    extra: Option<&[TraceGrads]>,
) -> Result<(LayerGrads, Matrix)> {
    let n = params.heads.len();
    if traces.len() != n {
        return Err(Error::TraceMismatch {
            expected: n,
            got: traces.len(),
        });
    }
    if let Some(e) = extra {
        if e.len() != n {
            return Err(Error::TraceMismatch {
                expected: n,
                got: e.len(),
            });
        }
    }
    let head_dim = params.head_dim();
    let scale = scale_mode.scale(head_dim);

    // y = concat(Y_1..Y_N) · W_out
    let ys: Vec<&Matrix> = traces.iter().map(|t| &t.y).collect();
    let concat = Matrix::concat_cols(&ys)?;
    let (d_concat, d_w_out) = matmul_vjp(&concat, &params.w_out, d_y)?;

    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    let mut head_grads = Vec::with_capacity(n);
    for (i, ((p, mech), trace)) in params.heads.iter().zip(traces).enumerate() {
        let mut d_y_head = d_concat.slice_cols(i * head_dim, head_dim)?;
        let e = extra.map(|ex| &ex[i]);
        if let Some(TraceGrads { y: Some(ey), .. }) = e {
            d_y_head.add_assign(ey)?;
        }
        let grads = match mech {
            HeadMechanism::SoftmaxFull | HeadMechanism::SoftmaxWindow { .. } => {
                head_backward_softmax(x, p, trace, scale, &d_y_head, e, &mut d_x)?
            }
            HeadMechanism::Favor { .. } => {
                head_backward_favor(x, p, trace, scale, &d_y_head, e, &mut d_x)
                    .map_err(|err| match err {
                        Error::AttentionUnavailable { .. } => Error::AttentionUnavailable { head: i },
                        other => other,
                    })?
            }
        };
        head_grads.push(grads);
    }

    Ok((
        LayerGrads {
            heads: head_grads,
            w_out: d_w_out,
        },
        d_x,
    ))
}

impl LayerGrads {
    /// Zero gradients shaped like the given layer.
    pub fn zeros_like(params: &LayerParams) -> Self {
        let (d, h) = params.heads[0].0.dims();
        LayerGrads {
            heads: params
                .heads
                .iter()
                .map(|_| HeadParamGrads {
                    w_query: Matrix::zeros(d, h),
                    w_key: Matrix::zeros(d, h),
                    w_value: Matrix::zeros(d, h),
                })
                .collect(),
            w_out: Matrix::zeros(params.w_out.rows(), params.w_out.cols()),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) -> Result<()> {
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.w_query.add_assign(&b.w_query)?;
            a.w_key.add_assign(&b.w_key)?;
            a.w_value.add_assign(&b.w_value)?;
        }
        self.w_out.add_assign(&other.w_out)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for h in &mut self.heads {
            h.w_query = h.w_query.scale(s);
            h.w_key = h.w_key.scale(s);
            h.w_value = h.w_value.scale(s);
        }
        self.w_out = self.w_out.scale(s);
    }
}
