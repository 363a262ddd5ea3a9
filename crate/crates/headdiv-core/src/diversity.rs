//! Inter-head diversity losses.
//!
//! The correlation between two heads is the average over time steps of
//! the cosine similarity between corresponding rows of their
//! representations. The diversity loss is the mean squared deviation of
//! the N×N correlation matrix from the identity: 0 for perfectly
//! decorrelated heads, and correlations of -1 are penalized exactly like
//! +1. Five representation kinds are supported; the same construction
//! applied to per-head parameter gradients gives the gradient-similarity
//! loss.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadTrace, TraceGrads};
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{row_normalize_vjp, Matrix};

/// Norm floor below which a row counts as zero and is dropped from the
/// correlation sums.
pub const NORM_EPS: f64 = 1e-12;

/// Which cached representation the diversity loss reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityKind {
    /// Per-head context output Y.
    Context,
    /// Attention probability matrix A.
    AttentionProb,
    /// Query projection Q.
    Query,
    /// Key projection K.
    Key,
    /// Value projection V.
    Value,
}

impl DiversityKind {
    /// All five kinds in reporting order.
    pub const ALL: [DiversityKind; 5] = [
        DiversityKind::Context,
        DiversityKind::AttentionProb,
        DiversityKind::Query,
        DiversityKind::Key,
        DiversityKind::Value,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DiversityKind::Context => "Y",
            DiversityKind::AttentionProb => "A",
            DiversityKind::Query => "Q",
            DiversityKind::Key => "K",
            DiversityKind::Value => "V",
        }
    }
}

/// A value per diversity kind, in reporting order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerKind<T> {
    pub context: T,
    pub attention: T,
    pub query: T,
    pub key: T,
    pub value: T,
}

impl<T> PerKind<T> {
    pub fn get(&self, kind: DiversityKind) -> &T {
        match kind {
            DiversityKind::Context => &self.context,
            DiversityKind::AttentionProb => &self.attention,
            DiversityKind::Query => &self.query,
            DiversityKind::Key => &self.key,
            DiversityKind::Value => &self.value,
        }
    }

    pub fn try_build(mut f: impl FnMut(DiversityKind) -> Result<T>) -> Result<Self> {
        Ok(PerKind {
            context: f(DiversityKind::Context)?,
            attention: f(DiversityKind::AttentionProb)?,
            query: f(DiversityKind::Query)?,
            key: f(DiversityKind::Key)?,
            value: f(DiversityKind::Value)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (DiversityKind, &T)> {
        DiversityKind::ALL.iter().map(move |&k| (k, self.get(k)))
    }
}

/// Per-layer diversity measurements: loss and the full N×N correlation
/// matrix for each representation kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiversityReport {
    pub loss: PerKind<f64>,
    pub similarity: PerKind<Matrix>,
}

/// Diversity measurements over the layers of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_layer: Vec<LayerDiversityReport>,
}

impl DiversityReport {
    /// Per-layer losses summed over layers (reporting convention).
    pub fn summed(&self, kind: DiversityKind) -> f64 {
        self.per_layer.iter().map(|l| *l.loss.get(kind)).sum()
    }

    /// Per-layer losses averaged over layers (training convention).
    pub fn mean(&self, kind: DiversityKind) -> f64 {
        if self.per_layer.is_empty() {
            0.0
        } else {
            self.summed(kind) / self.per_layer.len() as f64
        }
    }
}

/// Correlation d(m, n): average over time steps of the cosine similarity
/// between corresponding rows. Zero-norm rows contribute 0.
pub fn pairwise_correlation(rep_m: &Matrix, rep_n: &Matrix) -> Result<f64> {
    if rep_m.shape() != rep_n.shape() {
        return Err(Error::ShapeMismatch {
            op: "pairwise_correlation",
            left: rep_m.shape(),
            right: rep_n.shape(),
        });
    }
    let m_tilde = rep_m.row_normalize(NORM_EPS);
    let n_tilde = rep_n.row_normalize(NORM_EPS);
    Ok(m_tilde.dot(&n_tilde)? / rep_m.rows() as f64)
}

/// N×N matrix of pairwise correlations between representations.
pub fn similarity_matrix(reps: &[&Matrix]) -> Result<Matrix> {
    let n = reps.len();
    let normalized: Vec<Matrix> = reps.iter().map(|r| r.row_normalize(NORM_EPS)).collect();
    let t = reps.first().map_or(1, |r| r.rows()) as f64;
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            if normalized[i].shape() != normalized[j].shape() {
                return Err(Error::ShapeMismatch {
                    op: "similarity_matrix",
                    left: normalized[i].shape(),
                    right: normalized[j].shape(),
                });
            }
            let d = normalized[i].dot(&normalized[j])? / t;
            sim[(i, j)] = d;
            sim[(j, i)] = d;
        }
    }
    Ok(sim)
}

/// Diversity loss (1/N²)·Σ_m Σ_n (d(m,n) − I(m,n))² with gradients with
/// respect to every representation entry. Also returns the similarity
/// matrix for reporting.
pub fn diversity_loss(reps: &[&Matrix]) -> Result<(f64, Matrix, Vec<Matrix>)> {
    let n = reps.len();
    let sim = similarity_matrix(reps)?;
    let mut loss = 0.0;
    for m in 0..n {
        for j in 0..n {
            let target = if m == j { 1.0 } else { 0.0 };
            let diff = sim[(m, j)] - target;
            loss += diff * diff;
        }
    }
    loss /= (n * n) as f64;

    // dL/dR̃_m = (4 / (N² T)) Σ_n (d(m,n) − δ_mn) R̃_n, then back through
    // the row normalization.
    let normalized: Vec<Matrix> = reps.iter().map(|r| r.row_normalize(NORM_EPS)).collect();
    let t = reps.first().map_or(1, |r| r.rows()) as f64;
    let coeff = 4.0 / ((n * n) as f64 * t);
    let mut grads = Vec::with_capacity(n);
    for m in 0..n {
        let mut d_norm = Matrix::zeros(reps[m].rows(), reps[m].cols());
        for j in 0..n {
            let target = if m == j { 1.0 } else { 0.0 };
            let w = coeff * (sim[(m, j)] - target);
            if w == 0.0 {
                continue;
            }
            for (dst, &src) in d_norm.data_mut().iter_mut().zip(normalized[j].data()) {
                *dst += w * src;
            }
        }
        grads.push(row_normalize_vjp(reps[m], NORM_EPS, &d_norm)?);
    }
    Ok((loss, sim, grads))
}

fn select_representation<'a>(trace: &'a HeadTrace, kind: DiversityKind, head: usize) -> Result<&'a Matrix> {
    match kind {
        DiversityKind::Context => Ok(&trace.y),
        DiversityKind::Query => Ok(&trace.q),
        DiversityKind::Key => Ok(&trace.k),
        DiversityKind::Value => Ok(&trace.v),
        DiversityKind::AttentionProb => {
            trace.a.as_ref().ok_or(Error::AttentionUnavailable { head })
        }
    }
}

/// Diversity loss of one layer for the requested representation kind.
pub fn layer_diversity(traces: &[HeadTrace], kind: DiversityKind) -> Result<(f64, Matrix)> {
    let reps = collect_reps(traces, kind)?;
    let (loss, sim, _) = diversity_loss(&reps)?;
    Ok((loss, sim))
}

/// Like [`layer_diversity`] but also maps the representation gradients
/// back onto per-head [`TraceGrads`] for the layer backward pass.
pub fn layer_diversity_with_grads(
    traces: &[HeadTrace],
    kind: DiversityKind,
    weight: f64,
) -> Result<(f64, Matrix, Vec<TraceGrads>)> {
    let reps = collect_reps(traces, kind)?;
    let (loss, sim, grads) = diversity_loss(&reps)?;
    let trace_grads = grads
        .into_iter()
        .map(|g| {
            let g = g.scale(weight);
            let mut tg = TraceGrads::default();
            match kind {
                DiversityKind::Context => tg.y = Some(g),
                DiversityKind::AttentionProb => tg.a = Some(g),
                DiversityKind::Query => tg.q = Some(g),
                DiversityKind::Key => tg.k = Some(g),
                DiversityKind::Value => tg.v = Some(g),
            }
            tg
        })
        .collect();
    Ok((loss, sim, trace_grads))
}

fn collect_reps<'a>(traces: &'a [HeadTrace], kind: DiversityKind) -> Result<Vec<&'a Matrix>> {
    traces
        .iter()
        .enumerate()
        .map(|(i, t)| select_representation(t, kind, i))
        .collect()
}

/// Gradient-similarity loss: per layer, flatten each head's gradient
/// matrix, build the N×N cosine-similarity matrix (zero-norm vectors get
/// cosine 0 off-diagonal and 1 on the diagonal), take the mean of squares
/// of (C − I), then average over layers.
pub fn grad_similarity_loss(per_head_grads: &[Vec<Matrix>]) -> Result<f64> {
    if per_head_grads.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for layer in per_head_grads {
        let c = gradient_cosine_matrix(layer)?;
        let n = layer.len();
        let mut layer_loss = 0.0;
        for m in 0..n {
            for j in 0..n {
                let target = if m == j { 1.0 } else { 0.0 };
                let diff = c[(m, j)] - target;
                layer_loss += diff * diff;
            }
        }
        total += layer_loss / (n * n) as f64;
    }
    Ok(total / per_head_grads.len() as f64)
}

/// Cosine-similarity matrix between flattened gradient matrices.
pub fn gradient_cosine_matrix(grads: &[Matrix]) -> Result<Matrix> {
    let n = grads.len();
    let norms: Vec<f64> = grads
        .iter()
        .map(|g| math::sqrt(g.data().iter().map(|v| v * v).sum()))
        .collect();
    let mut c = Matrix::identity(n);
    for m in 0..n {
        for j in (m + 1)..n {
            if grads[m].shape() != grads[j].shape() {
                return Err(Error::ShapeMismatch {
                    op: "gradient_cosine_matrix",
                    left: grads[m].shape(),
                    right: grads[j].shape(),
                });
            }
            let cos = if norms[m] < NORM_EPS || norms[j] < NORM_EPS {
                0.0
            } else {
                grads[m].dot(&grads[j])? / (norms[m] * norms[j])
            };
            c[(m, j)] = cos;
            c[(j, m)] = cos;
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, matrix_rel_error};
    use crate::rng::SeededRng;

    fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn self_correlation_of_unit_rows_is_one() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((pairwise_correlation(&m, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_rows_correlate_to_zero() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(pairwise_correlation(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn three_four_pair_correlates_to_point_nine_six() {
        let a = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![4.0, 3.0]]).unwrap();
        assert!((pairwise_correlation(&a, &b).unwrap() - 0.96).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_loss_is_half() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let (loss, _, _) = diversity_loss(&[&m, &m]).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mutually_orthogonal_reps_have_zero_loss() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let (loss, _, _) = diversity_loss(&[&a, &b, &c]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn point_nine_six_pair_matches_hand_value() {
        let a = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![4.0, 3.0]]).unwrap();
        let (loss, _, _) = diversity_loss(&[&a, &b]).unwrap();
        assert!((loss - 0.4608).abs() < 1e-12);
    }

    #[test]
    fn loss_equals_frobenius_cross_check() {
        let mut rng = SeededRng::from_seed(21);
        for _ in 0..10 {
            let reps: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, 5, 3)).collect();
            let refs: Vec<&Matrix> = reps.iter().collect();
            let (loss, sim, _) = diversity_loss(&refs).unwrap();
            let n = refs.len();
            let mut frob = 0.0;
            for m in 0..n {
                for j in 0..n {
                    let target = if m == j { 1.0 } else { 0.0 };
                    frob += (sim[(m, j)] - target) * (sim[(m, j)] - target);
                }
            }
            assert!((loss - frob / (n * n) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_invariant_to_positive_scaling() {
        let mut rng = SeededRng::from_seed(22);
        let reps: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 3)).collect();
        let refs: Vec<&Matrix> = reps.iter().collect();
        let (base, _, _) = diversity_loss(&refs).unwrap();

        let scaled = reps[1].scale(7.25);
        let refs2: Vec<&Matrix> = [&reps[0], &scaled, &reps[2]].to_vec();
        let (scaled_loss, _, _) = diversity_loss(&refs2).unwrap();
        assert!((base - scaled_loss).abs() < 1e-12);
    }

    #[test]
    fn diversity_gradients_match_finite_differences() {
        let mut rng = SeededRng::from_seed(23);
        let reps: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 3)).collect();
        let refs: Vec<&Matrix> = reps.iter().collect();
        let (_, _, grads) = diversity_loss(&refs).unwrap();

        for target in 0..3 {
            let fd = fd_gradient(
                |x| {
                    let mut probe: Vec<&Matrix> = reps.iter().collect();
                    probe[target] = x;
                    diversity_loss(&probe).unwrap().0
                },
                &reps[target],
                1e-6,
            );
            assert!(
                matrix_rel_error(&grads[target], &fd) <= 1e-4,
                "head {target}"
            );
        }
    }

    #[test]
    fn identical_gradients_give_half_for_two_heads() {
        let g = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let loss = grad_similarity_loss(&[vec![g.clone(), g]]).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_gradients_give_zero() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let loss = grad_similarity_loss(&[vec![a, b]]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn layer_mean_is_arithmetic() {
        let g = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let orth = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let loss = grad_similarity_loss(&[
            vec![g.clone(), g.clone()],
            vec![g, orth],
        ])
        .unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_gradient_counts_as_uncorrelated() {
        let z = Matrix::zeros(2, 2);
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = gradient_cosine_matrix(&[z, g]).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(0, 1)], 0.0);
        assert_eq!(c[(1, 0)], 0.0);
        assert_eq!(c[(1, 1)], 1.0);
    }

    #[test]
    fn grad_similarity_invariant_to_positive_rescale() {
        let mut rng = SeededRng::from_seed(24);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 3, 2);
        let base = grad_similarity_loss(&[vec![a.clone(), b.clone()]]).unwrap();
        let scaled = grad_similarity_loss(&[vec![a.scale(123.0), b]]).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }
}
