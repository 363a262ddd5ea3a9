//! Deterministic training loop with the diversity auxiliary loss.
//!
//! The objective is `task cross-entropy + λ · diversity`, where the
//! diversity term is the mean over layers of the selected representation
//! kind's loss (reports use the sum-over-layers convention instead; both
//! are derived from the same per-layer values). All five kinds are
//! measured on the eval set at every log interval regardless of which
//! kind, if any, is trained.

use alloc::string::ToString;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadMechanism, ScaleMode, TraceGrads};
use crate::diversity::{
    grad_similarity_loss, layer_diversity, layer_diversity_with_grads, DiversityKind,
    DiversityReport, LayerDiversityReport, PerKind,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    accuracy, cross_entropy, init_model, model_backward, model_forward, sgd_step, ModelDims,
    ModelGrads, ModelParams,
};
use crate::rng::{mix_seed, stream};
use crate::task::{generate_task, Example, SyntheticTaskSpec};

/// Full experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of attention layers (P).
    pub layers: usize,
    /// Heads per layer (N).
    pub heads: usize,
    /// Model width (D).
    pub model_dim: usize,
    /// Per-head width (H).
    pub head_dim: usize,
    /// Per-head mechanisms; a single entry applies to every head.
    pub mechanisms: Vec<HeadMechanism>,
    /// Representation kind the auxiliary loss trains on, if any.
    pub diversity_kind: Option<DiversityKind>,
    /// Auxiliary loss weight λ.
    pub lambda: f64,
    pub scale_mode: ScaleMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Metrics are recorded every this many steps (and at step 0 and the
    /// final step).
    pub log_interval: usize,
    pub task: SyntheticTaskSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.layers == 0 {
            return Err(Error::InvalidConfig {
                field: "layers",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.heads == 0 {
            return Err(Error::InvalidConfig {
                field: "heads",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.model_dim == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig {
                field: "model_dim",
                reason: "model_dim and head_dim must be at least 1".to_string(),
            });
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig {
                field: "lambda",
                reason: "must be finite and >= 0".to_string(),
            });
        }
        if self.diversity_kind.is_none() && self.lambda != 0.0 {
            return Err(Error::InvalidConfig {
                field: "lambda",
                reason: "must be 0 when no diversity_kind is set".to_string(),
            });
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig {
                field: "steps",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                field: "batch_size",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidConfig {
                field: "log_interval",
                reason: "must be at least 1".to_string(),
            });
        }
        if !(self.mechanisms.len() == 1 || self.mechanisms.len() == self.heads) {
            return Err(Error::InvalidConfig {
                field: "mechanisms",
                reason: "must list exactly one mechanism or one per head".to_string(),
            });
        }
        for mech in &self.mechanisms {
            if let HeadMechanism::Favor { num_features, .. } = mech {
                if *num_features == 0 {
                    return Err(Error::InvalidConfig {
                        field: "mechanisms",
                        reason: "favor num_features must be at least 1".to_string(),
                    });
                }
            }
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig {
                field: "learning_rate",
                reason: "must be finite and >= 0".to_string(),
            });
        }
        Ok(())
    }

    /// Mechanism list expanded to one entry per head.
    pub fn expanded_mechanisms(&self) -> Vec<HeadMechanism> {
        if self.mechanisms.len() == 1 {
            alloc::vec![self.mechanisms[0].clone(); self.heads]
        } else {
            self.mechanisms.clone()
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            num_layers: self.layers,
            num_heads: self.heads,
            model_dim: self.model_dim,
            head_dim: self.head_dim,
            vocab: self.task.vocab,
            num_classes: self.task.num_classes(),
            seq_len: self.task.seq_len,
            mechanisms: self.expanded_mechanisms(),
        }
    }
}

/// One metric-log row. Diversity values follow the reporting convention
/// (per-layer losses summed over layers), measured on the eval set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub task_loss: f64,
    pub diversity: PerKind<f64>,
    pub eval_accuracy: f64,
}

/// Everything a finished run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub metrics: Vec<MetricRecord>,
    /// Final diversity measurement over the eval set.
    pub report: DiversityReport,
    /// Final gradient-similarity loss over per-head query-weight
    /// gradients on a held-out batch.
    pub grad_similarity: f64,
    pub final_eval_accuracy: f64,
    pub final_params: ModelParams,
}

/// Which per-head projection to capture gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Query,
    Key,
    Value,
}

/// Scalar pieces of one sequence's combined loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceLoss {
    pub total: f64,
    pub task: f64,
    /// Mean over layers of the trained kind's diversity loss (0 when no
    /// kind is trained).
    pub diversity_mean: f64,
}

/// Combined loss of Eq.-7 form for already-computed logits and traces:
/// value, gradient on the logits, and per-layer trace-gradient seeds for
/// the diversity term.
pub fn total_loss(
    logits: &Matrix,
    labels: &[usize],
    head_traces: &[Vec<crate::attention::HeadTrace>],
    kind: Option<DiversityKind>,
    lambda: f64,
) -> Result<(SequenceLoss, Matrix, Option<Vec<Vec<TraceGrads>>>)> {
    let (task, d_logits) = cross_entropy(logits, labels)?;
    let (kind, active) = match kind {
        Some(k) if lambda != 0.0 => (k, true),
        Some(k) => (k, false),
        None => {
            return Ok((
                SequenceLoss {
                    total: task,
                    task,
                    diversity_mean: 0.0,
                },
                d_logits,
                None,
            ))
        }
    };

    let num_layers = head_traces.len() as f64;
    if !active {
        // Measurement only: identical loss value contract as λ > 0 with
        // a zero-weight penalty, but no gradient seeds.
        let mut mean = 0.0;
        for traces in head_traces {
            mean += layer_diversity(traces, kind)?.0;
        }
        mean /= num_layers;
        return Ok((
            SequenceLoss {
                total: task,
                task,
                diversity_mean: mean,
            },
            d_logits,
            None,
        ));
    }

    let weight = lambda / num_layers;
    let mut mean = 0.0;
    let mut seeds = Vec::with_capacity(head_traces.len());
    for traces in head_traces {
        let (loss, _, trace_grads) = layer_diversity_with_grads(traces, kind, weight)?;
        mean += loss;
        seeds.push(trace_grads);
    }
    mean /= num_layers;
    Ok((
        SequenceLoss {
            total: task + lambda * mean,
            task,
            diversity_mean: mean,
        },
        d_logits,
        Some(seeds),
    ))
}

/// Forward + combined loss + backward for one sequence.
pub fn sequence_loss_and_grads(
    params: &ModelParams,
    example: &Example,
    kind: Option<DiversityKind>,
    lambda: f64,
    scale_mode: ScaleMode,
) -> Result<(SequenceLoss, ModelGrads)> {
    let need_a = matches!(kind, Some(DiversityKind::AttentionProb)) && lambda != 0.0;
    let (logits, trace) = model_forward(params, &example.tokens, scale_mode, need_a)?;
    let (loss, d_logits, seeds) =
        total_loss(&logits, &example.labels, &trace.head_traces, kind, lambda)?;
    let grads = model_backward(
        params,
        &example.tokens,
        &trace,
        &d_logits,
        scale_mode,
        seeds.as_deref(),
    )?;
    Ok((loss, grads))
}

/// Mean eval accuracy over a set of examples.
pub fn eval_accuracy(params: &ModelParams, examples: &[Example], scale_mode: ScaleMode) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let (logits, _) = model_forward(params, &ex.tokens, scale_mode, false)?;
        total += accuracy(&logits, &ex.labels);
    }
    Ok(total / examples.len() as f64)
}

/// Measures all five diversity kinds per layer, averaged over the given
/// examples (losses and similarity matrices alike).
pub fn measure_report(
    params: &ModelParams,
    examples: &[Example],
    scale_mode: ScaleMode,
) -> Result<DiversityReport> {
    let num_layers = params.layers.len();
    let n = params.layers[0].num_heads();
    let mut sums: Vec<PerKind<(f64, Matrix)>> = (0..num_layers)
        .map(|_| {
            PerKind::try_build(|_| Ok((0.0, Matrix::zeros(n, n)))).expect("infallible")
        })
        .collect();

    for ex in examples {
        let (_, trace) = model_forward(params, &ex.tokens, scale_mode, true)?;
        for (l, traces) in trace.head_traces.iter().enumerate() {
            for kind in DiversityKind::ALL {
                let (loss, sim) = layer_diversity(traces, kind)?;
                let slot = match kind {
                    DiversityKind::Context => &mut sums[l].context,
                    DiversityKind::AttentionProb => &mut sums[l].attention,
                    DiversityKind::Query => &mut sums[l].query,
                    DiversityKind::Key => &mut sums[l].key,
                    DiversityKind::Value => &mut sums[l].value,
                };
                slot.0 += loss;
                slot.1.add_assign(&sim)?;
            }
        }
    }

    let count = examples.len() as f64;
    let per_layer = sums
        .into_iter()
        .map(|layer| {
            let average = |slot: (f64, Matrix)| (slot.0 / count, slot.1.scale(1.0 / count));
            let (ly, sy) = average(layer.context);
            let (la, sa) = average(layer.attention);
            let (lq, sq) = average(layer.query);
            let (lk, sk) = average(layer.key);
            let (lv, sv) = average(layer.value);
            LayerDiversityReport {
                loss: PerKind {
                    context: ly,
                    attention: la,
                    query: lq,
                    key: lk,
                    value: lv,
                },
                similarity: PerKind {
                    context: sy,
                    attention: sa,
                    query: sq,
                    key: sk,
                    value: sv,
                },
            }
        })
        .collect();
    Ok(DiversityReport { per_layer })
}

/// Per-layer, per-head gradients of the pure task loss with respect to
/// the chosen projection, averaged over the batch.
pub fn capture_head_gradients(
    params: &ModelParams,
    batch: &[Example],
    param_kind: ParamKind,
    scale_mode: ScaleMode,
) -> Result<Vec<Vec<Matrix>>> {
    let mut acc = ModelGrads::zeros_like(params);
    for ex in batch {
        let (_, grads) = sequence_loss_and_grads(params, ex, None, 0.0, scale_mode)?;
        acc.add_assign(&grads)?;
    }
    acc.scale_in_place(1.0 / batch.len() as f64);
    Ok(acc
        .layers
        .iter()
        .map(|layer| {
            layer
                .heads
                .iter()
                .map(|h| match param_kind {
                    ParamKind::Query => h.w_query.clone(),
                    ParamKind::Key => h.w_key.clone(),
                    ParamKind::Value => h.w_value.clone(),
                })
                .collect()
        })
        .collect())
}

fn record_metrics(
    step: usize,
    task_loss: f64,
    params: &ModelParams,
    eval: &[Example],
    scale_mode: ScaleMode,
) -> Result<MetricRecord> {
    let report = measure_report(params, eval, scale_mode)?;
    let diversity = PerKind::try_build(|kind| Ok(report.summed(kind)))?;
    Ok(MetricRecord {
        step,
        task_loss,
        diversity,
        eval_accuracy: eval_accuracy(params, eval, scale_mode)?,
    })
}

fn batch_loss_only(
    params: &ModelParams,
    batch: &[&Example],
    scale_mode: ScaleMode,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let (logits, _) = model_forward(params, &ex.tokens, scale_mode, false)?;
        total += cross_entropy(&logits, &ex.labels)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// Runs the full experiment: deterministic given the config (seed
/// included). The metric log covers step 0, every `log_interval` steps,
/// and the final step.
pub fn train(config: &TrainConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let data = generate_task(&config.task, config.seed)?;
    let mut params = init_model(&config.model_dims(), mix_seed(config.seed, stream::PARAM_INIT));

    let num_train = data.train.len();
    let batch_of = |step: usize| -> Vec<&Example> {
        (0..config.batch_size)
            .map(|i| &data.train[(step * config.batch_size + i) % num_train])
            .collect()
    };

    let mut metrics = Vec::new();
    let initial_loss = batch_loss_only(&params, &batch_of(0), config.scale_mode)?;
    metrics.push(record_metrics(
        0,
        initial_loss,
        &params,
        &data.eval,
        config.scale_mode,
    )?);

    for step in 0..config.steps {
        let batch = batch_of(step);
        let mut acc = ModelGrads::zeros_like(&params);
        let mut batch_task = 0.0;
        let mut batch_total = 0.0;
        for ex in &batch {
            let (loss, grads) = sequence_loss_and_grads(
                &params,
                ex,
                config.diversity_kind,
                config.lambda,
                config.scale_mode,
            )?;
            batch_task += loss.task;
            batch_total += loss.total;
            acc.add_assign(&grads)?;
        }
        let inv_b = 1.0 / batch.len() as f64;
        batch_task *= inv_b;
        batch_total *= inv_b;
        if !batch_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        acc.scale_in_place(inv_b);
        sgd_step(&mut params, &acc, config.learning_rate);

        let done = step + 1;
        if done % config.log_interval == 0 || done == config.steps {
            metrics.push(record_metrics(
                done,
                batch_task,
                &params,
                &data.eval,
                config.scale_mode,
            )?);
        }
    }

    let report = measure_report(&params, &data.eval, config.scale_mode)?;
    let holdout = &data.eval[..config.batch_size.min(data.eval.len())];
    let head_grads = capture_head_gradients(&params, holdout, ParamKind::Query, config.scale_mode)?;
    let grad_similarity = grad_similarity_loss(&head_grads)?;
    let final_eval_accuracy = metrics.last().expect("at least one record").eval_accuracy;

    Ok(RunArtifacts {
        config: config.clone(),
        metrics,
        report,
        grad_similarity,
        final_eval_accuracy,
        final_params: params,
    })
}
