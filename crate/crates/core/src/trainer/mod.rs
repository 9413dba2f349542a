//! Full-batch training of the tiny model under CPT, SFT or NSC-SFT.
//!
//! The loop is plain gradient descent on a cosine-with-warmup schedule.
//! Every step records its learning rate, loss breakdown and gradient norm so
//! descent can be checked after the fact.

mod loss;
mod schedule;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TokenizedExample;
use crate::jsonl::{write_jsonl, JsonlError};
use crate::tinylm::gradcheck::{check_coordinates, sample_coordinates, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::tinylm::{save_checkpoint, FrozenParameters, ModelError, Parameters};

pub use loss::{
    example_windows, kl_row, kl_term, loss_cpt, loss_nsc_sft, loss_sft, mean_kl, objective, objective_with_grad, windows,
    LossBreakdown, Window,
};
pub use schedule::{lr_at, warmup_steps};

use loss::{evaluate, evaluate_with_grad, Batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Cpt,
    #[default]
    Sft,
    NscSft,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cpt" => Ok(TrainMode::Cpt),
            "sft" => Ok(TrainMode::Sft),
            "nsc_sft" | "nsc-sft" => Ok(TrainMode::NscSft),
            other => Err(format!("unknown mode {other:?} (expected cpt, sft or nsc_sft)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Example indices per step, cycled; `None` is the full batch.
    pub batches: Option<Vec<Vec<usize>>>,
    pub grad_check_every: Option<usize>,
    pub grad_check_coords: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Sft,
            lr_max: 1e-3,
            warmup_frac: 0.1,
            total_steps: 200,
            lambda: 0.1,
            seed: 0,
            batches: None,
            grad_check_every: None,
            grad_check_coords: 16,
            optimizer: Optimizer::Gd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad(format!("warmup_frac must be in (0, 1), got {}", self.warmup_frac));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return bad(format!("lr_max must be > 0, got {}", self.lr_max));
        }
        if self.grad_check_every == Some(0) {
            return bad("grad_check_every must be >= 1".into());
        }
        if let Some(b) = &self.batches {
            if b.is_empty() || b.iter().any(Vec::is_empty) {
                return bad("batches must be non-empty lists of example indices".into());
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.lr_max, self.warmup_frac, self.total_steps)
    }

    /// The KL weight actually applied: `None` unless NSC with `λ > 0`.
    fn kl_weight(&self) -> Option<f64> {
        match self.mode {
            TrainMode::NscSft if self.lambda > 0.0 => Some(self.lambda),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("nsc_sft needs reference parameters")]
    MissingReference,
    #[error("no mask-true prediction targets")]
    EmptyMask,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("batch index {index} out of range for {len} examples")]
    BadBatchIndex { index: usize, len: usize },
    #[error("loss became non-finite ({value}) at step {step}")]
    NonFiniteLoss {
        step: usize,
        value: f64,
        report: Box<TrainReport>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheckSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    /// Loss at the parameters after the last update.
    pub final_loss: f64,
    /// Fraction of the `T` consecutive comparisons (step t+1 vs t, and the
    /// final loss vs the last step) where the loss did not increase.
    pub non_increasing_fraction: f64,
    pub grad_norm_sq_sum: f64,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub summary: Option<TrainSummary>,
    /// File name of the saved checkpoint, relative to the run directory.
    pub checkpoint: Option<String>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: Parameters,
}

pub fn summarize(records: &[StepRecord], final_loss: f64) -> Option<TrainSummary> {
    let first = records.first()?;
    let mut losses: Vec<f64> = records.iter().map(|r| r.loss.total).collect();
    losses.push(final_loss);
    let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    Some(TrainSummary {
        steps: records.len(),
        initial_loss: first.loss.total,
        final_loss,
        non_increasing_fraction: non_increasing as f64 / records.len() as f64,
        grad_norm_sq_sum: records.iter().map(|r| r.grad_norm * r.grad_norm).sum(),
        max_grad_norm: records.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
    })
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

fn apply_update(
    params: &mut Parameters,
    grad: &[f64],
    lr: f64,
    step: usize,
    optimizer: Optimizer,
    state: &mut Option<AdamState>,
) {
    match optimizer {
        Optimizer::Gd => {
            for (p, g) in params.values_mut().iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let st = state.get_or_insert_with(|| AdamState {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let t = (step + 1) as i32;
            let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            for (i, p) in params.values_mut().iter_mut().enumerate() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                *p -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Train `init` on `data` for `cfg.total_steps` steps.
///
/// Examples longer than the context window are split into overlapping
/// windows (see [`windows`]). `reference` is required for NSC-SFT and is
/// only ever read.
pub fn train(
    cfg: &TrainConfig,
    data: &[TokenizedExample],
    init: Parameters,
    reference: Option<&FrozenParameters>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.mode == TrainMode::NscSft && reference.is_none() {
        return Err(TrainError::MissingReference);
    }
    let w = init.config().context_window;
    let kl_weight = cfg.kl_weight();
    let ref_params = if kl_weight.is_some() {
        reference.map(|r| r.params())
    } else {
        None
    };

    let step_sets: Vec<Vec<usize>> = match &cfg.batches {
        Some(b) => b.clone(),
        None => vec![(0..data.len()).collect()],
    };
    let mut batches = Vec::with_capacity(step_sets.len());
    for set in &step_sets {
        let mut wins = Vec::new();
        for &i in set {
            let ex = data.get(i).ok_or(TrainError::BadBatchIndex {
                index: i,
                len: data.len(),
            })?;
            wins.extend(example_windows(ex, w));
        }
        batches.push(Batch::new(wins, ref_params)?);
    }

    let mut params = init;
    let mut records: Vec<StepRecord> = Vec::with_capacity(cfg.total_steps);
    let mut adam = None;
    for step in 0..cfg.total_steps {
        let batch = &batches[step % batches.len()];
        let lr = cfg.lr_at(step);
        let (loss, grad) = match evaluate_with_grad(&params, batch, kl_weight) {
            Ok(r) => r,
            Err(TrainError::Model(ModelError::NonFiniteLoss(value))) => {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    value,
                    report: Box::new(TrainReport {
                        records,
                        summary: None,
                        checkpoint: None,
                    }),
                })
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        let grad_check = match cfg.grad_check_every {
            Some(every) if step % every == 0 => {
                let coords = sample_coordinates(params.len(), cfg.grad_check_coords, cfg.seed ^ step as u64);
                let report = check_coordinates(&params, &grad, &coords, DEFAULT_STEP, DEFAULT_TOLERANCE, |p| {
                    evaluate(p, batch, kl_weight)
                        .map(|b| b.total)
                        .map_err(|e| match e {
                            TrainError::Model(m) => m,
                            other => ModelError::InvalidConfig(other.to_string()),
                        })
                })?;
                if !report.passed {
                    log::warn!("step {step}: gradient check failed, max rel err {:.3e}", report.max_rel_err);
                }
                Some(GradCheckSummary {
                    checked: report.checked,
                    max_rel_err: report.max_rel_err,
                    passed: report.passed,
                })
            }
            _ => None,
        };

        log::debug!("step {step}: lr {lr:.3e} loss {:.6} |g| {grad_norm:.3e}", loss.total);
        records.push(StepRecord {
            step,
            lr,
            loss,
            grad_norm,
            grad_check,
        });
        apply_update(&mut params, &grad, lr, step, cfg.optimizer, &mut adam);
    }

    let last_batch = &batches[cfg.total_steps % batches.len()];
    let final_loss = evaluate(&params, last_batch, kl_weight)?.total;
    if !final_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: cfg.total_steps,
            value: final_loss,
            report: Box::new(TrainReport {
                records,
                summary: None,
                checkpoint: None,
            }),
        });
    }
    let summary = summarize(&records, final_loss);
    Ok(TrainOutcome {
        report: TrainReport {
            records,
            summary,
            checkpoint: None,
        },
        params,
    })
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";

/// Write the checkpoint, the per-step report and the summary into `dir`.
pub fn save_run(dir: &Path, outcome: &mut TrainOutcome) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.params)?;
    outcome.report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_jsonl(&dir.join(REPORT_FILE), &outcome.report.records)?;
    let summary = serde_json::json!({
        "summary": outcome.report.summary,
        "checkpoint": outcome.report.checkpoint,
    });
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(JsonlError::from)?;
    std::fs::write(&path, text + "\n").map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
