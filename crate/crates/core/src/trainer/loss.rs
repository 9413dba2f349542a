//! CPT, SFT and NSC-SFT objectives over windowed sequences.
//!
//! Position `j` of a sequence is a prediction target when its mask bit is
//! set and `j ≥ 1`; the distribution that predicts it is row `j − 1` of the
//! forward output. Losses are means over all targets of a batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::dataset::{PackedSequence, TokenizedExample};
use crate::tinylm::{forward, value_and_grad, ForwardOutput, FrozenParameters, LossGrad, Parameters, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

/// A slice of at most `context_window` tokens with its own target flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub ids: Vec<TokenId>,
    pub targets: Vec<bool>,
}

impl Window {
    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }
}

/// Cut a sequence into windows of at most `w` tokens that overlap by one
/// token, so every position `j ≥ 1` is a target in exactly one window and
/// is predicted from up to `w − 1` tokens of context. Windows without
/// targets are dropped.
pub fn windows(ids: &[TokenId], mask: &[bool], w: usize) -> Vec<Window> {
    assert!(w >= 2, "window must hold at least two tokens");
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + w).min(ids.len());
        let mut targets = mask[start..end].to_vec();
        targets[0] = false;
        let win = Window {
            ids: ids[start..end].to_vec(),
            targets,
        };
        if win.n_targets() > 0 {
            out.push(win);
        }
        start += w - 1;
    }
    out
}

pub fn example_windows(ex: &TokenizedExample, w: usize) -> Vec<Window> {
    windows(&ex.input_ids, &ex.loss_mask, w)
}

/// `Σ_v exp(lc_v)·(lc_v − lr_v)` for one pair of log-distributions.
/// Symbols the current distribution gives zero mass contribute nothing.
pub fn kl_row(logp_cur: &[f64], logp_ref: &[f64]) -> f64 {
    logp_cur
        .iter()
        .zip(logp_ref)
        .map(|(&lc, &lr)| {
            if lc == f64::NEG_INFINITY {
                0.0
            } else {
                lc.exp() * (lc - lr)
            }
        })
        .sum()
}

/// Mean KL(cur ‖ ref) over the rows selected by `mask`. Both arrays are
/// row-major `[mask.len() × vocab]` log-distributions.
pub fn kl_term(logp_cur: &[f64], logp_ref: &[f64], vocab: usize, mask: &[bool]) -> Result<f64, TrainError> {
    if logp_cur.len() != logp_ref.len() {
        return Err(TrainError::ShapeMismatch {
            expected: logp_cur.len(),
            got: logp_ref.len(),
        });
    }
    if logp_cur.len() != mask.len() * vocab {
        return Err(TrainError::ShapeMismatch {
            expected: mask.len() * vocab,
            got: logp_cur.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let row = i * vocab..(i + 1) * vocab;
        sum += kl_row(&logp_cur[row.clone()], &logp_ref[row]);
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Windows plus, for NSC, the reference log-distributions of every window
/// (the reference is frozen, so they are computed once).
pub(crate) struct Batch {
    pub windows: Vec<Window>,
    pub reference: Option<Vec<Vec<f64>>>,
    pub n_targets: usize,
}

impl Batch {
    pub fn new(windows: Vec<Window>, reference: Option<&Parameters>) -> Result<Self, TrainError> {
        let n_targets: usize = windows.iter().map(Window::n_targets).sum();
        if n_targets == 0 {
            return Err(TrainError::EmptyMask);
        }
        let reference = match reference {
            Some(r) => Some(
                windows
                    .par_iter()
                    .map(|w| forward(r, &w.ids).map(ForwardOutput::into_logprobs))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        Ok(Batch {
            windows,
            reference,
            n_targets,
        })
    }
}

/// Loss and `∂loss/∂logprobs` for the whole batch. `lambda` is `None` for
/// plain CE; otherwise the batch must carry reference distributions.
fn batch_loss(outputs: &[ForwardOutput], batch: &Batch, lambda: Option<f64>) -> (LossBreakdown, Vec<Vec<f64>>) {
    let n = batch.n_targets as f64;
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (wi, (out, win)) in outputs.iter().zip(&batch.windows).enumerate() {
        let v = out.vocab();
        let mut g = vec![0.0; out.len() * v];
        for j in (1..win.ids.len()).filter(|&j| win.targets[j]) {
            let row = j - 1;
            let lp = out.logprobs_at(row);
            let target = win.ids[j] as usize;
            ce_sum -= lp[target];
            g[row * v + target] -= 1.0 / n;
            if let (Some(lambda), Some(reference)) = (lambda, &batch.reference) {
                let lr = &reference[wi][row * v..(row + 1) * v];
                kl_sum += kl_row(lp, lr);
                let scale = lambda / n;
                for (k, (&c, &r)) in lp.iter().zip(lr).enumerate() {
                    if c != f64::NEG_INFINITY {
                        g[row * v + k] += scale * c.exp() * (c - r + 1.0);
                    }
                }
            }
        }
        grads.push(g);
    }
    let ce = ce_sum / n;
    let (kl, total) = match lambda {
        Some(lambda) => {
            let kl = kl_sum / n;
            (kl, ce + lambda * kl)
        }
        None => (0.0, ce),
    };
    (LossBreakdown { ce, kl, total }, grads)
}

pub(crate) fn evaluate(params: &Parameters, batch: &Batch, lambda: Option<f64>) -> Result<LossBreakdown, TrainError> {
    let outputs = batch
        .windows
        .par_iter()
        .map(|w| forward(params, &w.ids))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(batch_loss(&outputs, batch, lambda).0)
}

pub(crate) fn evaluate_with_grad(
    params: &Parameters,
    batch: &Batch,
    lambda: Option<f64>,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let seqs: Vec<&[TokenId]> = batch.windows.iter().map(|w| w.ids.as_slice()).collect();
    let mut breakdown = LossBreakdown::default();
    let (_, grad) = value_and_grad(params, &seqs, |outs| {
        let (b, d_logprobs) = batch_loss(outs, batch, lambda);
        breakdown = b;
        LossGrad {
            value: b.total,
            d_logprobs,
        }
    })?;
    Ok((breakdown, grad))
}

fn window_of(params: &Parameters) -> usize {
    params.config().context_window
}

/// Mean next-token CE over every position of every segment; segments are
/// independent sequences and single-token segments contribute nothing.
pub fn loss_cpt(params: &Parameters, packed: &PackedSequence) -> Result<f64, TrainError> {
    let w = window_of(params);
    let wins: Vec<Window> = (0..packed.segments.len())
        .flat_map(|i| {
            let ids = packed.segment_ids(i);
            windows(ids, &vec![true; ids.len()], w)
        })
        .collect();
    Ok(evaluate(params, &Batch::new(wins, None)?, None)?.ce)
}

/// Mean CE over mask-true positions.
pub fn loss_sft(params: &Parameters, ex: &TokenizedExample) -> Result<f64, TrainError> {
    let batch = Batch::new(example_windows(ex, window_of(params)), None)?;
    Ok(evaluate(params, &batch, None)?.ce)
}

/// CE plus `λ`·mean KL to the reference over the same mask-true positions.
/// `λ = 0` takes the plain SFT path, so the result equals [`loss_sft`]
/// bit for bit.
pub fn loss_nsc_sft(
    params: &Parameters,
    reference: &FrozenParameters,
    ex: &TokenizedExample,
    lambda: f64,
) -> Result<LossBreakdown, TrainError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(TrainError::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let wins = example_windows(ex, window_of(params));
    if lambda == 0.0 {
        return evaluate(params, &Batch::new(wins, None)?, None);
    }
    let batch = Batch::new(wins, Some(reference))?;
    evaluate(params, &batch, Some(lambda))
}

fn objective_batch(
    params: &Parameters,
    examples: &[TokenizedExample],
    reference: Option<(&Parameters, f64)>,
) -> Result<(Batch, Option<f64>), TrainError> {
    let w = window_of(params);
    let wins: Vec<Window> = examples.iter().flat_map(|e| example_windows(e, w)).collect();
    match reference {
        Some((r, lambda)) if lambda > 0.0 => Ok((Batch::new(wins, Some(r))?, Some(lambda))),
        _ => Ok((Batch::new(wins, None)?, None)),
    }
}

/// The pooled training objective over `examples`: mean CE over all
/// mask-true targets, plus `λ`·mean KL when a reference is given.
pub fn objective(
    params: &Parameters,
    examples: &[TokenizedExample],
    reference: Option<(&Parameters, f64)>,
) -> Result<LossBreakdown, TrainError> {
    let (batch, lambda) = objective_batch(params, examples, reference)?;
    evaluate(params, &batch, lambda)
}

/// [`objective`] together with its exact gradient.
pub fn objective_with_grad(
    params: &Parameters,
    examples: &[TokenizedExample],
    reference: Option<(&Parameters, f64)>,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let (batch, lambda) = objective_batch(params, examples, reference)?;
    evaluate_with_grad(params, &batch, lambda)
}

/// Mean KL(θ ‖ θ₀) over the mask-true positions of `examples`.
pub fn mean_kl(params: &Parameters, reference: &Parameters, examples: &[TokenizedExample]) -> Result<f64, TrainError> {
    let w = window_of(params);
    let wins: Vec<Window> = examples.iter().flat_map(|e| example_windows(e, w)).collect();
    let batch = Batch::new(wins, Some(reference))?;
    Ok(evaluate(params, &batch, Some(1.0))?.kl)
}
