//! Tversky index, focal Tversky loss, binary cross-entropy, and the
//! deep-supervision aggregate used to train the change detector.
//!
//! All counts are soft: with targets `y ∈ {0,1}` and probabilities `p`,
//! `TP = Σ y·p`, `FN = Σ y·(1−p)`, `FP = Σ (1−y)·p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    FocalTversky,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// False-negative weight.
    pub alpha: f64,
    /// False-positive weight; `alpha + beta` must equal 1.
    pub beta: f64,
    pub gamma_final: f64,
    pub gamma_intermediate: f64,
    pub epsilon: f64,
    /// Weight per side output, coarse to fine. Empty means 0.5 for every head.
    pub ds_weights: Vec<f64>,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            beta: 0.25,
            gamma_final: 1.0,
            gamma_intermediate: 0.75,
            epsilon: 1e-6,
            ds_weights: Vec::new(),
            kind: LossKind::FocalTversky,
        }
    }
}

pub const DEFAULT_DS_WEIGHT: f64 = 0.5;

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha", "alpha and beta must be nonnegative"));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "beta",
                format!("alpha + beta must equal 1, got {} + {}", self.alpha, self.beta),
            ));
        }
        if !(self.gamma_final > 0.0) {
            return Err(Error::invalid("gamma_final", "must be > 0"));
        }
        if !(self.gamma_intermediate > 0.0) {
            return Err(Error::invalid("gamma_intermediate", "must be > 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be > 0"));
        }
        if self.ds_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("ds_weights", "weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn ds_weight(&self, head: usize) -> Result<f64> {
        if self.ds_weights.is_empty() {
            return Ok(DEFAULT_DS_WEIGHT);
        }
        self.ds_weights
            .get(head)
            .copied()
            .ok_or_else(|| Error::invalid("ds_weights", format!("no weight for side output {head}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftCounts {
    pub tp: f64,
    pub fn_: f64,
    pub fp: f64,
}

pub fn soft_counts(y_true: &[f64], y_pred: &[f64]) -> SoftCounts {
    let mut c = SoftCounts {
        tp: 0.0,
        fn_: 0.0,
        fp: 0.0,
    };
    for (&y, &p) in y_true.iter().zip(y_pred) {
        c.tp += y * p;
        c.fn_ += y * (1.0 - p);
        c.fp += (1.0 - y) * p;
    }
    c
}

/// `(TP + ε) / (TP + α·FN + β·FP + ε)`.
pub fn tversky_index(y_true: &[f64], y_pred: &[f64], alpha: f64, beta: f64, epsilon: f64) -> f64 {
    let c = soft_counts(y_true, y_pred);
    (c.tp + epsilon) / (c.tp + alpha * c.fn_ + beta * c.fp + epsilon)
}

/// Tversky index and its gradient with respect to `y_pred`.
pub fn tversky_index_grad(y_true: &[f64], y_pred: &[f64], alpha: f64, beta: f64, epsilon: f64) -> (f64, Vec<f64>) {
    let c = soft_counts(y_true, y_pred);
    let num = c.tp + epsilon;
    let den = c.tp + alpha * c.fn_ + beta * c.fp + epsilon;
    let ti = num / den;
    let grad = y_true
        .iter()
        .map(|&y| {
            // dTP/dp = y, dFN/dp = -y, dFP/dp = 1 - y
            let dden = y - alpha * y + beta * (1.0 - y);
            (y * den - num * dden) / (den * den)
        })
        .collect();
    (ti, grad)
}

/// `(1 − TI)^γ` for one sample, with its gradient.
pub fn focal_tversky_sample(
    y_true: &[f64],
    y_pred: &[f64],
    alpha: f64,
    beta: f64,
    epsilon: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let (ti, dti) = tversky_index_grad(y_true, y_pred, alpha, beta, epsilon);
    let base = (1.0 - ti).max(0.0);
    let loss = base.powf(gamma);
    let outer = if base > 0.0 {
        -gamma * base.powf(gamma - 1.0)
    } else {
        0.0
    };
    (loss, dti.into_iter().map(|d| outer * d).collect())
}

/// Batch mean of per-sample focal Tversky losses.
pub fn focal_tversky(batch: &[(&[f64], &[f64])], cfg: &LossConfig, gamma: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let sum: f64 = batch
        .iter()
        .map(|(y, p)| {
            let ti = tversky_index(y, p, cfg.alpha, cfg.beta, cfg.epsilon);
            (1.0 - ti).max(0.0).powf(gamma)
        })
        .sum();
    sum / batch.len() as f64
}

const BCE_CLAMP: f64 = 1e-7;

/// Voxel-mean binary cross-entropy and its gradient.
pub fn bce(y_true: &[f64], y_pred: &[f64]) -> (f64, Vec<f64>) {
    let n = y_true.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = y_true
        .iter()
        .zip(y_pred)
        .map(|(&y, &p)| {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if p != pc {
                0.0
            } else {
                (pc - y) / (pc * (1.0 - pc)) / n
            }
        })
        .collect();
    (loss / n, grad)
}

/// Loss of one prediction head under the configured objective.
pub fn head_loss(y_true: &[f64], y_pred: &[f64], cfg: &LossConfig, gamma: f64) -> (f64, Vec<f64>) {
    match cfg.kind {
        LossKind::FocalTversky => focal_tversky_sample(y_true, y_pred, cfg.alpha, cfg.beta, cfg.epsilon, gamma),
        LossKind::Bce => bce(y_true, y_pred),
    }
}

/// Max-pools a binary field by `2^levels` per axis.
pub fn downsample_target(y_true: &[f64], dims: [usize; 3], levels: usize) -> Result<(Vec<f64>, [usize; 3])> {
    let f = 1usize << levels;
    for (axis, &extent) in dims.iter().enumerate() {
        if extent % f != 0 {
            return Err(Error::NotDivisible {
                axis,
                extent,
                factor: f,
            });
        }
    }
    let out_dims = [dims[0] / f, dims[1] / f, dims[2] / f];
    let mut out = vec![0.0f64; out_dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = y_true[x + dims[0] * (y + dims[1] * z)];
                let o = &mut out[x / f + out_dims[0] * (y / f + out_dims[1] * (z / f))];
                *o = o.max(v);
            }
        }
    }
    Ok((out, out_dims))
}

/// A probability field with its grid.
#[derive(Debug, Clone, Copy)]
pub struct Head<'a> {
    pub dims: [usize; 3],
    pub probs: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub final_head: f64,
    /// Unweighted loss per side output, coarse to fine.
    pub side_heads: Vec<f64>,
}

/// Deep-supervision objective for one sample: the final head under
/// `gamma_final` plus weighted side heads under `gamma_intermediate`, each
/// against the max-pooled target. Returns gradients per head.
pub fn detector_loss_grads(
    final_head: Head,
    side_heads: &[Head],
    y_true: &[f64],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if final_head.probs.len() != y_true.len() || final_head.dims.iter().product::<usize>() != y_true.len() {
        return Err(Error::ShapeMismatch {
            what: "final head vs target",
            left: vec![final_head.probs.len()],
            right: vec![y_true.len()],
        });
    }
    let (final_loss, final_grad) = head_loss(y_true, final_head.probs, cfg, cfg.gamma_final);
    let mut total = final_loss;
    let mut grads = vec![final_grad];
    let mut side_losses = Vec::with_capacity(side_heads.len());
    for (k, head) in side_heads.iter().enumerate() {
        let level = level_of(final_head.dims, head.dims)?;
        let (target, tdims) = downsample_target(y_true, final_head.dims, level)?;
        if tdims != head.dims || head.probs.len() != target.len() {
            return Err(Error::ShapeMismatch {
                what: "side head vs pooled target",
                left: head.dims.to_vec(),
                right: tdims.to_vec(),
            });
        }
        let w = cfg.ds_weight(k)?;
        let (loss, mut grad) = head_loss(&target, head.probs, cfg, cfg.gamma_intermediate);
        grad.iter_mut().for_each(|g| *g *= w);
        total += w * loss;
        side_losses.push(loss);
        grads.push(grad);
    }
    Ok((
        LossBreakdown {
            total,
            final_head: final_loss,
            side_heads: side_losses,
        },
        grads,
    ))
}

fn level_of(full: [usize; 3], side: [usize; 3]) -> Result<usize> {
    for level in 0..usize::BITS as usize - 1 {
        let f = 1usize << level;
        if full.iter().zip(&side).all(|(&a, &b)| a == b * f) {
            return Ok(level);
        }
        if full.iter().any(|&a| a < f) {
            break;
        }
    }
    Err(Error::ShapeMismatch {
        what: "side head is not a power-of-two reduction of the final head",
        left: full.to_vec(),
        right: side.to_vec(),
    })
}

/// [`detector_loss_grads`] over volumes, without gradients.
pub fn detector_loss(
    final_pred: &Volume,
    side_preds: &[Volume],
    y_true: &Volume,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if y_true.role() != VolumeRole::BinaryMask {
        return Err(Error::invalid("y_true", "target must be a binary mask"));
    }
    if final_pred.dims() != y_true.dims() {
        return Err(Error::ShapeMismatch {
            what: "final head vs target",
            left: final_pred.dims().to_vec(),
            right: y_true.dims().to_vec(),
        });
    }
    let to64 = |v: &Volume| v.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
    let target = to64(y_true);
    let final_probs = to64(final_pred);
    let side_probs: Vec<Vec<f64>> = side_preds.iter().map(to64).collect();
    let sides: Vec<Head> = side_preds
        .iter()
        .zip(&side_probs)
        .map(|(v, p)| Head {
            dims: v.dims(),
            probs: p,
        })
        .collect();
    let (breakdown, _) = detector_loss_grads(
        Head {
            dims: final_pred.dims(),
            probs: &final_probs,
        },
        &sides,
        &target,
        cfg,
    )?;
    Ok(breakdown)
}
