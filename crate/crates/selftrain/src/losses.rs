//! Loss functions and regularizers for mixup training, confidence tempering,
//! prediction sharpening and mixup distillation.
//!
//! Everything here is pure and stateless: no model, no data pipeline, no hidden
//! RNG. Random draws take an explicit seeded stream. Each loss comes in a plain
//! form and a `_with_grad` form returning the analytic gradient with respect to
//! the predictions; the gradients are verified against central finite
//! differences in the test suite.
//!
//! Reduction convention: all batch losses are means over samples and classes,
//! so the loss weights are invariant to batch size. The confidence-tempering
//! regularizer is per class and enters totals as a sum over classes.

use ndarray::{Array1, Array2, ArrayBase, Data, Dimension};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

/// Clamp applied to predictions inside BCE / KL to guard the log singularities.
pub const PROB_CLAMP_EPS: f64 = 1e-7;

/// Default lower clamp on the batch-average class evidence in confidence
/// tempering; keeps a batch of confident negatives from producing an infinite
/// regularizer value.
pub const RHO_FLOOR_DEFAULT: f64 = 1e-6;

/// Default slope of the smooth indicator used by [`sharpen`]. Saturates the
/// sigmoid to exactly 0/1 in f64 for inputs more than ~1e-5 away from 0.5.
pub const INDICATOR_SLOPE_DEFAULT: f64 = 1e8;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP_EPS, 1.0 - PROB_CLAMP_EPS)
}

// ---------------------------------------------------------------------------
// Configuration types
// ---------------------------------------------------------------------------

/// Mixup interpolation settings: Beta-distribution concentration `alpha`, plus
/// an optional pinned draw used by degenerate configurations and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub lambda_draw: Option<f64>,
}

impl MixupConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Parameter(format!(
                "mixup alpha must be a positive real, got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            lambda_draw: None,
        })
    }

    /// Pin the interpolation weight instead of sampling it.
    pub fn with_fixed_lambda(alpha: f64, lambda: f64) -> Result<Self> {
        let mut cfg = Self::new(alpha)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Parameter(format!(
                "fixed lambda must lie in [0,1], got {lambda}"
            )));
        }
        cfg.lambda_draw = Some(lambda);
        Ok(cfg)
    }
}

/// Confidence-tempering thresholds: the regularizer penalizes batch-average
/// class evidence below `tau_low` or above `tau_high`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CTConfig {
    pub tau_low: f64,
    pub tau_high: f64,
    pub rho_floor: f64,
}

impl CTConfig {
    pub fn new(tau_low: f64, tau_high: f64) -> Result<Self> {
        Self::with_floor(tau_low, tau_high, RHO_FLOOR_DEFAULT)
    }

    pub fn with_floor(tau_low: f64, tau_high: f64, rho_floor: f64) -> Result<Self> {
        if !(0.0 < tau_low && tau_low < tau_high && tau_high < 1.0) {
            return Err(Error::Parameter(format!(
                "require 0 < tau_low < tau_high < 1, got ({tau_low}, {tau_high})"
            )));
        }
        if !(rho_floor > 0.0 && rho_floor < tau_low) {
            return Err(Error::Parameter(format!(
                "rho_floor must satisfy 0 < rho_floor < tau_low, got {rho_floor}"
            )));
        }
        Ok(Self {
            tau_low,
            tau_high,
            rho_floor,
        })
    }

    /// Degenerate variant with `tau_low == tau_high`, admitted for the
    /// symmetric edge case where the regularizer reduces to `log 2` at the
    /// shared threshold.
    pub fn degenerate(tau: f64) -> Result<Self> {
        if !(0.0 < tau && tau < 1.0) {
            return Err(Error::Parameter(format!("tau must lie in (0,1), got {tau}")));
        }
        Ok(Self {
            tau_low: tau,
            tau_high: tau,
            rho_floor: RHO_FLOOR_DEFAULT,
        })
    }
}

/// Sharpening strength `gamma` in [0,1] plus the smooth-indicator slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpenConfig {
    pub gamma: f64,
    pub indicator_slope: f64,
}

impl SharpenConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        Self::with_slope(gamma, INDICATOR_SLOPE_DEFAULT)
    }

    pub fn with_slope(gamma: f64, indicator_slope: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Parameter(format!(
                "sharpening gamma must lie in [0,1], got {gamma}"
            )));
        }
        if !(indicator_slope >= 1e6) {
            return Err(Error::Parameter(format!(
                "indicator_slope must be >= 1e6, got {indicator_slope}"
            )));
        }
        Ok(Self {
            gamma,
            indicator_slope,
        })
    }
}

/// Scalar weights combining the loss terms of the teacher and student totals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the confidence-tempering sum in the teacher loss.
    pub beta_ct: f64,
    /// Weight of the labeled BCE term in the student loss.
    pub beta_lab: f64,
    /// Weight of the distillation term in the student loss.
    pub beta_unlab: f64,
    /// Weight of the unlabeled confidence-tempering sum in the student loss.
    pub beta_ct_unlab: f64,
}

impl LossWeights {
    pub fn new(beta_ct: f64, beta_lab: f64, beta_unlab: f64, beta_ct_unlab: f64) -> Result<Self> {
        for (name, v) in [
            ("beta_ct", beta_ct),
            ("beta_lab", beta_lab),
            ("beta_unlab", beta_unlab),
            ("beta_ct_unlab", beta_ct_unlab),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "{name} must be a nonnegative real, got {v}"
                )));
            }
        }
        Ok(Self {
            beta_ct,
            beta_lab,
            beta_unlab,
            beta_ct_unlab,
        })
    }
}

// ---------------------------------------------------------------------------
// Matrix newtypes
// ---------------------------------------------------------------------------

/// N x C matrix of per-class probabilities, every entry in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    values: Array2<f64>,
}

impl PredictionMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, c) = values.dim();
        if n == 0 || c == 0 {
            return Err(Error::Shape(format!(
                "prediction matrix must be at least 1x1, got {n}x{c}"
            )));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Parameter(
                "prediction matrix entries must lie in [0,1]".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }
}

/// N x C matrix of targets. Hard labels are {0,1}; mixed or pseudo targets may
/// take any value in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    values: Array2<f64>,
}

impl LabelMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Parameter(
                "label matrix entries must lie in [0,1]".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

impl From<PredictionMatrix> for LabelMatrix {
    /// Predictions reused as soft targets (pseudo-labels).
    fn from(p: PredictionMatrix) -> Self {
        LabelMatrix { values: p.values }
    }
}

fn check_same_shape(pred: &Array2<f64>, target: &Array2<f64>, what: &str) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "{what}: predictions are {:?} but targets are {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mixup
// ---------------------------------------------------------------------------

/// Draw one mixing weight from Beta(alpha, alpha), or return the pinned draw.
pub fn sample_lambda<R: Rng + ?Sized>(cfg: &MixupConfig, rng: &mut R) -> Result<f64> {
    if let Some(l) = cfg.lambda_draw {
        return Ok(l);
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::Parameter(format!("invalid Beta({0},{0}): {e}", cfg.alpha)))?;
    Ok(beta.sample(rng))
}

/// Convex interpolation of an image pair and its label pair:
/// `lam * (x_i, y_i) + (1-lam) * (x_j, y_j)` elementwise.
pub fn mixup_interpolate<S, D>(
    x_i: &ArrayBase<S, D>,
    x_j: &ArrayBase<S, D>,
    y_i: &Array1<f64>,
    y_j: &Array1<f64>,
    lam: f64,
) -> Result<(ndarray::Array<f64, D>, Array1<f64>)>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Parameter(format!(
            "mixup lambda must lie in [0,1], got {lam}"
        )));
    }
    if x_i.raw_dim() != x_j.raw_dim() {
        return Err(Error::Shape(format!(
            "mixup images: {:?} vs {:?}",
            x_i.shape(),
            x_j.shape()
        )));
    }
    if y_i.len() != y_j.len() {
        return Err(Error::Shape(format!(
            "mixup labels: {} vs {}",
            y_i.len(),
            y_j.len()
        )));
    }
    let mixed_x = x_i.mapv(|v| lam * v) + &x_j.mapv(|v| (1.0 - lam) * v);
    let mixed_y = y_i.mapv(|v| lam * v) + &y_j.mapv(|v| (1.0 - lam) * v);
    Ok((mixed_x, mixed_y))
}

// ---------------------------------------------------------------------------
// Binary cross entropy
// ---------------------------------------------------------------------------

/// Mean binary cross entropy over samples and classes, with predictions
/// clamped into `[eps, 1-eps]`.
pub fn bce_loss(pred: &PredictionMatrix, target: &LabelMatrix) -> Result<f64> {
    Ok(bce_with_grad(pred, target)?.0)
}

/// BCE value plus its gradient with respect to the predictions. The gradient
/// is zero where the clamp is active.
pub fn bce_with_grad(pred: &PredictionMatrix, target: &LabelMatrix) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred.values(), target.values(), "bce")?;
    let (n, c) = pred.values().dim();
    let scale = 1.0 / (n as f64 * c as f64);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, c));
    for ((idx, &p), &t) in pred.values().indexed_iter().zip(target.values().iter()) {
        let pc = clamp_prob(p);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        if (PROB_CLAMP_EPS..=1.0 - PROB_CLAMP_EPS).contains(&p) {
            grad[idx] = scale * (-t / pc + (1.0 - t) / (1.0 - pc));
        }
    }
    Ok((loss * scale, grad))
}

/// Mixup loss: `lam * bce(pred, y_i) + (1-lam) * bce(pred, y_j)` where the
/// predictions were produced on images mixed with the same `lam` and pairing.
pub fn mixup_loss(
    preds_on_mixed: &PredictionMatrix,
    y_i: &LabelMatrix,
    y_j: &LabelMatrix,
    lam: f64,
) -> Result<f64> {
    Ok(mixup_loss_with_grad(preds_on_mixed, y_i, y_j, lam)?.0)
}

pub fn mixup_loss_with_grad(
    preds_on_mixed: &PredictionMatrix,
    y_i: &LabelMatrix,
    y_j: &LabelMatrix,
    lam: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Parameter(format!(
            "mixup lambda must lie in [0,1], got {lam}"
        )));
    }
    let (li, gi) = bce_with_grad(preds_on_mixed, y_i)?;
    let (lj, gj) = bce_with_grad(preds_on_mixed, y_j)?;
    let loss = lam * li + (1.0 - lam) * lj;
    let grad = gi.mapv(|v| lam * v) + &gj.mapv(|v| (1.0 - lam) * v);
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Confidence tempering
// ---------------------------------------------------------------------------

/// Per-class confidence-tempering regularizer on a prediction batch:
/// `R(c) = log(tau_low / rho_c + rho_c / tau_high)` with `rho_c` the
/// batch-average evidence for class `c`, clamped below at `rho_floor`.
pub fn confidence_tempering(pred_batch: &PredictionMatrix, cfg: &CTConfig) -> Result<Array1<f64>> {
    Ok(confidence_tempering_with_grad(pred_batch, cfg)?.0)
}

/// Per-class regularizer values plus the gradient of their sum with respect to
/// every prediction entry. Each entry `p[i,c]` only influences its own class
/// mean, so `d(sum_c R(c))/dp[i,c] = R'(rho_c) / N`.
pub fn confidence_tempering_with_grad(
    pred_batch: &PredictionMatrix,
    cfg: &CTConfig,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let (n, c) = pred_batch.values().dim();
    let scale = 1.0 / n as f64;
    let mut values = Array1::zeros(c);
    let mut grad = Array2::zeros((n, c));
    for class in 0..c {
        let mean = pred_batch.values().column(class).mean().unwrap();
        let clamped = mean < cfg.rho_floor;
        let rho = if clamped { cfg.rho_floor } else { mean };
        let inner = cfg.tau_low / rho + rho / cfg.tau_high;
        values[class] = inner.ln();
        if !clamped {
            let drho = (-cfg.tau_low / (rho * rho) + 1.0 / cfg.tau_high) / inner;
            grad.column_mut(class).fill(scale * drho);
        }
    }
    Ok((values, grad))
}

/// Value of the tempering function at a given batch-average evidence `rho`,
/// exposed for shape analysis (convexity, minimizer) without building a batch.
pub fn ct_at_rho(rho: f64, cfg: &CTConfig) -> f64 {
    let r = rho.max(cfg.rho_floor);
    (cfg.tau_low / r + r / cfg.tau_high).ln()
}

// ---------------------------------------------------------------------------
// Sharpening
// ---------------------------------------------------------------------------

/// Push pseudo-label probabilities toward 0/1:
/// `(1-gamma) * y + gamma * sigmoid(slope * (y - 0.5))` elementwise.
pub fn sharpen(pseudo: &PredictionMatrix, cfg: &SharpenConfig) -> Result<PredictionMatrix> {
    let out = pseudo
        .values()
        .mapv(|y| (1.0 - cfg.gamma) * y + cfg.gamma * sigmoid(cfg.indicator_slope * (y - 0.5)));
    PredictionMatrix::new(out)
}

/// Elementwise derivative of [`sharpen`] with respect to its input.
pub fn sharpen_grad(pseudo: &PredictionMatrix, cfg: &SharpenConfig) -> Array2<f64> {
    pseudo.values().mapv(|y| {
        let s = sigmoid(cfg.indicator_slope * (y - 0.5));
        (1.0 - cfg.gamma) + cfg.gamma * cfg.indicator_slope * s * (1.0 - s)
    })
}

// ---------------------------------------------------------------------------
// KL divergence and distillation
// ---------------------------------------------------------------------------

/// Bernoulli KL divergence `KL(t || p)` for a single probability pair, with
/// `0 log 0 := 0` and the prediction clamped into `[eps, 1-eps]`.
pub fn bernoulli_kl(target: f64, pred: f64) -> f64 {
    let p = clamp_prob(pred);
    let mut kl = 0.0;
    if target > 0.0 {
        kl += target * (target / p).ln();
    }
    if target < 1.0 {
        kl += (1.0 - target) * ((1.0 - target) / (1.0 - p)).ln();
    }
    kl
}

/// Batch-mean Bernoulli KL over samples and classes.
pub fn kl_batch(target: &LabelMatrix, pred: &PredictionMatrix) -> Result<f64> {
    Ok(kl_batch_with_grad(target, pred)?.0)
}

/// Batch-mean KL plus its gradient with respect to the predictions. The
/// entropy of the target does not depend on the prediction, so the gradient
/// coincides with the BCE gradient.
pub fn kl_batch_with_grad(
    target: &LabelMatrix,
    pred: &PredictionMatrix,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred.values(), target.values(), "kl")?;
    let (n, c) = pred.values().dim();
    let scale = 1.0 / (n as f64 * c as f64);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, c));
    for ((idx, &p), &t) in pred.values().indexed_iter().zip(target.values().iter()) {
        loss += bernoulli_kl(t, p);
        if (PROB_CLAMP_EPS..=1.0 - PROB_CLAMP_EPS).contains(&p) {
            let pc = clamp_prob(p);
            grad[idx] = scale * (-t / pc + (1.0 - t) / (1.0 - pc));
        }
    }
    Ok((loss * scale, grad))
}

/// Mixup distillation loss: `lam * KL(yhat_i, pred) + (1-lam) * KL(yhat_j, pred)`
/// where `yhat_i` / `yhat_j` are sharpened teacher pseudo-labels for the two
/// members of each mixed unlabeled pair.
pub fn distillation_loss(
    student_preds_on_mixed: &PredictionMatrix,
    yhat_i: &LabelMatrix,
    yhat_j: &LabelMatrix,
    lam: f64,
) -> Result<f64> {
    Ok(distillation_loss_with_grad(student_preds_on_mixed, yhat_i, yhat_j, lam)?.0)
}

pub fn distillation_loss_with_grad(
    student_preds_on_mixed: &PredictionMatrix,
    yhat_i: &LabelMatrix,
    yhat_j: &LabelMatrix,
    lam: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Parameter(format!(
            "mixup lambda must lie in [0,1], got {lam}"
        )));
    }
    let (li, gi) = kl_batch_with_grad(yhat_i, student_preds_on_mixed)?;
    let (lj, gj) = kl_batch_with_grad(yhat_j, student_preds_on_mixed)?;
    let loss = lam * li + (1.0 - lam) * lj;
    let grad = gi.mapv(|v| lam * v) + &gj.mapv(|v| (1.0 - lam) * v);
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Totals
// ---------------------------------------------------------------------------

/// Teacher objective: mixup term plus the weighted sum of per-class
/// confidence-tempering values.
pub fn teacher_total_loss(mixup_term: f64, ct_terms: &Array1<f64>, weights: &LossWeights) -> f64 {
    mixup_term + weights.beta_ct * ct_terms.sum()
}

/// Student objective: weighted labeled BCE, distillation and unlabeled
/// confidence tempering.
pub fn student_total_loss(
    bce_lab: f64,
    dist: f64,
    ct_terms_unlab: &Array1<f64>,
    weights: &LossWeights,
) -> f64 {
    weights.beta_lab * bce_lab
        + weights.beta_unlab * dist
        + weights.beta_ct_unlab * ct_terms_unlab.sum()
}
