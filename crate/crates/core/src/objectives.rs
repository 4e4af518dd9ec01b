//! Prediction loss, flow reconstruction loss and the fused anomaly score.
//!
//! Every ℓ2 term is a mean over elements, so appearance (3072 values per
//! frame) and flow (2048 values) terms live on comparable scales.

use serde::{Deserialize, Serialize};

use crate::datagen::{FlowMap, ObjectCube, FLOW_PIXELS, FRAME_PIXELS, INPUT_FRAMES};
use crate::error::{Result, VadError};
use crate::nn::Real;
use crate::vit::PredictionBundle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_whole: f64,
    pub l_partial: f64,
    pub l_masked: f64,
    pub l_pred: f64,
    pub l_recon: f64,
}

impl LossBreakdown {
    pub fn from_terms(l_whole: f64, l_partial: f64, l_masked: f64) -> Self {
        Self { l_whole, l_partial, l_masked, l_pred: l_whole + l_partial + l_masked, l_recon: 0.0 }
    }
}

/// Mean squared error; adds `scale · d/dpred` into `grad`.
pub(crate) fn squared_error_grad<T: Real>(pred: &[T], target: &[T], scale: f64, grad: &mut [T]) -> f64 {
    let n = pred.len() as f64;
    let k = T::of(2.0 * scale / n);
    let mut acc = 0.0f64;
    for ((&p, &t), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        let d = p - t;
        acc += d.as_f64() * d.as_f64();
        *g += k * d;
    }
    acc / n
}

pub fn mse(pred: &[f32], target: &[f32]) -> f64 {
    let acc: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    acc / pred.len() as f64
}

fn check(pred: &[f32], target: &[f32], what: &str) -> Result<()> {
    if pred.len() != target.len() {
        return Err(VadError::Shape(format!("{what}: prediction {} vs target {}", pred.len(), target.len())));
    }
    if pred.iter().chain(target).any(|v| v.is_nan()) {
        return Err(VadError::NonFinite(format!("{what}: NaN input")));
    }
    Ok(())
}

/// Three-term prediction loss for one cube. Absent streams contribute 0.
pub fn pred_loss(bundle: &PredictionBundle, cube: &ObjectCube) -> Result<LossBreakdown> {
    let target = cube.target();
    let future = |p: &Option<Vec<f32>>, what: &str| -> Result<f64> {
        match p {
            Some(p) => {
                check(p, target, what)?;
                Ok(mse(p, target))
            }
            None => Ok(0.0),
        }
    };
    let l_whole = future(&bundle.whole_future, "whole future")?;
    let l_partial = future(&bundle.partial_future, "partial future")?;
    let mut l_masked = 0.0;
    for (&m, recon) in &bundle.masked_recons {
        if m >= INPUT_FRAMES || !bundle.mask.is_masked(m) {
            return Err(VadError::InvalidArgument(format!("reconstruction for unmasked position {m}")));
        }
        check(recon, cube.frame(m), "masked frame")?;
        l_masked += mse(recon, cube.frame(m));
    }
    Ok(LossBreakdown::from_terms(l_whole, l_partial, l_masked))
}

/// Gradient of [`pred_loss`]'s total with respect to the ground-truth cube
/// frames (`5 × 3072`), predictions held fixed.
pub fn pred_loss_target_grad(bundle: &PredictionBundle, cube: &ObjectCube) -> Result<Vec<f32>> {
    pred_loss(bundle, cube)?;
    let mut grad = vec![0.0f32; (INPUT_FRAMES + 1) * FRAME_PIXELS];
    let k = 2.0 / FRAME_PIXELS as f32;
    let mut add = |frame: usize, pred: &[f32], target: &[f32]| {
        for ((g, &p), &t) in grad[frame * FRAME_PIXELS..(frame + 1) * FRAME_PIXELS].iter_mut().zip(pred).zip(target) {
            *g -= k * (p - t);
        }
    };
    for (&m, recon) in &bundle.masked_recons {
        add(m, recon, cube.frame(m));
    }
    for p in [&bundle.whole_future, &bundle.partial_future].into_iter().flatten() {
        add(INPUT_FRAMES, p, cube.target());
    }
    Ok(grad)
}

pub fn flow_loss(recon: &FlowMap, gt: &FlowMap) -> Result<f64> {
    if recon.values.len() != FLOW_PIXELS || gt.values.len() != FLOW_PIXELS {
        return Err(VadError::Shape(format!(
            "flow maps must hold {FLOW_PIXELS} values (got {} and {})",
            recon.values.len(),
            gt.values.len()
        )));
    }
    check(&recon.values, &gt.values, "flow")?;
    Ok(mse(&recon.values, &gt.values))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub lambda_a: f64,
    pub lambda_o: f64,
}

impl ScoreWeights {
    pub const PED2: ScoreWeights = ScoreWeights { lambda_a: 0.05, lambda_o: 0.94 };
    pub const AVENUE: ScoreWeights = ScoreWeights { lambda_a: 2.0, lambda_o: 1.0 };

    pub fn new(lambda_a: f64, lambda_o: f64) -> Result<Self> {
        let w = Self { lambda_a, lambda_o };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_a) || !ok(self.lambda_o) {
            return Err(VadError::InvalidArgument(format!(
                "score weights ({}, {}) must be finite and non-negative",
                self.lambda_a, self.lambda_o
            )));
        }
        if self.lambda_a == 0.0 && self.lambda_o == 0.0 {
            return Err(VadError::InvalidArgument("score weights are both zero".into()));
        }
        Ok(())
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self::AVENUE
    }
}

/// `λa·l_pred + λo·l_recon`.
pub fn anomaly_score(l_pred: f64, l_recon: f64, w: ScoreWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("l_pred", l_pred), ("l_recon", l_recon)] {
        if !v.is_finite() || v < 0.0 {
            return Err(VadError::InvalidArgument(format!("{name} = {v} must be finite and non-negative")));
        }
    }
    Ok(w.lambda_a * l_pred + w.lambda_o * l_recon)
}
