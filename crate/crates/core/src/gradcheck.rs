//! Central finite-difference checks of the analytic gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cae::MotionCae;
use crate::error::Result;
use crate::nn::{ParamId, ParamStore};
use crate::vit::{ContextVit, MaskPattern};

#[derive(Clone, Debug, Serialize)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|)`, with gradients below `floor` on both sides
/// compared absolutely.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        (a - n).abs() / floor
    } else {
        (a - n).abs() / scale
    }
}

const FLOOR: f64 = 1e-10;

/// Picks `n` (tensor, element) pairs: tensor uniformly, then element.
fn pick(store: &ParamStore<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().collect();
    (0..n)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.value(id).len()))
        })
        .collect()
}

fn check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> Result<f64>,
    grad: impl Fn(&mut M) -> Result<()>,
    n: usize,
    h: f64,
    seed: u64,
) -> Result<GradReport> {
    store(model).zero_grads();
    grad(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = pick(store(model), n, &mut rng);
    let mut samples = Vec::with_capacity(n);
    for (id, i) in picks {
        let analytic = store(model).grad(id)[i];
        let orig = store(model).value(id)[i];
        store(model).value_mut(id)[i] = orig + h;
        let up = loss(model)?;
        store(model).value_mut(id)[i] = orig - h;
        let down = loss(model)?;
        store(model).value_mut(id)[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        samples.push(GradSample {
            param: store(model).name(id).to_string(),
            index: i,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, FLOOR),
        });
    }
    Ok(GradReport { samples })
}

/// Mean three-term prediction loss over `cubes` (each `5 × 3072`).
pub fn check_vit(
    model: &mut ContextVit<f64>,
    cubes: &[Vec<f64>],
    masks: &[MaskPattern],
    n: usize,
    h: f64,
    seed: u64,
) -> Result<GradReport> {
    let refs: Vec<&[f64]> = cubes.iter().map(Vec::as_slice).collect();
    let mean = |ls: Vec<crate::objectives::LossBreakdown>| ls.iter().map(|l| l.l_pred).sum::<f64>() / ls.len() as f64;
    check(
        model,
        |m| &mut m.store,
        |m| m.losses(&refs, masks).map(mean),
        |m| m.loss_and_grad(&refs, masks).map(|_| ()),
        n,
        h,
        seed,
    )
}

/// Mean flow reconstruction loss over a batch of `2 × 32 × 32` maps.
pub fn check_cae(model: &mut MotionCae<f64>, flows: &[f64], n: usize, h: f64, seed: u64) -> Result<GradReport> {
    let mean = |ls: Vec<f64>| ls.iter().sum::<f64>() / ls.len() as f64;
    check(model, |m| &mut m.store, |m| m.losses(flows).map(mean), |m| m.loss_and_grad(flows).map(|_| ()), n, h, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-10), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-10) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-14, 0.0, 1e-10) < 1e-3);
    }
}
