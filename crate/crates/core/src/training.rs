//! Optimization loops. The two branches train separately and share only the
//! optimizer, schedule and logging plumbing.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cae::{CaeConfig, MotionCae};
use crate::datagen::{FlowMap, ObjectCube};
use crate::error::{Result, VadError};
use crate::nn::{ParamStore, Real};
use crate::objectives::LossBreakdown;
use crate::optim::{clip_grad_norm, AdamW, TrainConfig};
use crate::vit::{sample_mask_with, ContextVit, MaskPattern, VitConfig};

/// One optimizer step, as written to the line-delimited loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_masked: f64,
    pub l_whole: f64,
    pub l_partial: f64,
    pub l_recon: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub terms: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in &self.steps {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| VadError::io(path, e))
    }
}

/// Per-batch loss terms reported by a model step.
trait Objective<T: Real> {
    fn store(&mut self) -> &mut ParamStore<T>;
    fn step_loss(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<LossBreakdown>>;
    fn describe(&self, batch: &[usize]) -> String;
}

struct AppearanceObjective<'a> {
    model: ContextVit<f32>,
    cubes: &'a [ObjectCube],
}

impl Objective<f32> for AppearanceObjective<'_> {
    fn store(&mut self) -> &mut ParamStore<f32> {
        &mut self.model.store
    }

    fn step_loss(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<LossBreakdown>> {
        let cfg = &self.model.config;
        let masks = batch
            .iter()
            .map(|_| if cfg.streams.is_plain() { Ok(MaskPattern::unmasked()) } else { sample_mask_with(cfg.mask_ratio, rng) })
            .collect::<Result<Vec<_>>>()?;
        let frames: Vec<&[f32]> = batch.iter().map(|&i| self.cubes[i].frames.as_slice()).collect();
        self.model.loss_and_grad(&frames, &masks)
    }

    fn describe(&self, batch: &[usize]) -> String {
        batch.iter().map(|&i| self.cubes[i].key()).collect::<Vec<_>>().join(",")
    }
}

struct MotionObjective<'a> {
    model: MotionCae<f32>,
    flows: &'a [FlowMap],
}

impl Objective<f32> for MotionObjective<'_> {
    fn store(&mut self) -> &mut ParamStore<f32> {
        &mut self.model.store
    }

    fn step_loss(&mut self, batch: &[usize], _rng: &mut ChaCha8Rng) -> Result<Vec<LossBreakdown>> {
        let values: Vec<f32> = batch.iter().flat_map(|&i| self.flows[i].values.iter().copied()).collect();
        let losses = self.model.loss_and_grad(&values)?;
        Ok(losses.into_iter().map(|l| LossBreakdown { l_recon: l, ..LossBreakdown::default() }).collect())
    }

    fn describe(&self, batch: &[usize]) -> String {
        batch
            .iter()
            .map(|&i| {
                let f = &self.flows[i];
                format!("{}/{}/{}", f.video_id, f.frame_index, f.track_id)
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn total(l: &LossBreakdown) -> f64 {
    l.l_pred + l.l_recon
}

fn run<O: Objective<f32>>(
    objective: &mut O,
    n: usize,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainLog> {
    config.validate()?;
    if n == 0 {
        return Err(VadError::Dataset("training set is empty".into()));
    }
    let bs = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let schedule = config.schedule(steps_per_epoch);
    let mut opt = AdamW::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (b, batch) in order.chunks(bs).enumerate() {
            let lr = schedule.at(step as f64);
            objective.store().zero_grads();
            let losses = objective.step_loss(batch, &mut rng).map_err(|e| match e {
                VadError::NonFinite(m) => VadError::NonFinite(format!(
                    "{m} at epoch {epoch} batch {b} (step {step}; cubes {})",
                    objective.describe(batch)
                )),
                other => other,
            })?;
            let mean = mean_breakdown(&losses);
            let store = objective.store();
            let grads_ok = store.grads.iter().flatten().all(|g| g.is_finite());
            if !total(&mean).is_finite() || !grads_ok {
                return Err(VadError::NonFinite(format!(
                    "loss at epoch {epoch} batch {b} (step {step}; cubes {})",
                    objective.describe(batch)
                )));
            }
            let store = objective.store();
            let grad_norm = if config.clip { clip_grad_norm(store, config.clip_norm) } else { store.grad_norm() };
            opt.step(store, lr);
            for (acc, l) in [
                (&mut sum.l_masked, mean.l_masked),
                (&mut sum.l_whole, mean.l_whole),
                (&mut sum.l_partial, mean.l_partial),
                (&mut sum.l_pred, mean.l_pred),
                (&mut sum.l_recon, mean.l_recon),
            ] {
                *acc += l * batch.len() as f64;
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: total(&mean),
                l_masked: mean.l_masked,
                l_whole: mean.l_whole,
                l_partial: mean.l_partial,
                l_recon: mean.l_recon,
                grad_norm,
            });
            step += 1;
        }
        let k = 1.0 / n as f64;
        let terms = LossBreakdown {
            l_masked: sum.l_masked * k,
            l_whole: sum.l_whole * k,
            l_partial: sum.l_partial * k,
            l_pred: sum.l_pred * k,
            l_recon: sum.l_recon * k,
        };
        let entry = EpochLog { epoch, loss: total(&terms), terms, lr: schedule.at(step.saturating_sub(1) as f64) };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

fn mean_breakdown(losses: &[LossBreakdown]) -> LossBreakdown {
    let k = 1.0 / losses.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for l in losses {
        m.l_masked += l.l_masked * k;
        m.l_whole += l.l_whole * k;
        m.l_partial += l.l_partial * k;
        m.l_pred += l.l_pred * k;
        m.l_recon += l.l_recon * k;
    }
    m
}

/// Trains the appearance branch on normal cubes.
pub fn train_appearance(
    cubes: &[ObjectCube],
    model: VitConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(ContextVit<f32>, TrainLog)> {
    if let Some(c) = cubes.iter().find(|c| c.label != 0) {
        return Err(VadError::Dataset(format!("training cube {} is labeled abnormal", c.key())));
    }
    let mut objective = AppearanceObjective { model: ContextVit::new(model, config.seed)?, cubes };
    let log = run(&mut objective, cubes.len(), config, on_epoch)?;
    Ok((objective.model, log))
}

/// Trains the motion branch on normal flow maps.
pub fn train_motion(
    flows: &[FlowMap],
    model: CaeConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(MotionCae<f32>, TrainLog)> {
    let mut objective = MotionObjective { model: MotionCae::new(model, config.seed)?, flows };
    let log = run(&mut objective, flows.len(), config, on_epoch)?;
    Ok((objective.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{FLOW_PIXELS, FRAME_PIXELS};
    use crate::vit::Streams;

    fn tiny_vit() -> VitConfig {
        VitConfig { dim: 16, enc_depth: 2, dec_depth: 1, heads: 2, ..VitConfig::default() }
    }

    fn cubes(n: usize) -> Vec<ObjectCube> {
        (0..n)
            .map(|k| {
                let frames = (0..5 * FRAME_PIXELS).map(|i| ((i * 7 + k * 13) % 97) as f32 / 97.0).collect();
                ObjectCube::new(frames, "v", 4 + k, "t0", 0).unwrap()
            })
            .collect()
    }

    fn short(epochs: usize) -> TrainConfig {
        TrainConfig { batch_size: 2, epochs, lr: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn log_has_one_entry_per_epoch_and_is_deterministic() {
        let data = cubes(3);
        let (m1, l1) = train_appearance(&data, tiny_vit(), &short(3), &mut |_| {}).unwrap();
        let (m2, l2) = train_appearance(&data, tiny_vit(), &short(3), &mut |_| {}).unwrap();
        assert_eq!(l1.epochs.len(), 3);
        assert_eq!(l1.steps.len(), 6);
        assert_eq!(l1, l2);
        assert_eq!(m1.store.export_tensors(), m2.store.export_tensors());
        assert!((l1.steps[0].lr - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn rejects_abnormal_training_cubes() {
        let mut data = cubes(2);
        data[1].label = 1;
        assert!(matches!(train_appearance(&data, tiny_vit(), &short(1), &mut |_| {}), Err(VadError::Dataset(_))));
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let mut data = cubes(2);
        data[0].frames[4 * FRAME_PIXELS] = f32::INFINITY;
        let cfg = VitConfig { streams: Streams::NONE, ..tiny_vit() };
        let err = train_appearance(&data, cfg, &short(1), &mut |_| {}).unwrap_err();
        assert!(matches!(&err, VadError::NonFinite(m) if m.contains("v_4_t0") && m.contains("batch 0")), "{err}");
    }

    #[test]
    fn motion_log_and_jsonl() {
        let flows: Vec<FlowMap> =
            (0..4).map(|k| FlowMap::new(vec![0.1 * k as f32; FLOW_PIXELS], "v", k + 1, "t0").unwrap()).collect();
        let cfg = CaeConfig { channels: [4, 8, 8], latent: 16 };
        let (_, log) = train_motion(&flows, cfg, &short(2), &mut |_| {}).unwrap();
        assert_eq!(log.epochs.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        log.write_jsonl(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), log.steps.len());
        let first: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, log.steps[0]);
    }
}
