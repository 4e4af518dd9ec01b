//! End-to-end commands over a run directory.
//!
//! ```text
//! <out>/config.resolved.toml
//! <out>/data/{train,test}/          generated datasets
//! <out>/checkpoints/{appearance,motion}.ckpt
//! <out>/logs/{appearance,motion}.jsonl
//! <out>/eval/{scores.csv,summary.json}
//! <out>/plots/{curves,maps}/*.png
//! <out>/ablation/{ablation.csv,ablation.json}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_appearance, load_motion, save_appearance, save_motion};
use crate::config::RunConfig;
use crate::datagen::{FlowMap, ObjectCube, Split};
use crate::dataset::{generate_split, read_dataset, GeneratedSplit, VideoInfo};
use crate::error::{Result, VadError};
use crate::evaluation::{
    error_map, frame_series, map_source, pooled_auroc, read_scores_csv, render_error_map, render_score_curve, reweight,
    save_png, summarize, write_scores_csv, EvalSummary, ScoreRecord, Scorer,
};
use crate::objectives::ScoreWeights;
use crate::training::{train_appearance, train_motion, EpochLog, TrainLog};
use crate::vit::{ContextVit, Streams};

/// Cubes, flows and per-video labels of one split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub cubes: Vec<ObjectCube>,
    pub flows: Vec<FlowMap>,
    pub videos: Vec<VideoInfo>,
}

impl From<GeneratedSplit> for SplitData {
    fn from(g: GeneratedSplit) -> Self {
        Self { cubes: g.cubes, flows: g.flows, videos: g.manifest.videos }
    }
}

impl SplitData {
    pub fn load(root: &Path) -> Result<Self> {
        let ds = read_dataset(root)?;
        let (cubes, flows) = ds.load_all()?;
        Ok(Self { cubes, flows, videos: ds.manifest.videos })
    }

    pub fn generate(cfg: &RunConfig, split: Split) -> Result<Self> {
        generate_split(&cfg.data, split, cfg.seed).map(Self::from)
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path, data: Option<&Path>) -> Self {
        Self { root: out.to_path_buf(), data: data.map_or_else(|| out.join("data"), Path::to_path_buf) }
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.data.join(split.as_str())
    }

    pub fn appearance_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/appearance.ckpt")
    }

    pub fn motion_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/motion.ckpt")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VadError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| VadError::io(path, e))
}

pub type Progress<'a> = &'a mut dyn FnMut(&str);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateReport {
    pub train_cubes: usize,
    pub test_cubes: usize,
    pub skipped: usize,
    pub test_frames: usize,
    pub abnormal_frames: usize,
}

impl GenerateReport {
    pub fn abnormal_fraction(&self) -> f64 {
        self.abnormal_frames as f64 / self.test_frames.max(1) as f64
    }
}

pub fn cmd_generate(cfg: &RunConfig, layout: &RunLayout, force: bool) -> Result<GenerateReport> {
    cfg.validate()?;
    let train = generate_split(&cfg.data, Split::Train, cfg.seed)?;
    let test = generate_split(&cfg.data, Split::Test, cfg.seed)?;
    train.write(&layout.split(Split::Train), force)?;
    test.write(&layout.split(Split::Test), force)?;
    cfg.write_snapshot(&layout.root)?;
    cfg.write_snapshot(&layout.data)?;
    let labels = test.manifest.videos.iter().flat_map(|v| v.frame_labels.iter());
    Ok(GenerateReport {
        train_cubes: train.cubes.len(),
        test_cubes: test.cubes.len(),
        skipped: train.skipped + test.skipped,
        test_frames: labels.clone().count(),
        abnormal_frames: labels.filter(|&&l| l != 0).count(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub appearance_params: usize,
    pub appearance_first_loss: f64,
    pub appearance_last_loss: f64,
    pub motion_params: Option<usize>,
    pub motion_first_loss: Option<f64>,
    pub motion_last_loss: Option<f64>,
}

fn epoch_logger<'a>(name: &'a str, progress: &'a mut dyn FnMut(&str)) -> impl FnMut(&EpochLog) + 'a {
    move |e: &EpochLog| {
        progress(&format!(
            "{name} epoch {:>3}  loss {:.6}  (masked {:.6} whole {:.6} partial {:.6} recon {:.6})  lr {:.3e}",
            e.epoch, e.loss, e.terms.l_masked, e.terms.l_whole, e.terms.l_partial, e.terms.l_recon, e.lr
        ))
    }
}

pub fn cmd_train(cfg: &RunConfig, layout: &RunLayout, progress: Progress) -> Result<TrainSummary> {
    cfg.validate()?;
    let train = SplitData::load(&layout.split(Split::Train))?;
    mkdir(&layout.logs())?;
    cfg.write_snapshot(&layout.root)?;
    if !cfg.train.clip || (cfg.motion && !cfg.motion_train.clip) {
        progress("gradient clipping disabled for at least one branch");
    }
    let (vit, log) = train_appearance(&train.cubes, cfg.appearance.clone(), &cfg.train, &mut epoch_logger("appearance", progress))?;
    save_appearance(&vit, &layout.appearance_ckpt())?;
    log.write_jsonl(&layout.logs().join("appearance.jsonl"))?;
    let mut summary = TrainSummary {
        appearance_params: vit.param_count(),
        appearance_first_loss: log.first_loss().unwrap_or(f64::NAN),
        appearance_last_loss: log.last_loss().unwrap_or(f64::NAN),
        motion_params: None,
        motion_first_loss: None,
        motion_last_loss: None,
    };
    if cfg.motion {
        let (cae, log) = train_motion(&train.flows, cfg.motion_model.clone(), &cfg.motion_train, &mut epoch_logger("motion", progress))?;
        save_motion(&cae, &layout.motion_ckpt())?;
        log.write_jsonl(&layout.logs().join("motion.jsonl"))?;
        summary.motion_params = Some(cae.param_count());
        summary.motion_first_loss = log.first_loss();
        summary.motion_last_loss = log.last_loss();
    } else if layout.motion_ckpt().exists() {
        fs::remove_file(layout.motion_ckpt()).map_err(|e| VadError::io(layout.motion_ckpt(), e))?;
    }
    if let Some(dir) = layout.appearance_ckpt().parent() {
        cfg.write_snapshot(dir)?;
    }
    cfg.write_snapshot(&layout.logs())?;
    Ok(summary)
}

pub fn cmd_eval(cfg: &RunConfig, layout: &RunLayout) -> Result<EvalSummary> {
    cfg.validate()?;
    let test = SplitData::load(&layout.split(Split::Test))?;
    let vit = load_appearance(&layout.appearance_ckpt())?;
    let cae = if cfg.motion { Some(load_motion(&layout.motion_ckpt())?) } else { None };
    let scorer = Scorer { appearance: Some(&vit), motion: cae.as_ref(), weights: cfg.weights, policy: cfg.eval.policy() };
    let records = scorer.score_all(&test.cubes, &test.flows)?;
    let summary = summarize(&records, &test.videos, cfg.weights, cfg.eval.frames(), cfg.eval.policy())?;
    let dir = layout.eval();
    mkdir(&dir)?;
    write_scores_csv(&dir.join("scores.csv"), &records)?;
    write_json(&dir.join("summary.json"), &summary)?;
    cfg.write_snapshot(&dir)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlotReport {
    pub curves: usize,
    pub maps: usize,
}

/// Score curves for every test video and error maps for the highest-scoring
/// object of up to `max_maps` frames (abnormal frames first).
pub fn cmd_plot(cfg: &RunConfig, layout: &RunLayout, max_maps: usize) -> Result<PlotReport> {
    let test = SplitData::load(&layout.split(Split::Test))?;
    let records = read_scores_csv(&layout.eval().join("scores.csv"))?;
    let series = frame_series(&records, &test.videos, cfg.eval.frames())?;
    let curves = layout.plots().join("curves");
    let maps = layout.plots().join("maps");
    mkdir(&curves)?;
    mkdir(&maps)?;
    for s in &series {
        save_png(&render_score_curve(s), &curves.join(format!("{}.png", s.video_id)))?;
    }
    let vit = load_appearance(&layout.appearance_ckpt())?;
    let mut best: BTreeMap<(&str, usize), &ScoreRecord> = BTreeMap::new();
    for r in &records {
        let slot = best.entry((r.video_id.as_str(), r.frame_index)).or_insert(r);
        if r.score > slot.score {
            *slot = r;
        }
    }
    let mut picks: Vec<&ScoreRecord> = best.into_values().collect();
    picks.sort_by(|a, b| b.label.cmp(&a.label).then(b.score.total_cmp(&a.score)));
    let by_key: BTreeMap<String, &ObjectCube> = test.cubes.iter().map(|c| (c.key(), c)).collect();
    let mut n_maps = 0;
    for r in picks.into_iter().take(max_maps) {
        let key = format!("{}_{}_{}", r.video_id, r.frame_index, r.track_id);
        let cube = by_key.get(&key).ok_or_else(|| VadError::Dataset(format!("scores reference unknown object {key}")))?;
        let mask = cfg.eval.policy().masks(&vit, cube)?.remove(0);
        let bundle = vit.forward(cube, &mask)?;
        if let Some((pred, gt)) = map_source(&bundle, cube) {
            let map = error_map(pred, gt)?;
            save_png(&render_error_map(&map, 8), &maps.join(format!("{}_{}.png", r.video_id, r.frame_index)))?;
            n_maps += 1;
        }
    }
    cfg.write_snapshot(&layout.plots())?;
    Ok(PlotReport { curves: series.len(), maps: n_maps })
}

/// Appearance-only, motion-only and fused frame AUROCs share every setting
/// except the score weights.
pub fn auroc_of(records: &[ScoreRecord], videos: &[VideoInfo], cfg: &RunConfig) -> Result<f64> {
    pooled_auroc(&frame_series(records, videos, cfg.eval.frames())?)
}

const APPEARANCE_ONLY: ScoreWeights = ScoreWeights { lambda_a: 1.0, lambda_o: 0.0 };
const MOTION_ONLY: ScoreWeights = ScoreWeights { lambda_a: 0.0, lambda_o: 1.0 };

/// Trains one appearance model and scores the test split with it alone.
pub fn appearance_records(
    cfg: &RunConfig,
    streams: Streams,
    seed: u64,
    train: &SplitData,
    test: &SplitData,
    progress: Progress,
) -> Result<(ContextVit<f32>, Vec<ScoreRecord>)> {
    let model_cfg = crate::vit::VitConfig { streams, ..cfg.appearance.clone() };
    let tcfg = crate::optim::TrainConfig { seed, ..cfg.train.clone() };
    let label = format!("[{} seed {seed}]", streams.label());
    let (vit, _log): (_, TrainLog) = train_appearance(&train.cubes, model_cfg, &tcfg, &mut epoch_logger(&label, progress))?;
    let scorer = Scorer { appearance: Some(&vit), motion: None, weights: APPEARANCE_ONLY, policy: cfg.eval.policy() };
    let records = scorer.score_all(&test.cubes, &test.flows)?;
    Ok((vit, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub streams: String,
    pub seed: u64,
    pub auroc: f64,
    pub params: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// All-stream appearance records per seed, reusable for fusion.
    #[serde(skip)]
    pub full_records: BTreeMap<u64, Vec<ScoreRecord>>,
}

impl AblationTable {
    pub fn mean(&self, streams: Streams) -> Option<f64> {
        let label = streams.label();
        let v: Vec<f64> = self.rows.iter().filter(|r| r.streams == label).map(|r| r.auroc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("streams,seed,auroc,params\n");
        for r in &self.rows {
            s.push_str(&format!("\"{}\",{},{},{}\n", r.streams, r.seed, r.auroc, r.params));
        }
        s
    }
}

/// The four stream settings, each trained and scored over every ablation seed.
pub fn run_ablation(cfg: &RunConfig, train: &SplitData, test: &SplitData, progress: Progress) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &seed in &cfg.ablation.seeds {
        for streams in Streams::ABLATION_ROWS {
            let (vit, records) = appearance_records(cfg, streams, seed, train, test, progress)?;
            let auroc = auroc_of(&records, &test.videos, cfg)?;
            progress(&format!("ablation {:<22} seed {seed}: AUROC {auroc:.4}", streams.label()));
            table.rows.push(AblationRow { streams: streams.label(), seed, auroc, params: vit.param_count() });
            if streams == Streams::ALL {
                table.full_records.insert(seed, records);
            }
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub seed: u64,
    pub appearance: f64,
    pub motion: f64,
    pub fused: f64,
}

/// Appearance-only, flow-only and fused AUROC per seed. All-stream appearance
/// records from an earlier ablation are reused when given.
pub fn run_fusion(
    cfg: &RunConfig,
    train: &SplitData,
    test: &SplitData,
    appearance: Option<&BTreeMap<u64, Vec<ScoreRecord>>>,
    progress: Progress,
) -> Result<Vec<FusionRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let app = match appearance.and_then(|m| m.get(&seed)) {
            Some(r) => r.clone(),
            None => appearance_records(cfg, cfg.appearance.streams, seed, train, test, progress)?.1,
        };
        let mcfg = crate::optim::TrainConfig { seed, ..cfg.motion_train.clone() };
        let label = format!("[motion seed {seed}]");
        let (cae, _) = train_motion(&train.flows, cfg.motion_model.clone(), &mcfg, &mut epoch_logger(&label, progress))?;
        let motion = Scorer { appearance: None, motion: Some(&cae), weights: MOTION_ONLY, policy: cfg.eval.policy() }
            .score_all(&test.cubes, &test.flows)?;
        let merged: Vec<ScoreRecord> = app
            .iter()
            .zip(&motion)
            .map(|(a, m)| ScoreRecord { l_recon: m.l_recon, ..a.clone() })
            .collect();
        let row = FusionRow {
            seed,
            appearance: auroc_of(&reweight(&merged, APPEARANCE_ONLY)?, &test.videos, cfg)?,
            motion: auroc_of(&reweight(&merged, MOTION_ONLY)?, &test.videos, cfg)?,
            fused: auroc_of(&reweight(&merged, cfg.weights)?, &test.videos, cfg)?,
        };
        progress(&format!(
            "fusion seed {seed}: appearance {:.4}  flow {:.4}  fused {:.4}",
            row.appearance, row.motion, row.fused
        ));
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateReport {
    pub ablation: Vec<AblationRow>,
    pub means: BTreeMap<String, f64>,
    pub fusion: Option<Vec<FusionRow>>,
}

pub fn cmd_ablate(cfg: &RunConfig, layout: &RunLayout, progress: Progress) -> Result<AblateReport> {
    cfg.validate()?;
    let train = SplitData::load(&layout.split(Split::Train))?;
    let test = SplitData::load(&layout.split(Split::Test))?;
    let table = run_ablation(cfg, &train, &test, progress)?;
    let fusion = if cfg.motion { Some(run_fusion(cfg, &train, &test, Some(&table.full_records), progress)?) } else { None };
    let means = Streams::ABLATION_ROWS.iter().filter_map(|&s| Some((s.label(), table.mean(s)?))).collect();
    let dir = layout.ablation();
    mkdir(&dir)?;
    fs::write(dir.join("ablation.csv"), table.to_csv()).map_err(|e| VadError::io(dir.join("ablation.csv"), e))?;
    let report = AblateReport { ablation: table.rows, means, fusion };
    write_json(&dir.join("ablation.json"), &report)?;
    cfg.write_snapshot(&dir)?;
    Ok(report)
}
