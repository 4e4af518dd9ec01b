//! Scoring, object-to-frame aggregation, AUROC and the visual artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cae::MotionCae;
use crate::datagen::{FlowMap, ObjectCube, CUBE_LEN, FLOW_PIXELS, FRAME_SIZE};
use crate::dataset::VideoInfo;
use crate::error::{Result, VadError};
use crate::objectives::{anomaly_score, LossBreakdown, ScoreWeights};
use crate::vit::{object_mask_seed, sample_mask, ContextVit, MaskPattern, PredictionBundle};

pub const CSV_HEADER: &str = "video_id,frame_index,track_id,l_masked,l_whole,l_partial,l_pred,l_recon,score,label";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub track_id: String,
    pub l_masked: f64,
    pub l_whole: f64,
    pub l_partial: f64,
    pub l_pred: f64,
    pub l_recon: f64,
    pub score: f64,
    pub label: u8,
}

impl ScoreRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.video_id,
            self.frame_index,
            self.track_id,
            self.l_masked,
            self.l_whole,
            self.l_partial,
            self.l_pred,
            self.l_recon,
            self.score,
            self.label
        )
    }
}

/// How inference masks are drawn: `draws` seeded masks per object, losses
/// averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub draws: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { draws: 1 }
    }
}

impl MaskPolicy {
    pub fn masks(&self, model: &ContextVit<f32>, cube: &ObjectCube) -> Result<Vec<MaskPattern>> {
        if self.draws == 0 {
            return Err(VadError::InvalidArgument("mask draws must be at least 1".into()));
        }
        if model.config.streams.is_plain() {
            return Ok(vec![MaskPattern::unmasked()]);
        }
        (0..self.draws)
            .map(|d| {
                sample_mask(model.config.mask_ratio, object_mask_seed(&cube.video_id, cube.frame_index, &cube.track_id, d))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Scoring inputs: either branch may be absent, in which case its loss is 0.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub appearance: Option<&'a ContextVit<f32>>,
    pub motion: Option<&'a MotionCae<f32>>,
    pub weights: ScoreWeights,
    pub policy: MaskPolicy,
}

const SCORE_BATCH: usize = 64;

impl Scorer<'_> {
    /// Appearance loss terms for each cube, averaged over the mask draws.
    fn appearance_terms(&self, cubes: &[ObjectCube]) -> Result<Vec<LossBreakdown>> {
        let Some(model) = self.appearance else {
            return Ok(vec![LossBreakdown::default(); cubes.len()]);
        };
        let mut out = Vec::with_capacity(cubes.len());
        for chunk in cubes.chunks(SCORE_BATCH) {
            let per_cube: Vec<Vec<MaskPattern>> = chunk.iter().map(|c| self.policy.masks(model, c)).collect::<Result<_>>()?;
            let draws = per_cube[0].len();
            let mut acc = vec![LossBreakdown::default(); chunk.len()];
            let frames: Vec<&[f32]> = chunk.iter().map(|c| c.frames.as_slice()).collect();
            for d in 0..draws {
                let masks: Vec<MaskPattern> = per_cube.iter().map(|m| m[d].clone()).collect();
                for (a, l) in acc.iter_mut().zip(model.losses(&frames, &masks)?) {
                    a.l_masked += l.l_masked;
                    a.l_whole += l.l_whole;
                    a.l_partial += l.l_partial;
                }
            }
            let k = draws as f64;
            out.extend(acc.into_iter().map(|a| LossBreakdown::from_terms(a.l_whole / k, a.l_partial / k, a.l_masked / k)));
        }
        Ok(out)
    }

    fn motion_terms(&self, flows: &[FlowMap]) -> Result<Vec<f64>> {
        let Some(model) = self.motion else {
            return Ok(vec![0.0; flows.len()]);
        };
        let mut out = Vec::with_capacity(flows.len());
        for chunk in flows.chunks(SCORE_BATCH) {
            let values: Vec<f32> = chunk.iter().flat_map(|f| f.values.iter().copied()).collect();
            if values.len() != chunk.len() * FLOW_PIXELS {
                return Err(VadError::Shape("flow map with wrong size".into()));
            }
            out.extend(model.losses(&values)?);
        }
        Ok(out)
    }

    /// Scores every object. `flows[i]` must belong to `cubes[i]`.
    pub fn score_all(&self, cubes: &[ObjectCube], flows: &[FlowMap]) -> Result<Vec<ScoreRecord>> {
        self.weights.validate()?;
        if cubes.len() != flows.len() {
            return Err(VadError::Shape(format!("{} cubes but {} flows", cubes.len(), flows.len())));
        }
        for (c, f) in cubes.iter().zip(flows) {
            if c.video_id != f.video_id || c.frame_index != f.frame_index || c.track_id != f.track_id {
                return Err(VadError::InvalidArgument(format!("flow for {} paired with cube {}", f.video_id, c.key())));
            }
        }
        let app = self.appearance_terms(cubes)?;
        let mot = self.motion_terms(flows)?;
        cubes
            .iter()
            .zip(app)
            .zip(mot)
            .map(|((c, a), l_recon)| {
                Ok(ScoreRecord {
                    video_id: c.video_id.clone(),
                    frame_index: c.frame_index,
                    track_id: c.track_id.clone(),
                    l_masked: a.l_masked,
                    l_whole: a.l_whole,
                    l_partial: a.l_partial,
                    l_pred: a.l_pred,
                    l_recon,
                    score: anomaly_score(a.l_pred, l_recon, self.weights)?,
                    label: c.label,
                })
            })
            .collect()
    }

    pub fn score_object(&self, cube: &ObjectCube, flow: &FlowMap) -> Result<ScoreRecord> {
        let mut v = self.score_all(std::slice::from_ref(cube), std::slice::from_ref(flow))?;
        Ok(v.remove(0))
    }
}

/// Recomputes the fused score of existing records under new weights.
pub fn reweight(records: &[ScoreRecord], weights: ScoreWeights) -> Result<Vec<ScoreRecord>> {
    records
        .iter()
        .map(|r| Ok(ScoreRecord { score: anomaly_score(r.l_pred, r.l_recon, weights)?, ..r.clone() }))
        .collect()
}

pub fn aggregate_frame_scores(scores: &[f64], mode: Aggregation) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    match mode {
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
    }
}

/// Min-max rescale to `[0, 1]`; a constant series becomes all zeros.
pub fn normalize_per_video(series: &[f64]) -> Vec<f64> {
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; series.len()];
    }
    series.iter().map(|&s| (s - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePoint {
    pub frame_index: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreSeries {
    pub video_id: String,
    pub points: Vec<FramePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameOptions {
    pub aggregation: Aggregation,
    pub normalize: bool,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self { aggregation: Aggregation::Max, normalize: true }
    }
}

/// Frame-level series for every video. Frames before the first complete
/// cube cannot hold an object and are not evaluated.
pub fn frame_series(records: &[ScoreRecord], videos: &[VideoInfo], opts: FrameOptions) -> Result<Vec<FrameScoreSeries>> {
    let mut by_frame: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        by_frame.entry((r.video_id.as_str(), r.frame_index)).or_default().push(r.score);
    }
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        if v.frame_labels.len() != v.n_frames {
            return Err(VadError::Dataset(format!("video {} has {} labels for {} frames", v.video_id, v.frame_labels.len(), v.n_frames)));
        }
        let frames: Vec<usize> = (CUBE_LEN - 1..v.n_frames).collect();
        let raw: Vec<f64> = frames
            .iter()
            .map(|&f| {
                let s = by_frame.get(&(v.video_id.as_str(), f)).map(Vec::as_slice).unwrap_or(&[]);
                aggregate_frame_scores(s, opts.aggregation)
            })
            .collect();
        if let Some(i) = raw.iter().position(|s| !s.is_finite()) {
            return Err(VadError::NonFinite(format!("frame score of {} frame {}", v.video_id, frames[i])));
        }
        let scores = if opts.normalize { normalize_per_video(&raw) } else { raw };
        let points = frames
            .iter()
            .zip(scores)
            .map(|(&f, score)| FramePoint { frame_index: f, score, label: v.frame_labels[f] })
            .collect();
        out.push(FrameScoreSeries { video_id: v.video_id.clone(), points });
    }
    Ok(out)
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` via the tie-averaged rank sum.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VadError::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(VadError::NonFinite("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(VadError::InvalidArgument(format!(
            "AUROC needs both classes; got {n_pos} positive and {n_neg} negative frames"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tie-averaged ranks integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        rank2_pos += order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u64 * rank2;
        i = j + 1;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

pub fn pooled_auroc(series: &[FrameScoreSeries]) -> Result<f64> {
    let (scores, labels): (Vec<f64>, Vec<u8>) = series.iter().flat_map(|s| s.points.iter().map(|p| (p.score, p.label))).unzip();
    auroc(&scores, &labels)
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut text = String::with_capacity(64 * (records.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in records {
        writeln!(text, "{}", r.csv_row()).expect("string write");
    }
    fs::write(path, text).map_err(|e| VadError::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| VadError::io(path, e))?;
    let corrupt = |line: usize, why: &str| VadError::Corrupt { path: path.to_path_buf(), reason: format!("line {line}: {why}") };
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(corrupt(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(corrupt(i + 2, "expected 10 fields"));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| corrupt(i + 2, "bad number"));
            Ok(ScoreRecord {
                video_id: f[0].to_string(),
                frame_index: f[1].parse().map_err(|_| corrupt(i + 2, "bad frame index"))?,
                track_id: f[2].to_string(),
                l_masked: num(3)?,
                l_whole: num(4)?,
                l_partial: num(5)?,
                l_pred: num(6)?,
                l_recon: num(7)?,
                score: num(8)?,
                label: f[9].parse().map_err(|_| corrupt(i + 2, "bad label"))?,
            })
        })
        .collect()
}

/// Channel-summed squared error of two `C × 32 × 32` images.
pub fn error_map(prediction: &[f32], ground_truth: &[f32]) -> Result<Vec<f32>> {
    let plane = FRAME_SIZE * FRAME_SIZE;
    if prediction.len() != ground_truth.len() || prediction.is_empty() || prediction.len() % plane != 0 {
        return Err(VadError::Shape(format!(
            "error map needs matching C×{FRAME_SIZE}×{FRAME_SIZE} inputs (got {} and {})",
            prediction.len(),
            ground_truth.len()
        )));
    }
    let mut map = vec![0.0f32; plane];
    for (p, g) in prediction.chunks_exact(plane).zip(ground_truth.chunks_exact(plane)) {
        for ((m, &a), &b) in map.iter_mut().zip(p).zip(g) {
            *m += (a - b) * (a - b);
        }
    }
    Ok(map)
}

/// Black → red → yellow → white; lighter means larger.
pub fn hot_color(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let r = t.min(1.0);
    let g = (t - 1.0).clamp(0.0, 1.0);
    let b = (t - 2.0).clamp(0.0, 1.0);
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Renders an error map with the hot colormap, scaled to its own maximum.
/// Each map pixel becomes a `scale × scale` block.
pub fn render_error_map(map: &[f32], scale: u32) -> image::RgbImage {
    let peak = map.iter().copied().fold(0.0f32, f32::max);
    let side = FRAME_SIZE as u32;
    image::RgbImage::from_fn(side * scale, side * scale, |x, y| {
        let v = map[((y / scale) * side + x / scale) as usize];
        image::Rgb(hot_color(if peak > 0.0 { v / peak } else { 0.0 }))
    })
}

/// Frame score curve; abnormal frames get a shaded background.
pub fn render_score_curve(series: &FrameScoreSeries) -> image::RgbImage {
    const STEP: u32 = 12;
    const HEIGHT: u32 = 160;
    const PAD: u32 = 8;
    let n = series.points.len().max(1) as u32;
    let width = n * STEP + 2 * PAD;
    let mut img = image::RgbImage::from_pixel(width, HEIGHT, image::Rgb([255, 255, 255]));
    let hi = series.points.iter().map(|p| p.score).fold(0.0f64, f64::max);
    let y_of = |s: f64| {
        let t = if hi > 0.0 { s / hi } else { 0.0 };
        PAD + ((1.0 - t) * (HEIGHT - 2 * PAD) as f64).round() as u32
    };
    for (i, p) in series.points.iter().enumerate() {
        if p.label != 0 {
            for x in PAD + i as u32 * STEP..PAD + (i as u32 + 1) * STEP {
                for y in 0..HEIGHT {
                    img.put_pixel(x, y, image::Rgb([255, 210, 210]));
                }
            }
        }
    }
    let pts: Vec<(u32, u32)> =
        series.points.iter().enumerate().map(|(i, p)| (PAD + i as u32 * STEP + STEP / 2, y_of(p.score))).collect();
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        for x in x0..=x1 {
            let t = (x - x0) as f64 / (x1 - x0).max(1) as f64;
            let y = (y0 as f64 + t * (y1 as f64 - y0 as f64)).round() as u32;
            let (a, b) = if y0 < y1 { (y0, y1) } else { (y1, y0) };
            let span = if x == x0 { a..=b } else { y..=y };
            for yy in span {
                img.put_pixel(x, yy.min(HEIGHT - 1), image::Rgb([20, 40, 160]));
            }
        }
    }
    for &(x, y) in &pts {
        for dx in 0..3 {
            for dy in 0..3 {
                img.put_pixel((x + dx).saturating_sub(1).min(width - 1), (y + dy).saturating_sub(1).min(HEIGHT - 1), image::Rgb([0, 0, 0]));
            }
        }
    }
    img
}

pub fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| VadError::Image(format!("{}: {e}", path.display())))
}

/// The prediction/target pair an error map is drawn from: the whole-future
/// frame when present, then the partial one, then the first masked frame.
pub fn map_source<'a>(bundle: &'a PredictionBundle, cube: &'a ObjectCube) -> Option<(&'a [f32], &'a [f32])> {
    if let Some(p) = bundle.whole_future.as_deref().or(bundle.partial_future.as_deref()) {
        return Some((p, cube.target()));
    }
    bundle.masked_recons.iter().next().map(|(&m, r)| (r.as_slice(), cube.frame(m)))
}

/// JSON summary written next to the scores CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auroc: f64,
    pub weights: ScoreWeights,
    pub frames: FrameOptions,
    pub mask_draws: usize,
    pub n_objects: usize,
    pub n_frames: usize,
    pub n_abnormal_frames: usize,
    pub series: Vec<FrameScoreSeries>,
}

pub fn summarize(
    records: &[ScoreRecord],
    videos: &[VideoInfo],
    weights: ScoreWeights,
    opts: FrameOptions,
    policy: MaskPolicy,
) -> Result<EvalSummary> {
    let series = frame_series(records, videos, opts)?;
    let points = series.iter().flat_map(|s| &s.points);
    Ok(EvalSummary {
        auroc: pooled_auroc(&series)?,
        weights,
        frames: opts,
        mask_draws: policy.draws,
        n_objects: records.len(),
        n_frames: points.clone().count(),
        n_abnormal_frames: points.filter(|p| p.label != 0).count(),
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FRAME_PIXELS;

    #[test]
    fn aggregation_rules() {
        assert_eq!(aggregate_frame_scores(&[0.2, 0.9], Aggregation::Max), 0.9);
        assert_eq!(aggregate_frame_scores(&[], Aggregation::Max), 0.0);
        assert_eq!(aggregate_frame_scores(&[0.4], Aggregation::Max), 0.4);
        assert!((aggregate_frame_scores(&[0.2, 0.9], Aggregation::Mean) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_per_video(&[1.0, 3.0]), vec![0.0, 1.0]);
        assert_eq!(normalize_per_video(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[1, 1, 0, 0]).unwrap(), 0.25);
        assert_eq!(auroc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(VadError::InvalidArgument(_))));
    }

    #[test]
    fn error_map_locality() {
        let gt = vec![0.5f32; FRAME_PIXELS];
        assert!(error_map(&gt, &gt).unwrap().iter().all(|&v| v == 0.0));
        let mut p = gt.clone();
        p[FRAME_SIZE * FRAME_SIZE + 37] += 1.0;
        let m = error_map(&p, &gt).unwrap();
        for (i, &v) in m.iter().enumerate() {
            assert_eq!(v, if i == 37 { 1.0 } else { 0.0 });
        }
        assert!(matches!(error_map(&p[..100], &gt[..100]), Err(VadError::Shape(_))));
    }

    #[test]
    fn colormap_is_monotone_in_lightness() {
        let lum = |c: [u8; 3]| c.iter().map(|&v| v as u32).sum::<u32>();
        let mut prev = 0;
        for i in 0..=100 {
            let l = lum(hot_color(i as f32 / 100.0));
            assert!(l >= prev);
            prev = l;
        }
        assert_eq!(hot_color(0.0), [0, 0, 0]);
        assert_eq!(hot_color(1.0), [255, 255, 255]);
    }

    #[test]
    fn csv_round_trip() {
        let r = ScoreRecord {
            video_id: "test000".into(),
            frame_index: 7,
            track_id: "t1".into(),
            l_masked: 0.1,
            l_whole: 0.2,
            l_partial: 1.0 / 3.0,
            l_pred: 0.6333333333333333,
            l_recon: 0.0,
            score: 1.2666666666666666,
            label: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_scores_csv(&path, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_scores_csv(&path).unwrap(), vec![r]);
        assert!(fs::read_to_string(&path).unwrap().starts_with(CSV_HEADER));
    }

    #[test]
    fn frame_series_fills_empty_frames() {
        let v = VideoInfo { video_id: "a".into(), n_frames: 7, frame_labels: vec![0, 0, 0, 0, 0, 1, 1], anomaly: None };
        let rec = |f: usize, s: f64| ScoreRecord {
            video_id: "a".into(),
            frame_index: f,
            track_id: "t0".into(),
            l_masked: 0.0,
            l_whole: 0.0,
            l_partial: 0.0,
            l_pred: s,
            l_recon: 0.0,
            score: s,
            label: 0,
        };
        let opts = FrameOptions { normalize: false, ..FrameOptions::default() };
        let s = frame_series(&[rec(5, 0.3), rec(5, 0.7), rec(6, 0.1)], std::slice::from_ref(&v), opts).unwrap();
        let got: Vec<(usize, f64, u8)> = s[0].points.iter().map(|p| (p.frame_index, p.score, p.label)).collect();
        assert_eq!(got, vec![(4, 0.0, 0), (5, 0.7, 1), (6, 0.1, 1)]);
    }
}
