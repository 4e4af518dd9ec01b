//! Synthetic object-level video: moving sprites on a flat background with
//! exact tracks, ground-truth flow and frame-level anomaly labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VadError};

pub const CHANNELS: usize = 3;
pub const FRAME_SIZE: usize = 32;
pub const FRAME_PIXELS: usize = CHANNELS * FRAME_SIZE * FRAME_SIZE;
pub const CUBE_LEN: usize = 5;
pub const INPUT_FRAMES: usize = 4;
pub const FLOW_CHANNELS: usize = 2;
pub const FLOW_PIXELS: usize = FLOW_CHANNELS * FRAME_SIZE * FRAME_SIZE;

const HALF_CROP: i64 = (FRAME_SIZE / 2) as i64;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyTag {
    None,
    Fast,
    Reverse,
    NovelShape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape_kind: ShapeKind,
    pub size_px: u32,
    pub color: [f32; 3],
    /// Displacement in px/frame.
    pub velocity: [f32; 2],
    pub anomaly_tag: AnomalyTag,
}

impl SpriteSpec {
    pub fn validate(&self) -> Result<()> {
        if !(6..=20).contains(&self.size_px) {
            return Err(VadError::InvalidArgument(format!("sprite size {} outside 6..=20", self.size_px)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(VadError::InvalidArgument(format!("sprite color {:?} outside [0,1]", self.color)));
        }
        if self.velocity.iter().any(|v| !v.is_finite()) {
            return Err(VadError::InvalidArgument("non-finite sprite velocity".into()));
        }
        Ok(())
    }

    /// Anti-aliased coverage of the pixel whose top-left corner is `(px, py)`
    /// for a sprite centred at `center`.
    fn coverage(&self, center: [f32; 2], px: usize, py: usize) -> f32 {
        let half = self.size_px as f32 / 2.0;
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32 - center[0];
                let y = py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32 - center[1];
                let inside = match self.shape_kind {
                    ShapeKind::Square => x.abs() <= half && y.abs() <= half,
                    ShapeKind::Circle => x * x + y * y <= half * half,
                    // Apex up, base at the bottom edge of the bounding box.
                    ShapeKind::Triangle => y <= half && y >= -half && x.abs() <= (y + half) / 2.0,
                };
                hits += inside as usize;
            }
        }
        hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_frames: usize,
    pub n_sprites: usize,
    /// Fraction of frames covered by the anomalous event (test split only).
    pub anomaly_rate: f64,
    pub canvas: usize,
    pub split: Split,
    /// Normal speed range in px/frame.
    pub speed_min: f32,
    pub speed_max: f32,
    /// Normal headings lie within this many degrees of the +x axis.
    pub max_heading_deg: f32,
    pub fast_multiplier: f32,
    pub size_min: u32,
    pub size_max: u32,
    pub background: f32,
    pub normal_shapes: Vec<ShapeKind>,
    pub anomaly_kinds: Vec<AnomalyTag>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 16,
            n_sprites: 3,
            anomaly_rate: 0.0,
            canvas: 64,
            split: Split::Train,
            speed_min: 0.5,
            speed_max: 1.0,
            max_heading_deg: 30.0,
            fast_multiplier: 3.0,
            size_min: 8,
            size_max: 14,
            background: 0.25,
            normal_shapes: vec![ShapeKind::Square, ShapeKind::Circle],
            anomaly_kinds: vec![AnomalyTag::Fast, AnomalyTag::Reverse, AnomalyTag::NovelShape],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VadError::Config(m));
        if self.n_frames < 6 {
            return bad(format!("n_frames must be >= 6, got {}", self.n_frames));
        }
        if self.canvas < FRAME_SIZE {
            return bad(format!("canvas {} smaller than the {FRAME_SIZE}px crop", self.canvas));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad(format!("anomaly_rate {} outside [0,1]", self.anomaly_rate));
        }
        if self.split == Split::Train && self.anomaly_rate > 0.0 {
            return bad("anomaly_rate must be 0 for the train split".into());
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return bad(format!("speed range [{}, {}] must be positive and ordered", self.speed_min, self.speed_max));
        }
        if self.size_min < 6 || self.size_max > 20 || self.size_min > self.size_max {
            return bad(format!("size range [{}, {}] must lie in 6..=20", self.size_min, self.size_max));
        }
        if self.normal_shapes.is_empty() {
            return bad("normal_shapes is empty".into());
        }
        if self.anomaly_rate > 0.0 && self.anomaly_kinds.is_empty() {
            return bad("anomaly_rate > 0 but no anomaly kinds configured".into());
        }
        if self.fast_multiplier < 3.0 {
            return bad(format!("fast_multiplier {} must be >= 3", self.fast_multiplier));
        }
        Ok(())
    }
}

/// Where and when a sprite appears.
#[derive(Clone, Debug, PartialEq)]
pub struct SpritePlan {
    pub spec: SpriteSpec,
    pub first_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub start: [f32; 2],
    /// Velocity is negated from this frame on.
    pub reverse_at: Option<usize>,
    /// Observations at or after this frame are labelled abnormal.
    pub abnormal_from: Option<usize>,
}

impl SpritePlan {
    fn position(&self, frame: usize) -> [f32; 2] {
        let v = self.spec.velocity;
        match self.reverse_at {
            Some(r) if frame >= r => {
                let turn = self.position(r - 1);
                let back = (frame - r + 1) as f32;
                [turn[0] - v[0] * back, turn[1] - v[1] * back]
            }
            _ => {
                let k = (frame - self.first_frame) as f32;
                [self.start[0] + v[0] * k, self.start[1] + v[1] * k]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub center: [f32; 2],
    /// `center(frame) - center(frame - 1)`.
    pub velocity: [f32; 2],
    pub abnormal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: String,
    pub sprite: SpriteSpec,
    pub observations: Vec<Observation>,
}

impl Track {
    pub fn at(&self, frame: usize) -> Option<&Observation> {
        let first = self.observations.first()?.frame;
        self.observations.get(frame.checked_sub(first)?).filter(|o| o.frame == frame)
    }
}

/// Rendered frames (`3×canvas×canvas`, channel-major) with their tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub video_id: String,
    pub canvas: usize,
    pub background: f32,
    pub frames: Vec<Vec<f32>>,
    pub tracks: Vec<Track>,
    pub frame_labels: Vec<u8>,
}

impl Scene {
    /// Renders sprites in plan order (later plans drawn on top).
    pub fn render(video_id: impl Into<String>, canvas: usize, background: f32, n_frames: usize, plans: &[SpritePlan]) -> Result<Self> {
        let px = canvas * canvas;
        let mut frames = vec![vec![background; CHANNELS * px]; n_frames];
        let mut tracks = Vec::with_capacity(plans.len());
        let mut frame_labels = vec![0u8; n_frames];
        for (i, plan) in plans.iter().enumerate() {
            plan.spec.validate()?;
            if plan.first_frame >= plan.end_frame || plan.end_frame > n_frames {
                return Err(VadError::InvalidArgument(format!(
                    "sprite {i} lifetime [{}, {}) outside 0..{n_frames}",
                    plan.first_frame, plan.end_frame
                )));
            }
            let mut observations = Vec::with_capacity(plan.end_frame - plan.first_frame);
            for f in plan.first_frame..plan.end_frame {
                let center = plan.position(f);
                let velocity = if f == plan.first_frame {
                    plan.spec.velocity
                } else {
                    let prev = plan.position(f - 1);
                    [center[0] - prev[0], center[1] - prev[1]]
                };
                let abnormal = plan.abnormal_from.is_some_and(|a| f >= a);
                if abnormal {
                    frame_labels[f] = 1;
                }
                observations.push(Observation { frame: f, center, velocity, abnormal });
                paint(&mut frames[f], canvas, &plan.spec, center);
            }
            tracks.push(Track { track_id: format!("t{i}"), sprite: plan.spec, observations });
        }
        Ok(Self { video_id: video_id.into(), canvas, background, frames, tracks, frame_labels })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn track(&self, track_id: &str) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }
}

fn sprite_bbox(spec: &SpriteSpec, center: [f32; 2], canvas: usize) -> Option<(usize, usize, usize, usize)> {
    let half = spec.size_px as f32 / 2.0 + 1.0;
    let x0 = (center[0] - half).floor().max(0.0) as usize;
    let y0 = (center[1] - half).floor().max(0.0) as usize;
    let x1 = ((center[0] + half).ceil().max(0.0) as usize).min(canvas);
    let y1 = ((center[1] + half).ceil().max(0.0) as usize).min(canvas);
    (x0 < x1 && y0 < y1).then_some((x0, y0, x1, y1))
}

fn paint(frame: &mut [f32], canvas: usize, spec: &SpriteSpec, center: [f32; 2]) {
    let Some((x0, y0, x1, y1)) = sprite_bbox(spec, center, canvas) else { return };
    let px = canvas * canvas;
    for y in y0..y1 {
        for x in x0..x1 {
            let a = spec.coverage(center, x, y);
            if a == 0.0 {
                continue;
            }
            for c in 0..CHANNELS {
                let p = &mut frame[c * px + y * canvas + x];
                *p = *p * (1.0 - a) + spec.color[c] * a;
            }
        }
    }
}

/// Coverage of one sprite over the canvas, ignoring occlusion.
pub fn sprite_alpha(spec: &SpriteSpec, center: [f32; 2], canvas: usize) -> Vec<f32> {
    let mut alpha = vec![0.0; canvas * canvas];
    if let Some((x0, y0, x1, y1)) = sprite_bbox(spec, center, canvas) {
        for y in y0..y1 {
            for x in x0..x1 {
                alpha[y * canvas + x] = spec.coverage(center, x, y);
            }
        }
    }
    alpha
}

fn sample_normal_spec(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> SpriteSpec {
    let shape_kind = cfg.normal_shapes[rng.random_range(0..cfg.normal_shapes.len())];
    let size_px = rng.random_range(cfg.size_min..=cfg.size_max);
    let color = [rng.random_range(0.45..1.0), rng.random_range(0.45..1.0), rng.random_range(0.45..1.0)];
    let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let heading = rng.random_range(-cfg.max_heading_deg..=cfg.max_heading_deg).to_radians();
    SpriteSpec {
        shape_kind,
        size_px,
        color,
        velocity: [speed * heading.cos(), speed * heading.sin()],
        anomaly_tag: AnomalyTag::None,
    }
}

/// Chooses a start point that keeps the whole trajectory inside the region
/// where a centred crop fits; centres the path when it cannot fit.
fn place(plan: &mut SpritePlan, canvas: usize, rng: &mut ChaCha8Rng) {
    plan.start = [0.0, 0.0];
    let (mut lo, mut hi) = ([f32::MAX; 2], [f32::MIN; 2]);
    for f in plan.first_frame..plan.end_frame {
        let p = plan.position(f);
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let min_c = HALF_CROP as f32;
    let max_c = (canvas as i64 - HALF_CROP) as f32 - 0.5;
    for d in 0..2 {
        let a = min_c - lo[d];
        let b = max_c - hi[d];
        plan.start[d] = if a <= b { rng.random_range(a..=b) } else { (a + b) / 2.0 };
    }
}

/// Samples and renders one scene; a pure function of `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_frames;
    let mut plans = Vec::with_capacity(config.n_sprites + 1);
    for _ in 0..config.n_sprites {
        let spec = sample_normal_spec(config, &mut rng);
        let speed = spec.velocity[0].hypot(spec.velocity[1]);
        let room = (config.canvas as f32 - 2.0 * HALF_CROP as f32 - 0.5).max(0.0);
        let max_len = ((room / speed).floor() as usize + 1).clamp(CUBE_LEN, n);
        let first_frame = rng.random_range(0..=n - max_len);
        let mut plan = SpritePlan {
            spec,
            first_frame,
            end_frame: first_frame + max_len,
            start: [0.0; 2],
            reverse_at: None,
            abnormal_from: None,
        };
        place(&mut plan, config.canvas, &mut rng);
        plans.push(plan);
    }

    if config.split == Split::Test && config.anomaly_rate > 0.0 {
        let kind = config.anomaly_kinds[rng.random_range(0..config.anomaly_kinds.len())];
        let len = ((config.anomaly_rate * n as f64).round() as usize).clamp(1, n - INPUT_FRAMES);
        let window_start = rng.random_range(INPUT_FRAMES..=n - len);
        let mut spec = sample_normal_spec(config, &mut rng);
        spec.anomaly_tag = kind;
        let mut reverse_at = None;
        match kind {
            AnomalyTag::Fast => {
                spec.velocity = spec.velocity.map(|v| v * config.fast_multiplier);
            }
            AnomalyTag::Reverse => reverse_at = Some(window_start),
            AnomalyTag::NovelShape => spec.shape_kind = novel_shape(&config.normal_shapes),
            AnomalyTag::None => {}
        }
        // The sprite enters four frames early so the first labelled frame
        // already closes a full cube.
        let mut plan = SpritePlan {
            spec,
            first_frame: window_start - INPUT_FRAMES,
            end_frame: window_start + len,
            start: [0.0; 2],
            reverse_at,
            abnormal_from: (kind != AnomalyTag::None).then_some(window_start),
        };
        place(&mut plan, config.canvas, &mut rng);
        plans.push(plan);
    }

    Scene::render(format!("scene_{seed}"), config.canvas, config.background, n, &plans)
}

fn novel_shape(normal: &[ShapeKind]) -> ShapeKind {
    [ShapeKind::Triangle, ShapeKind::Circle, ShapeKind::Square]
        .into_iter()
        .find(|s| !normal.contains(s))
        .unwrap_or(ShapeKind::Triangle)
}

/// Five object-level frames `t1..t5` cropped at one fixed window.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCube {
    /// `5 × 3 × 32 × 32`, frame-major.
    pub frames: Vec<f32>,
    pub video_id: String,
    /// Index of `t5` in the source video.
    pub frame_index: usize,
    pub track_id: String,
    pub label: u8,
}

impl ObjectCube {
    pub fn new(frames: Vec<f32>, video_id: impl Into<String>, frame_index: usize, track_id: impl Into<String>, label: u8) -> Result<Self> {
        if frames.len() != CUBE_LEN * FRAME_PIXELS {
            return Err(VadError::Shape(format!(
                "cube has {} values, expected {}",
                frames.len(),
                CUBE_LEN * FRAME_PIXELS
            )));
        }
        if frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VadError::InvalidArgument("cube pixels outside [0,1]".into()));
        }
        Ok(Self { frames, video_id: video_id.into(), frame_index, track_id: track_id.into(), label })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * FRAME_PIXELS..(i + 1) * FRAME_PIXELS]
    }

    pub fn inputs(&self) -> &[f32] {
        &self.frames[..INPUT_FRAMES * FRAME_PIXELS]
    }

    pub fn target(&self) -> &[f32] {
        self.frame(INPUT_FRAMES)
    }

    pub fn key(&self) -> String {
        format!("{}_{}_{}", self.video_id, self.frame_index, self.track_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    /// `2 × 32 × 32`: x-displacement plane then y-displacement plane.
    pub values: Vec<f32>,
    pub video_id: String,
    pub frame_index: usize,
    pub track_id: String,
}

impl FlowMap {
    pub fn new(values: Vec<f32>, video_id: impl Into<String>, frame_index: usize, track_id: impl Into<String>) -> Result<Self> {
        if values.len() != FLOW_PIXELS {
            return Err(VadError::Shape(format!("flow has {} values, expected {FLOW_PIXELS}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VadError::NonFinite("flow map".into()));
        }
        Ok(Self { values, video_id: video_id.into(), frame_index, track_id: track_id.into() })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub cubes: usize,
    pub skipped_short_tracks: usize,
    pub skipped_out_of_bounds: usize,
}

/// Top-left corner of the crop centred on `center`, if it fits the canvas.
pub fn crop_origin(center: [f32; 2], canvas: usize) -> Option<(usize, usize)> {
    let ox = center[0].round() as i64 - HALF_CROP;
    let oy = center[1].round() as i64 - HALF_CROP;
    let max = canvas as i64 - FRAME_SIZE as i64;
    (ox >= 0 && oy >= 0 && ox <= max && oy <= max).then_some((ox as usize, oy as usize))
}

fn crop_into(frame: &[f32], canvas: usize, origin: (usize, usize), out: &mut Vec<f32>) {
    let px = canvas * canvas;
    for c in 0..CHANNELS {
        for y in 0..FRAME_SIZE {
            let row = c * px + (origin.1 + y) * canvas + origin.0;
            out.extend_from_slice(&frame[row..row + FRAME_SIZE]);
        }
    }
}

/// Slides a 5-frame window (stride 1) along every track and crops all five
/// frames at the window centred on the sprite's `t5` position.
pub fn extract_cubes(scene: &Scene) -> (Vec<ObjectCube>, ExtractReport) {
    let mut report = ExtractReport::default();
    let mut cubes = Vec::new();
    for track in &scene.tracks {
        if track.observations.len() < CUBE_LEN {
            report.skipped_short_tracks += 1;
            continue;
        }
        for window in track.observations.windows(CUBE_LEN) {
            let last = &window[CUBE_LEN - 1];
            let Some(origin) = crop_origin(last.center, scene.canvas) else {
                report.skipped_out_of_bounds += 1;
                continue;
            };
            let mut frames = Vec::with_capacity(CUBE_LEN * FRAME_PIXELS);
            for obs in window {
                crop_into(&scene.frames[obs.frame], scene.canvas, origin, &mut frames);
            }
            cubes.push(ObjectCube {
                frames,
                video_id: scene.video_id.clone(),
                frame_index: last.frame,
                track_id: track.track_id.clone(),
                label: last.abnormal as u8,
            });
        }
    }
    report.cubes = cubes.len();
    (cubes, report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// Sprite support filled with its displacement, zero elsewhere.
    #[default]
    GroundTruth,
    /// Signed grayscale difference of consecutive frames, duplicated.
    FrameDiff,
}

fn gray(frame: &[f32], px: usize, idx: usize) -> f32 {
    0.299 * frame[idx] + 0.587 * frame[px + idx] + 0.114 * frame[2 * px + idx]
}

/// Object-level flow for `track` at `frame_index`, cropped at the same
/// window as the cube ending on that frame.
pub fn compute_flow(scene: &Scene, track: &Track, frame_index: usize, mode: FlowMode) -> Result<FlowMap> {
    if frame_index == 0 {
        return Err(VadError::InvalidArgument("flow needs a previous frame; frame_index is 0".into()));
    }
    let obs = track.at(frame_index).ok_or_else(|| {
        VadError::InvalidArgument(format!("track {} not present at frame {frame_index}", track.track_id))
    })?;
    if track.at(frame_index - 1).is_none() {
        return Err(VadError::InvalidArgument(format!(
            "track {} not present at frame {}",
            track.track_id,
            frame_index - 1
        )));
    }
    let origin = crop_origin(obs.center, scene.canvas).ok_or_else(|| {
        VadError::InvalidArgument(format!("crop for track {} at frame {frame_index} leaves the canvas", track.track_id))
    })?;
    let canvas = scene.canvas;
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut values = vec![0.0f32; FLOW_PIXELS];
    match mode {
        FlowMode::GroundTruth => {
            let alpha = sprite_alpha(&track.sprite, obs.center, canvas);
            for y in 0..FRAME_SIZE {
                for x in 0..FRAME_SIZE {
                    if alpha[(origin.1 + y) * canvas + origin.0 + x] >= 0.5 {
                        values[y * FRAME_SIZE + x] = obs.velocity[0];
                        values[plane + y * FRAME_SIZE + x] = obs.velocity[1];
                    }
                }
            }
        }
        FlowMode::FrameDiff => {
            let px = canvas * canvas;
            let cur = &scene.frames[frame_index];
            let prev = &scene.frames[frame_index - 1];
            for y in 0..FRAME_SIZE {
                for x in 0..FRAME_SIZE {
                    let idx = (origin.1 + y) * canvas + origin.0 + x;
                    let d = gray(cur, px, idx) - gray(prev, px, idx);
                    values[y * FRAME_SIZE + x] = d;
                    values[plane + y * FRAME_SIZE + x] = d;
                }
            }
        }
    }
    FlowMap::new(values, scene.video_id.clone(), frame_index, track.track_id.clone())
}
