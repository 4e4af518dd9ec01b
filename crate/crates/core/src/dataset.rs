//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/cubes/<video>_<frame>_<track>.bin
//! <root>/flows/<video>_<frame>_<track>.bin
//! ```
//!
//! Each `.bin` holds a little-endian `f32` tensor behind a small header:
//! 4-byte magic `VADT`, one rank byte, three zero bytes, then four `u32`
//! dimensions (unused trailing dimensions are 0).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{
    compute_flow, extract_cubes, generate_scene, AnomalyTag, FlowMap, FlowMode, ObjectCube, SceneConfig, Split,
    CHANNELS, CUBE_LEN, FLOW_CHANNELS, FRAME_SIZE,
};
use crate::error::{Result, VadError};

pub const TENSOR_MAGIC: &[u8; 4] = b"VADT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 16;

pub const CUBE_DIMS: [u32; 4] = [CUBE_LEN as u32, CHANNELS as u32, FRAME_SIZE as u32, FRAME_SIZE as u32];
pub const FLOW_DIMS: [u32; 3] = [FLOW_CHANNELS as u32, FRAME_SIZE as u32, FRAME_SIZE as u32];

pub fn encode_tensor(dims: &[u32], data: &[f32]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(VadError::Shape(format!("rank {} unsupported (1..=4)", dims.len())));
    }
    let n: usize = dims.iter().map(|&d| d as usize).product();
    if n != data.len() {
        return Err(VadError::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(dims.len() as u8);
    out.extend_from_slice(&[0, 0, 0]);
    for i in 0..4 {
        out.extend_from_slice(&dims.get(i).copied().unwrap_or(0).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Vec<u32>, Vec<f32>)> {
    let corrupt = |reason: String| VadError::Corrupt { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let rank = bytes[4] as usize;
    if !(1..=4).contains(&rank) {
        return Err(corrupt(format!("rank {rank}")));
    }
    let dims: Vec<u32> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")))
        .collect();
    let n: usize = dims.iter().map(|&d| d as usize).product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(corrupt(format!("dims {dims:?} need {} payload bytes, found {}", 4 * n, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((dims, data))
}

pub fn write_tensor(path: &Path, dims: &[u32], data: &[f32]) -> Result<()> {
    let bytes = encode_tensor(dims, data)?;
    fs::write(path, bytes).map_err(|e| VadError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u32>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| VadError::io(path, e))?;
    decode_tensor(&bytes, path)
}

fn read_expect(path: &Path, want: &[u32]) -> Result<Vec<f32>> {
    let (dims, data) = read_tensor(path)?;
    if dims != want {
        return Err(VadError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("shape {dims:?}, expected {want:?}"),
        });
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cube: String,
    pub flow: String,
    pub video_id: String,
    pub frame_index: usize,
    pub track_id: String,
    pub label: u8,
}

/// Frame-level ground truth for one source video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub video_id: String,
    pub n_frames: usize,
    pub frame_labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<AnomalyTag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub flow_mode: FlowMode,
    pub pixel_stats: PixelStats,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub videos: Vec<VideoInfo>,
}

impl DatasetManifest {
    /// Checks split/label consistency and per-video frame labels.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(VadError::Dataset(format!(
                "format_version {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.split == Split::Train {
            if let Some(e) = self.entries.iter().find(|e| e.label != 0) {
                return Err(VadError::Dataset(format!(
                    "train split contains abnormal entry {} (label {})",
                    e.cube, e.label
                )));
            }
        }
        for e in &self.entries {
            if e.label > 1 {
                return Err(VadError::Dataset(format!("entry {} has non-binary label {}", e.cube, e.label)));
            }
        }
        for v in &self.videos {
            if v.frame_labels.len() != v.n_frames {
                return Err(VadError::Dataset(format!(
                    "video {} lists {} frame labels for {} frames",
                    v.video_id,
                    v.frame_labels.len(),
                    v.n_frames
                )));
            }
        }
        Ok(())
    }
}

pub fn compute_pixel_stats<'a>(cubes: impl IntoIterator<Item = &'a ObjectCube>) -> PixelStats {
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0.0f64;
    for cube in cubes {
        for f in 0..CUBE_LEN {
            let frame = cube.frame(f);
            for c in 0..CHANNELS {
                for &v in &frame[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane as f64;
        }
    }
    if count == 0.0 {
        return PixelStats { mean: [0.0; 3], std: [0.0; 3] };
    }
    let mean = sum.map(|s| s / count);
    let std = [0, 1, 2].map(|c| (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt());
    PixelStats { mean, std }
}

/// Writes cubes and flows (paired by index) and the manifest.
pub fn write_dataset(
    root: &Path,
    cubes: &[ObjectCube],
    flows: &[FlowMap],
    manifest: &DatasetManifest,
    force: bool,
) -> Result<()> {
    if cubes.len() != flows.len() || cubes.len() != manifest.entries.len() {
        return Err(VadError::Shape(format!(
            "{} cubes, {} flows, {} manifest entries",
            cubes.len(),
            flows.len(),
            manifest.entries.len()
        )));
    }
    manifest.validate()?;
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(VadError::AlreadyExists(manifest_path));
    }
    for dir in [root.join("cubes"), root.join("flows")] {
        fs::create_dir_all(&dir).map_err(|e| VadError::io(&dir, e))?;
    }
    for ((cube, flow), entry) in cubes.iter().zip(flows).zip(&manifest.entries) {
        write_tensor(&root.join(&entry.cube), &CUBE_DIMS, &cube.frames)?;
        write_tensor(&root.join(&entry.flow), &FLOW_DIMS, &flow.values)?;
    }
    let text = serde_json::to_string_pretty(manifest)?;
    let mut f = fs::File::create(&manifest_path).map_err(|e| VadError::io(&manifest_path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| VadError::io(&manifest_path, e))?;
    Ok(())
}

/// A dataset directory whose tensors are loaded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| VadError::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    for e in &manifest.entries {
        for rel in [&e.cube, &e.flow] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(VadError::MissingFile(p));
            }
        }
    }
    Ok(Dataset { root: root.to_path_buf(), manifest })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn load_cube(&self, i: usize) -> Result<ObjectCube> {
        let e = &self.manifest.entries[i];
        let data = read_expect(&self.root.join(&e.cube), &CUBE_DIMS)?;
        ObjectCube::new(data, e.video_id.clone(), e.frame_index, e.track_id.clone(), e.label).map_err(|err| {
            VadError::Corrupt { path: self.root.join(&e.cube), reason: err.to_string() }
        })
    }

    pub fn load_flow(&self, i: usize) -> Result<FlowMap> {
        let e = &self.manifest.entries[i];
        let data = read_expect(&self.root.join(&e.flow), &FLOW_DIMS)?;
        FlowMap::new(data, e.video_id.clone(), e.frame_index, e.track_id.clone())
            .map_err(|err| VadError::Corrupt { path: self.root.join(&e.flow), reason: err.to_string() })
    }

    pub fn load_all(&self) -> Result<(Vec<ObjectCube>, Vec<FlowMap>)> {
        let cubes = (0..self.len()).map(|i| self.load_cube(i)).collect::<Result<Vec<_>>>()?;
        let flows = (0..self.len()).map(|i| self.load_flow(i)).collect::<Result<Vec<_>>>()?;
        Ok((cubes, flows))
    }
}

/// Sizes and scene settings for a generated train/test pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub flow_mode: FlowMode,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_videos: 48,
            test_videos: 24,
            train_frames: 16,
            test_frames: 24,
            flow_mode: FlowMode::GroundTruth,
            scene: SceneConfig { anomaly_rate: 0.25, ..SceneConfig::default() },
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_videos == 0 || self.test_videos == 0 {
            return Err(VadError::Config("train_videos and test_videos must be positive".into()));
        }
        for split in [Split::Train, Split::Test] {
            self.scene_for(split).validate()?;
        }
        Ok(())
    }

    fn scene_for(&self, split: Split) -> SceneConfig {
        let mut scene = self.scene.clone();
        scene.split = split;
        match split {
            Split::Train => {
                scene.n_frames = self.train_frames;
                scene.anomaly_rate = 0.0;
            }
            Split::Test => scene.n_frames = self.test_frames,
        }
        scene
    }
}

/// In-memory split ready to be written or trained on.
#[derive(Clone, Debug)]
pub struct GeneratedSplit {
    pub cubes: Vec<ObjectCube>,
    pub flows: Vec<FlowMap>,
    pub manifest: DatasetManifest,
    pub skipped: usize,
}

fn mix_seed(seed: u64, split: Split, index: usize) -> u64 {
    // splitmix64 over (seed, split, index)
    let mut z = seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(match split {
            Split::Train => 0x1234_5678,
            Split::Test => 0x8765_4321_0000,
        });
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_split(config: &DataConfig, split: Split, seed: u64) -> Result<GeneratedSplit> {
    let n_videos = match split {
        Split::Train => config.train_videos,
        Split::Test => config.test_videos,
    };
    let mut cubes = Vec::new();
    let mut flows = Vec::new();
    let mut entries = Vec::new();
    let mut videos = Vec::new();
    let mut skipped = 0;
    for v in 0..n_videos {
        let mut scene_cfg = config.scene_for(split);
        if split == Split::Test && !scene_cfg.anomaly_kinds.is_empty() {
            // Round-robin keeps the anomaly mix balanced across videos.
            scene_cfg.anomaly_kinds = vec![config.scene.anomaly_kinds[v % config.scene.anomaly_kinds.len()]];
        }
        let mut scene = generate_scene(&scene_cfg, mix_seed(seed, split, v))?;
        scene.video_id = format!("{}{:03}", split.as_str(), v);
        let (scene_cubes, report) = extract_cubes(&scene);
        skipped += report.skipped_out_of_bounds + report.skipped_short_tracks;
        for cube in scene_cubes {
            let track = scene.track(&cube.track_id).expect("cube track exists");
            let flow = compute_flow(&scene, track, cube.frame_index, config.flow_mode)?;
            let key = cube.key();
            entries.push(ManifestEntry {
                cube: format!("cubes/{key}.bin"),
                flow: format!("flows/{key}.bin"),
                video_id: cube.video_id.clone(),
                frame_index: cube.frame_index,
                track_id: cube.track_id.clone(),
                label: cube.label,
            });
            cubes.push(cube);
            flows.push(flow);
        }
        let anomaly = scene.tracks.iter().map(|t| t.sprite.anomaly_tag).find(|&t| t != AnomalyTag::None);
        videos.push(VideoInfo {
            video_id: scene.video_id.clone(),
            n_frames: scene.n_frames(),
            frame_labels: scene.frame_labels.clone(),
            anomaly,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        split,
        flow_mode: config.flow_mode,
        pixel_stats: compute_pixel_stats(&cubes),
        entries,
        videos,
    };
    Ok(GeneratedSplit { cubes, flows, manifest, skipped })
}

impl GeneratedSplit {
    pub fn write(&self, root: &Path, force: bool) -> Result<()> {
        write_dataset(root, &self.cubes, &self.flows, &self.manifest, force)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FLOW_PIXELS;

    fn small_config() -> DataConfig {
        DataConfig { train_videos: 2, test_videos: 3, ..DataConfig::default() }
    }

    #[test]
    fn tensor_header_layout() {
        let bytes = encode_tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(&bytes[..4], b"VADT");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..8], &[0, 0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 24 + 24);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.0);
    }

    #[test]
    fn truncated_tensor_is_reported_as_corrupt() {
        let mut bytes = encode_tensor(&FLOW_DIMS, &vec![0.5; FLOW_PIXELS]).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = decode_tensor(&bytes, Path::new("x.bin")).unwrap_err();
        assert!(matches!(err, VadError::Corrupt { .. }));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_split(&small_config(), Split::Test, 3).unwrap();
        let cubes: Vec<_> = split.cubes[..10].to_vec();
        let flows: Vec<_> = split.flows[..10].to_vec();
        let mut manifest = split.manifest.clone();
        manifest.entries.truncate(10);
        write_dataset(dir.path(), &cubes, &flows, &manifest, false).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        let (c2, f2) = ds.load_all().unwrap();
        for (a, b) in cubes.iter().zip(&c2) {
            assert_eq!(a.frames.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.frames.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!((a.frame_index, &a.track_id, a.label), (b.frame_index, &b.track_id, b.label));
        }
        assert_eq!(flows, f2);
    }

    #[test]
    fn overwrite_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_split(&small_config(), Split::Train, 1).unwrap();
        split.write(dir.path(), false).unwrap();
        assert!(matches!(split.write(dir.path(), false), Err(VadError::AlreadyExists(_))));
        split.write(dir.path(), true).unwrap();
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_split(&small_config(), Split::Train, 1).unwrap();
        split.write(dir.path(), false).unwrap();
        let victim = dir.path().join(&split.manifest.entries[3].flow);
        fs::remove_file(&victim).unwrap();
        match read_dataset(dir.path()) {
            Err(VadError::MissingFile(p)) => assert_eq!(p, victim),
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn wrong_shape_file_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_split(&small_config(), Split::Train, 1).unwrap();
        split.write(dir.path(), false).unwrap();
        let victim = dir.path().join(&split.manifest.entries[0].cube);
        write_tensor(&victim, &FLOW_DIMS, &vec![0.0; FLOW_PIXELS]).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        let err = ds.load_cube(0).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn abnormal_train_manifest_is_rejected() {
        let split = generate_split(&small_config(), Split::Train, 1).unwrap();
        let mut manifest = split.manifest.clone();
        manifest.entries[0].label = 1;
        assert!(matches!(manifest.validate(), Err(VadError::Dataset(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(write_dataset(dir.path(), &split.cubes, &split.flows, &manifest, false).is_err());
    }

    #[test]
    fn generated_invariants_hold() {
        let cfg = small_config();
        let train = generate_split(&cfg, Split::Train, 5).unwrap();
        assert!(train.manifest.entries.iter().all(|e| e.label == 0));
        let test = generate_split(&cfg, Split::Test, 5).unwrap();
        for cube in train.cubes.iter().chain(&test.cubes) {
            assert!(cube.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(test.manifest.entries.iter().any(|e| e.label == 1));
        let kinds: Vec<_> = test.manifest.videos.iter().map(|v| v.anomaly).collect();
        assert_eq!(kinds, vec![Some(AnomalyTag::Fast), Some(AnomalyTag::Reverse), Some(AnomalyTag::NovelShape)]);
    }
}
