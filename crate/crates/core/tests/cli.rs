use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctxvad::config::SNAPSHOT_NAME;
use ctxvad::dataset::DatasetManifest;
use ctxvad::evaluation::read_scores_csv;
use serde_json::Value;

const TINY: &str = r#"
seed = 5
[data]
train_videos = 2
test_videos = 3
[data.scene]
anomaly_rate = 0.25
[appearance]
dim = 16
enc_depth = 2
dec_depth = 1
heads = 2
[motion_model]
channels = [4, 8, 8]
latent = 16
[train]
epochs = 1
batch_size = 16
[motion_train]
epochs = 1
batch_size = 16
[ablation]
seeds = [0]
"#;

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn setup() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");
    Run { _dir: dir, config, out }
}

fn ctxvad(run: &Run, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxvad"))
        .args(args)
        .arg("--config")
        .arg(&run.config)
        .arg("--out")
        .arg(&run.out)
        .output()
        .unwrap()
}

fn ok(run: &Run, args: &[&str]) -> Value {
    let out = ctxvad(run, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn manifest(root: &Path) -> DatasetManifest {
    serde_json::from_str(&fs::read_to_string(root.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn generate_is_seeded_and_labels_only_the_test_split() {
    let a = setup();
    let report = ok(&a, &["generate"]);
    let train = manifest(&a.out.join("data/train"));
    assert!(train.entries.iter().all(|e| e.label == 0));
    assert!(train.videos.iter().all(|v| v.frame_labels.iter().all(|&l| l == 0)));
    let frac = report["abnormal_frame_fraction"].as_f64().unwrap();
    assert!((frac - 0.25).abs() <= 0.025, "{frac}");
    assert!(a.out.join("data").join(SNAPSHOT_NAME).exists());

    let b = setup();
    ok(&b, &["generate"]);
    for split in ["train", "test"] {
        let read = |r: &Run| fs::read(r.out.join("data").join(split).join("manifest.json")).unwrap();
        assert_eq!(read(&a), read(&b));
    }

    let again = ctxvad(&a, &["generate"]);
    assert!(!again.status.success());
    ok(&a, &["generate", "--force"]);
}

#[test]
fn train_eval_plot_round() {
    let run = setup();
    ok(&run, &["generate"]);
    ok(&run, &["train"]);
    assert!(run.out.join("checkpoints/appearance.ckpt").exists());
    assert!(run.out.join("checkpoints/motion.ckpt").exists());
    assert!(run.out.join("logs/appearance.jsonl").exists());
    assert!(run.out.join("checkpoints").join(SNAPSHOT_NAME).exists());

    let summary = ok(&run, &["eval"]);
    let auc = summary["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let csv = run.out.join("eval/scores.csv");
    let first = fs::read(&csv).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with("video_id,frame_index,track_id,l_masked,l_whole,l_partial,l_pred,l_recon,score,label\n"));
    ok(&run, &["eval"]);
    assert_eq!(fs::read(&csv).unwrap(), first);
    assert!(run.out.join("eval").join(SNAPSHOT_NAME).exists());

    ok(&run, &["eval", "--lambda-a", "0", "--lambda-o", "1"]);
    for r in read_scores_csv(&csv).unwrap() {
        assert_eq!(r.score, r.l_recon);
    }

    let plots = ok(&run, &["plot", "--max-maps", "3"]);
    assert_eq!(plots["curves"].as_u64(), Some(3));
    assert_eq!(plots["maps"].as_u64(), Some(3));
    let pngs: Vec<_> = fs::read_dir(run.out.join("plots/maps")).unwrap().collect();
    assert_eq!(pngs.len(), 3);
    assert!(run.out.join("plots").join(SNAPSHOT_NAME).exists());
}

#[test]
fn motion_off_trains_one_model() {
    let run = setup();
    ok(&run, &["generate"]);
    let s = ok(&run, &["train", "--motion", "off", "--streams", "none"]);
    assert!(s.is_object());
    assert!(run.out.join("checkpoints/appearance.ckpt").exists());
    assert!(!run.out.join("checkpoints/motion.ckpt").exists());
    let summary = ok(&run, &["eval", "--motion", "off"]);
    assert!(summary["auroc"].as_f64().is_some());
}

#[test]
fn failures_exit_nonzero_with_a_json_error() {
    let run = setup();
    let out = ctxvad(&run, &["eval"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(out.stderr.split(|&b| b == b'\n').find(|l| l.starts_with(b"{")).unwrap()).unwrap();
    assert!(err["error"].is_string());
    assert!(err["message"].as_str().unwrap().len() > 0);

    let bad = ctxvad(&run, &["generate", "--streams", "sideways"]);
    assert!(!bad.status.success());
    let err: Value = serde_json::from_slice(bad.stderr.split(|&b| b == b'\n').find(|l| l.starts_with(b"{")).unwrap()).unwrap();
    assert_eq!(err["error"], "invalid_argument");
}
