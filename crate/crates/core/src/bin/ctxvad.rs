use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxvad::config::RunConfig;
use ctxvad::objectives::ScoreWeights;
use ctxvad::pipeline::{cmd_ablate, cmd_eval, cmd_generate, cmd_plot, cmd_train, RunLayout};
use ctxvad::vit::Streams;
use ctxvad::VadError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "ctxvad", version, about = "Multi-contextual video anomaly detection on synthetic sprite video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train the appearance and (unless disabled) motion branches.
    Train(Common),
    /// Score the test split and write the scores CSV and AUROC summary.
    Eval(Common),
    /// Train and score the four stream settings over every ablation seed.
    Ablate(Common),
    /// Render score curves and error maps from an evaluated run.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Maximum number of error maps.
        #[arg(long, default_value_t = 24)]
        max_maps: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated subset of masked,whole,partial, or `none`.
    #[arg(long)]
    streams: Option<String>,
    #[arg(long, value_enum)]
    motion: Option<Switch>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, requires = "lambda_o")]
    lambda_a: Option<f64>,
    #[arg(long, requires = "lambda_a")]
    lambda_o: Option<f64>,
    #[arg(long)]
    mask_draws: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, RunLayout)> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let seed = self.seed.unwrap_or(cfg.seed);
        cfg = cfg.with_seed(seed);
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(s) = &self.streams {
            cfg.appearance.streams = Streams::parse(s)?;
        }
        if let Some(m) = self.motion {
            cfg.motion = matches!(m, Switch::On);
        }
        if let Some(r) = self.mask_ratio {
            cfg.appearance.mask_ratio = r;
        }
        if let (Some(a), Some(o)) = (self.lambda_a, self.lambda_o) {
            cfg.weights = ScoreWeights::new(a, o)?;
        }
        if let Some(k) = self.mask_draws {
            cfg.eval.mask_draws = k;
        }
        cfg.validate()?;
        let layout = RunLayout::new(&cfg.out, self.data.as_deref());
        Ok((cfg, layout))
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    let mut progress = log;
    match cli.command {
        Command::Generate { common, force } => {
            let (cfg, layout) = common.resolve()?;
            let r = cmd_generate(&cfg, &layout, force).context("generate")?;
            print_json(&json!({
                "data": layout.data,
                "train_cubes": r.train_cubes,
                "test_cubes": r.test_cubes,
                "skipped_windows": r.skipped,
                "abnormal_frame_fraction": r.abnormal_fraction(),
            }));
        }
        Command::Train(common) => {
            let (cfg, layout) = common.resolve()?;
            let s = cmd_train(&cfg, &layout, &mut progress).context("train")?;
            print_json(&serde_json::to_value(&s)?);
        }
        Command::Eval(common) => {
            let (cfg, layout) = common.resolve()?;
            let s = cmd_eval(&cfg, &layout).context("eval")?;
            print_json(&json!({
                "auroc": s.auroc,
                "objects": s.n_objects,
                "frames": s.n_frames,
                "abnormal_frames": s.n_abnormal_frames,
                "scores": layout.eval().join("scores.csv"),
            }));
        }
        Command::Ablate(common) => {
            let (cfg, layout) = common.resolve()?;
            let r = cmd_ablate(&cfg, &layout, &mut progress).context("ablate")?;
            print_json(&json!({ "means": r.means, "fusion": r.fusion }));
        }
        Command::Plot { common, max_maps } => {
            let (cfg, layout) = common.resolve()?;
            let r = cmd_plot(&cfg, &layout, max_maps).context("plot")?;
            print_json(&json!({ "curves": r.curves, "maps": r.maps, "dir": layout.plots() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err.chain().find_map(|e| e.downcast_ref::<VadError>()).map_or("error", VadError::kind);
            let record = json!({
                "error": kind,
                "message": format!("{err:#}"),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
