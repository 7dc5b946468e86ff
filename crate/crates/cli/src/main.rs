//! Command-line entry point for the anchor-splatting pipeline: dataset
//! synthesis, training, rendering, evaluation, and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use splatmap_core::camera::CameraPose;
use splatmap_core::datakit::{
    self, generate_to_dir, make_ba_instance, read_tum, write_anchor_ply, Dataset, SyntheticScene,
};
use splatmap_core::geometry::{
    ate_rmse, global_ba, local_ba, motion_only_ba, AlignMode, RobustConfig, SolveOptions,
};
use splatmap_core::losses::psnr;
use splatmap_core::train::{
    evaluate_split, load_checkpoint, render_frame, run as train_run, split_train_test,
    KeyframeRule, RunOutputs, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "splatmap",
    about = "CPU anchor-based Gaussian-splatting mapper",
    version
)]
struct Cli {
    /// Global RNG seed override, forwarded to subcommands that accept one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render a checkpoint at a pose given as "tx ty tz qx qy qz qw".
    Render(RenderArgs),
    /// Evaluate a checkpoint over a dataset's test split.
    EvalRender(EvalRenderArgs),
    /// ATE RMSE between two TUM-format trajectories.
    EvalTraj(EvalTrajArgs),
    /// Run a synthetic bundle-adjustment demonstration.
    BaDemo(BaDemoArgs),
    /// Export a checkpoint's anchors as ASCII PLY.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Training config file (TOML); missing keys take the documented
    /// defaults, and command-line flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.bin, loss.csv, metrics.json.
    #[arg(long)]
    out: PathBuf,
    /// Disable the appearance encoder (sets the embedding dimension to 0).
    #[arg(long)]
    no_afme: bool,
    /// Disable the frequency-pyramid term (empties its active window).
    #[arg(long)]
    no_fpr: bool,
    /// Replace voxelized anchors with uniform-random anchors of equal count.
    #[arg(long)]
    random_init: bool,
    /// Merge keyframe clouds one per epoch instead of all up front.
    #[arg(long)]
    incremental: bool,
    /// Iteration count override.
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera-to-world pose: "tx ty tz qx qy qz qw".
    #[arg(long)]
    pose: String,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalRenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct EvalTrajArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    gt: PathBuf,
    /// Align with a similarity transform instead of a rigid one.
    #[arg(long)]
    sim3: bool,
}

#[derive(Args)]
struct BaDemoArgs {
    /// One of: motion, local, global, outliers.
    #[arg(long)]
    preset: String,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
}

/// Runtime failures exit 1, usage problems exit 2.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

trait IntoRuntime<T> {
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> IntoRuntime<T> for Result<T, E> {
    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.to_string()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, seed),
        Command::Train(args) => cmd_train(args, seed),
        Command::Render(args) => cmd_render(args),
        Command::EvalRender(args) => cmd_eval_render(args),
        Command::EvalTraj(args) => cmd_eval_traj(args),
        Command::BaDemo(args) => cmd_ba_demo(args, seed),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_synth(args: SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    if !args.spec.is_file() {
        return Err(CliError::Usage(format!(
            "spec not found: {}",
            args.spec.display()
        )));
    }
    let text = std::fs::read_to_string(&args.spec).runtime()?;
    let scene: SyntheticScene = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.spec.display())))?;
    let seed = seed.unwrap_or(0);
    let dataset = generate_to_dir(&scene, seed, &args.out).runtime()?;
    println!(
        "wrote {} frames ({} keyframes), {} cloud points to {}",
        dataset.frames.len(),
        dataset.keyframes().count(),
        dataset.cloud.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Usage(format!(
                    "config not found: {}",
                    path.display()
                )));
            }
            let text = std::fs::read_to_string(path).runtime()?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    // Flags override file values.
    if args.no_afme {
        config.na = 0;
    }
    if args.no_fpr {
        config.fpr.active_window = (1, 0);
    }
    if args.random_init {
        config.random_init = true;
    }
    if args.incremental {
        config.incremental_merge = true;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(iters) = args.iterations {
        config.iterations = iters;
    }

    let dataset = Dataset::load(&args.data).runtime()?;
    std::fs::create_dir_all(&args.out).runtime()?;
    let outputs = RunOutputs {
        checkpoint_path: Some(args.out.join("checkpoint.bin")),
        loss_csv_path: Some(args.out.join("loss.csv")),
        metrics_path: Some(args.out.join("metrics.json")),
    };
    let result = train_run(&config, &dataset, &outputs, None).runtime()?;
    println!(
        "trained {} iterations, {} anchors; train PSNR {:.2} dB, test PSNR {:.2} dB",
        result.metrics.iterations,
        result.metrics.anchors,
        result.metrics.train.mean_psnr,
        result.metrics.test.mean_psnr
    );
    Ok(())
}

fn parse_pose(text: &str) -> Result<CameraPose, CliError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 7 {
        return Err(CliError::Usage(format!(
            "pose needs 7 numbers (tx ty tz qx qy qz qw), got {}",
            fields.len()
        )));
    }
    let mut vals = [0.0f64; 7];
    for (i, f) in fields.iter().enumerate() {
        vals[i] = f
            .parse()
            .map_err(|_| CliError::Usage(format!("bad pose number '{f}'")))?;
    }
    let center = Vector3::new(vals[0], vals[1], vals[2]);
    Ok(CameraPose::from_cam_to_world(
        &center,
        &[vals[3], vals[4], vals[5], vals[6]],
    ))
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    let pose = parse_pose(&args.pose)?;
    let ck = load_checkpoint(&args.checkpoint).runtime()?;
    let image = render_frame(&ck.state, &pose, &ck.camera).runtime()?;
    datakit::save_png(&image, &args.out).runtime()?;
    println!("rendered {}x{} to {}", ck.camera.width, ck.camera.height, args.out.display());
    Ok(())
}

fn cmd_eval_render(args: EvalRenderArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint).runtime()?;
    let dataset = Dataset::load(&args.data).runtime()?;
    let (train_frames, test_frames) =
        split_train_test(&dataset, &KeyframeRule::Flags).runtime()?;
    // Quality is reported over novel (test) views only; the train split is
    // echoed for reference.
    let test = evaluate_split(&ck.state, &dataset, &test_frames).runtime()?;
    let train = evaluate_split(&ck.state, &dataset, &train_frames).runtime()?;
    let report = serde_json::json!({
        "test": { "mean_psnr": test.mean_psnr, "mean_ssim": test.mean_ssim, "frames": test.frames },
        "train": { "mean_psnr": train.mean_psnr, "mean_ssim": train.mean_ssim },
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn cmd_eval_traj(args: EvalTrajArgs) -> Result<(), CliError> {
    let est = read_tum(&args.est).runtime()?;
    let gt = read_tum(&args.gt).runtime()?;
    let est_poses: Vec<CameraPose> = est.iter().map(|(_, p)| *p).collect();
    let gt_poses: Vec<CameraPose> = gt.iter().map(|(_, p)| *p).collect();
    let mode = if args.sim3 {
        AlignMode::Sim3
    } else {
        AlignMode::Se3
    };
    let rmse = ate_rmse(&est_poses, &gt_poses, mode).runtime()?;
    println!("{rmse:.3} cm");
    Ok(())
}

fn cmd_ba_demo(args: BaDemoArgs, seed: Option<u64>) -> Result<(), CliError> {
    let seed = seed.unwrap_or(7);
    let robust = RobustConfig::default();
    let opts = SolveOptions::default();
    match args.preset.as_str() {
        "motion" => {
            let (mut problem, truth) = make_ba_instance(1, 60, 0.0, 0.0, seed).runtime()?;
            let start = splatmap_core::geometry::apply_increment(
                &truth.poses[0],
                &[0.03, -0.02, 0.01, 0.08, -0.05, 0.06],
            );
            problem.poses.insert(0, start);
            let report = motion_only_ba(&mut problem, 0, &robust, &opts).runtime()?;
            let err = (problem.poses[&0].camera_center() - truth.poses[0].camera_center()).norm();
            println!(
                "motion-only: cost {:.3e} -> {:.3e} in {} iterations; center error {err:.2e} m",
                report.initial_cost, report.final_cost, report.iterations
            );
        }
        "local" => {
            let (mut problem, _) = make_ba_instance(3, 120, 1.0, 0.0, seed).runtime()?;
            let report = local_ba(&mut problem, &[0, 1, 2], &robust, &opts).runtime()?;
            println!(
                "local: cost {:.3e} -> {:.3e} in {} iterations (3 keyframes, 120 points)",
                report.initial_cost, report.final_cost, report.iterations
            );
        }
        "global" => {
            let (mut problem, _) = make_ba_instance(10, 80, 0.5, 0.0, seed).runtime()?;
            let report = global_ba(&mut problem, &robust, &opts).runtime()?;
            println!(
                "global: cost {:.3e} -> {:.3e} in {} iterations (10 keyframes, origin fixed)",
                report.initial_cost, report.final_cost, report.iterations
            );
        }
        "outliers" => {
            let (mut problem, truth) = make_ba_instance(1, 100, 0.0, 0.2, seed).runtime()?;
            let start = splatmap_core::geometry::apply_increment(
                &truth.poses[0],
                &[0.02, -0.01, 0.015, 0.05, -0.04, 0.03],
            );
            problem.poses.insert(0, start);
            let mut quad = problem.clone();
            let r1 = motion_only_ba(&mut problem, 0, &robust, &opts).runtime()?;
            let e1 = (problem.poses[&0].camera_center() - truth.poses[0].camera_center()).norm();
            let r2 = motion_only_ba(
                &mut quad,
                0,
                &robust,
                &SolveOptions {
                    robust: false,
                    ..opts
                },
            )
            .runtime()?;
            let e2 = (quad.poses[&0].camera_center() - truth.poses[0].camera_center()).norm();
            println!(
                "outliers (20%): huber center error {e1:.2e} m (cost {:.3e}), quadratic {e2:.2e} m (cost {:.3e})",
                r1.final_cost, r2.final_cost
            );
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset '{other}' (expected motion|local|global|outliers)"
            )))
        }
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint).runtime()?;
    write_anchor_ply(&ck.state.anchors.anchors, &args.out).runtime()?;
    println!(
        "wrote {} anchors to {}",
        ck.state.anchors.len(),
        args.out.display()
    );
    Ok(())
}

