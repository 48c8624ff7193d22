//! `drpose`: synthetic data, two-stage training, inference and evaluation.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 malformed configuration
//! or usage, 3 missing or unreadable input, 4 stage-order violation,
//! 5 numerical or module error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drpose::chamfer::{chamfer_l1, chamfer_l2sq};
use drpose::geom::io::read_points;
use drpose::pipeline::{self, ExperimentConfig, RunDir};
use drpose::similarity::{residual_rms, solve_umeyama, CorrespondedPair};
use drpose::Error;

#[derive(Parser)]
#[command(
    name = "drpose",
    version,
    about = "Category-level pose estimation by prior deformation and registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Base seed combined with every named seed in the config.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory; all outputs and the manifest go here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    SynthGen(RunArgs),
    /// Build category priors, train stage one and write the handoff.
    TrainDeform(RunArgs),
    /// Train stage two from the stage-one handoff.
    TrainRegis(RunArgs),
    /// Predict poses for every instance.
    Infer(RunArgs),
    /// Score predictions against ground truth.
    Eval(RunArgs),
    /// Pose accuracy against prior chamfer error.
    Trend(RunArgs),
    /// Scaling factors on versus off with perturbed priors.
    AblateScaling(RunArgs),
    /// synth-gen, train-deform, train-regis, infer and eval in sequence.
    Run(RunArgs),
    /// Similarity transform between two corresponded point files.
    Fit {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Fix the scale to 1.
        #[arg(long)]
        no_scale: bool,
    },
    /// Chamfer distance between two point files.
    Cd {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::L2sq)]
        metric: Metric,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    L2sq,
    L1,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownCategory(_) => 2,
        Error::MissingInput(_) | Error::Parse { .. } => 3,
        Error::StageOrder(_) => 4,
        Error::Io { .. } | Error::Json(_) => 1,
        _ => 5,
    }
}

fn open(args: &RunArgs) -> Result<(ExperimentConfig, RunDir), Error> {
    let (cfg, text) = ExperimentConfig::load(&args.config)?;
    let mut run = RunDir::open(&args.out)?;
    pipeline::snapshot_config(&mut run, &text)?;
    Ok((cfg, run))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn stage(
    args: &RunArgs,
    f: impl FnOnce(&ExperimentConfig, u64, &mut RunDir) -> Result<(), Error>,
) -> Result<(), Error> {
    let (cfg, mut run) = open(args)?;
    let result = f(&cfg, args.seed, &mut run);
    // Keep the manifest accurate even when a stage fails midway.
    let finished = run.finish(args.seed);
    result.and(finished)
}

fn print_file(run: &RunDir, rel: &str) -> Result<(), Error> {
    let path = run.path(rel);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
    print!("{text}");
    Ok(())
}

fn read_pair(a: &Path, b: &Path) -> Result<(drpose::geom::PointCloud, drpose::geom::PointCloud), Error> {
    Ok((read_points(a)?, read_points(b)?))
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::SynthGen(a) => stage(&a, |c, s, r| {
            let records = pipeline::synth_gen(c, s, r)?;
            println!(
                "{} instances written to {}",
                records.len(),
                r.path(pipeline::DATASET_DIR).display()
            );
            Ok(())
        }),
        Command::TrainDeform(a) => stage(&a, |c, s, r| {
            pipeline::train_deform(c, s, r)?;
            print_file(r, pipeline::DEFORM_REPORT)
        }),
        Command::TrainRegis(a) => stage(&a, |c, s, r| {
            pipeline::train_regis(c, s, r)?;
            println!("checkpoint written to {}", r.path(pipeline::REGIS_CHECKPOINT).display());
            Ok(())
        }),
        Command::Infer(a) => stage(&a, |_, _, r| {
            let preds = pipeline::infer_run(r)?;
            println!(
                "{} predictions written to {}",
                preds.len(),
                r.path(pipeline::PREDICTIONS).display()
            );
            Ok(())
        }),
        Command::Eval(a) => stage(&a, |c, s, r| {
            pipeline::eval_run(c, s, r)?;
            print_file(r, pipeline::REPORT_CSV)
        }),
        Command::Trend(a) => stage(&a, |c, s, r| {
            pipeline::trend_run(c, s, r)?;
            print_file(r, pipeline::TREND_CSV)
        }),
        Command::AblateScaling(a) => stage(&a, |c, s, r| {
            pipeline::ablate_scaling(c, s, r)?;
            print_file(r, pipeline::ABLATION_CSV)
        }),
        Command::Run(a) => stage(&a, |c, s, r| {
            pipeline::run_all(c, s, r)?;
            print_file(r, pipeline::REPORT_CSV)
        }),
        Command::Fit {
            source,
            target,
            no_scale,
        } => {
            let (src, dst) = read_pair(&source, &target)?;
            let pair = CorrespondedPair::new(src, dst)?;
            let t = solve_umeyama(&pair, !no_scale)?;
            print_json(&serde_json::json!({
                "transform": t,
                "residual_rms": residual_rms(&pair, &t),
            }))
        }
        Command::Cd { a, b, metric } => {
            let (pa, pb) = read_pair(&a, &b)?;
            let r = match metric {
                Metric::L2sq => chamfer_l2sq(&pa, &pb),
                Metric::L1 => chamfer_l1(&pa, &pb),
            };
            print_json(&r)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
