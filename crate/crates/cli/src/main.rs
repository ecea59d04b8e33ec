use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hazefuse::config::TrainConfig;
use hazefuse::imageio::write_png;
use hazefuse::train::{loss_csv, train, Dataset};
use hazefuse::{format::save_tensor, pipeline, selftest, synth, Error};

/// Exit status for invalid arguments, configs and inputs.
const EXIT_INVALID: u8 = 1;
/// Exit status for unreadable or unwritable files.
const EXIT_IO: u8 = 2;

#[derive(Parser)]
#[command(name = "hazefuse", version, about = "Joint dehazing and infrared/visible image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or add haze to one clear image.
    Synthesize(SynthesizeArgs),
    /// Train a model on a dataset directory with ir/, vi/ and gt/.
    Train(TrainArgs),
    /// Write the dehazed visible image and the haze density map.
    Dehaze(InferArgs),
    /// Write the fused image along with the dehazed image and density map.
    Fuse(InferArgs),
    /// Score fused/ images against ir/ and gt/ in a directory.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every layer and loss.
    Gradcheck(GradcheckArgs),
    /// Run the built-in correctness checks.
    Selftest,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of procedural scenes to generate.
    #[arg(long, conflicts_with_all = ["clear", "depth"])]
    scenes: Option<usize>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clear visible PNG to add haze to.
    #[arg(long, requires_all = ["depth", "beta"])]
    clear: Option<PathBuf>,
    /// Depth tensor file matching the clear image.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    airlight: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    vis: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Also write metrics.csv and metrics.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = selftest::GRAD_SEEDS)]
    seeds: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INVALID) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_INVALID })
        }
    }
}

fn run(command: Command) -> hazefuse::Result<ExitCode> {
    match command {
        Command::Synthesize(a) => synthesize(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Dehaze(a) => {
            let model = pipeline::load_model_file(&a.checkpoint)?;
            let res = pipeline::infer_files(&model, &a.ir, &a.vis)?;
            fs::create_dir_all(&a.out)?;
            write_png(&a.out.join("dehazed.png"), &res.dehazed)?;
            write_png(&a.out.join("density.png"), &res.density)?;
            save_tensor(&a.out.join("density.irvf"), &res.density)?;
        }
        Command::Fuse(a) => {
            pipeline::run_pipeline(&a.ir, &a.vis, &a.checkpoint, &a.out)?;
        }
        Command::Evaluate(a) => {
            let report = pipeline::evaluate_dir(&a.data)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(out) = a.out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("metrics.csv"), &csv)?;
                fs::write(out.join("metrics.json"), report.to_json())?;
            }
        }
        Command::Gradcheck(a) => {
            let mut ok = true;
            for case in selftest::gradient_suite(a.seeds)? {
                let pass = case.max_rel_error < selftest::GRAD_TOL;
                ok &= pass;
                println!(
                    "{:<28} {:.3e}  ({} coordinates){}",
                    case.name,
                    case.max_rel_error,
                    case.checked,
                    if pass { "" } else { "  FAIL" }
                );
            }
            if !ok {
                return Ok(ExitCode::from(EXIT_INVALID));
            }
        }
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("{}", r.line());
            }
            if !results.iter().all(|r| r.passed) {
                return Ok(ExitCode::from(EXIT_INVALID));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn synthesize(a: SynthesizeArgs) -> hazefuse::Result<()> {
    if let Some(clear) = &a.clear {
        let (depth, beta) = (a.depth.as_deref().expect("required by clap"), a.beta.expect("required by clap"));
        let (hazy, trans) = pipeline::synthesize_files(clear, depth, beta, [a.airlight; 3], &a.out)?;
        log::info!("wrote {} and {}", hazy.display(), trans.display());
        return Ok(());
    }
    let n = a.scenes.unwrap_or(4);
    if n == 0 || a.height == 0 || a.width == 0 {
        return Err(Error::Parameter("scene count and size must be positive".into()));
    }
    let scenes = synth::suite(n, a.height, a.width, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    synth::save_dataset(&a.out, &scenes)?;
    log::info!("wrote {n} scenes to {}", a.out.display());
    Ok(())
}

fn read_config(path: &Path) -> hazefuse::Result<TrainConfig> {
    TrainConfig::parse(&fs::read_to_string(path)?)
}

fn train_cmd(a: TrainArgs) -> hazefuse::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data)?;
    let out = train(&data, cfg)?;
    fs::create_dir_all(&a.out)?;
    out.checkpoint.save(&a.out.join("model.irvc"))?;
    fs::write(a.out.join("losses.csv"), loss_csv(&out.losses))?;
    log::info!("saved {}", a.out.join("model.irvc").display());
    Ok(())
}
