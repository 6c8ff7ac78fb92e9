//! Command-line front end for the spinemark localization pipeline.
//!
//! Every subcommand reads one flat-text config (defaults when omitted),
//! optionally overridden by `--seed` and `--out`, and exits 0 on success,
//! 2 on configuration errors, 3 on artifact errors, and 4 on numeric
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spinemark_core::config::{ConfigError, PipelineConfig};
use spinemark_core::io::FORMAT_VERSIONS;
use spinemark_core::pipeline::{
    cmd_eval, cmd_infer, cmd_learn_kernels, cmd_refine, cmd_synth, cmd_train, PipelineError,
};

#[derive(Parser)]
#[command(
    name = "spinemark",
    about = "Vertebra-centroid localization: heatmap network, chain message passing, sparse shape refinement",
    disable_version_flag = true
)]
struct Cli {
    /// Print the tool version and every artifact format version, then exit.
    #[arg(long, short = 'V')]
    version: bool,

    /// Config file of flat `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth,
    /// Train the localization network on the manifest's training cases.
    Train,
    /// Learn chain displacement kernels and the shape dictionary.
    LearnKernels,
    /// Run the trained network on one volume; write raw landmark predictions.
    Infer {
        /// Volume header file (`.svh`).
        volume: PathBuf,
    },
    /// Refine a predicted landmark CSV against the shape dictionary.
    Refine {
        /// Landmark CSV to refine.
        landmarks: PathBuf,
    },
    /// Score net-only / +mp / +mp+sparsity on the held-out cases.
    Eval,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_versions() {
    println!("spinemark {}", env!("CARGO_PKG_VERSION"));
    for (format, version) in FORMAT_VERSIONS {
        println!("format {format} v{version}");
    }
}

fn region_line(report: &spinemark_core::eval::EvalReport, method: &str) -> String {
    match report.region("All") {
        Some(stats) => format!(
            "{method}: mean {} mm, id rate {}",
            stats
                .mean_mm
                .map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}")),
            stats
                .id_rate
                .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}")),
        ),
        None => format!("{method}: no targets"),
    }
}

fn run(cfg: &PipelineConfig, command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Synth => {
            let s = cmd_synth(cfg)?;
            println!(
                "wrote {} cases, manifest {}",
                s.cases,
                s.manifest_path.display()
            );
        }
        Command::Train => {
            let s = cmd_train(cfg)?;
            println!(
                "trained {} epochs, loss {:.6} -> {:.6}, model {}",
                cfg.epochs,
                s.first_loss,
                s.final_loss,
                s.model_path.display()
            );
        }
        Command::LearnKernels => {
            let s = cmd_learn_kernels(cfg)?;
            println!(
                "learned kernels {} and a {}-atom dictionary",
                s.kernels_path.display(),
                s.atoms
            );
        }
        Command::Infer { volume } => {
            let s = cmd_infer(cfg, &volume)?;
            println!(
                "{} of {} landmarks present, wrote {}",
                s.landmarks.present_count(),
                s.landmarks.len(),
                s.landmarks_path.display()
            );
        }
        Command::Refine { landmarks } => {
            let s = cmd_refine(cfg, &landmarks)?;
            println!(
                "refined over a {}-row subspace (lambda {:.6}), wrote {}",
                s.subspace.len(),
                s.lambda,
                s.refined_path.display()
            );
            if !s.extrapolated.is_empty() {
                println!("extrapolated absent landmarks: {}", s.extrapolated.join(", "));
            }
        }
        Command::Eval => {
            let s = cmd_eval(cfg)?;
            for (method, report) in &s.methods {
                println!("{}", region_line(report, method));
            }
            println!(
                "wrote {} and {}",
                s.report_path.display(),
                s.chart_path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut cli = Cli::parse();
    if cli.version {
        print_versions();
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command.take() else {
        eprintln!("error: no command given (try --help)");
        return ExitCode::from(2);
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
