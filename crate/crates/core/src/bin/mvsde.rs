use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvsde::harness::{
    check_files, convergence_files, density_files, moments_files, nscaling_files, paths_files, run_check,
    run_convergence, run_density, run_moments, run_nscaling, run_paths, write_files, ExperimentConfig, Formats,
    OutputFile,
};
use mvsde::model::BUILTIN_MODELS;
use mvsde::Error;

#[derive(Parser)]
#[command(name = "mvsde", version, about = "Particle simulation of McKean-Vlasov SDEs with tamed Euler schemes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Strong error against a fine reference on common Brownian paths.
    Converge(RunArgs),
    /// Kernel density estimates at the record times.
    Density(RunArgs),
    /// Traced particle paths and a stability summary.
    Paths(RunArgs),
    /// Empirical moments over time, one run per repetition seed.
    Moments(RunArgs),
    /// W2 error against a large-N proxy for several particle counts.
    Nscaling(RunArgs),
    /// Numerical checks of the operator and model assumptions.
    Check(RunArgs),
    /// Print the builtin models.
    ListModels,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Use the full-size grids instead of the desk-scale defaults.
    #[arg(long)]
    full_scale: bool,
    /// Comma separated output formats: csv, svg.
    #[arg(long)]
    format: Option<String>,
    /// Exit with status 3 when any run diverged.
    #[arg(long)]
    strict: bool,
}

enum Failure {
    Config(Error),
    Run(Error),
    Diverged,
}

fn load(args: &RunArgs, command: &Command) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if args.full_scale {
        match command {
            Command::Converge(_) => cfg.apply_full_scale_convergence(),
            Command::Density(_) | Command::Paths(_) => cfg.apply_full_scale_doublewell(),
            _ => {}
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(f) = &args.format {
        cfg.formats = Formats::parse(f)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: &Command, args: &RunArgs) -> Result<(), Failure> {
    let cfg = load(args, command).map_err(Failure::Config)?;
    if let Some(k) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Failure::Config(Error::InvalidParameter(format!("--threads: {e}"))))?;
    }
    let outputs = || -> Result<(Vec<OutputFile>, bool), Error> {
        Ok(match command {
            Command::Converge(_) => {
                let r = run_convergence(&cfg)?;
                for s in &r.schemes {
                    match s.fit {
                        Some(f) => println!("{}: slope {:.4} (r2 {:.4})", s.scheme, f.slope, f.r2),
                        None => println!("{}: no fit ({} rows excluded)", s.scheme, s.excluded),
                    }
                }
                (convergence_files(&r, &cfg)?, r.any_diverged())
            }
            Command::Density(_) => {
                let b = run_density(&cfg)?;
                (density_files(&b, &cfg)?, b.any_diverged())
            }
            Command::Paths(_) => {
                let b = run_paths(&cfg)?;
                for e in &b.entries {
                    let s = &e.summary;
                    println!(
                        "{} h={}: traced max|X| {:.4e}, first non-finite {}",
                        e.scheme,
                        e.h,
                        s.max_abs,
                        s.first_non_finite.map_or("none".to_string(), |t| t.to_string())
                    );
                }
                (paths_files(&b, &cfg)?, b.any_diverged())
            }
            Command::Moments(_) => {
                let b = run_moments(&cfg)?;
                (moments_files(&b, &cfg)?, b.any_diverged())
            }
            Command::Nscaling(_) => {
                let r = run_nscaling(&cfg)?;
                if let Some(f) = r.fit {
                    println!("{}: slope {:.4} (r2 {:.4})", r.scheme, f.slope, f.r2);
                }
                (nscaling_files(&r, &cfg)?, false)
            }
            Command::Check(_) => {
                let b = run_check(&cfg)?;
                let failed = b.reports.iter().filter(|r| !r.passed()).count();
                println!("{} checks, {failed} failed", b.reports.len());
                (check_files(&b), false)
            }
            Command::ListModels => unreachable!("handled before loading a config"),
        })
    };
    let (files, diverged) = outputs().map_err(Failure::Run)?;
    write_files(&cfg.out_dir, &files).map_err(Failure::Run)?;
    println!("wrote {} files to {}", files.len(), cfg.out_dir.display());
    if diverged && args.strict {
        return Err(Failure::Diverged);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = match &cli.command {
        Command::ListModels => {
            let about = [
                "dX = (X - X^3 + E X) dt + 0.5 (1 - X^2) dW, X0 = 0",
                "dX = (1 - X^5 + X^3 + E X) dt + (0.01 X^2 + 1) dW, X0 = 0",
                "dX = (-5/4 X^3 + 3 X^2 E X - 3 X E X^2 + E X^3) dt + X dW, X0 ~ N(mu0, sigma0sq)",
            ];
            for (name, eq) in BUILTIN_MODELS.iter().zip(about) {
                println!("{name:<11} {eq}");
            }
            return ExitCode::SUCCESS;
        }
        Command::Converge(a)
        | Command::Density(a)
        | Command::Paths(a)
        | Command::Moments(a)
        | Command::Nscaling(a)
        | Command::Check(a) => a,
    };
    match run(&cli.command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Diverged) => {
            eprintln!("a run diverged (--strict)");
            ExitCode::from(3)
        }
    }
}
