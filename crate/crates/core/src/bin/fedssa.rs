//! Experiment runner CLI.
//!
//! Subcommands: `run` (single experiment), `compare` (multi-algorithm sweep
//! over identical data), `check-gradients` (finite-difference check of every
//! zoo architecture), `gen-fixtures` (tiny IDX files plus a sample config).
//!
//! Config keys may be overridden with `--<key> <value>` pairs after the
//! named flags, using dotted paths for nested keys, e.g.
//! `--algo_params.mu0 0.25`. Exit codes: 0 ok, 2 config error, 3 runtime
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedssa_core::baselines::AlgorithmKind;
use fedssa_core::config::parse_config;
use fedssa_core::data::gen_blobs;
use fedssa_core::error::{Error, Result};
use fedssa_core::models::build_model;
use fedssa_core::numerics::{finite_diff_check, Batch};
use fedssa_core::runner;

#[derive(Parser)]
#[command(name = "fedssa", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write manifest, round CSV, and checkpoints.
    Run {
        /// JSON config file; omit to run on pure defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `--key value` config overrides (dotted paths for nested keys).
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run several algorithms over identical data and summarize.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated algorithm list, e.g. `fedssa,standalone,case_b`.
        #[arg(long)]
        algorithms: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Finite-difference gradient check across the configured model zoo.
    CheckGradients {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per architecture.
        #[arg(long, default_value_t = 25)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Write IDX fixture files and a sample config.
    GenFixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut iter = tokens.iter();
    while let Some(token) = iter.next() {
        let key = token
            .strip_prefix("--")
            .ok_or_else(|| Error::config(token.clone(), "overrides must be `--key value` pairs"))?;
        let value = iter
            .next()
            .ok_or_else(|| Error::config(key.to_string(), "override is missing its value"))?;
        pairs.push((key.to_string(), value.clone()));
    }
    Ok(pairs)
}

fn cmd_run(config: Option<PathBuf>, overrides: Vec<String>) -> Result<()> {
    let overrides = parse_overrides(&overrides)?;
    let cfg = parse_config(config.as_deref(), &overrides)?;
    let summary = runner::run_to_files(&cfg)?;
    println!("{}", summary.line());
    if let Some(hit) = summary.target {
        println!(
            "target reached at round {} ({} params, {} flops)",
            hit.round, hit.cum_params, hit.cum_flops
        );
    }
    println!("rounds: {}", summary.rounds_csv.display());
    Ok(())
}

fn cmd_compare(config: Option<PathBuf>, algorithms: &str, overrides: Vec<String>) -> Result<()> {
    let overrides = parse_overrides(&overrides)?;
    let cfg = parse_config(config.as_deref(), &overrides)?;
    let kinds = algorithms
        .split(',')
        .map(|s| s.trim().parse::<AlgorithmKind>())
        .collect::<Result<Vec<_>>>()?;
    let rows = runner::compare(&cfg, &kinds)?;
    print!("{}", runner::compare_csv(&rows));
    Ok(())
}

fn cmd_check_gradients(
    config: Option<PathBuf>,
    seed: u64,
    coords: usize,
    epsilon: f64,
    tolerance: f64,
    overrides: Vec<String>,
) -> Result<()> {
    let overrides = parse_overrides(&overrides)?;
    let cfg = parse_config(config.as_deref(), &overrides)?;
    let (d_in, spread) = match cfg.dataset {
        fedssa_core::config::DatasetConfig::Blobs { d_in, spread, .. } => (d_in, spread),
        _ => (32, 1.0),
    };
    let ds = gen_blobs(cfg.s, 10, d_in, spread, seed)?;
    let specs = cfg.extractor_specs(d_in);
    let mut all_passed = true;
    for (i, spec) in specs.iter().enumerate() {
        let model = build_model(spec, cfg.s, fedssa_core::seed::derive(seed, &[i as u64]))?;
        let indices: Vec<usize> = (0..ds.len()).step_by(7).take(12).collect();
        let probe = ds.batch_from_indices(&indices)?;
        let batch = Batch::new(probe.inputs, probe.labels)?;
        let report = finite_diff_check(
            &model.into_net(),
            &batch,
            coords,
            epsilon,
            tolerance,
            fedssa_core::seed::derive(seed, &[99, i as u64]),
        )?;
        println!(
            "arch {i} (hidden {:?}): max rel err {:.3e} over {} coords -> {}",
            spec.hidden,
            report.max_rel_err,
            report.entries.len(),
            if report.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= report.passed;
    }
    if all_passed {
        Ok(())
    } else {
        Err(Error::protocol("gradient check failed"))
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides),
        Command::Compare { config, algorithms, overrides } => {
            cmd_compare(config, &algorithms, overrides)
        }
        Command::CheckGradients { config, seed, coords, epsilon, tolerance, overrides } => {
            cmd_check_gradients(config, seed, coords, epsilon, tolerance, overrides)
        }
        Command::GenFixtures { out } => {
            for path in runner::gen_fixtures(&out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
