//! `mogp-dfa`: simulate, preprocess, fit, tune, predict and align from a TOML
//! run configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use commands::Out;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "mogp-dfa", version, about = "Sparse dynamic factor analysis with multi-output Gaussian process factors")]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for chains and CV cells.
    #[arg(long, global = true, env = "DFA_THREADS")]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate,
    /// Regress out age and map times onto a reference grid.
    Preprocess,
    /// Estimate hyperparameters by StEM, then sample the posterior.
    Fit,
    /// Choose the roughness penalty by cross-validation.
    Cv,
    /// Posterior-predictive summaries for one subject.
    Predict {
        #[arg(long)]
        subject: Option<String>,
        /// Comma-separated times in original units.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long)]
        fit_dir: Option<PathBuf>,
    },
    /// Align an estimated matrix to a reference by signed permutation.
    Align,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Preprocess => "preprocess",
            Command::Fit => "fit",
            Command::Cv => "cv",
            Command::Predict { .. } => "predict",
            Command::Align => "align",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Command::Predict { subject, times, fit_dir } = &cli.command {
        if subject.is_some() {
            cfg.predict.subject = subject.clone();
        }
        if let Some(t) = times {
            cfg.predict.times = t.clone();
        }
        if fit_dir.is_some() {
            cfg.predict.fit_dir = fit_dir.clone();
        }
    }
    cfg.check(cli.command.name())?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig, out: &Out) -> Result<()> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    out.text("resolved_config.toml", &cfg.to_toml()?)?;
    out.json(
        "versions.json",
        &json!({
            "mogp_dfa": mogp_dfa::VERSION,
            "mogp_dfa_cli": env!("CARGO_PKG_VERSION"),
            "command": cli.command.name(),
            "threads": rayon::current_num_threads(),
        }),
    )?;
    match &cli.command {
        Command::Simulate => commands::simulate(cfg, out),
        Command::Preprocess => commands::preprocess(cfg, out),
        Command::Fit => commands::fit(cfg, out),
        Command::Cv => commands::cv(cfg, out),
        Command::Predict { .. } => commands::predict(cfg, out),
        Command::Align => commands::align(cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let out = match Out::new(&cfg.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let _ = std::fs::remove_file(out.path("error.json"));
    match run(&cli, &cfg, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            let _ = out.json("error.json", &json!({ "command": command, "error": format!("{e:#}"), "causes": chain }));
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
