//! `pat` command-line driver.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod figures;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "pat", version, about = "Photoacoustic tomography: data generation, training, evaluation, figures")]
pub struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a phantom dataset.
    GenData(GenDataArgs),
    /// Train the speed and reconstruction networks.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and write report.json.
    Eval(EvalArgs),
    /// Write PGM images and speed cross-sections for a checkpoint.
    ExportFigures(FigureArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    /// type1, type2 or const:<value>
    #[arg(long)]
    pub profile: Option<String>,
    /// Gaussian noise level relative to each sinogram's peak.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// implicit or supervised
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, val or test
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct FigureArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated `y` values of the horizontal cross-sections.
    #[arg(long)]
    pub lines: Option<String>,
}

fn put(cfg: &mut RunConfig, key: &str, value: Option<impl ToString>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, v.to_string())?;
    }
    Ok(())
}

fn put_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<()> {
    put(cfg, key, value.as_ref().map(|p| p.display().to_string()))
}

/// Config file merged with command-line overrides.
pub fn merged_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    put(&mut cfg, "seed", cli.seed)?;
    put_path(&mut cfg, "out", &cli.out)?;
    match &cli.command {
        Command::GenData(a) => {
            put(&mut cfg, "samples", a.samples)?;
            put(&mut cfg, "profile", a.profile.as_ref())?;
            put(&mut cfg, "noise", a.noise)?;
        }
        Command::Train(a) => {
            put(&mut cfg, "mode", a.mode.as_ref())?;
            put_path(&mut cfg, "data", &a.data)?;
            put(&mut cfg, "iterations", a.iterations)?;
        }
        Command::Eval(a) => {
            put_path(&mut cfg, "checkpoint", &a.checkpoint)?;
            put_path(&mut cfg, "data", &a.data)?;
            put(&mut cfg, "split", a.split.as_ref())?;
        }
        Command::ExportFigures(a) => {
            put_path(&mut cfg, "checkpoint", &a.checkpoint)?;
            put_path(&mut cfg, "data", &a.data)?;
            put(&mut cfg, "lines", a.lines.as_ref())?;
        }
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = merged_config(&cli)?;
    match cli.command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::ExportFigures(_) => commands::export_figures(&cfg),
    }
}
