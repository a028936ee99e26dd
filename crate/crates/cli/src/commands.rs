//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pat_core::dataset::{build_dataset, Dataset, DatasetSpec, Split};
use pat_core::networks::{Architecture, ParamStore, ReconNet, SpeedNet};
use pat_core::training::{self, loss_trend, EvalReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::figures::{cross_section_csv, row_for_line, write_pgm};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_DIR: &str = "checkpoint";
pub const LAST_DIR: &str = "last";
pub const DEFAULT_LINES: [f64; 3] = [-0.5, 0.0, 0.5];

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.path("out")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let profile = cfg.profile()?;
    let spec = DatasetSpec {
        count: cfg.require("samples")?,
        sim: cfg.sim(&profile)?,
        profile,
        noise_sigma: cfg.get_or("noise", 0.0)?,
        seed: cfg.get_or("seed", 0)?,
        ranges: cfg.ranges()?,
        ground_truth: cfg.get_or("ground_truth", true)?,
    };
    let out = out_dir(cfg)?;
    let start = Instant::now();
    let manifest = build_dataset(&spec, &out)?;
    println!(
        "wrote {} samples ({}/{}/{}) to {} in {:.2?}",
        manifest.samples.len(),
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test,
        out.join("manifest.json").display(),
        start.elapsed()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: String,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ds = Dataset::open(&cfg.path("data")?)?;
    let m = ds.manifest();
    let arch = cfg.architecture(m.sim.n, m.speed_bounds)?;
    let mut tc = cfg.train_config(arch, m.noise_sigma)?;
    let out = out_dir(cfg)?;
    tc.checkpoint_dir = Some(out.join(BEST_DIR));
    tc.metrics_csv = Some(out.join(METRICS_FILE));

    let start = Instant::now();
    let every = tc.val_every;
    let result = training::train(&tc, &ds, |row| {
        if let Some(v) = row.val_loss {
            println!(
                "iter {:>7}  loss {:.4e}  val {:.4e}  c_rel {:.4}  {:.0?}",
                row.iteration,
                row.train_loss,
                v,
                row.c_rel,
                start.elapsed()
            );
        } else if row.iteration % every == 0 {
            println!("iter {:>7}  loss {:.4e}", row.iteration, row.train_loss);
        }
    })?;
    result.last.save(&out.join(LAST_DIR), &tc.arch)?;

    let losses = result.losses();
    let window = (losses.len() / 20).clamp(1, 500);
    let (initial, last) = loss_trend(&losses, window).context("no iterations recorded")?;
    let summary = TrainSummary {
        mode: format!("{:?}", tc.mode).to_lowercase(),
        iterations: losses.len(),
        best_iteration: result.best_iteration,
        best_val_loss: result.best_val_loss,
        initial_loss: initial,
        final_loss: last,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    println!(
        "best val loss {:.4e} at iteration {}; checkpoint in {}",
        summary.best_val_loss,
        summary.best_iteration,
        out.join(BEST_DIR).display()
    );
    Ok(())
}

/// Loads a checkpoint and confirms it fits the dataset grid.
fn load_for(ds: &Dataset, dir: &Path) -> Result<(ParamStore, Architecture)> {
    let (store, arch) = ParamStore::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let n = ds.manifest().sim.n;
    if arch.recon.output_extent != n {
        bail!(
            "checkpoint reconstructs {0}×{0} images but the dataset grid is {1}×{1}",
            arch.recon.output_extent,
            n
        );
    }
    Ok((store, arch))
}

/// One row of the results table: profile and noise level against both errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub profile: String,
    pub noise: f64,
    pub f_rel: f64,
    pub c_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checkpoint: String,
    pub data: String,
    pub table: Vec<TableRow>,
    pub detail: EvalReport,
}

impl Report {
    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>10} {:>10}\n", "profile", "noise", "‖f‖_rel", "‖c‖_rel");
        for r in &self.table {
            s += &format!("{:<10} {:>8} {:>10.4} {:>10.4}\n", r.profile, r.noise, r.f_rel, r.c_rel);
        }
        s
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let data = cfg.path("data")?;
    let checkpoint = cfg.path("checkpoint")?;
    let split: Split = serde_json::from_value(serde_json::Value::String(cfg.get_or("split", "test".to_string())?))
        .context("split must be train, val or test")?;
    let ds = Dataset::open(&data)?;
    let (store, arch) = load_for(&ds, &checkpoint)?;
    let detail = training::evaluate(&arch, &store, &ds, split)?;
    let m = ds.manifest();
    let report = Report {
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        table: vec![TableRow {
            profile: m.profile.clone(),
            noise: m.noise_sigma,
            f_rel: detail.mean_f_rel,
            c_rel: detail.c_rel,
        }],
        detail,
    };
    let out = out_dir(cfg)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    print!("{}", report.render());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureLine {
    pub y: f64,
    pub row: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureIndex {
    pub images: Vec<String>,
    pub lines: Vec<FigureLine>,
}

pub fn export_figures(cfg: &RunConfig) -> Result<()> {
    let ds = Dataset::open(&cfg.path("data")?)?;
    let (store, arch) = load_for(&ds, &cfg.path("checkpoint")?)?;
    let out = out_dir(cfg)?;
    let sim = ds.sim_config()?;
    let grid = sim.grid;
    let c_true = ds.speed()?;
    let c_est = SpeedNet::new(arch.speed.clone())?.rasterize_plain(&store, &grid, &c_true)?;

    let mut index = FigureIndex { images: Vec::new(), lines: Vec::new() };
    let bounds = arch.speed.bounds;
    for (name, field) in [("c_true.pgm", &c_true), ("c_est.pgm", &c_est)] {
        write_pgm(&out.join(name), field, (0.0, bounds.1))?;
        index.images.push(name.into());
    }

    let recon = ReconNet::new(arch.recon.clone())?;
    let count = cfg.get_or("figure_samples", 3usize)?;
    for &i in ds.manifest().indices(Split::Test).iter().take(count) {
        let s = ds.sample(i)?;
        let name = format!("f_rec_{i:05}.pgm");
        write_pgm(&out.join(&name), &recon.reconstruct(&store, &s.d1)?, (0.0, 1.0))?;
        index.images.push(name);
        if let Some(f) = &s.f {
            let name = format!("f_true_{i:05}.pgm");
            write_pgm(&out.join(&name), f, (0.0, 1.0))?;
            index.images.push(name);
        }
    }

    let lines = cfg.list("lines")?.unwrap_or_else(|| DEFAULT_LINES.to_vec());
    for (k, &y) in lines.iter().enumerate() {
        let row = row_for_line(&grid, y)?;
        let file = format!("line{}.csv", k + 1);
        fs::write(out.join(&file), cross_section_csv(&grid, &c_true, &c_est, row))
            .with_context(|| format!("writing {file}"))?;
        index.lines.push(FigureLine { y, row, file });
    }
    write_json(&out.join("figures.json"), &index)?;
    println!(
        "wrote {} images and {} cross-sections to {}",
        index.images.len(),
        index.lines.len(),
        out.display()
    );
    Ok(())
}
