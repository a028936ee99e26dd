//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use pat_core::networks::{Architecture, ReconConfig, SpeedNetConfig};
use pat_core::phantoms::PhantomRanges;
use pat_core::speed::SpeedProfile;
use pat_core::training::{AdamConfig, LossWeights, Mode, TrainConfig};
use pat_core::wave::{max_stable_dt, SimConfig, SimGrid, TimeGrid};

/// Every key a config file or flag may set.
pub const KNOWN_KEYS: &[&str] = &[
    // global
    "seed",
    "out",
    // dataset
    "samples",
    "profile",
    "noise",
    "grid",
    "half_width",
    "detectors",
    "neumann_offset",
    "final_time",
    "dt",
    "ground_truth",
    "ellipses_min",
    "ellipses_max",
    "center_radius",
    "axis_min",
    "axis_max",
    "intensity_min",
    "intensity_max",
    // training
    "data",
    "mode",
    "iterations",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "val_every",
    "val_limit",
    "lambda_d",
    "lambda_n",
    "lambda_tv",
    "lambda_i",
    "hidden",
    "omega0",
    "speed_min",
    "speed_max",
    "input_extent",
    "core_extent",
    "enc_channels",
    "core_channels",
    "dec_channels",
    "res_channels",
    "res_blocks",
    // evaluation and figures
    "checkpoint",
    "split",
    "lines",
    "figure_samples",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", no + 1))?;
            let k = k.trim();
            if cfg.values.contains_key(k) {
                bail!("line {}: key `{k}` set twice", no + 1);
            }
            cfg.set(k, v.trim()).with_context(|| format!("line {}", no + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Sets (or overrides) one key.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            bail!("unknown config key `{key}`");
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("bad value `{v}` for `{key}`: {e}")))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| anyhow!("missing required config key `{key}`"))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.require::<String>(key).map(PathBuf::from)
    }

    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.values
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|e| anyhow!("bad entry `{s}` in `{key}`: {e}")))
                    .collect()
            })
            .transpose()
    }

    pub fn profile(&self) -> Result<SpeedProfile> {
        let mut p: SpeedProfile = self.require::<String>("profile")?.parse()?;
        if let Some(lo) = self.get("speed_min")? {
            p.bounds.0 = lo;
        }
        if let Some(hi) = self.get("speed_max")? {
            p.bounds.1 = hi;
        }
        Ok(p)
    }

    /// Grid, time axis and detector setup. Without `final_time` the waves
    /// run for `4L/√c_min`, with `c_min` taken over nodes in the unit disk.
    pub fn sim(&self, profile: &SpeedProfile) -> Result<SimConfig> {
        let grid = SimGrid::new(self.get_or("grid", 64)?, self.get_or("half_width", 1.28)?)?;
        let c_max = profile.bounds.1;
        let dt = self.get_or("dt", 0.9 * max_stable_dt(&grid, c_max))?;
        let t_final = match self.get::<f64>("final_time")? {
            Some(t) => t,
            None => {
                let c = profile.rasterize(&grid)?;
                let c_min = grid
                    .unit_disk_indices()
                    .into_iter()
                    .map(|i| c.data()[i])
                    .fold(f64::INFINITY, f64::min);
                4.0 * grid.half_width() / c_min.sqrt()
            }
        };
        let time = TimeGrid::new(dt, (t_final / dt).ceil().max(2.0) as usize)?;
        Ok(SimConfig::new(
            grid,
            time,
            self.get_or("detectors", 64)?,
            self.get_or("neumann_offset", 0.05)?,
        )?)
    }

    pub fn ranges(&self) -> Result<PhantomRanges> {
        let d = PhantomRanges::default();
        Ok(PhantomRanges {
            count: (self.get_or("ellipses_min", d.count.0)?, self.get_or("ellipses_max", d.count.1)?),
            center_radius: self.get_or("center_radius", d.center_radius)?,
            semi_axis: (self.get_or("axis_min", d.semi_axis.0)?, self.get_or("axis_max", d.semi_axis.1)?),
            intensity: (
                self.get_or("intensity_min", d.intensity.0)?,
                self.get_or("intensity_max", d.intensity.1)?,
            ),
            max_attempts: d.max_attempts,
        })
    }

    /// Network layout for an `n × n` grid with bounds `(c_m, c_M)`.
    pub fn architecture(&self, n: usize, bounds: (f64, f64)) -> Result<Architecture> {
        let d = ReconConfig::for_grid(n);
        let sd = SpeedNetConfig::default();
        let hidden = match self.list("hidden")? {
            Some(h) => h.into_iter().map(|v| v as usize).collect(),
            None => sd.hidden,
        };
        Ok(Architecture {
            speed: SpeedNetConfig {
                hidden,
                omega0: self.get_or("omega0", sd.omega0)?,
                bounds: (self.get_or("speed_min", bounds.0)?, self.get_or("speed_max", bounds.1)?),
            },
            recon: ReconConfig {
                input_extent: self.get_or("input_extent", d.input_extent)?,
                core_extent: self.get_or("core_extent", d.core_extent)?,
                output_extent: n,
                enc_channels: self.get_or("enc_channels", d.enc_channels)?,
                core_channels: self.get_or("core_channels", d.core_channels)?,
                dec_channels: self.get_or("dec_channels", d.dec_channels)?,
                res_channels: self.get_or("res_channels", d.res_channels)?,
                res_blocks: self.get_or("res_blocks", d.res_blocks)?,
            },
        })
    }

    /// Loss weights; unset entries fall back to the defaults for `sigma`.
    pub fn weights(&self, sigma: f64) -> Result<LossWeights> {
        let d = LossWeights::for_noise(sigma);
        Ok(LossWeights {
            lambda_d: self.get_or("lambda_d", d.lambda_d)?,
            lambda_n: self.get_or("lambda_n", d.lambda_n)?,
            lambda_tv: self.get_or("lambda_tv", d.lambda_tv)?,
            lambda_i: self.get_or("lambda_i", d.lambda_i)?,
        })
    }

    pub fn train_config(&self, arch: Architecture, sigma: f64) -> Result<TrainConfig> {
        let mode: Mode = self.require::<String>("mode")?.parse()?;
        let d = AdamConfig::default();
        let mut cfg = TrainConfig::new(mode, arch);
        cfg.iterations = self.get_or("iterations", cfg.iterations)?;
        cfg.batch_size = self.get_or("batch_size", cfg.batch_size)?;
        cfg.adam = AdamConfig {
            lr: self.get_or("lr", d.lr)?,
            beta1: self.get_or("beta1", d.beta1)?,
            beta2: self.get_or("beta2", d.beta2)?,
            eps: self.get_or("eps", d.eps)?,
        };
        cfg.seed = self.get_or("seed", 0)?;
        cfg.weights = Some(self.weights(sigma)?);
        cfg.val_every = self.get_or("val_every", cfg.val_every)?;
        cfg.val_limit = self.get("val_limit")?;
        Ok(cfg)
    }
}
