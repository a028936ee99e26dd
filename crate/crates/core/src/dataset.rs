//! On-disk datasets of simulated boundary measurements.
//!
//! A dataset directory holds `manifest.json`, one `d1_%05d.bin` and
//! `d1mh_%05d.bin` sinogram pair per sample, the evaluation-only ground truth
//! `f_%05d.bin`, and the speed field `c.bin`. All raw files are little-endian
//! `f64` with shapes declared in the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantoms::{add_noise, sample_phantom, PhantomRanges};
use crate::speed::SpeedProfile;
use crate::tensor::Tensor;
use crate::wave::{SimConfig, SimGrid, TimeGrid, WaveOperator};

pub const MANIFEST: &str = "manifest.json";
pub const SPEED_FILE: &str = "c.bin";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 50/25/25 by index; any remainder goes to the test split.
    pub fn for_total(n: usize) -> Self {
        let train = n / 2;
        let val = n / 4;
        Self {
            train,
            val,
            test: n - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub half_width: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_det: usize,
    pub h: f64,
}

impl SimSpec {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            n: cfg.grid.n(),
            half_width: cfg.grid.half_width(),
            dt: cfg.time.dt(),
            n_steps: cfg.time.n_steps(),
            n_det: cfg.n_det,
            h: cfg.h,
        }
    }

    pub fn to_config(&self) -> Result<SimConfig> {
        SimConfig::new(
            SimGrid::new(self.n, self.half_width)?,
            TimeGrid::new(self.dt, self.n_steps)?,
            self.n_det,
            self.h,
        )
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.n, self.n]
    }

    pub fn sinogram_shape(&self) -> Vec<usize> {
        vec![self.n_det, self.n_steps + 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub split: Split,
    /// Ground-truth initial pressure; evaluation only.
    pub f: Option<String>,
    pub d1: String,
    pub d1mh: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub counts: SplitCounts,
    pub sim: SimSpec,
    pub profile: String,
    pub speed_bounds: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
    pub ranges: PhantomRanges,
    /// Ground-truth speed on the grid; evaluation only, except that the
    /// speed estimator copies its values outside the unit disk.
    pub speed_file: String,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", m.version)));
        }
        if m.samples.len() != m.counts.total() {
            return Err(Error::Dataset(format!(
                "manifest lists {} samples but counts sum to {}",
                m.samples.len(),
                m.counts.total()
            )));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.index)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub count: usize,
    pub profile: SpeedProfile,
    pub sim: SimConfig,
    pub noise_sigma: f64,
    pub seed: u64,
    pub ranges: PhantomRanges,
    /// Write `f_%05d.bin` next to the measurements.
    pub ground_truth: bool,
}

/// SplitMix64 finalizer; decorrelates per-sample seeds derived from one base.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_PHANTOM: u64 = 1;
const STREAM_NOISE_OUTER: u64 = 2;
const STREAM_NOISE_INNER: u64 = 3;

/// Simulates `spec.count` phantoms and writes the dataset to `out`.
pub fn build_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    let profile_id = spec
        .profile
        .id()
        .ok_or_else(|| Error::Config("custom speed profiles cannot be persisted".into()))?;
    if spec.count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let grid = spec.sim.grid;
    let c = spec.profile.rasterize(&grid)?;
    let op = WaveOperator::new(spec.sim)?;
    c.write_raw(&out.join(SPEED_FILE))?;

    let counts = SplitCounts::for_total(spec.count);
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let phantom = sample_phantom(derive_seed(spec.seed, STREAM_PHANTOM, i as u64), &spec.ranges)?;
        let f = phantom.rasterize(&grid);
        let (d1, d1mh) = op.simulate(&f, &c)?;
        let d1 = add_noise(&d1, spec.noise_sigma, derive_seed(spec.seed, STREAM_NOISE_OUTER, i as u64))?;
        let d1mh = add_noise(&d1mh, spec.noise_sigma, derive_seed(spec.seed, STREAM_NOISE_INNER, i as u64))?;
        let entry = SampleEntry {
            index: i,
            split: counts.split_of(i),
            f: spec.ground_truth.then(|| format!("f_{i:05}.bin")),
            d1: format!("d1_{i:05}.bin"),
            d1mh: format!("d1mh_{i:05}.bin"),
        };
        if let Some(name) = &entry.f {
            f.write_raw(&out.join(name))?;
        }
        d1.values.write_raw(&out.join(&entry.d1))?;
        d1mh.values.write_raw(&out.join(&entry.d1mh))?;
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        version: VERSION,
        counts,
        sim: SimSpec::from_config(&spec.sim),
        profile: profile_id,
        speed_bounds: spec.profile.bounds,
        noise_sigma: spec.noise_sigma,
        seed: spec.seed,
        ranges: spec.ranges,
        speed_file: SPEED_FILE.into(),
        samples,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// One sample's measurements and, when present, its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub d1: Tensor,
    pub d1mh: Tensor,
    pub f: Option<Tensor>,
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        self.manifest.sim.to_config()
    }

    pub fn speed(&self) -> Result<Tensor> {
        Tensor::read_raw(&self.dir.join(&self.manifest.speed_file), &self.manifest.sim.image_shape())
    }

    pub fn has_ground_truth(&self, split: Split) -> bool {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.split == split)
            .all(|s| s.f.as_ref().is_some_and(|f| self.dir.join(f).is_file()))
    }

    pub fn sample(&self, index: usize) -> Result<Sample> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("no sample {index}")))?;
        let sino = self.manifest.sim.sinogram_shape();
        let f = match &entry.f {
            Some(name) if self.dir.join(name).is_file() => {
                Some(Tensor::read_raw(&self.dir.join(name), &self.manifest.sim.image_shape())?)
            }
            _ => None,
        };
        Ok(Sample {
            index,
            d1: Tensor::read_raw(&self.dir.join(&entry.d1), &sino)?,
            d1mh: Tensor::read_raw(&self.dir.join(&entry.d1mh), &sino)?,
            f,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.indices(split).into_iter().map(|i| self.sample(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_split_sizes() {
        let c = SplitCounts::for_total(4096);
        assert_eq!((c.train, c.val, c.test), (2048, 1024, 1024));
        let c = SplitCounts::for_total(256);
        assert_eq!((c.train, c.val, c.test), (128, 64, 64));
    }

    #[test]
    fn splits_partition_indices() {
        for n in [1, 2, 5, 8, 13, 256] {
            let c = SplitCounts::for_total(n);
            assert_eq!(c.total(), n);
            let per: Vec<Split> = (0..n).map(|i| c.split_of(i)).collect();
            assert_eq!(per.iter().filter(|&&s| s == Split::Train).count(), c.train);
            assert_eq!(per.iter().filter(|&&s| s == Split::Val).count(), c.val);
            assert_eq!(per.iter().filter(|&&s| s == Split::Test).count(), c.test);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let mut seen = std::collections::HashSet::new();
        for stream in 0..4 {
            for i in 0..1000 {
                assert!(seen.insert(derive_seed(7, stream, i)));
            }
        }
    }
}
