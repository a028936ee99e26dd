//! The two trainable models.
//!
//! * [`SpeedNet`]: coordinate MLP `(x, y) ↦ c̃` with sine activations and a
//!   tanh output squeezed into the speed bounds. Outside the unit disk the
//!   speed is a supplied, non-trainable value.
//! * [`ReconNet`]: bias-free sinogram-to-image network. Convolution and
//!   average pooling shrink the (resampled) sinogram, a per-channel dense
//!   map carries it into the image domain, stride-2 transposed convolutions
//!   and residual blocks bring it up to full resolution, and
//!   `x ↦ 0.5 tanh(x − 0.5) + 0.5` calibrates the output into `(0, 1)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::wave::SimGrid;

/// Named trainable tensors. Iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Graph leaves for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to leaves created elsewhere, e.g. by a gradient checker.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Moves the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a parameter's values; the shape may not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
                .collect(),
        }
    }

    /// Adds only the parameters whose names start with `prefix`.
    pub fn bind_prefix(&self, g: &mut Graph, prefix: &str) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
                .collect(),
        }
    }

    /// Writes one raw little-endian file per parameter plus `index.json`.
    pub fn save(&self, dir: &Path, arch: &Architecture) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let file = format!("{name}.bin");
            t.write_raw(&dir.join(&file))?;
            entries.push(CheckpointEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let index = CheckpointIndex {
            version: 1,
            architecture: arch.clone(),
            params: entries,
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint and validates every shape against its architecture.
    pub fn load(dir: &Path) -> Result<(Self, Architecture)> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CheckpointIndex = serde_json::from_str(&text)?;
        let expected = index.architecture.param_shapes()?;
        let mut store = ParamStore::new();
        for entry in &index.params {
            match expected.get(&entry.name) {
                Some(shape) if *shape == entry.shape => {}
                Some(shape) => {
                    return Err(Error::ShapeMismatch {
                        op: "load checkpoint",
                        lhs: shape.clone(),
                        rhs: entry.shape.clone(),
                    })
                }
                None => return Err(Error::UnknownParam(entry.name.clone())),
            }
            store.insert(&entry.name, Tensor::read_raw(&dir.join(&entry.file), &entry.shape)?)?;
        }
        if let Some(missing) = expected.keys().find(|k| store.get(k).is_err()) {
            return Err(Error::Dataset(format!("checkpoint lacks parameter `{missing}`")));
        }
        Ok((store, index.architecture))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    version: u32,
    architecture: Architecture,
    params: Vec<CheckpointEntry>,
}

/// Both network configurations; stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub speed: SpeedNetConfig,
    pub recon: ReconConfig,
}

impl Architecture {
    pub fn param_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut shapes = SpeedNet::new(self.speed.clone())?.param_shapes();
        shapes.extend(ReconNet::new(self.recon.clone())?.param_shapes());
        Ok(shapes)
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        SpeedNet::new(self.speed.clone())?.init(&mut store, rng)?;
        ReconNet::new(self.recon.clone())?.init(&mut store, rng)?;
        Ok(store)
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

// ---- sound-speed network -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedNetConfig {
    pub hidden: Vec<usize>,
    /// Frequency scale applied to the first layer's pre-activation.
    pub omega0: f64,
    /// Output range `(c_m, c_M)`.
    pub bounds: (f64, f64),
}

impl Default for SpeedNetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50, 50],
            omega0: 30.0,
            bounds: crate::speed::DEFAULT_BOUNDS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpeedNet {
    cfg: SpeedNetConfig,
}

impl SpeedNet {
    pub const PREFIX: &'static str = "speed.";

    pub fn new(cfg: SpeedNetConfig) -> Result<Self> {
        if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
            return Err(Error::Config("speed network needs nonempty hidden layers".into()));
        }
        if !(cfg.bounds.0 >= 0.0 && cfg.bounds.1 > cfg.bounds.0) {
            return Err(Error::Config(format!("bad speed bounds {:?}", cfg.bounds)));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SpeedNetConfig {
        &self.cfg
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![2];
        w.extend(&self.cfg.hidden);
        w.push(1);
        w
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let w = self.widths();
        let mut shapes = BTreeMap::new();
        for l in 0..w.len() - 1 {
            shapes.insert(format!("speed.l{l}.w"), vec![w[l], w[l + 1]]);
            shapes.insert(format!("speed.l{l}.b"), vec![1, w[l + 1]]);
        }
        shapes
    }

    /// First layer `U(±1/fan_in)`, later layers `U(±√(6/fan_in)/ω₀)`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let w = self.widths();
        for l in 0..w.len() - 1 {
            let fan_in = w[l] as f64;
            let bound = if l == 0 {
                1.0 / fan_in
            } else {
                (6.0 / fan_in).sqrt() / self.cfg.omega0
            };
            store.insert(format!("speed.l{l}.w"), uniform(&[w[l], w[l + 1]], bound, rng))?;
            store.insert(format!("speed.l{l}.b"), uniform(&[1, w[l + 1]], bound, rng))?;
        }
        Ok(())
    }

    /// `c_m + (c_M − c_m)(tanh(MLP(x)) + 1)/2` for points `[P, 2]`; returns `[P]`.
    pub fn forward_points(&self, g: &mut Graph, p: &BoundParams, points: Var) -> Result<Var> {
        let n_pts = g.shape(points)[0];
        let ones = g.constant(Tensor::full(&[n_pts, 1], 1.0));
        let n_layers = self.widths().len() - 1;
        let mut h = points;
        for l in 0..n_layers {
            let w = p.get(&format!("speed.l{l}.w"))?;
            let b = p.get(&format!("speed.l{l}.b"))?;
            let xw = g.matmul(h, w)?;
            let bias = g.matmul(ones, b)?;
            let mut z = g.add(xw, bias)?;
            if l + 1 == n_layers {
                h = z;
                break;
            }
            if l == 0 {
                z = g.scale(z, self.cfg.omega0)?;
            }
            h = g.sin(z)?;
        }
        let t = g.tanh(h)?;
        let (lo, hi) = self.cfg.bounds;
        let half = 0.5 * (hi - lo);
        let scaled = g.scale(t, half)?;
        let c = g.add_scalar(scaled, lo + half)?;
        g.reshape(c, &[n_pts])
    }

    /// Speed at arbitrary points: network output where `x² + y² ≤ 1`,
    /// `exterior[i]` elsewhere.
    pub fn eval(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        points: &[(f64, f64)],
        exterior: &[f64],
    ) -> Result<Var> {
        if points.len() != exterior.len() || points.is_empty() {
            return Err(Error::InvalidShape {
                op: "speednet_eval",
                reason: format!("{} points with {} exterior values", points.len(), exterior.len()),
            });
        }
        let interior: Vec<usize> = (0..points.len())
            .filter(|&i| points[i].0.powi(2) + points[i].1.powi(2) <= 1.0)
            .collect();
        let base = g.constant(Tensor::new(vec![points.len()], exterior.to_vec())?);
        if interior.is_empty() {
            return Ok(base);
        }
        let coords: Vec<f64> = interior
            .iter()
            .flat_map(|&i| [points[i].0, points[i].1])
            .collect();
        let xy = g.constant(Tensor::new(vec![interior.len(), 2], coords)?);
        let inside = self.forward_points(g, p, xy)?;
        g.scatter(base, inside, &Arc::new(interior))
    }

    /// `c̃` on every grid node, `exterior` (same shape as the grid) supplying
    /// the values outside the unit disk.
    pub fn rasterize(&self, g: &mut Graph, p: &BoundParams, grid: &SimGrid, exterior: &Tensor) -> Result<Var> {
        if exterior.shape() != grid.shape() {
            return Err(Error::ShapeMismatch {
                op: "speednet rasterize",
                lhs: exterior.shape().to_vec(),
                rhs: grid.shape().to_vec(),
            });
        }
        let points: Vec<(f64, f64)> = (0..grid.len()).map(|i| grid.node_xy(i)).collect();
        let flat = self.eval(g, p, &points, exterior.data())?;
        g.reshape(flat, &grid.shape())
    }

    /// Graph-free rasterization of the current estimate.
    pub fn rasterize_plain(&self, store: &ParamStore, grid: &SimGrid, exterior: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_prefix(&mut g, Self::PREFIX);
        let c = self.rasterize(&mut g, &p, grid, exterior)?;
        Ok(g.value(c).clone())
    }
}

// ---- reconstruction network ---------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    /// Square extent the sinogram is resampled to.
    pub input_extent: usize,
    /// Extent of the dense image-domain map.
    pub core_extent: usize,
    pub output_extent: usize,
    pub enc_channels: usize,
    pub core_channels: usize,
    pub dec_channels: usize,
    pub res_channels: usize,
    pub res_blocks: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            input_extent: 128,
            core_extent: 64,
            output_extent: 128,
            enc_channels: 16,
            core_channels: 4,
            dec_channels: 16,
            res_channels: 8,
            res_blocks: 2,
        }
    }
}

impl ReconConfig {
    /// Default layout with every extent matched to an `n × n` grid.
    pub fn for_grid(n: usize) -> Self {
        Self {
            input_extent: n,
            core_extent: n / 2,
            output_extent: n,
            ..Self::default()
        }
    }
}

const KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct ReconNet {
    cfg: ReconConfig,
    n_pool: usize,
    n_up: usize,
}

fn log2_ratio(big: usize, small: usize) -> Option<usize> {
    (small > 0 && big >= small && big % small == 0 && (big / small).is_power_of_two())
        .then(|| (big / small).trailing_zeros() as usize)
}

impl ReconNet {
    pub const PREFIX: &'static str = "recon.";

    pub fn new(cfg: ReconConfig) -> Result<Self> {
        let bad = |m: &str| Err(Error::Config(format!("reconstruction network: {m} ({cfg:?})")));
        let Some(n_pool) = log2_ratio(cfg.input_extent, cfg.core_extent) else {
            return bad("input extent must be a power-of-two multiple of the core extent");
        };
        let n_up = match log2_ratio(cfg.output_extent, cfg.core_extent) {
            Some(k) if k >= 1 => k,
            _ => return bad("output extent must be at least twice the core extent, by powers of two"),
        };
        if cfg.core_extent < KERNEL
            || [cfg.enc_channels, cfg.core_channels, cfg.dec_channels, cfg.res_channels].contains(&0)
        {
            return bad("extents and channel counts must be positive");
        }
        Ok(Self { cfg, n_pool, n_up })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let c = &self.cfg;
        let k = KERNEL;
        let mut s = BTreeMap::new();
        for i in 0..self.n_pool.max(1) {
            let cin = if i == 0 { 1 } else { c.enc_channels };
            s.insert(format!("recon.enc{i}.conv_a"), vec![c.enc_channels, cin, k, k]);
            s.insert(format!("recon.enc{i}.conv_b"), vec![c.enc_channels, c.enc_channels, k, k]);
        }
        s.insert("recon.enc_out".into(), vec![c.core_channels, c.enc_channels, k, k]);
        let core = c.core_extent * c.core_extent;
        s.insert("recon.core".into(), vec![core, core]);
        for i in 0..self.n_up {
            let cin = if i == 0 { c.core_channels } else { c.res_channels };
            s.insert(format!("recon.dec{i}.deconv"), vec![cin, c.dec_channels, 2, 2]);
            s.insert(format!("recon.dec{i}.conv"), vec![c.res_channels, c.dec_channels, k, k]);
        }
        for i in 0..c.res_blocks {
            s.insert(format!("recon.res{i}.conv_a"), vec![c.res_channels, c.res_channels, k, k]);
            s.insert(format!("recon.res{i}.conv_b"), vec![c.res_channels, c.res_channels, k, k]);
        }
        s.insert("recon.head".into(), vec![1, c.res_channels, 1, 1]);
        s
    }

    /// Variance-preserving `U(±√(3/fan_in))` for every layer; the second
    /// convolution of each residual block starts at a tenth of that so the
    /// blocks begin close to the identity.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let fan_in: usize = if name == "recon.core" {
                shape[0]
            } else if name.ends_with(".deconv") {
                // each output pixel of a stride-2, 2x2 deconvolution sees one tap per input channel
                shape[0]
            } else {
                shape[1..].iter().product()
            };
            let mut bound = (3.0 / fan_in as f64).sqrt();
            if name.starts_with("recon.res") && name.ends_with("conv_b") {
                bound *= 0.1;
            }
            store.insert(name, uniform(&shape, bound, rng))?;
        }
        Ok(())
    }

    /// Bilinear resampling of a `[rows, cols]` sinogram onto the square input
    /// extent (corner-aligned).
    pub fn resample_input(&self, sinogram: &Tensor) -> Result<Tensor> {
        resample_bilinear(sinogram, self.cfg.input_extent, self.cfg.input_extent)
    }

    /// Full forward pass from a raw sinogram to the calibrated image
    /// `[output_extent, output_extent]`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, sinogram: &Tensor) -> Result<Var> {
        let e = self.cfg.input_extent;
        let x = self.resample_input(sinogram)?.reshape(&[1, e, e])?;
        let x = g.constant(x);
        self.forward_resampled(g, p, x)
    }

    /// Forward pass from an input already shaped `[1, E, E]`.
    pub fn forward_resampled(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let c = &self.cfg;
        let e = c.input_extent;
        if g.shape(x) != [1, e, e] {
            return Err(Error::ShapeMismatch {
                op: "reconnet_forward",
                lhs: g.shape(x).to_vec(),
                rhs: vec![1, e, e],
            });
        }
        // Step 1: convolution + average pooling down to the core extent.
        let mut h = x;
        for i in 0..self.n_pool.max(1) {
            h = g.conv2d(h, p.get(&format!("recon.enc{i}.conv_a"))?)?;
            h = g.conv2d(h, p.get(&format!("recon.enc{i}.conv_b"))?)?;
            if i < self.n_pool {
                h = g.avgpool2d(h, 2, 2)?;
            }
        }
        h = g.conv2d(h, p.get("recon.enc_out")?)?;

        // Step 2: the same dense map applied to every channel.
        let ce = c.core_extent;
        h = g.reshape(h, &[c.core_channels, ce * ce])?;
        h = g.matmul(h, p.get("recon.core")?)?;
        h = g.reshape(h, &[c.core_channels, ce, ce])?;

        // Step 3: stride-2 deconvolution + convolution per doubling.
        for i in 0..self.n_up {
            h = g.conv_transpose2d(h, p.get(&format!("recon.dec{i}.deconv"))?)?;
            h = g.conv2d(h, p.get(&format!("recon.dec{i}.conv"))?)?;
        }

        // Step 4: residual refinement.
        for i in 0..c.res_blocks {
            let a = g.conv2d(h, p.get(&format!("recon.res{i}.conv_a"))?)?;
            let a = g.relu(a)?;
            let b = g.conv2d(a, p.get(&format!("recon.res{i}.conv_b"))?)?;
            h = g.add(h, b)?;
        }
        h = g.conv2d(h, p.get("recon.head")?)?;
        let o = c.output_extent;
        h = g.reshape(h, &[o, o])?;

        // Step 5: calibrate into (0, 1).
        calibrate(g, h)
    }

    /// Graph-free reconstruction.
    pub fn reconstruct(&self, store: &ParamStore, sinogram: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_prefix(&mut g, Self::PREFIX);
        let f = self.forward(&mut g, &p, sinogram)?;
        Ok(g.value(f).clone())
    }
}

/// `x ↦ 0.5 tanh(x − 0.5) + 0.5`.
pub fn calibrate(g: &mut Graph, x: Var) -> Result<Var> {
    let shifted = g.add_scalar(x, -0.5)?;
    let t = g.tanh(shifted)?;
    let half = g.scale(t, 0.5)?;
    g.add_scalar(half, 0.5)
}

/// Corner-aligned bilinear resampling of a 2-D tensor.
pub fn resample_bilinear(src: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let [sr, sc] = src.shape() else {
        return Err(Error::InvalidShape {
            op: "resample",
            reason: format!("expected a 2-D tensor, got {:?}", src.shape()),
        });
    };
    let (sr, sc) = (*sr, *sc);
    if sr == rows && sc == cols {
        return Ok(src.clone());
    }
    let pos = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let f = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (f.floor() as usize).min(n_in - 2);
        (i0, i0 + 1, f - i0 as f64)
    };
    let d = src.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1, tr) = pos(r, rows, sr);
        for c in 0..cols {
            let (c0, c1, tc) = pos(c, cols, sc);
            let top = (1.0 - tc) * d[r0 * sc + c0] + tc * d[r0 * sc + c1];
            let bot = (1.0 - tc) * d[r1 * sc + c0] + tc * d[r1 * sc + c1];
            out.push((1.0 - tr) * top + tr * bot);
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Entries of a bias-free dense map from `side × side` inputs to outputs of
/// the same size.
pub fn dense_param_count(side: u64) -> u64 {
    let n = side * side;
    n * n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_recon() -> ReconConfig {
        ReconConfig {
            input_extent: 16,
            core_extent: 8,
            output_extent: 16,
            enc_channels: 3,
            core_channels: 2,
            dec_channels: 3,
            res_channels: 2,
            res_blocks: 1,
        }
    }

    #[test]
    fn speed_param_count() {
        let net = SpeedNet::new(SpeedNetConfig::default()).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.param_count(), 2 * 50 + 50 + 50 * 50 + 50 + 50 * 50 + 50 + 50 + 1);
        assert_eq!(store.param_count(), 5301);
    }

    #[test]
    fn default_core_has_paper_size() {
        let net = ReconNet::new(ReconConfig::default()).unwrap();
        let shapes = net.param_shapes();
        let core: usize = shapes["recon.core"].iter().product();
        assert_eq!(core, 16_777_216);
        assert_eq!(dense_param_count(64), 16_777_216);
        assert_eq!(dense_param_count(256), 4_294_967_296);
    }

    #[test]
    fn recon_layers_carry_no_bias() {
        let net = ReconNet::new(ReconConfig::default()).unwrap();
        for (name, shape) in net.param_shapes() {
            assert!(!name.ends_with(".b") && !name.contains("bias"), "{name}");
            assert!(shape.len() == 4 || name == "recon.core", "{name}: {shape:?}");
        }
    }

    #[test]
    fn speed_output_within_bounds_and_exterior_copied() {
        let cfg = SpeedNetConfig {
            bounds: (0.05, 1.25),
            ..Default::default()
        };
        let net = SpeedNet::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.init(&mut store, &mut rng).unwrap();
        // blow up the output layer so tanh saturates somewhere
        let w = store.get("speed.l3.w").unwrap().scaled(500.0);
        store.set("speed.l3.w", w).unwrap();
        let points = [(0.0, 0.0), (0.3, -0.4), (0.9, 0.1), (1.2, 0.0), (-0.8, -0.8)];
        let exterior = [9.0, 9.0, 9.0, 0.77, 0.66];
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c = net.eval(&mut g, &p, &points, &exterior).unwrap();
        let vals = g.value(c).data().to_vec();
        for &v in &vals[..3] {
            assert!(v >= 0.05 && v <= 1.25);
        }
        assert_eq!(vals[3], 0.77);
        assert_eq!(vals[4], 0.66);

        // exterior entries carry no parameter gradient
        let sel = g.constant(Tensor::new(vec![5], vec![0., 0., 0., 1., 1.]).unwrap());
        let masked = g.mul(c, sel).unwrap();
        let loss = g.sum(masked).unwrap();
        let mut grads = g.backward(loss).unwrap();
        for (_, t) in p.collect(&mut grads) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn recon_output_shape_and_range() {
        let net = ReconNet::new(small_recon()).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        net.init(&mut store, &mut rng).unwrap();
        let sino = Tensor::from_fn(&[12, 40], |i| 2.0 * ((i as f64) * 0.3).sin());
        let f = net.reconstruct(&store, &sino).unwrap();
        assert_eq!(f.shape(), &[16, 16]);
        assert!(f.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // far outside the data range tanh rounds to ±1 in f64; the closed range still holds
        let f = net.reconstruct(&store, &sino.scaled(1e6)).unwrap();
        assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_incompatible_extents() {
        let mut cfg = small_recon();
        cfg.output_extent = 8;
        assert!(ReconNet::new(cfg).is_err());
        let mut cfg = small_recon();
        cfg.input_extent = 24;
        assert!(ReconNet::new(cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let arch = Architecture {
            speed: SpeedNetConfig {
                hidden: vec![4, 4],
                ..Default::default()
            },
            recon: small_recon(),
        };
        let store = arch.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path(), &arch).unwrap();
        let (back, arch_back) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(back, store);
        assert_eq!(arch_back, arch);

        // tamper with the declared architecture
        let path = dir.path().join("index.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"core_channels\": 2", "\"core_channels\": 3", 1)).unwrap();
        assert!(ParamStore::load(dir.path()).is_err());
    }

    #[test]
    fn resample_preserves_corners_and_identity() {
        let t = Tensor::from_fn(&[5, 9], |i| i as f64);
        assert_eq!(resample_bilinear(&t, 5, 9).unwrap(), t);
        let r = resample_bilinear(&t, 8, 8).unwrap();
        assert_eq!(r.at2(0, 0), 0.0);
        assert!((r.at2(7, 7) - 44.0).abs() < 1e-12);
        assert!((r.at2(0, 7) - 8.0).abs() < 1e-12);
    }
}
