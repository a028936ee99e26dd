//! Losses, Adam, the training loop and evaluation metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::{Architecture, BoundParams, ParamStore, ReconNet, SpeedNet};
use crate::speed::masked_relative_error;
use crate::tensor::Tensor;
use crate::wave::{check_stability, WaveOperator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_tv: f64,
    pub lambda_i: f64,
}

impl LossWeights {
    /// `λ_D = λ_N = λ_I = 1`, `λ_TV = σ/5`.
    pub fn for_noise(sigma: f64) -> Self {
        Self {
            lambda_d: 1.0,
            lambda_n: 1.0,
            lambda_tv: sigma / 5.0,
            lambda_i: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_d, self.lambda_n, self.lambda_tv, self.lambda_i];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_noise(0.0)
    }
}

/// Anisotropic total variation `Σ|∂ₓx| + Σ|∂ᵧx|` with one-sided forward
/// differences and no wrap-around.
pub fn tv_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let dy = g.diff(x, 0)?;
    let dx = g.diff(x, 1)?;
    let ay = g.abs(dy)?;
    let ax = g.abs(dx)?;
    let sy = g.sum(ay)?;
    let sx = g.sum(ax)?;
    g.add(sy, sx)
}

fn squared_residual(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let r = g.sub(pred, t)?;
    g.sum_squares(r)
}

fn accumulate(g: &mut Graph, total: &mut Option<Var>, term: Var, weight: f64) -> Result<()> {
    let scaled = g.scale(term, weight)?;
    *total = Some(match *total {
        Some(t) => g.add(t, scaled)?,
        None => scaled,
    });
    Ok(())
}

fn finish(g: &mut Graph, total: Option<Var>) -> Var {
    total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// `λ_D Σ‖D¹ᵢ − D̃¹ᵢ‖² + λ_N Σ‖D^{1−h}ᵢ − D̃^{1−h}ᵢ‖² + λ_TV Σ tv(F̃ᵢ)` given
/// reconstructions `F̃ᵢ` and a speed field already on the graph.
pub fn implicit_objective(
    g: &mut Graph,
    op: &WaveOperator,
    w: &LossWeights,
    images: &[Var],
    c: Var,
    measured: &[(&Tensor, &Tensor)],
) -> Result<Var> {
    check_batch(images.len(), measured.len())?;
    let mut total = None;
    for (&f, &(d1, d1mh)) in images.iter().zip(measured) {
        if w.lambda_d > 0.0 || w.lambda_n > 0.0 {
            let (s1, s1mh) = op.forward(g, f, c)?;
            if w.lambda_d > 0.0 {
                let r = squared_residual(g, s1, d1)?;
                accumulate(g, &mut total, r, w.lambda_d)?;
            }
            if w.lambda_n > 0.0 {
                let r = squared_residual(g, s1mh, d1mh)?;
                accumulate(g, &mut total, r, w.lambda_n)?;
            }
        }
        if w.lambda_tv > 0.0 {
            let tv = tv_norm(g, f)?;
            accumulate(g, &mut total, tv, w.lambda_tv)?;
        }
    }
    Ok(finish(g, total))
}

/// `λ_D Σ‖D_c̃ f̃ᵢ − D¹ᵢ‖² + λ_I Σ‖f̃ᵢ − fᵢ‖² + λ_TV Σ tv(f̃ᵢ)`; `pairs` holds
/// `(fᵢ, D¹ᵢ)`.
pub fn supervised_objective(
    g: &mut Graph,
    op: &WaveOperator,
    w: &LossWeights,
    images: &[Var],
    c: Var,
    pairs: &[(&Tensor, &Tensor)],
) -> Result<Var> {
    check_batch(images.len(), pairs.len())?;
    let mut total = None;
    for (&f_hat, &(f, d1)) in images.iter().zip(pairs) {
        if w.lambda_d > 0.0 {
            let (s1, _) = op.forward(g, f_hat, c)?;
            let r = squared_residual(g, s1, d1)?;
            accumulate(g, &mut total, r, w.lambda_d)?;
        }
        if w.lambda_i > 0.0 {
            let r = squared_residual(g, f_hat, f)?;
            accumulate(g, &mut total, r, w.lambda_i)?;
        }
        if w.lambda_tv > 0.0 {
            let tv = tv_norm(g, f_hat)?;
            accumulate(g, &mut total, tv, w.lambda_tv)?;
        }
    }
    Ok(finish(g, total))
}

fn check_batch(images: usize, data: usize) -> Result<()> {
    if images == 0 || images != data {
        return Err(Error::InvalidShape {
            op: "loss",
            reason: format!("batch of {images} images against {data} measurements"),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Implicit,
    Supervised,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "implicit" => Ok(Mode::Implicit),
            "supervised" => Ok(Mode::Supervised),
            other => Err(Error::Config(format!("unknown mode `{other}` (implicit | supervised)"))),
        }
    }
}

/// Both networks together with the fixed pieces of the forward model.
pub struct Problem<'a> {
    pub speed: SpeedNet,
    pub recon: ReconNet,
    pub op: &'a WaveOperator,
    /// Known speed values used outside the unit disk.
    pub exterior: &'a Tensor,
    pub weights: LossWeights,
}

/// The scalar loss plus the intermediate nodes worth inspecting.
pub struct LossOutput {
    pub loss: Var,
    pub speed: Var,
    pub images: Vec<Var>,
}

impl<'a> Problem<'a> {
    pub fn new(arch: &Architecture, op: &'a WaveOperator, exterior: &'a Tensor, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let speed = SpeedNet::new(arch.speed.clone())?;
        let recon = ReconNet::new(arch.recon.clone())?;
        let n = op.config().grid.n();
        if recon.config().output_extent != n {
            return Err(Error::Config(format!(
                "reconstruction output extent {} does not match the {n}x{n} grid",
                recon.config().output_extent
            )));
        }
        check_stability(speed.config().bounds.1, op.factor())?;
        Ok(Self {
            speed,
            recon,
            op,
            exterior,
            weights,
        })
    }

    fn common(&self, g: &mut Graph, p: &BoundParams, batch: &[&Sample]) -> Result<(Var, Vec<Var>)> {
        let c = self.speed.rasterize(g, p, &self.op.config().grid, self.exterior)?;
        let images = batch
            .iter()
            .map(|s| self.recon.forward(g, p, &s.d1))
            .collect::<Result<Vec<_>>>()?;
        Ok((c, images))
    }

    /// Measurement-consistency loss; never reads ground-truth images.
    pub fn loss_implicit(&self, g: &mut Graph, p: &BoundParams, batch: &[&Sample]) -> Result<LossOutput> {
        let (c, images) = self.common(g, p, batch)?;
        let measured: Vec<_> = batch.iter().map(|s| (&s.d1, &s.d1mh)).collect();
        let loss = implicit_objective(g, self.op, &self.weights, &images, c, &measured)?;
        Ok(LossOutput { loss, speed: c, images })
    }

    pub fn loss_supervised(&self, g: &mut Graph, p: &BoundParams, batch: &[&Sample]) -> Result<LossOutput> {
        let truths = batch
            .iter()
            .map(|s| {
                s.f.as_ref()
                    .ok_or_else(|| Error::Dataset(format!("sample {} has no ground-truth image", s.index)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (c, images) = self.common(g, p, batch)?;
        let pairs: Vec<_> = truths.iter().zip(batch).map(|(f, s)| (*f, &s.d1)).collect();
        let loss = supervised_objective(g, self.op, &self.weights, &images, c, &pairs)?;
        Ok(LossOutput { loss, speed: c, images })
    }

    pub fn loss(&self, mode: Mode, g: &mut Graph, p: &BoundParams, batch: &[&Sample]) -> Result<LossOutput> {
        match mode {
            Mode::Implicit => self.loss_implicit(g, p, batch),
            Mode::Supervised => self.loss_supervised(g, p, batch),
        }
    }
}

// ---- optimizer ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, t) in store.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: t.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let g = &grads[&name];
        let theta = store.get_mut(&name).expect("name taken from the store");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((th, mi), vi), &gi) in theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let step = lr * m_hat / (v_hat.sqrt() + eps);
            // skipping zero steps keeps signed zeros intact
            if step != 0.0 {
                *th -= step;
            }
        }
    }
    Ok(())
}

// ---- metrics --------------------------------------------------------------

/// `‖truth − estimate‖₂ / ‖truth‖₂`.
pub fn relative_error(truth: &Tensor, estimate: &Tensor) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::ShapeMismatch {
            op: "relative_error",
            lhs: truth.shape().to_vec(),
            rhs: estimate.shape().to_vec(),
        });
    }
    let den = truth.norm2();
    if den == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let num: f64 = truth
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub f_rel: Vec<f64>,
    pub mean_f_rel: f64,
    /// Speed error over grid nodes inside the unit disk.
    pub c_rel: f64,
}

/// Scores given reconstructions and a speed estimate against ground truth.
pub fn score(
    split: Split,
    truths: &[Tensor],
    recons: &[Tensor],
    c_truth: &Tensor,
    c_est: &Tensor,
    inside: &[usize],
) -> Result<EvalReport> {
    if truths.is_empty() || truths.len() != recons.len() {
        return Err(Error::InvalidShape {
            op: "evaluate",
            reason: format!("{} ground-truth images for {} reconstructions", truths.len(), recons.len()),
        });
    }
    let f_rel = truths
        .iter()
        .zip(recons)
        .map(|(t, r)| relative_error(t, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        split,
        samples: f_rel.len(),
        mean_f_rel: f_rel.iter().sum::<f64>() / f_rel.len() as f64,
        f_rel,
        c_rel: masked_relative_error(c_truth, c_est, inside)?,
    })
}

/// Reconstructs every sample of `split` and scores against the ground truth.
pub fn evaluate(arch: &Architecture, store: &ParamStore, ds: &Dataset, split: Split) -> Result<EvalReport> {
    let sim = ds.sim_config()?;
    let recon = ReconNet::new(arch.recon.clone())?;
    let speed = SpeedNet::new(arch.speed.clone())?;
    let samples = ds.load_split(split)?;
    let mut truths = Vec::with_capacity(samples.len());
    let mut recons = Vec::with_capacity(samples.len());
    for s in samples {
        let f = s
            .f
            .ok_or_else(|| Error::Dataset(format!("sample {} has no ground-truth image", s.index)))?;
        recons.push(recon.reconstruct(store, &s.d1)?);
        truths.push(f);
    }
    let c_truth = ds.speed()?;
    let c_est = speed.rasterize_plain(store, &sim.grid, &c_truth)?;
    score(split, &truths, &recons, &c_truth, &c_est, &sim.grid.unit_disk_indices())
}

// ---- training loop --------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// `None` derives the weights from the dataset's noise level.
    pub weights: Option<LossWeights>,
    pub arch: Architecture,
    pub val_every: usize,
    /// Caps the number of validation samples scored per validation pass.
    pub val_limit: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: Mode, arch: Architecture) -> Self {
        Self {
            mode,
            iterations: 100_000,
            batch_size: 2,
            adam: AdamConfig::default(),
            seed: 0,
            weights: None,
            arch,
            val_every: 500,
            val_limit: None,
            checkpoint_dir: None,
            metrics_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_f_rel: Option<f64>,
    pub c_rel: f64,
}

pub const CSV_HEADER: &str = "iteration,train_loss,val_loss,val_f_rel,c_rel";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: ParamStore,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub last: ParamStore,
    pub history: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train_loss).collect()
    }
}

/// Mean of the first and last `window` losses.
pub fn loss_trend(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

struct Validation {
    loss: f64,
    f_rel: Option<f64>,
}

fn validate(problem: &Problem<'_>, mode: Mode, store: &ParamStore, samples: &[Sample]) -> Result<Validation> {
    let mut loss = 0.0;
    let mut f_rel = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = problem.loss(mode, &mut g, &p, &[s])?;
        loss += g.value(out.loss).item();
        if mode == Mode::Supervised {
            if let Some(f) = &s.f {
                f_rel += relative_error(f, g.value(out.images[0]))?;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(Validation {
        loss: loss / n,
        f_rel: (mode == Mode::Supervised).then_some(f_rel / n),
    })
}

fn without_ground_truth(mut samples: Vec<Sample>) -> Vec<Sample> {
    for s in &mut samples {
        s.f = None;
    }
    samples
}

/// Runs Adam on the configured loss; `observe` sees every metrics row.
pub fn train(cfg: &TrainConfig, ds: &Dataset, mut observe: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.iterations == 0 || cfg.val_every == 0 {
        return Err(Error::Config("iterations, batch size and validation cadence must be positive".into()));
    }
    let manifest = ds.manifest();
    let weights = cfg.weights.unwrap_or_else(|| LossWeights::for_noise(manifest.noise_sigma));
    let sim = ds.sim_config()?;
    let op = WaveOperator::new(sim)?;
    let c_truth = ds.speed()?;
    let problem = Problem::new(&cfg.arch, &op, &c_truth, weights)?;
    let inside = sim.grid.unit_disk_indices();

    let (mut train_set, mut val_set) = (ds.load_split(Split::Train)?, ds.load_split(Split::Val)?);
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if let Some(k) = cfg.val_limit {
        val_set.truncate(k);
    }
    if val_set.is_empty() {
        val_set = train_set.clone();
    }
    match cfg.mode {
        Mode::Supervised => {
            if !ds.has_ground_truth(Split::Train) || train_set.iter().any(|s| s.f.is_none()) {
                return Err(Error::Dataset("supervised training needs ground-truth images".into()));
            }
        }
        Mode::Implicit => {
            train_set = without_ground_truth(train_set);
            val_set = without_ground_truth(val_set);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = cfg.arch.init(&mut rng)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut metrics = match &cfg.metrics_csv {
        Some(path) => Some((csv::Writer::from_path(path)?, path.as_path())),
        None => None,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(ParamStore, usize, f64)> = None;

    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = problem.loss(cfg.mode, &mut g, &p, &batch)?;
        let loss = g.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(it));
        }
        let c_rel = masked_relative_error(&c_truth, g.value(out.speed), &inside)?;
        let mut grads = g.backward(out.loss)?;
        let grads = p.collect(&mut grads);
        drop(g);
        adam_step(&mut store, &grads, &mut adam)?;

        let mut row = MetricsRow {
            iteration: it,
            train_loss: loss,
            val_loss: None,
            val_f_rel: None,
            c_rel,
        };
        if (it + 1) % cfg.val_every == 0 || it + 1 == cfg.iterations {
            let v = validate(&problem, cfg.mode, &store, &val_set)?;
            row.val_loss = Some(v.loss);
            row.val_f_rel = v.f_rel;
            if best.as_ref().is_none_or(|b| v.loss < b.2) {
                if let Some(dir) = &cfg.checkpoint_dir {
                    store.save(dir, &cfg.arch)?;
                }
                best = Some((store.clone(), it + 1, v.loss));
            }
        }
        if let Some((w, _)) = &mut metrics {
            w.serialize(&row)?;
        }
        observe(&row);
        history.push(row);
    }
    if let Some((w, path)) = &mut metrics {
        w.flush().map_err(|e| Error::io(*path, e))?;
    }
    let (best, best_iteration, best_val_loss) = best.expect("the last iteration always validates");
    Ok(TrainOutcome {
        best,
        best_iteration,
        best_val_loss,
        last: store,
        history,
    })
}

/// Writes rows in the layout produced by [`train`].
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Dataset(format!("{} is not a metrics file", path.display())));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_examples() {
        let mut g = Graph::new();
        let flat = g.constant(Tensor::full(&[5, 5], 0.3));
        let tv = tv_norm(&mut g, flat).unwrap();
        assert_eq!(g.value(tv).item(), 0.0);

        let n = 7;
        let step = Tensor::from_fn(&[n, n], |i| if i % n >= 3 { 1.0 } else { 0.0 });
        let x = g.constant(step.clone());
        let tv = tv_norm(&mut g, x).unwrap();
        assert_eq!(g.value(tv).item(), n as f64);

        let x = g.constant(step.scaled(-2.5));
        let tv = tv_norm(&mut g, x).unwrap();
        assert_eq!(g.value(tv).item(), 2.5 * n as f64);
    }

    #[test]
    fn tv_weight_from_noise() {
        assert!((LossWeights::for_noise(0.01).lambda_tv - 0.002).abs() < 1e-18);
        assert!(LossWeights { lambda_d: -1.0, ..Default::default() }.validate().is_err());
    }

    fn store_with(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut store = store_with(&[0.5, -1.0]);
        let before = store.clone();
        let mut st = AdamState::new(AdamConfig::default());
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        adam_step(&mut store, &grads, &mut st).unwrap();
        assert_eq!(store, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g0 in [3.0, -0.02, 1e-6] {
            let mut store = store_with(&[1.0]);
            let mut st = AdamState::new(AdamConfig::default());
            let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![g0]).unwrap())]);
            adam_step(&mut store, &grads, &mut st).unwrap();
            let expect = 1.0 - 1e-3 * g0 / (g0.abs() + 1e-8);
            assert!((store.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_lr_is_bitwise_noop() {
        let mut store = store_with(&[0.1, -0.0, 7.0]);
        let before = store.clone();
        let mut st = AdamState::new(AdamConfig { lr: 0.0, ..Default::default() });
        for k in 0..3 {
            let grads = BTreeMap::from([(
                "w".to_string(),
                Tensor::new(vec![3], vec![1.0 + k as f64, -4.0, 1e-3]).unwrap(),
            )]);
            adam_step(&mut store, &grads, &mut st).unwrap();
        }
        for (a, b) in store.get("w").unwrap().data().iter().zip(before.get("w").unwrap().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_missing_gradient() {
        let mut store = store_with(&[1.0]);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam_step(&mut store, &BTreeMap::new(), &mut st),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn relative_error_examples() {
        let f = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.37).cos());
        assert_eq!(relative_error(&f, &f).unwrap(), 0.0);
        assert_eq!(relative_error(&f, &Tensor::zeros(&[4, 4])).unwrap(), 1.0);
        assert!((relative_error(&f, &f.scaled(2.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            relative_error(&Tensor::zeros(&[2]), &f.clone().reshape(&[16]).unwrap()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            relative_error(&Tensor::zeros(&[2]), &Tensor::zeros(&[2])),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn trend_windows() {
        let l = [4.0, 2.0, 1.0, 1.0];
        assert_eq!(loss_trend(&l, 2), Some((3.0, 1.0)));
        assert_eq!(loss_trend(&l, 10), Some((2.0, 2.0)));
        assert_eq!(loss_trend(&[], 3), None);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let row = MetricsRow {
            iteration: 9,
            train_loss: 0.125,
            val_loss: None,
            val_f_rel: Some(0.5),
            c_rel: 0.03,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, std::slice::from_ref(&row)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(read_metrics_csv(&path).unwrap(), vec![row]);
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(read_metrics_csv(&path).is_err());
    }
}
