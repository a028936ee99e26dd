//! k-space pseudospectral simulation of `∂ₜ²p = c(x) Δp` with `p(·,0) = f`,
//! `∂ₜp(·,0) = 0`, and the boundary traces recorded on detector rings.
//!
//! One time step is
//!
//! ```text
//! pⁿ⁺¹ = 2pⁿ − pⁿ⁻¹ − c ⊙ F⁻¹[λ · F[pⁿ]],   λ = 4 sin²(Δt |k| / 2)
//! ```
//!
//! with `|k| = 2π|ξ|` for the discrete frequencies `ξ` of the grid. The
//! zero initial velocity gives `p⁻¹ = p¹`, hence
//! `p¹ = f − ½ c ⊙ F⁻¹[λ · F[f]]`.
//!
//! Every pressure field is kept on the graph so that sinograms are
//! differentiable in both `f` and `c`; [`WaveOperator::simulate`] is the
//! streaming variant that retains only two fields.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft;
use crate::graph::{Graph, Var};
use crate::kernels::BilinearTaps;
use crate::tensor::Tensor;

/// Square simulation domain `[-L, L]²` sampled at `n × n` nodes
/// `x_i = -L + i·dx`, `dx = 2L/n`. Rows index `y`, columns index `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimGrid {
    n: usize,
    half_width: f64,
}

impl SimGrid {
    pub fn new(n: usize, half_width: f64) -> Result<Self> {
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::NotPowerOfTwo(n));
        }
        if !(half_width > 1.0) {
            return Err(Error::Config(format!(
                "half width {half_width} must exceed the unit detector radius"
            )));
        }
        Ok(Self { n, half_width })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx()
    }

    /// Physical position `(x, y)` of flat node index `idx`.
    pub fn node_xy(&self, idx: usize) -> (f64, f64) {
        (self.coord(idx % self.n), self.coord(idx / self.n))
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.n, self.n]
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat indices of the nodes with `x² + y² ≤ 1`.
    pub fn unit_disk_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let (x, y) = self.node_xy(i);
                x * x + y * y <= 1.0
            })
            .collect()
    }

    /// Evaluates `f(x, y)` at every node.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor::from_fn(&[self.n, self.n], |i| {
            let (x, y) = self.node_xy(i);
            f(x, y)
        })
    }

    /// Largest absolute angular wavenumber `2π|ξ|` on the grid.
    pub fn max_wavenumber(&self) -> f64 {
        let nyq = 1.0 / (2.0 * self.dx());
        2.0 * PI * nyq * 2f64.sqrt()
    }

    /// Bilinear stencils for arbitrary points inside the covered domain.
    pub fn taps(&self, points: &[(f64, f64)]) -> Result<BilinearTaps> {
        let o = -self.half_width;
        BilinearTaps::new(self.n, self.n, (o, o), self.dx(), points)
    }
}

/// Discrete time axis `t_k = k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || n_steps < 2 {
            return Err(Error::Config(format!(
                "time grid needs dt > 0 and at least 2 steps (dt = {dt}, steps = {n_steps})"
            )));
        }
        Ok(Self { dt, n_steps })
    }

    /// 90% of the largest stable step for `c_max`, run until `t_final`.
    pub fn with_final_time(grid: &SimGrid, c_max: f64, t_final: f64) -> Result<Self> {
        let dt = 0.9 * max_stable_dt(grid, c_max);
        Self::new(dt, (t_final / dt).ceil().max(2.0) as usize)
    }

    /// Default duration `T ≥ 2·(2L)/√c_min`, long enough for waves to cross
    /// the domain twice at the slowest speed.
    pub fn default_for(grid: &SimGrid, c_min: f64, c_max: f64) -> Result<Self> {
        if !(c_min > 0.0) {
            return Err(Error::Config(format!("c_min {c_min} must be positive")));
        }
        Self::with_final_time(grid, c_max, 4.0 * grid.half_width() / c_min.sqrt())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

/// Largest `dt` for which `c_max · 4 sin²(dt|k|/2) / 4 ≤ 1` holds on every
/// bin without the spectral factor wrapping past its first maximum.
pub fn max_stable_dt(grid: &SimGrid, c_max: f64) -> f64 {
    let s = (1.0 / c_max.sqrt()).min(1.0);
    2.0 * s.asin() / grid.max_wavenumber()
}

/// Uniformly spaced detectors `(r cos 2πj/n, r sin 2πj/n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorRing {
    radius: f64,
    points: Vec<(f64, f64)>,
}

impl DetectorRing {
    pub fn new(radius: f64, n_det: usize) -> Result<Self> {
        if !(radius > 0.0) || n_det == 0 {
            return Err(Error::Config(format!(
                "detector ring needs radius > 0 and detectors (r = {radius}, n = {n_det})"
            )));
        }
        let points = (0..n_det)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / n_det as f64;
                (radius * a.cos(), radius * a.sin())
            })
            .collect();
        Ok(Self { radius, points })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Spectral factor `λ = 4 sin²(dt |k| / 2)` in FFT bin order.
#[derive(Clone, Debug)]
pub struct KSpaceFactor {
    lambda: Arc<Tensor>,
    dt: f64,
    max_wavenumber: f64,
}

/// Angular wavenumbers `2π ξ` for an FFT of length `n` with spacing `dx`.
pub fn wavenumbers(n: usize, dx: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let m = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
            2.0 * PI * m / (n as f64 * dx)
        })
        .collect()
}

pub fn make_kspace_factor(grid: &SimGrid, dt: f64) -> Result<KSpaceFactor> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt {dt} must be positive")));
    }
    let n = grid.n();
    let k = wavenumbers(n, grid.dx());
    let lambda = Tensor::from_fn(&[n, n], |i| {
        let (ky, kx) = (k[i / n], k[i % n]);
        let s = (0.5 * dt * (kx * kx + ky * ky).sqrt()).sin();
        4.0 * s * s
    });
    Ok(KSpaceFactor {
        lambda: Arc::new(lambda),
        dt,
        max_wavenumber: grid.max_wavenumber(),
    })
}

impl KSpaceFactor {
    pub fn lambda(&self) -> &Arc<Tensor> {
        &self.lambda
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[cfg(test)]
    fn from_values(lambda: Tensor, dt: f64, max_wavenumber: f64) -> Self {
        Self {
            lambda: Arc::new(lambda),
            dt,
            max_wavenumber,
        }
    }
}

/// Passes iff `c_max · λ / 4 ≤ 1` on every bin, which keeps both roots of
/// `p̂ⁿ⁺¹ = (2 − cλ) p̂ⁿ − p̂ⁿ⁻¹` on the unit circle for all `c ≤ c_max`.
pub fn check_stability(c_max: f64, factor: &KSpaceFactor) -> Result<()> {
    if !(c_max > 0.0) {
        return Err(Error::Config(format!("c_max {c_max} must be positive")));
    }
    let n = factor.lambda.shape()[1];
    for (i, &l) in factor.lambda.data().iter().enumerate() {
        let ratio = c_max * l / 4.0;
        if ratio > 1.0 {
            let s = (1.0 / c_max.sqrt()).min(1.0);
            return Err(Error::Unstable {
                row: i / n,
                col: i % n,
                ratio,
                max_dt: 2.0 * s.asin() / factor.max_wavenumber,
            });
        }
    }
    Ok(())
}

/// Runs the k-space recurrence on the graph; returns `p⁰ … p^{n_steps}`.
pub fn propagate(g: &mut Graph, f: Var, c: Var, factor: &KSpaceFactor, time: &TimeGrid) -> Result<Vec<Var>> {
    if g.shape(f) != g.shape(c) || g.shape(f) != factor.lambda.shape() {
        return Err(Error::ShapeMismatch {
            op: "propagate",
            lhs: g.shape(f).to_vec(),
            rhs: g.shape(c).to_vec(),
        });
    }
    check_stability(g.value(c).max(), factor)?;
    let lambda = &factor.lambda;
    let mut fields = Vec::with_capacity(time.n_steps() + 1);
    fields.push(f);

    let lf = g.spectral_filter(f, lambda)?;
    let clf = g.mul(c, lf)?;
    let half = g.scale(clf, 0.5)?;
    let p1 = g.sub(f, half)?;
    g.value(p1).check_finite("pressure at step 1")?;
    fields.push(p1);

    for step in 1..time.n_steps() {
        let (prev, cur) = (fields[step - 1], fields[step]);
        let lp = g.spectral_filter(cur, lambda)?;
        let clp = g.mul(c, lp)?;
        let two = g.scale(cur, 2.0)?;
        let lead = g.sub(two, prev)?;
        let next = g.sub(lead, clp)?;
        if g.value(next).check_finite("pressure").is_err() {
            return Err(Error::NonFinite(format!("pressure at step {}", step + 1)));
        }
        fields.push(next);
    }
    Ok(fields)
}

/// Samples every pressure field at the ring's detectors; the result is
/// `[n_det, n_steps + 1]`.
pub fn record_boundary(g: &mut Graph, pressures: &[Var], taps: &Arc<BilinearTaps>) -> Result<Var> {
    let traces = pressures
        .iter()
        .map(|&p| g.bilinear_sample(p, taps))
        .collect::<Result<Vec<_>>>()?;
    let by_time = g.stack(&traces)?;
    g.transpose(by_time)
}

/// Boundary measurements: row `j` is detector `j`, column `k` is time `k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub values: Tensor,
    pub radius: f64,
    pub dt: f64,
}

impl Sinogram {
    pub fn n_det(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_times(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Radial finite difference `(D¹ − D^{1−h}) / h` approximating the outward
/// normal derivative on the unit circle.
pub fn neumann_trace(outer: &Tensor, inner: &Tensor, h: f64) -> Result<Tensor> {
    if outer.shape() != inner.shape() {
        return Err(Error::ShapeMismatch {
            op: "neumann_trace",
            lhs: outer.shape().to_vec(),
            rhs: inner.shape().to_vec(),
        });
    }
    let data = outer
        .data()
        .iter()
        .zip(inner.data())
        .map(|(a, b)| (a - b) / h)
        .collect();
    Tensor::new(outer.shape().to_vec(), data)
}

/// Grid, time axis, detector count and Neumann offset of one simulation setup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub grid: SimGrid,
    pub time: TimeGrid,
    pub n_det: usize,
    pub h: f64,
}

impl SimConfig {
    pub fn new(grid: SimGrid, time: TimeGrid, n_det: usize, h: f64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::Config(format!("Neumann offset h = {h} must lie in (0, 1)")));
        }
        Ok(Self { grid, time, n_det, h })
    }
}

/// Precomputed spectral factor and detector stencils for a [`SimConfig`].
#[derive(Clone, Debug)]
pub struct WaveOperator {
    cfg: SimConfig,
    factor: KSpaceFactor,
    outer: Arc<BilinearTaps>,
    inner: Arc<BilinearTaps>,
}

impl WaveOperator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let factor = make_kspace_factor(&cfg.grid, cfg.time.dt())?;
        let outer = DetectorRing::new(1.0, cfg.n_det)?;
        let inner = DetectorRing::new(1.0 - cfg.h, cfg.n_det)?;
        Ok(Self {
            outer: Arc::new(cfg.grid.taps(outer.points())?),
            inner: Arc::new(cfg.grid.taps(inner.points())?),
            cfg,
            factor,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn factor(&self) -> &KSpaceFactor {
        &self.factor
    }

    /// Differentiable `(D¹ f, D^{1−h} f)` for initial pressure `f` and speed `c`.
    pub fn forward(&self, g: &mut Graph, f: Var, c: Var) -> Result<(Var, Var)> {
        let fields = propagate(g, f, c, &self.factor, &self.cfg.time)?;
        let d1 = record_boundary(g, &fields, &self.outer)?;
        let d1mh = record_boundary(g, &fields, &self.inner)?;
        Ok((d1, d1mh))
    }

    /// Streaming forward simulation without a graph. Produces the same bits
    /// as [`WaveOperator::forward`].
    pub fn simulate(&self, f: &Tensor, c: &Tensor) -> Result<(Sinogram, Sinogram)> {
        let shape = self.cfg.grid.shape();
        if f.shape() != shape || c.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "simulate",
                lhs: f.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        check_stability(c.max(), &self.factor)?;
        let n_t = self.cfg.time.n_steps() + 1;
        let n_det = self.cfg.n_det;
        let mut outer = vec![0.0; n_det * n_t];
        let mut inner = vec![0.0; n_det * n_t];
        let mut record = |k: usize, p: &[f64]| {
            for (j, v) in self.outer.sample(p).into_iter().enumerate() {
                outer[j * n_t + k] = v;
            }
            for (j, v) in self.inner.sample(p).into_iter().enumerate() {
                inner[j * n_t + k] = v;
            }
        };
        let lambda = &self.factor.lambda;
        let cd = c.data();

        let mut prev = f.clone();
        record(0, prev.data());
        let lf = fft::spectral_filter(&prev, lambda)?;
        let mut cur = prev.clone();
        for (i, v) in cur.data_mut().iter_mut().enumerate() {
            let half = 0.5 * (cd[i] * lf.data()[i]);
            *v -= half;
        }
        cur.check_finite("pressure at step 1")?;
        record(1, cur.data());

        for step in 1..self.cfg.time.n_steps() {
            let lp = fft::spectral_filter(&cur, lambda)?;
            let mut next = prev;
            for (i, v) in next.data_mut().iter_mut().enumerate() {
                let lead = 2.0 * cur.data()[i] - *v;
                *v = lead - cd[i] * lp.data()[i];
            }
            if next.check_finite("pressure").is_err() {
                return Err(Error::NonFinite(format!("pressure at step {}", step + 1)));
            }
            record(step + 1, next.data());
            prev = cur;
            cur = next;
        }
        let dt = self.cfg.time.dt();
        Ok((
            Sinogram {
                values: Tensor::new(vec![n_det, n_t], outer)?,
                radius: 1.0,
                dt,
            },
            Sinogram {
                values: Tensor::new(vec![n_det, n_t], inner)?,
                radius: 1.0 - self.cfg.h,
                dt,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid16() -> SimGrid {
        SimGrid::new(16, 1.28).unwrap()
    }

    #[test]
    fn kspace_factor_zero_bin_and_peak() {
        let grid = grid16();
        let dt = 0.05;
        let factor = make_kspace_factor(&grid, dt).unwrap();
        assert_eq!(factor.lambda.data()[0], 0.0);
        assert!(factor.lambda.data().iter().all(|&v| v >= 0.0));

        // Bin (0, 1): |k| = 2π / (n dx). Choosing dt = π/|k| puts it at the peak.
        let k1 = 2.0 * PI / (16.0 * grid.dx());
        let peak = make_kspace_factor(&grid, PI / k1).unwrap();
        assert!((peak.lambda.data()[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn kspace_factor_matches_scalar_formula() {
        let grid = grid16();
        let dt = 0.013;
        let factor = make_kspace_factor(&grid, dt).unwrap();
        let n = 16usize;
        let dx = grid.dx();
        for &(r, c) in &[(3usize, 5usize), (8, 8), (15, 1), (9, 0)] {
            let fy = if r < n / 2 { r as f64 } else { r as f64 - n as f64 } / (n as f64 * dx);
            let fx = if c < n / 2 { c as f64 } else { c as f64 - n as f64 } / (n as f64 * dx);
            let k = 2.0 * PI * (fx * fx + fy * fy).sqrt();
            let expect = 4.0 * (dt * k / 2.0).sin().powi(2);
            assert!((factor.lambda.data()[r * n + c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn stability_threshold() {
        let lam = |v: f64| Tensor::full(&[2, 2], v);
        assert!(check_stability(0.5, &KSpaceFactor::from_values(lam(4.0), 0.1, 10.0)).is_ok());
        let err = check_stability(2.0, &KSpaceFactor::from_values(lam(4.0), 0.1, 10.0));
        match err {
            Err(Error::Unstable { ratio, max_dt, .. }) => {
                assert_eq!(ratio, 2.0);
                assert!((max_dt - 2.0 * (0.5f64.sqrt()).asin() / 10.0).abs() < 1e-15);
            }
            other => panic!("expected instability, got {other:?}"),
        }
        assert!(check_stability(1.0, &KSpaceFactor::from_values(lam(4.0), 0.1, 10.0)).is_ok());
        assert!(check_stability(2.0, &KSpaceFactor::from_values(lam(2.0), 0.1, 10.0)).is_ok());
    }

    #[test]
    fn max_stable_dt_is_admissible() {
        let grid = SimGrid::new(64, 1.28).unwrap();
        let dt = max_stable_dt(&grid, 1.25);
        let factor = make_kspace_factor(&grid, dt * (1.0 - 1e-12)).unwrap();
        assert!(check_stability(1.25, &factor).is_ok());
        let factor = make_kspace_factor(&grid, dt * 1.01).unwrap();
        assert!(check_stability(1.25, &factor).is_err());
    }

    #[test]
    fn grid_rejects_bad_extent() {
        assert!(SimGrid::new(48, 1.28).is_err());
        assert!(SimGrid::new(64, 1.0).is_err());
        assert!(TimeGrid::new(0.01, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }

    #[test]
    fn constant_field_is_stationary() {
        let grid = grid16();
        let time = TimeGrid::with_final_time(&grid, 1.0, 1.0).unwrap();
        let cfg = SimConfig::new(grid, time, 12, 0.05).unwrap();
        let op = WaveOperator::new(cfg).unwrap();
        let v = 0.42;
        let f = Tensor::full(&[16, 16], v);
        let c = grid.sample(|x, y| 0.5 + 0.3 * (x * y).cos());
        let (d1, d1mh) = op.simulate(&f, &c).unwrap();
        assert!(d1.values.data().iter().all(|&s| (s - v).abs() < 1e-12));
        let nt = neumann_trace(&d1.values, &d1mh.values, cfg.h).unwrap();
        assert!(nt.max_abs() < 1e-9);
    }

    #[test]
    fn nan_in_initial_pressure_is_reported() {
        let grid = grid16();
        let time = TimeGrid::new(0.02, 5).unwrap();
        let op = WaveOperator::new(SimConfig::new(grid, time, 8, 0.05).unwrap()).unwrap();
        let mut f = Tensor::zeros(&[16, 16]);
        f.data_mut()[40] = f64::NAN;
        let c = Tensor::full(&[16, 16], 0.5);
        assert!(op.simulate(&f, &c).is_err());
    }

    #[test]
    fn unstable_speed_is_rejected() {
        let grid = grid16();
        let dt = 0.9 * max_stable_dt(&grid, 1.0);
        let time = TimeGrid::new(dt, 5).unwrap();
        let op = WaveOperator::new(SimConfig::new(grid, time, 8, 0.05).unwrap()).unwrap();
        let f = Tensor::zeros(&[16, 16]);
        let c = Tensor::full(&[16, 16], 3.0);
        assert!(matches!(op.simulate(&f, &c), Err(Error::Unstable { .. })));
    }
}
