//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Builds a scalar from leaves holding the supplied inputs.
pub trait ScalarFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> ScalarFn for F {}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum admissible per-coordinate relative error.
    pub tolerance: f64,
    /// Coordinates whose gradient magnitude is below `floor · max|∇|` are
    /// compared against that floor instead of their own magnitude.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

fn eval(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Value and reverse-mode gradient of `f` at `inputs`.
pub fn analytic_gradient(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let value = g.value(out).item();
    let gs = vars
        .iter()
        .map(|&v| grads.take(v).expect("every leaf receives a gradient"))
        .collect();
    Ok((value, gs))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(f: &impl ScalarFn, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let fp = eval(f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let fm = eval(f, &work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (fp - fm) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Per-coordinate comparison of two gradient sets.
pub fn compare(analytic: &[Tensor], numeric: &[Tensor], cfg: &GradCheckConfig) -> GradCheckReport {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, t| m.max(t.max_abs()));
    let floor = (cfg.floor * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    report
}

/// Checks reverse-mode gradients of `f` against central finite differences.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, cfg.step)?;
    Ok(compare(&analytic, &numeric, &cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(g: &mut Graph, v: &[Var]) -> Result<Var> {
        let x2 = g.mul(v[0], v[0])?;
        let x3 = g.mul(x2, v[0])?;
        g.sum(x3)
    }

    #[test]
    fn corrupted_gradient_fails() {
        let inputs = [Tensor::from_fn(&[5], |i| 0.3 + i as f64 * 0.2)];
        let cfg = GradCheckConfig::default();
        let (_, mut analytic) = analytic_gradient(&cubic, &inputs).unwrap();
        let numeric = numeric_gradient(&cubic, &inputs, cfg.step).unwrap();
        assert!(compare(&analytic, &numeric, &cfg).passed);
        analytic[0] = analytic[0].scaled(1.01);
        let bad = compare(&analytic, &numeric, &cfg);
        assert!(!bad.passed);
        assert!(bad.max_rel_error > 5e-3);
    }
}
