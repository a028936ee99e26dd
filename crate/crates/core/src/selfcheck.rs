//! Finite-difference cases covering every differentiable graph operation and
//! both networks. Shared by the test suite and the acceptance runner.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::networks::{BoundParams, ParamStore, ReconConfig, ReconNet, SpeedNet, SpeedNetConfig};
use crate::tensor::Tensor;
use crate::wave::{make_kspace_factor, SimGrid};

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub group: &'static str,
    pub name: &'static str,
    pub f: CaseFn,
    pub inputs: Vec<Tensor>,
}

impl OpCase {
    pub fn check(&self, cfg: GradCheckConfig) -> Result<GradCheckReport> {
        grad_check(&self.f, &self.inputs, cfg)
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero so kinks (abs, relu) stay out of reach of
/// the finite-difference stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// `⟨w, y⟩` for a fixed random `w`, turning any output into a scalar whose
/// gradient exercises the full vector-Jacobian product.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn probe_complex(g: &mut Graph, z: Var, seed: u64) -> Result<Var> {
    let re = g.re(z)?;
    let im = g.im(z)?;
    let a = probe(g, re, seed)?;
    let b = probe(g, im, seed + 1)?;
    g.add(a, b)
}

fn case(
    group: &'static str,
    name: &'static str,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    inputs: Vec<Tensor>,
) -> OpCase {
    OpCase { group, name, f: Box::new(f), inputs }
}

/// Maps parameter names onto already created leaves.
fn bind_as(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

pub fn op_cases() -> Result<Vec<OpCase>> {
    let mut v = Vec::new();

    let x = away_from_zero(&[3, 4], 1);
    v.push(case("unary", "sin", |g, v| { let y = g.sin(v[0])?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("unary", "tanh", |g, v| { let y = g.tanh(v[0])?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("unary", "neg", |g, v| { let y = g.neg(v[0])?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("unary", "abs", |g, v| { let y = g.abs(v[0])?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("unary", "relu", |g, v| { let y = g.relu(v[0])?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("unary", "scale", |g, v| { let y = g.scale(v[0], -2.5)?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("unary", "add_scalar", |g, v| { let y = g.add_scalar(v[0], 0.3)?; probe(g, y, 9) }, vec![x]));

    let (a, b, s) = (random(&[2, 5], 2), random(&[2, 5], 3), random(&[1], 4));
    v.push(case("binary", "add", |g, v| { let y = g.add(v[0], v[1])?; probe(g, y, 9) }, vec![a.clone(), b.clone()]));
    v.push(case("binary", "sub", |g, v| { let y = g.sub(v[0], v[1])?; probe(g, y, 9) }, vec![a.clone(), b.clone()]));
    v.push(case("binary", "mul", |g, v| { let y = g.mul(v[0], v[1])?; probe(g, y, 9) }, vec![a.clone(), b]));
    v.push(case("binary", "mul scalar lhs", |g, v| { let y = g.mul(v[1], v[0])?; probe(g, y, 9) }, vec![a.clone(), s.clone()]));
    v.push(case("binary", "sub scalar rhs", |g, v| { let y = g.sub(v[0], v[1])?; probe(g, y, 9) }, vec![a, s]));

    let x = random(&[4, 3], 5);
    v.push(case("reduce", "sum", |g, v| { let s = g.sum(v[0])?; let t = g.mul(s, s)?; g.sum(t) }, vec![x.clone()]));
    v.push(case("reduce", "sum_squares", |g, v| g.sum_squares(v[0]), vec![x]));
    v.push(case(
        "reduce",
        "matmul",
        |g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 9) },
        vec![random(&[3, 4], 6), random(&[4, 2], 7)],
    ));

    let x = random(&[2, 6, 6], 8);
    v.push(case(
        "conv",
        "conv2d 3x3",
        |g, v| { let y = g.conv2d(v[0], v[1])?; probe(g, y, 9) },
        vec![x.clone(), random(&[3, 2, 3, 3], 10)],
    ));
    v.push(case(
        "conv",
        "conv2d 2x3 even",
        |g, v| { let y = g.conv2d(v[0], v[1])?; probe(g, y, 9) },
        vec![x.clone(), random(&[2, 2, 2, 3], 11)],
    ));
    v.push(case(
        "conv",
        "conv2d stride 2",
        |g, v| { let y = g.conv2d_strided(v[0], v[1], 2)?; probe(g, y, 9) },
        vec![x, random(&[3, 2, 3, 3], 12)],
    ));
    v.push(case(
        "conv",
        "conv_transpose2d",
        |g, v| { let y = g.conv_transpose2d(v[0], v[1])?; probe(g, y, 9) },
        vec![random(&[2, 3, 3], 13), random(&[2, 3, 2, 2], 14)],
    ));
    v.push(case(
        "conv",
        "avgpool2d",
        |g, v| { let y = g.avgpool2d(v[0], 2, 3)?; probe(g, y, 9) },
        vec![random(&[2, 4, 6], 15)],
    ));

    let x = random(&[3, 4], 16);
    v.push(case("shape", "reshape", |g, v| { let y = g.reshape(v[0], &[2, 6])?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("shape", "transpose", |g, v| { let y = g.transpose(v[0])?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case(
        "shape",
        "stack",
        |g, v| { let y = g.stack(&[v[0], v[1], v[0]])?; probe(g, y, 9) },
        vec![x.clone(), random(&[3, 4], 17)],
    ));
    v.push(case("shape", "diff rows", |g, v| { let y = g.diff(v[0], 0)?; probe(g, y, 9) }, vec![x.clone()]));
    v.push(case("shape", "diff cols", |g, v| { let y = g.diff(v[0], 1)?; probe(g, y, 9) }, vec![x]));

    let (re, im) = (random(&[8, 8], 18), random(&[8, 8], 19));
    v.push(case(
        "spectral",
        "complex/re/im",
        |g, v| { let z = g.complex(v[0], v[1])?; probe_complex(g, z, 9) },
        vec![re.clone(), im.clone()],
    ));
    v.push(case(
        "spectral",
        "fft2",
        |g, v| { let z = g.complex(v[0], v[1])?; let y = g.fft2(z)?; probe_complex(g, y, 9) },
        vec![re.clone(), im.clone()],
    ));
    v.push(case(
        "spectral",
        "ifft2",
        |g, v| { let z = g.complex(v[0], v[1])?; let y = g.ifft2(z)?; probe_complex(g, y, 9) },
        vec![re.clone(), im.clone()],
    ));
    v.push(case(
        "spectral",
        "spectral_mul",
        |g, v| {
            let z = g.complex(v[0], v[1])?;
            let y = g.spectral_mul(z, v[2])?;
            probe_complex(g, y, 9)
        },
        vec![re.clone(), im, random(&[8, 8], 20)],
    ));
    let grid = SimGrid::new(8, 1.28)?;
    let factor = Arc::clone(make_kspace_factor(&grid, 0.05)?.lambda());
    v.push(case(
        "spectral",
        "spectral_filter",
        move |g, v| { let y = g.spectral_filter(v[0], &factor)?; probe(g, y, 9) },
        vec![re],
    ));

    // sample points stay inside the 8-node grid, whose last node sits at 0.96
    let taps = Arc::new(grid.taps(&[(0.1, 0.2), (-0.93, 0.4), (0.0, 0.0), (0.95, -0.3)])?);
    v.push(case(
        "gather",
        "bilinear_sample",
        move |g, v| { let y = g.bilinear_sample(v[0], &taps)?; probe(g, y, 9) },
        vec![random(&[8, 8], 22)],
    ));
    let idx = Arc::new(vec![5, 0, 11]);
    v.push(case(
        "gather",
        "scatter",
        move |g, v| { let y = g.scatter(v[0], v[1], &idx)?; probe(g, y, 9) },
        vec![random(&[3, 4], 23), random(&[3], 24)],
    ));

    let speed = SpeedNet::new(SpeedNetConfig {
        hidden: vec![6, 5, 4],
        omega0: 3.0,
        bounds: (0.05, 1.25),
    })?;
    let mut store = ParamStore::new();
    speed.init(&mut store, &mut ChaCha8Rng::seed_from_u64(25))?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let inputs = names.iter().map(|n| store.get(n).cloned()).collect::<Result<Vec<_>>>()?;
    let points = [(0.1, 0.2), (-0.5, 0.7), (0.3, -0.3), (1.1, 0.0)];
    let exterior = [0.0, 0.0, 0.0, 0.9];
    v.push(case(
        "network",
        "speed network",
        move |g, v| {
            let p = bind_as(&names, v);
            let c = speed.eval(g, &p, &points, &exterior)?;
            probe(g, c, 9)
        },
        inputs,
    ));

    let recon = ReconNet::new(ReconConfig {
        input_extent: 8,
        core_extent: 4,
        output_extent: 8,
        enc_channels: 2,
        core_channels: 2,
        dec_channels: 2,
        res_channels: 2,
        res_blocks: 1,
    })?;
    let mut store = ParamStore::new();
    recon.init(&mut store, &mut ChaCha8Rng::seed_from_u64(26))?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let inputs = names.iter().map(|n| store.get(n).map(|t| t.scaled(1.5))).collect::<Result<Vec<_>>>()?;
    let sino = random(&[6, 10], 27);
    v.push(case(
        "network",
        "reconstruction network",
        move |g, v| {
            let p = bind_as(&names, v);
            let f = recon.forward(g, &p, &sino)?;
            probe(g, f, 9)
        },
        inputs,
    ));
    Ok(v)
}
