use pat_core::dataset::Sample;
use pat_core::gradcheck::{grad_check, GradCheckConfig};
use pat_core::networks::{Architecture, BoundParams, ParamStore, ReconConfig, SpeedNetConfig};
use pat_core::phantoms::{sample_phantom, PhantomRanges};
use pat_core::speed::SpeedProfile;
use pat_core::training::{implicit_objective, supervised_objective, LossWeights, Mode, Problem};
use pat_core::wave::{SimConfig, SimGrid, TimeGrid, WaveOperator};
use pat_core::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Toy {
    op: WaveOperator,
    c: Tensor,
    samples: Vec<Sample>,
}

fn toy(steps: usize) -> Toy {
    let grid = SimGrid::new(16, 1.28).unwrap();
    let dt = 0.9 * pat_core::wave::max_stable_dt(&grid, 1.25);
    let op = WaveOperator::new(SimConfig::new(grid, TimeGrid::new(dt, steps).unwrap(), 12, 0.05).unwrap()).unwrap();
    let c = SpeedProfile::type1().rasterize(&grid).unwrap();
    let samples = (0..3)
        .map(|i| {
            let f = sample_phantom(100 + i, &PhantomRanges::default()).unwrap().rasterize(&grid);
            let (d1, d1mh) = op.simulate(&f, &c).unwrap();
            Sample { index: i as usize, d1: d1.values, d1mh: d1mh.values, f: Some(f) }
        })
        .collect();
    Toy { op, c, samples }
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn tv_loop(x: &Tensor) -> f64 {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                s += (x.at2(r, c + 1) - x.at2(r, c)).abs();
            }
            if r + 1 < h {
                s += (x.at2(r + 1, c) - x.at2(r, c)).abs();
            }
        }
    }
    s
}

fn only(lambda_d: f64, lambda_n: f64, lambda_tv: f64, lambda_i: f64) -> LossWeights {
    LossWeights { lambda_d, lambda_n, lambda_tv, lambda_i }
}

#[test]
fn implicit_loss_vanishes_on_exact_data() {
    let t = toy(20);
    let mut g = Graph::new();
    let images: Vec<Var> = t.samples.iter().map(|s| g.constant(s.f.clone().unwrap())).collect();
    let c = g.constant(t.c.clone());
    let measured: Vec<_> = t.samples.iter().map(|s| (&s.d1, &s.d1mh)).collect();
    let loss = implicit_objective(&mut g, &t.op, &only(1.0, 1.0, 0.0, 1.0), &images, c, &measured).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

#[test]
fn implicit_single_term_is_dirichlet_residual() {
    let t = toy(20);
    let guess = t.samples[0].f.as_ref().unwrap().scaled(0.8);
    let mut g = Graph::new();
    let image = g.constant(guess.clone());
    let c = g.constant(t.c.clone());
    let s = &t.samples[0];
    let loss = implicit_objective(&mut g, &t.op, &only(1.0, 0.0, 0.0, 0.0), &[image], c, &[(&s.d1, &s.d1mh)]).unwrap();
    let (sim, _) = t.op.simulate(&guess, &t.c).unwrap();
    let expect = sq_dist(&sim.values, &s.d1);
    assert!((g.value(loss).item() - expect).abs() <= 1e-12 * expect);
}

#[test]
fn supervised_examples_and_hand_sum() {
    let t = toy(20);
    let c_guess = t.c.map(|v| 0.9 * v + 0.05);
    let guesses: Vec<Tensor> = t.samples[..2]
        .iter()
        .map(|s| s.f.as_ref().unwrap().map(|v| 0.7 * v + 0.1))
        .collect();
    let pairs: Vec<_> = t.samples[..2].iter().map(|s| (s.f.as_ref().unwrap(), &s.d1)).collect();

    let eval = |w: LossWeights, imgs: &[Tensor], c: &Tensor| {
        let mut g = Graph::new();
        let vars: Vec<Var> = imgs.iter().map(|x| g.constant(x.clone())).collect();
        let cv = g.constant(c.clone());
        let l = supervised_objective(&mut g, &t.op, &w, &vars, cv, &pairs).unwrap();
        g.value(l).item()
    };

    let truths: Vec<Tensor> = t.samples[..2].iter().map(|s| s.f.clone().unwrap()).collect();
    assert_eq!(eval(only(1.0, 1.0, 0.0, 1.0), &truths, &t.c), 0.0);

    let image_only = eval(only(0.0, 0.0, 0.0, 1.0), &guesses, &c_guess);
    let expect: f64 = guesses.iter().zip(&truths).map(|(a, b)| sq_dist(a, b)).sum();
    assert_eq!(image_only, expect);

    let w = only(0.7, 5.0, 0.013, 1.9);
    let mut hand = 0.0;
    for (guess, s) in guesses.iter().zip(&t.samples[..2]) {
        let (sim, _) = t.op.simulate(guess, &c_guess).unwrap();
        hand += w.lambda_d * sq_dist(&sim.values, &s.d1);
        hand += w.lambda_i * sq_dist(guess, s.f.as_ref().unwrap());
        hand += w.lambda_tv * tv_loop(guess);
    }
    let got = eval(w, &guesses, &c_guess);
    assert!((got - hand).abs() <= 1e-12 * hand, "{got} vs {hand}");
}

fn small_arch() -> Architecture {
    Architecture {
        speed: SpeedNetConfig {
            hidden: vec![12, 12, 12],
            ..Default::default()
        },
        recon: ReconConfig {
            input_extent: 16,
            core_extent: 8,
            output_extent: 16,
            enc_channels: 4,
            core_channels: 2,
            dec_channels: 4,
            res_channels: 3,
            res_blocks: 1,
        },
    }
}

#[test]
fn losses_are_nonnegative_and_batch_order_free() {
    let t = toy(15);
    let arch = small_arch();
    let store = arch.init(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let problem = Problem::new(&arch, &t.op, &t.c, LossWeights::for_noise(0.01)).unwrap();
    for mode in [Mode::Implicit, Mode::Supervised] {
        let value = |batch: &[&Sample]| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let out = problem.loss(mode, &mut g, &p, batch).unwrap();
            g.value(out.loss).item()
        };
        let s = &t.samples;
        let a = value(&[&s[0], &s[1], &s[2]]);
        let b = value(&[&s[2], &s[0], &s[1]]);
        assert!(a > 0.0);
        assert!((a - b).abs() <= 1e-12 * a, "{mode:?}: {a} vs {b}");
    }
}

/// Finite-difference check of the full loss with respect to a handful of
/// parameter tensors from both networks; the rest stay fixed.
fn end_to_end_check(mode: Mode) {
    let t = toy(12);
    let arch = small_arch();
    let store = arch.init(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let problem = Problem::new(&arch, &t.op, &t.c, LossWeights::for_noise(0.01)).unwrap();
    let checked = ["speed.l0.w", "speed.l3.b", "speed.l2.w", "recon.head", "recon.dec0.deconv", "recon.enc_out"];
    let inputs: Vec<Tensor> = checked.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let batch: Vec<&Sample> = t.samples[..2].iter().collect();
    let f = |g: &mut Graph, v: &[Var]| {
        let mut pairs: Vec<(String, Var)> = checked.iter().map(|n| n.to_string()).zip(v.iter().copied()).collect();
        for (name, tensor) in store.iter() {
            if !checked.contains(&name) {
                pairs.push((name.to_string(), g.constant(tensor.clone())));
            }
        }
        let p = BoundParams::from_pairs(pairs);
        Ok(problem.loss(mode, g, &p, &batch)?.loss)
    };
    let cfg = GradCheckConfig {
        tolerance: 1e-4,
        ..Default::default()
    };
    let report = grad_check(f, &inputs, cfg).unwrap();
    assert!(report.passed, "{mode:?}: {report:?}");
    assert_eq!(report.checked, 276);
}

#[test]
fn implicit_loss_gradient_matches_finite_differences() {
    end_to_end_check(Mode::Implicit);
}

#[test]
fn supervised_loss_gradient_matches_finite_differences() {
    end_to_end_check(Mode::Supervised);
}

#[test]
fn untouched_parameters_get_zero_gradient() {
    // with only the image term, the speed network receives zero gradient
    let t = toy(10);
    let arch = small_arch();
    let store: ParamStore = arch.init(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let problem = Problem::new(&arch, &t.op, &t.c, only(0.0, 0.0, 0.0, 1.0)).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = problem.loss_supervised(&mut g, &p, &[&t.samples[0]]).unwrap();
    let mut grads = g.backward(out.loss).unwrap();
    let grads = p.collect(&mut grads);
    assert_eq!(grads.len(), store.len());
    for (name, gt) in &grads {
        if name.starts_with("speed.") {
            assert!(gt.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(grads["recon.head"].max_abs() > 0.0);
}
