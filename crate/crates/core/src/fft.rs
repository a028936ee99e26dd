//! Two-dimensional FFTs on square power-of-two grids.
//!
//! Forward transforms are unnormalized; the inverse carries the `1/N²`
//! factor so that `ifft2(fft2(x)) == x`. One-dimensional passes are
//! delegated to `rustfft`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

/// Largest imaginary residue tolerated when a real spectral filter is
/// applied, relative to `max(1, max|x|)`.
pub const IMAG_RESIDUE_TOL: f64 = 1e-10;

type Plan = Arc<dyn Fft<f64>>;

fn plan(n: usize, inverse: bool) -> Plan {
    static PLANS: OnceLock<Mutex<(FftPlanner<f64>, HashMap<(usize, bool), Plan>)>> =
        OnceLock::new();
    let cell = PLANS.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())));
    let mut guard = cell.lock().expect("fft plan cache poisoned");
    let (planner, cache) = &mut *guard;
    cache
        .entry((n, inverse))
        .or_insert_with(|| {
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// Returns the extent `n` of a square power-of-two shape.
pub fn square_extent(shape: &[usize]) -> Result<usize> {
    match shape {
        [r, c] if r == c => {
            if r.is_power_of_two() {
                Ok(*r)
            } else {
                Err(Error::NotPowerOfTwo(*r))
            }
        }
        _ => Err(Error::InvalidShape {
            op: "fft2",
            reason: format!("expected a square 2-D tensor, got {shape:?}"),
        }),
    }
}

fn transpose_in_place(buf: &mut [Complex<f64>], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            buf.swap(r * n + c, c * n + r);
        }
    }
}

fn transform(buf: &mut [Complex<f64>], n: usize, inverse: bool) {
    let p = plan(n, inverse);
    p.process(buf);
    transpose_in_place(buf, n);
    p.process(buf);
    transpose_in_place(buf, n);
}

fn to_buffer(x: &ComplexTensor) -> Vec<Complex<f64>> {
    x.re.data()
        .iter()
        .zip(x.im.data())
        .map(|(&re, &im)| Complex::new(re, im))
        .collect()
}

fn from_buffer(buf: &[Complex<f64>], n: usize, scale: f64) -> ComplexTensor {
    let re = buf.iter().map(|z| z.re * scale).collect();
    let im = buf.iter().map(|z| z.im * scale).collect();
    ComplexTensor {
        re: Tensor::new(vec![n, n], re).expect("square buffer"),
        im: Tensor::new(vec![n, n], im).expect("square buffer"),
    }
}

/// Unnormalized forward 2-D DFT.
pub fn fft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    let n = square_extent(x.shape())?;
    let mut buf = to_buffer(x);
    transform(&mut buf, n, false);
    Ok(from_buffer(&buf, n, 1.0))
}

/// Inverse 2-D DFT including the `1/N²` normalization.
pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    let n = square_extent(x.shape())?;
    let mut buf = to_buffer(x);
    transform(&mut buf, n, true);
    Ok(from_buffer(&buf, n, 1.0 / (n * n) as f64))
}

/// `Re F⁻¹[factor · F[x]]` for a real field `x` and a real, point-symmetric
/// spectral factor. The discarded imaginary part is checked against
/// [`IMAG_RESIDUE_TOL`].
pub fn spectral_filter(x: &Tensor, factor: &Tensor) -> Result<Tensor> {
    let n = square_extent(x.shape())?;
    if factor.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "spectral_filter",
            lhs: x.shape().to_vec(),
            rhs: factor.shape().to_vec(),
        });
    }
    let mut buf: Vec<Complex<f64>> = x.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform(&mut buf, n, false);
    for (z, &w) in buf.iter_mut().zip(factor.data()) {
        *z *= w;
    }
    transform(&mut buf, n, true);
    let scale = 1.0 / (n * n) as f64;
    let mut residue = 0.0f64;
    let data: Vec<f64> = buf
        .iter()
        .map(|z| {
            residue = residue.max((z.im * scale).abs());
            z.re * scale
        })
        .collect();
    let bound = IMAG_RESIDUE_TOL * x.max_abs().max(1.0) * factor.max_abs().max(1.0);
    if !(residue <= bound) {
        return Err(Error::ImaginaryResidue(residue));
    }
    Tensor::new(vec![n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_complex(n: usize, seed: u64) -> ComplexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0));
        let im = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0));
        ComplexTensor::new(re, im).unwrap()
    }

    /// Direct O(N⁴) DFT used as an independent reference.
    fn naive_dft(x: &ComplexTensor) -> ComplexTensor {
        let n = x.shape()[0];
        let mut out = ComplexTensor::zeros(&[n, n]);
        for kr in 0..n {
            for kc in 0..n {
                let (mut sr, mut si) = (0.0, 0.0);
                for r in 0..n {
                    for c in 0..n {
                        let phase = -2.0 * std::f64::consts::PI * ((kr * r + kc * c) % n) as f64
                            / n as f64;
                        let (s, co) = phase.sin_cos();
                        let (a, b) = (x.re.data()[r * n + c], x.im.data()[r * n + c]);
                        sr += a * co - b * s;
                        si += a * s + b * co;
                    }
                }
                out.re.data_mut()[kr * n + kc] = sr;
                out.im.data_mut()[kr * n + kc] = si;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_dc_only() {
        let n = 8;
        let v = 0.37;
        let x = ComplexTensor::from_real(Tensor::full(&[n, n], v));
        let y = fft2(&x).unwrap();
        assert!((y.re.data()[0] - (n * n) as f64 * v).abs() < 1e-12);
        for i in 1..n * n {
            assert!(y.re.data()[i].abs() < 1e-12 && y.im.data()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let x = random_complex(8, 3);
        let fast = fft2(&x).unwrap();
        let slow = naive_dft(&x);
        for i in 0..64 {
            assert!((fast.re.data()[i] - slow.re.data()[i]).abs() < 1e-10);
            assert!((fast.im.data()[i] - slow.im.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_round_trip() {
        for n in [2usize, 16, 64, 256] {
            let x = random_complex(n, n as u64);
            let back = ifft2(&fft2(&x).unwrap()).unwrap();
            let err = x
                .re
                .data()
                .iter()
                .zip(back.re.data())
                .chain(x.im.data().iter().zip(back.im.data()))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-12 * n as f64, "n = {n}: {err}");
        }
    }

    #[test]
    fn parseval_against_direct_sum() {
        let n = 16;
        let x = random_complex(n, 11);
        let y = naive_dft(&x);
        let lhs = x.energy();
        let rhs = y.energy() / (n * n) as f64;
        assert!((lhs - rhs).abs() < 1e-10 * lhs.max(1.0));
        let fast = fft2(&x).unwrap().energy() / (n * n) as f64;
        assert!((lhs - fast).abs() < 1e-10 * lhs.max(1.0));
    }

    #[test]
    fn rejects_non_power_of_two() {
        let x = ComplexTensor::zeros(&[6, 6]);
        assert!(matches!(fft2(&x), Err(Error::NotPowerOfTwo(6))));
        let x = ComplexTensor::zeros(&[4, 8]);
        assert!(fft2(&x).is_err());
    }
}
