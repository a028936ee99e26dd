//! Randomized ellipse phantoms and measurement noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wave::{SimGrid, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// `true` when the ellipse lies inside the closed unit disk (using the
    /// bounding circle of radius `max(a, b)`).
    pub fn within_unit_disk(&self) -> bool {
        self.a > 0.0 && self.b > 0.0 && self.cx.hypot(self.cy) + self.a.max(self.b) <= 1.0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        // Rotate the offset by -angle into the ellipse frame.
        let xr = c * dx + s * dy;
        let yr = -s * dx + c * dy;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub ellipses: Vec<Ellipse>,
}

impl Phantom {
    /// Sum of the intensities of all ellipses containing each node, clamped
    /// to `[0, 1]`.
    pub fn rasterize(&self, grid: &SimGrid) -> Tensor {
        grid.sample(|x, y| {
            self.ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum::<f64>()
                .clamp(0.0, 1.0)
        })
    }
}

/// Uniform sampling ranges for phantom parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRanges {
    pub count: (usize, usize),
    /// Bound on the distance of a center from the origin.
    pub center_radius: f64,
    pub semi_axis: (f64, f64),
    pub intensity: (f64, f64),
    /// Rejection attempts per ellipse before giving up.
    pub max_attempts: usize,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        Self {
            count: (5, 10),
            center_radius: 0.6,
            semi_axis: (0.05, 0.45),
            intensity: (0.1, 1.0),
            max_attempts: 1000,
        }
    }
}

/// Draws a phantom; identical seeds give identical phantoms.
pub fn sample_phantom(seed: u64, ranges: &PhantomRanges) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(ranges.count.0..=ranges.count.1);
    let r = ranges.center_radius;
    let mut ellipses = Vec::with_capacity(count);
    for k in 0..count {
        let mut accepted = None;
        for _ in 0..ranges.max_attempts {
            let e = Ellipse {
                cx: rng.random_range(-r..=r),
                cy: rng.random_range(-r..=r),
                a: rng.random_range(ranges.semi_axis.0..=ranges.semi_axis.1),
                b: rng.random_range(ranges.semi_axis.0..=ranges.semi_axis.1),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(ranges.intensity.0..=ranges.intensity.1),
            };
            if e.cx.hypot(e.cy) <= r && e.within_unit_disk() {
                accepted = Some(e);
                break;
            }
        }
        ellipses.push(accepted.ok_or(Error::SamplingBudget(k))?);
    }
    Ok(Phantom { ellipses })
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma · max|s|`.
pub fn add_noise(s: &Sinogram, sigma: f64, seed: u64) -> Result<Sinogram> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise level {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(s.clone());
    }
    let std = sigma * s.values.max_abs();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    for v in out.values.data_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}
