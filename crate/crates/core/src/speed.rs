//! Ground-truth sound-speed profiles built from Gaussian bumps.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wave::SimGrid;

/// Bump centers and width of the four-term profile, scaled by 3/4.
pub const TYPE1_CENTERS: [(f64, f64); 4] = [(0.5, 0.6), (0.5, -0.5), (-0.6, 0.45), (-0.55, -0.6)];
pub const TYPE1_WIDTH: f64 = 2.0;
pub const TYPE1_SCALE: f64 = 3.0 / 4.0;

/// Bump centers and width of the five-term profile, scaled by 23/35.
pub const TYPE2_CENTERS: [(f64, f64); 5] = [
    (0.0, 0.675),
    (0.725, 0.175),
    (0.4, -0.625),
    (-0.625, 0.225),
    (-0.45, -0.575),
];
pub const TYPE2_WIDTH: f64 = 2.5;
pub const TYPE2_SCALE: f64 = 23.0 / 35.0;

/// Default speed bounds `(c_m, c_M)`.
pub const DEFAULT_BOUNDS: (f64, f64) = (0.05, 1.25);
/// The five-term profile dips to about 0.02 in the grid corners.
pub const TYPE2_BOUNDS: (f64, f64) = (0.01, 1.25);

/// `exp(-h (x² + y²))`.
pub fn gaussian_bump(x: f64, y: f64, h: f64) -> f64 {
    (-h * (x * x + y * y)).exp()
}

#[derive(Clone)]
pub enum SpeedKind {
    Type1,
    Type2,
    Constant(f64),
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for SpeedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpeedKind::Type1 => write!(f, "Type1"),
            SpeedKind::Type2 => write!(f, "Type2"),
            SpeedKind::Constant(c) => write!(f, "Constant({c})"),
            SpeedKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpeedProfile {
    pub kind: SpeedKind,
    /// `(c_m, c_M)`; every rasterized value must lie inside.
    pub bounds: (f64, f64),
}

impl SpeedProfile {
    pub fn type1() -> Self {
        Self {
            kind: SpeedKind::Type1,
            bounds: DEFAULT_BOUNDS,
        }
    }

    pub fn type2() -> Self {
        Self {
            kind: SpeedKind::Type2,
            bounds: TYPE2_BOUNDS,
        }
    }

    pub fn constant(c0: f64) -> Self {
        Self {
            kind: SpeedKind::Constant(c0),
            bounds: (c0.min(DEFAULT_BOUNDS.0), c0.max(DEFAULT_BOUNDS.1)),
        }
    }

    pub fn custom(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, bounds: (f64, f64)) -> Self {
        Self {
            kind: SpeedKind::Custom(Arc::new(f)),
            bounds,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match &self.kind {
            SpeedKind::Type1 => {
                TYPE1_SCALE
                    * TYPE1_CENTERS
                        .iter()
                        .map(|&(a, b)| gaussian_bump(x - a, y - b, TYPE1_WIDTH))
                        .sum::<f64>()
            }
            SpeedKind::Type2 => {
                TYPE2_SCALE
                    * TYPE2_CENTERS
                        .iter()
                        .map(|&(a, b)| gaussian_bump(x - a, y - b, TYPE2_WIDTH))
                        .sum::<f64>()
            }
            SpeedKind::Constant(c) => *c,
            SpeedKind::Custom(f) => f(x, y),
        }
    }

    /// Profile id as written in configs and manifests; `None` for custom profiles.
    pub fn id(&self) -> Option<String> {
        match self.kind {
            SpeedKind::Type1 => Some("type1".into()),
            SpeedKind::Type2 => Some("type2".into()),
            SpeedKind::Constant(c) => Some(format!("const:{c}")),
            SpeedKind::Custom(_) => None,
        }
    }

    /// Node-wise evaluation on `grid`, rejecting values outside the bounds.
    pub fn rasterize(&self, grid: &SimGrid) -> Result<Tensor> {
        let field = grid.sample(|x, y| self.eval(x, y));
        let (lo, hi) = self.bounds;
        if lo < 0.0 {
            return Err(Error::Config(format!("lower speed bound {lo} is negative")));
        }
        for (i, &v) in field.data().iter().enumerate() {
            if !(v >= lo && v <= hi) {
                let (x, y) = grid.node_xy(i);
                return Err(Error::SpeedBounds { value: v, x, y, lo, hi });
            }
        }
        Ok(field)
    }
}

impl FromStr for SpeedProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "type1" => Ok(Self::type1()),
            "type2" => Ok(Self::type2()),
            _ => match s.strip_prefix("const:") {
                Some(v) => v
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|c| *c > 0.0 && c.is_finite())
                    .map(Self::constant)
                    .ok_or_else(|| Error::Config(format!("bad constant speed in `{s}`"))),
                None => Err(Error::Config(format!(
                    "unknown speed profile `{s}` (expected type1, type2 or const:<value>)"
                ))),
            },
        }
    }
}

/// `‖c_gt − c‖₂ / ‖c_gt‖₂` restricted to the nodes listed in `mask`.
pub fn masked_relative_error(truth: &Tensor, estimate: &Tensor, mask: &[usize]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for &i in mask {
        let t = truth.data()[i];
        let d = t - estimate.data()[i];
        num += d * d;
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_values() {
        assert_eq!(gaussian_bump(0.0, 0.0, 3.7), 1.0);
        assert!((gaussian_bump(0.5, 0.6, 2.0) - (-1.22f64).exp()).abs() < 1e-15);
        assert!((gaussian_bump(0.5, 0.6, 2.0) - 0.295230).abs() < 5e-7);
        assert_eq!(gaussian_bump(0.6, 0.8, 1.3), gaussian_bump(1.0, 0.0, 1.3));
    }

    #[test]
    fn type1_at_origin() {
        let v = SpeedProfile::type1().eval(0.0, 0.0);
        let oracle = 0.75 * [1.22f64, 1.0, 1.125, 1.325].iter().map(|e| (-e).exp()).sum::<f64>();
        assert!((v - oracle).abs() < 1e-15, "{v}");
        assert!((v - 0.9401738).abs() < 1e-7, "{v}");
    }

    #[test]
    fn type1_at_first_center() {
        let cross: f64 = [(0.0, 1.1), (1.1, 0.15), (1.05, 1.2)]
            .iter()
            .map(|&(dx, dy): &(f64, f64)| (-2.0 * (dx * dx + dy * dy)).exp())
            .sum();
        let expect = 0.75 * (1.0 + cross);
        assert!((SpeedProfile::type1().eval(0.5, 0.6) - expect).abs() < 1e-15);
    }

    #[test]
    fn constant_profile_is_flat() {
        let grid = SimGrid::new(16, 1.28).unwrap();
        let c = SpeedProfile::constant(0.7).rasterize(&grid).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn profiles_fit_their_bounds() {
        let grid = SimGrid::new(128, 1.28).unwrap();
        for p in [SpeedProfile::type1(), SpeedProfile::type2()] {
            let c = p.rasterize(&grid).unwrap();
            assert!(c.min() >= p.bounds.0 && c.max() <= p.bounds.1);
        }
    }

    #[test]
    fn bound_violation_is_rejected() {
        let grid = SimGrid::new(16, 1.28).unwrap();
        let p = SpeedProfile {
            kind: SpeedKind::Type2,
            bounds: DEFAULT_BOUNDS,
        };
        assert!(matches!(p.rasterize(&grid), Err(Error::SpeedBounds { .. })));
    }

    #[test]
    fn parse_ids() {
        assert!(matches!("type1".parse::<SpeedProfile>().unwrap().kind, SpeedKind::Type1));
        assert!(matches!("type2".parse::<SpeedProfile>().unwrap().kind, SpeedKind::Type2));
        let c: SpeedProfile = "const:0.8".parse().unwrap();
        assert_eq!(c.eval(0.3, -0.9), 0.8);
        assert_eq!(c.id().unwrap(), "const:0.8");
        assert!("type3".parse::<SpeedProfile>().is_err());
        assert!("const:abc".parse::<SpeedProfile>().is_err());
    }
}
