//! Plain numeric kernels shared by the forward and backward passes.
//!
//! Convolutions are cross-correlations with "same" padding: a kernel of
//! extent `a` reads input rows `s*i + u - (a-1)/2` for `u in 0..a`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("expected [C, H, W], got {:?}", t.shape()),
        }),
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [o, c, a, b] => Ok((o, c, a, b)),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("expected a 4-D kernel, got {:?}", t.shape()),
        }),
    }
}

/// Output indices `i in 0..n_out` whose tap `s*i + off` lands in `0..n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = (n_in as isize - off + s - 1) / s;
    let lo = lo.max(0) as usize;
    let hi = (hi_excl.max(0) as usize).min(n_out);
    (lo, hi.max(lo))
}

/// Geometry of a strided same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_out: usize,
    pub c_in: usize,
    pub ka: usize,
    pub kb: usize,
    /// Input (fine) spatial extent.
    pub h: usize,
    pub w: usize,
    /// Output (coarse) spatial extent.
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, k: &Tensor, stride: usize) -> Result<Self> {
        let (c_in, h, w) = dims3(x, "conv2d")?;
        let (c_out, kc, ka, kb) = dims4(k, "conv2d")?;
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        Self::from_dims(c_out, c_in, ka, kb, h, w, stride, "conv2d")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_dims(
        c_out: usize,
        c_in: usize,
        ka: usize,
        kb: usize,
        h: usize,
        w: usize,
        stride: usize,
        op: &'static str,
    ) -> Result<Self> {
        if ka > h || kb > w {
            return Err(Error::InvalidShape {
                op,
                reason: format!("kernel {ka}x{kb} larger than input {h}x{w}"),
            });
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::InvalidShape {
                op,
                reason: format!("input {h}x{w} not divisible by stride {stride}"),
            });
        }
        Ok(Self {
            c_out,
            c_in,
            ka,
            kb,
            h,
            w,
            ho: h / stride,
            wo: w / stride,
            stride,
        })
    }

    fn pads(&self) -> (isize, isize) {
        (((self.ka - 1) / 2) as isize, ((self.kb - 1) / 2) as isize)
    }
}

/// `y[o,i,j] = Σ k[o,c,u,v] · x[c, s·i+u-pt, s·j+v-pl]`.
pub(crate) fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.c_out * g.ho * g.wo];
    let (pt, pl) = g.pads();
    let s = g.stride;
    for o in 0..g.c_out {
        let yo = &mut y[o * g.ho * g.wo..(o + 1) * g.ho * g.wo];
        for c in 0..g.c_in {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for u in 0..g.ka {
                let (i0, i1) = valid_range(g.ho, g.h, s, u as isize - pt);
                for v in 0..g.kb {
                    let wgt = k[((o * g.c_in + c) * g.ka + u) * g.kb + v];
                    let off_j = v as isize - pl;
                    let (j0, j1) = valid_range(g.wo, g.w, s, off_j);
                    for i in i0..i1 {
                        let xi = (s * i) as isize + u as isize - pt;
                        let xrow = &xc[xi as usize * g.w..(xi as usize + 1) * g.w];
                        let yrow = &mut yo[i * g.wo..(i + 1) * g.wo];
                        if s == 1 {
                            let xs = &xrow[(j0 as isize + off_j) as usize..(j1 as isize + off_j) as usize];
                            for (yv, xv) in yrow[j0..j1].iter_mut().zip(xs) {
                                *yv += wgt * xv;
                            }
                        } else {
                            for j in j0..j1 {
                                yrow[j] += wgt * xrow[((s * j) as isize + off_j) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input:
/// `dx[c, s·i+u-pt, s·j+v-pl] += Σ_o gy[o,i,j] · k[o,c,u,v]`.
pub(crate) fn conv2d_adjoint_input(gy: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.c_in * g.h * g.w];
    let (pt, pl) = g.pads();
    let s = g.stride;
    for o in 0..g.c_out {
        let go = &gy[o * g.ho * g.wo..(o + 1) * g.ho * g.wo];
        for c in 0..g.c_in {
            let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for u in 0..g.ka {
                let (i0, i1) = valid_range(g.ho, g.h, s, u as isize - pt);
                for v in 0..g.kb {
                    let wgt = k[((o * g.c_in + c) * g.ka + u) * g.kb + v];
                    let off_j = v as isize - pl;
                    let (j0, j1) = valid_range(g.wo, g.w, s, off_j);
                    for i in i0..i1 {
                        let xi = ((s * i) as isize + u as isize - pt) as usize;
                        let grow = &go[i * g.wo..(i + 1) * g.wo];
                        let drow = &mut dxc[xi * g.w..(xi + 1) * g.w];
                        if s == 1 {
                            let ds = &mut drow
                                [(j0 as isize + off_j) as usize..(j1 as isize + off_j) as usize];
                            for (dv, gv) in ds.iter_mut().zip(&grow[j0..j1]) {
                                *dv += wgt * gv;
                            }
                        } else {
                            for j in j0..j1 {
                                drow[((s * j) as isize + off_j) as usize] += wgt * grow[j];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d`] with respect to the kernel:
/// `dk[o,c,u,v] = Σ_{i,j} gy[o,i,j] · x[c, s·i+u-pt, s·j+v-pl]`.
pub(crate) fn conv2d_adjoint_kernel(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.c_out * g.c_in * g.ka * g.kb];
    let (pt, pl) = g.pads();
    let s = g.stride;
    for o in 0..g.c_out {
        let go = &gy[o * g.ho * g.wo..(o + 1) * g.ho * g.wo];
        for c in 0..g.c_in {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for u in 0..g.ka {
                let (i0, i1) = valid_range(g.ho, g.h, s, u as isize - pt);
                for v in 0..g.kb {
                    let off_j = v as isize - pl;
                    let (j0, j1) = valid_range(g.wo, g.w, s, off_j);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let xi = ((s * i) as isize + u as isize - pt) as usize;
                        let xrow = &xc[xi * g.w..(xi + 1) * g.w];
                        let grow = &go[i * g.wo..(i + 1) * g.wo];
                        if s == 1 {
                            let xs = &xrow
                                [(j0 as isize + off_j) as usize..(j1 as isize + off_j) as usize];
                            acc += grow[j0..j1].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for j in j0..j1 {
                                acc += grow[j] * xrow[((s * j) as isize + off_j) as usize];
                            }
                        }
                    }
                    dk[((o * g.c_in + c) * g.ka + u) * g.kb + v] = acc;
                }
            }
        }
    }
    dk
}

pub(crate) fn avgpool(x: &[f64], c: usize, h: usize, w: usize, a: usize, b: usize) -> Vec<f64> {
    let (ho, wo) = (h / a, w / b);
    let inv = 1.0 / (a * b) as f64;
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..h {
            let xrow = &x[(ch * h + i) * w..(ch * h + i + 1) * w];
            let yrow = &mut y[(ch * ho + i / a) * wo..(ch * ho + i / a + 1) * wo];
            for (j, &xv) in xrow.iter().enumerate() {
                yrow[j / b] += xv * inv;
            }
        }
    }
    y
}

pub(crate) fn avgpool_adjoint(gy: &[f64], c: usize, h: usize, w: usize, a: usize, b: usize) -> Vec<f64> {
    let (ho, wo) = (h / a, w / b);
    let inv = 1.0 / (a * b) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let grow = &gy[(ch * ho + i / a) * wo..(ch * ho + i / a + 1) * wo];
            let drow = &mut dx[(ch * h + i) * w..(ch * h + i + 1) * w];
            for (j, dv) in drow.iter_mut().enumerate() {
                *dv = grow[j / b] * inv;
            }
        }
    }
    dx
}

/// `C[m×n] = A[m×k] · B[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `G · Bᵀ` for `G[m×n]`, `B[k×n]`.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `Aᵀ · G` for `A[m×k]`, `G[m×n]`.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (ov, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *ov += av * gv;
            }
        }
    }
    out
}

/// Four-node interpolation stencils for a fixed set of sample points on a
/// regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearTaps {
    rows: usize,
    cols: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl BilinearTaps {
    /// Grid node `(r, c)` sits at `(origin.0 + c·spacing, origin.1 + r·spacing)`;
    /// rows index `y` and columns index `x`.
    pub fn new(
        rows: usize,
        cols: usize,
        origin: (f64, f64),
        spacing: f64,
        points: &[(f64, f64)],
    ) -> Result<Self> {
        if rows < 2 || cols < 2 || !(spacing > 0.0) {
            return Err(Error::InvalidShape {
                op: "bilinear_sample",
                reason: format!("grid {rows}x{cols} with spacing {spacing}"),
            });
        }
        let mut taps = Vec::with_capacity(points.len());
        for &(x, y) in points {
            let fx = (x - origin.0) / spacing;
            let fy = (y - origin.1) / spacing;
            let eps = 1e-9;
            if !(fx >= -eps && fx <= (cols - 1) as f64 + eps && fy >= -eps && fy <= (rows - 1) as f64 + eps)
            {
                return Err(Error::OutOfDomain { x, y });
            }
            let fx = fx.clamp(0.0, (cols - 1) as f64);
            let fy = fy.clamp(0.0, (rows - 1) as f64);
            let c0 = (fx.floor() as usize).min(cols - 2);
            let r0 = (fy.floor() as usize).min(rows - 2);
            let tx = fx - c0 as f64;
            let ty = fy - r0 as f64;
            let i00 = r0 * cols + c0;
            taps.push([
                (i00, (1.0 - tx) * (1.0 - ty)),
                (i00 + 1, tx * (1.0 - ty)),
                (i00 + cols, (1.0 - tx) * ty),
                (i00 + cols + 1, tx * ty),
            ]);
        }
        Ok(Self { rows, cols, taps })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn sample(&self, field: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * field[i]).sum())
            .collect()
    }

    pub(crate) fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for (t, &gv) in self.taps.iter().zip(g) {
            for &(i, w) in t {
                out[i] += w * gv;
            }
        }
        out
    }
}
