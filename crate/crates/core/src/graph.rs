//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation reads only
//! nodes that already exist, so the tape is acyclic by construction and the
//! backward pass is a single reverse sweep. A fresh graph is built for every
//! training step.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft;
use crate::kernels::{self, BilinearTaps, ConvGeom};
use crate::tensor::{ComplexTensor, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Value {
    Real(Tensor),
    Complex(ComplexTensor),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(z) => z.shape(),
        }
    }

    fn add_assign(&mut self, other: Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => add_into(a, &b),
            (Value::Complex(a), Value::Complex(b)) => {
                add_into(&mut a.re, &b.re);
                add_into(&mut a.im, &b.im);
            }
            _ => unreachable!("gradient kind always matches node kind"),
        }
    }
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    a.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x += y);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sin,
    Tanh,
    Neg,
    Abs,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Unary(Unary, Var),
    Scale(Var, f64),
    Binary(Binary, Var, Var),
    Sum(Var),
    Matmul(Var, Var),
    Conv2d(Var, Var, usize),
    ConvTranspose2d(Var, Var),
    AvgPool(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Stack(Vec<Var>),
    Diff(Var, usize),
    Complex(Var, Var),
    Re(Var),
    Im(Var),
    Fft2(Var),
    Ifft2(Var),
    SpectralMul(Var, Var),
    SpectralFilter(Var, Arc<Tensor>),
    Sample(Var, Arc<BilinearTaps>),
    Scatter(Var, Var, Arc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of the graph.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignVar {
                var: v.0,
                len: self.nodes.len(),
            })
        }
    }

    fn real(&self, v: Var, op: &'static str) -> Result<&Tensor> {
        self.check(v)?;
        match &self.nodes[v.0].value {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => Err(Error::KindMismatch {
                op,
                expected: "real",
            }),
        }
    }

    fn cplx(&self, v: Var, op: &'static str) -> Result<&ComplexTensor> {
        self.check(v)?;
        match &self.nodes[v.0].value {
            Value::Complex(z) => Ok(z),
            Value::Real(_) => Err(Error::KindMismatch {
                op,
                expected: "complex",
            }),
        }
    }

    /// Trainable input; [`Graph::backward`] reports its gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Value::Real(t), Op::Leaf)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Real(t), Op::Constant)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes.get(v.0).map(|n| &n.op), Some(Op::Leaf))
    }

    /// Real value of a node.
    ///
    /// Panics if `v` is complex or belongs to another graph.
    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("node {} holds a complex value", v.0),
        }
    }

    pub fn complex_value(&self, v: Var) -> Result<&ComplexTensor> {
        self.cplx(v, "complex_value")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = self.real(x, "unary")?;
        let out = match kind {
            Unary::Sin => t.map(f64::sin),
            Unary::Tanh => t.map(f64::tanh),
            Unary::Neg => t.map(|v| -v),
            Unary::Abs => t.map(f64::abs),
            Unary::Relu => t.map(|v| v.max(0.0)),
        };
        Ok(self.push(Value::Real(out), Op::Unary(kind, x)))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sin, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let out = self.real(x, "scale")?.scaled(alpha);
        Ok(self.push(Value::Real(out), Op::Scale(x, alpha)))
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single element, which is broadcast.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let ta = self.real(a, "binary")?;
        let tb = self.real(b, "binary")?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::ShapeMismatch {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        Ok(self.push(Value::Real(out), Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.real(x, "sum")?.sum();
        Ok(self.push(Value::Real(Tensor::scalar(s)), Op::Sum(x)))
    }

    /// `Σ x²`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    // ---- linear algebra and layers ----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.real(a, "matmul")?;
        let tb = self.real(b, "matmul")?;
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        let out = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(Value::Real(out), Op::Matmul(a, b)))
    }

    /// Same-padded cross-correlation, `x: [Cin, H, W]`, `kernel: [Cout, Cin, a, b]`,
    /// stride 1 or 2. No bias.
    pub fn conv2d_strided(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let tx = self.real(x, "conv2d")?;
        let tk = self.real(kernel, "conv2d")?;
        let geom = ConvGeom::new(tx, tk, stride)?;
        let out = Tensor::new(
            vec![geom.c_out, geom.ho, geom.wo],
            kernels::conv2d(tx.data(), tk.data(), &geom),
        )?;
        Ok(self.push(Value::Real(out), Op::Conv2d(x, kernel, stride)))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.conv2d_strided(x, kernel, 1)
    }

    /// Stride-2 transposed convolution, `x: [Cin, H, W]`,
    /// `kernel: [Cin, Cout, a, b]` → `[Cout, 2H, 2W]`. Exact adjoint of the
    /// stride-2 [`Graph::conv2d_strided`] with the same kernel.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let tx = self.real(x, "conv_transpose2d")?;
        let tk = self.real(kernel, "conv_transpose2d")?;
        let geom = transpose_geom(tx, tk)?;
        let out = Tensor::new(
            vec![geom.c_in, geom.h, geom.w],
            kernels::conv2d_adjoint_input(tx.data(), tk.data(), &geom),
        )?;
        Ok(self.push(Value::Real(out), Op::ConvTranspose2d(x, kernel)))
    }

    pub fn avgpool2d(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let tx = self.real(x, "avgpool2d")?;
        let (c, h, w) = match *tx.shape() {
            [c, h, w] if a > 0 && b > 0 && h % a == 0 && w % b == 0 => (c, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    op: "avgpool2d",
                    reason: format!("window {a}x{b} does not tile {:?}", tx.shape()),
                })
            }
        };
        let out = Tensor::new(vec![c, h / a, w / b], kernels::avgpool(tx.data(), c, h, w, a, b))?;
        Ok(self.push(Value::Real(out), Op::AvgPool(x, a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.real(x, "reshape")?.clone().reshape(shape)?;
        Ok(self.push(Value::Real(out), Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.real(x, "transpose")?.transpose2()?;
        Ok(self.push(Value::Real(out), Op::Transpose(x)))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::InvalidShape {
            op: "stack",
            reason: "no inputs".into(),
        })?;
        let shape = self.real(first, "stack")?.shape().to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * xs.len());
        for &x in xs {
            let t = self.real(x, "stack")?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend_from_slice(&shape);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(Value::Real(out), Op::Stack(xs.to_vec())))
    }

    /// One-sided forward difference of a 2-D tensor along `axis` (no wrap).
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.real(x, "diff")?;
        let (h, w) = match *t.shape() {
            [h, w] if (axis == 0 && h >= 2) || (axis == 1 && w >= 2) => (h, w),
            _ => {
                return Err(Error::InvalidShape {
                    op: "diff",
                    reason: format!("axis {axis} of {:?}", t.shape()),
                })
            }
        };
        let d = t.data();
        let out = if axis == 1 {
            let mut o = Vec::with_capacity(h * (w - 1));
            for r in 0..h {
                for c in 0..w - 1 {
                    o.push(d[r * w + c + 1] - d[r * w + c]);
                }
            }
            Tensor::new(vec![h, w - 1], o)?
        } else {
            let o = (0..(h - 1) * w).map(|i| d[i + w] - d[i]).collect();
            Tensor::new(vec![h - 1, w], o)?
        };
        Ok(self.push(Value::Real(out), Op::Diff(x, axis)))
    }

    // ---- complex and spectral ---------------------------------------------

    pub fn complex(&mut self, re: Var, im: Var) -> Result<Var> {
        let z = ComplexTensor::new(self.real(re, "complex")?.clone(), self.real(im, "complex")?.clone())?;
        Ok(self.push(Value::Complex(z), Op::Complex(re, im)))
    }

    pub fn re(&mut self, z: Var) -> Result<Var> {
        let t = self.cplx(z, "re")?.re.clone();
        Ok(self.push(Value::Real(t), Op::Re(z)))
    }

    pub fn im(&mut self, z: Var) -> Result<Var> {
        let t = self.cplx(z, "im")?.im.clone();
        Ok(self.push(Value::Real(t), Op::Im(z)))
    }

    pub fn fft2(&mut self, z: Var) -> Result<Var> {
        let out = fft::fft2(self.cplx(z, "fft2")?)?;
        Ok(self.push(Value::Complex(out), Op::Fft2(z)))
    }

    pub fn ifft2(&mut self, z: Var) -> Result<Var> {
        let out = fft::ifft2(self.cplx(z, "ifft2")?)?;
        Ok(self.push(Value::Complex(out), Op::Ifft2(z)))
    }

    /// Complex tensor scaled entrywise by a real tensor of the same shape.
    pub fn spectral_mul(&mut self, z: Var, w: Var) -> Result<Var> {
        let tz = self.cplx(z, "spectral_mul")?;
        let tw = self.real(w, "spectral_mul")?;
        if tz.shape() != tw.shape() {
            return Err(Error::ShapeMismatch {
                op: "spectral_mul",
                lhs: tz.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let re = Tensor::new(
            tw.shape().to_vec(),
            tz.re.data().iter().zip(tw.data()).map(|(a, b)| a * b).collect(),
        )?;
        let im = Tensor::new(
            tw.shape().to_vec(),
            tz.im.data().iter().zip(tw.data()).map(|(a, b)| a * b).collect(),
        )?;
        Ok(self.push(Value::Complex(ComplexTensor { re, im }), Op::SpectralMul(z, w)))
    }

    /// Fused `Re ifft2(factor · fft2(x))` for a real field and a fixed real,
    /// point-symmetric factor. Self-adjoint, so the backward pass applies the
    /// same filter.
    pub fn spectral_filter(&mut self, x: Var, factor: &Arc<Tensor>) -> Result<Var> {
        let out = fft::spectral_filter(self.real(x, "spectral_filter")?, factor)?;
        Ok(self.push(Value::Real(out), Op::SpectralFilter(x, Arc::clone(factor))))
    }

    // ---- gathers -----------------------------------------------------------

    pub fn bilinear_sample(&mut self, field: Var, taps: &Arc<BilinearTaps>) -> Result<Var> {
        let t = self.real(field, "bilinear_sample")?;
        if t.shape() != taps.shape() {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: t.shape().to_vec(),
                rhs: taps.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![taps.len()], taps.sample(t.data()))?;
        Ok(self.push(Value::Real(out), Op::Sample(field, Arc::clone(taps))))
    }

    /// Copy of `base` with `base[indices[p]] = src[p]`.
    pub fn scatter(&mut self, base: Var, src: Var, indices: &Arc<Vec<usize>>) -> Result<Var> {
        let tb = self.real(base, "scatter")?;
        let ts = self.real(src, "scatter")?;
        if ts.len() != indices.len() || indices.iter().any(|&i| i >= tb.len()) {
            return Err(Error::InvalidShape {
                op: "scatter",
                reason: format!(
                    "{} source values for {} indices into {:?}",
                    ts.len(),
                    indices.len(),
                    tb.shape()
                ),
            });
        }
        let mut out = tb.clone();
        for (&i, &v) in indices.iter().zip(ts.data()) {
            out.data_mut()[i] = v;
        }
        Ok(self.push(Value::Real(out), Op::Scatter(base, src, Arc::clone(indices))))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse-mode gradient of a one-element node with respect to every leaf.
    /// Leaves the loss does not depend on receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.real(loss, "backward")?;
        if !t.is_scalar() {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
        self.backward_with_seed(loss, Tensor::new(t.shape().to_vec(), vec![1.0])?)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// to the leaves.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let out_t = self.real(output, "backward")?;
        if out_t.shape() != seed.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: out_t.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Value>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Value::Real(seed));
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    result.map.insert(Var(idx), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            for (input, contrib) in self.node_vjp(idx, g, &mut result)? {
                if input.0 >= idx {
                    return Err(Error::InvalidShape {
                        op: "backward",
                        reason: format!("node {idx} reads later node {}", input.0),
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(result)
    }

    fn node_vjp(&self, idx: usize, g: Value, result: &mut Gradients) -> Result<Vec<(Var, Value)>> {
        let node = &self.nodes[idx];
        let real_g = |g: Value| match g {
            Value::Real(t) => t,
            Value::Complex(_) => unreachable!("real node received complex gradient"),
        };
        let cplx_g = |g: Value| match g {
            Value::Complex(z) => z,
            Value::Real(_) => unreachable!("complex node received real gradient"),
        };
        let r = |t: Tensor| Value::Real(t);
        Ok(match &node.op {
            Op::Leaf => {
                result.map.insert(Var(idx), real_g(g));
                vec![]
            }
            Op::Constant => vec![],
            Op::Unary(kind, x) => {
                let g = real_g(g);
                let xv = self.value(*x);
                let data = match kind {
                    Unary::Sin => zip_map(&g, xv, |g, x| g * x.cos()),
                    Unary::Tanh => {
                        let y = self.value(Var(idx));
                        zip_map(&g, y, |g, y| g * (1.0 - y * y))
                    }
                    Unary::Neg => g.data().iter().map(|v| -v).collect(),
                    Unary::Abs => zip_map(&g, xv, |g, x| g * sign(x)),
                    Unary::Relu => zip_map(&g, xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                };
                vec![(*x, r(Tensor::new(g.shape().to_vec(), data)?))]
            }
            Op::Scale(x, alpha) => vec![(*x, r(real_g(g).scaled(*alpha)))],
            Op::Binary(kind, a, b) => {
                let g = real_g(g);
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g),
                    Binary::Sub => (g.clone(), g.scaled(-1.0)),
                    Binary::Mul => {
                        let ga = if tb.shape() == g.shape() {
                            Tensor::new(g.shape().to_vec(), zip_map(&g, tb, |g, y| g * y))?
                        } else {
                            g.scaled(tb.item())
                        };
                        let gb = if ta.shape() == g.shape() {
                            Tensor::new(g.shape().to_vec(), zip_map(&g, ta, |g, x| g * x))?
                        } else {
                            g.scaled(ta.item())
                        };
                        (ga, gb)
                    }
                };
                vec![(*a, r(reduce_to(ga, ta.shape()))), (*b, r(reduce_to(gb, tb.shape())))]
            }
            Op::Sum(x) => {
                let gv = real_g(g).item();
                vec![(*x, r(Tensor::full(self.shape(*x), gv)))]
            }
            Op::Matmul(a, b) => {
                let g = real_g(g);
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let ga = Tensor::new(vec![m, k], kernels::matmul_nt(g.data(), tb.data(), m, k, n))?;
                let gb = Tensor::new(vec![k, n], kernels::matmul_tn(ta.data(), g.data(), m, k, n))?;
                vec![(*a, r(ga)), (*b, r(gb))]
            }
            Op::Conv2d(x, k, stride) => {
                let g = real_g(g);
                let (tx, tk) = (self.value(*x), self.value(*k));
                let geom = ConvGeom::new(tx, tk, *stride)?;
                let gx = kernels::conv2d_adjoint_input(g.data(), tk.data(), &geom);
                let gk = kernels::conv2d_adjoint_kernel(tx.data(), g.data(), &geom);
                vec![
                    (*x, r(Tensor::new(tx.shape().to_vec(), gx)?)),
                    (*k, r(Tensor::new(tk.shape().to_vec(), gk)?)),
                ]
            }
            Op::ConvTranspose2d(x, k) => {
                let g = real_g(g);
                let (tx, tk) = (self.value(*x), self.value(*k));
                let geom = transpose_geom(tx, tk)?;
                let gx = kernels::conv2d(g.data(), tk.data(), &geom);
                let gk = kernels::conv2d_adjoint_kernel(g.data(), tx.data(), &geom);
                vec![
                    (*x, r(Tensor::new(tx.shape().to_vec(), gx)?)),
                    (*k, r(Tensor::new(tk.shape().to_vec(), gk)?)),
                ]
            }
            Op::AvgPool(x, a, b) => {
                let g = real_g(g);
                let tx = self.value(*x);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let gx = kernels::avgpool_adjoint(g.data(), c, h, w, *a, *b);
                vec![(*x, r(Tensor::new(tx.shape().to_vec(), gx)?))]
            }
            Op::Reshape(x) => vec![(*x, r(real_g(g).reshape(self.shape(*x))?))],
            Op::Transpose(x) => vec![(*x, r(real_g(g).transpose2()?))],
            Op::Stack(xs) => {
                let g = real_g(g);
                let shape = self.shape(xs[0]).to_vec();
                let chunk: usize = shape.iter().product();
                xs.iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let t = Tensor::new(shape.clone(), g.data()[i * chunk..(i + 1) * chunk].to_vec());
                        t.map(|t| (x, r(t)))
                    })
                    .collect::<Result<_>>()?
            }
            Op::Diff(x, axis) => {
                let g = real_g(g);
                let (h, w) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gd = g.data();
                let mut gx = vec![0.0; h * w];
                if *axis == 1 {
                    for row in 0..h {
                        for c in 0..w - 1 {
                            let v = gd[row * (w - 1) + c];
                            gx[row * w + c + 1] += v;
                            gx[row * w + c] -= v;
                        }
                    }
                } else {
                    for (i, &v) in gd.iter().enumerate() {
                        gx[i + w] += v;
                        gx[i] -= v;
                    }
                }
                vec![(*x, r(Tensor::new(vec![h, w], gx)?))]
            }
            Op::Complex(re, im) => {
                let z = cplx_g(g);
                vec![(*re, r(z.re)), (*im, r(z.im))]
            }
            Op::Re(z) => {
                let g = real_g(g);
                let im = Tensor::zeros(g.shape());
                vec![(*z, Value::Complex(ComplexTensor { re: g, im }))]
            }
            Op::Im(z) => {
                let g = real_g(g);
                let re = Tensor::zeros(g.shape());
                vec![(*z, Value::Complex(ComplexTensor { re, im: g }))]
            }
            // With G = ∂L/∂Re y + i ∂L/∂Im y, the pullback of y = F x is
            // conj(F) G = N² · ifft2(G), and of y = ifft2(x) it is fft2(G) / N².
            Op::Fft2(z) => {
                let g = cplx_g(g);
                let n2 = g.re.len() as f64;
                let back = fft::ifft2(&g)?;
                vec![(*z, Value::Complex(ComplexTensor { re: back.re.scaled(n2), im: back.im.scaled(n2) }))]
            }
            Op::Ifft2(z) => {
                let g = cplx_g(g);
                let inv = 1.0 / g.re.len() as f64;
                let back = fft::fft2(&g)?;
                vec![(*z, Value::Complex(ComplexTensor { re: back.re.scaled(inv), im: back.im.scaled(inv) }))]
            }
            Op::SpectralMul(z, w) => {
                let g = cplx_g(g);
                let tz = self.cplx(*z, "spectral_mul")?;
                let tw = self.value(*w);
                let shape = g.shape().to_vec();
                let gz = ComplexTensor {
                    re: Tensor::new(shape.clone(), zip_map(&g.re, tw, |a, b| a * b))?,
                    im: Tensor::new(shape.clone(), zip_map(&g.im, tw, |a, b| a * b))?,
                };
                let gw: Vec<f64> = (0..g.re.len())
                    .map(|i| g.re.data()[i] * tz.re.data()[i] + g.im.data()[i] * tz.im.data()[i])
                    .collect();
                vec![(*z, Value::Complex(gz)), (*w, r(Tensor::new(shape, gw)?))]
            }
            Op::SpectralFilter(x, factor) => {
                vec![(*x, r(fft::spectral_filter(&real_g(g), factor)?))]
            }
            Op::Sample(field, taps) => {
                let g = real_g(g);
                let shape = self.shape(*field).to_vec();
                vec![(*field, r(Tensor::new(shape, taps.adjoint(g.data()))?))]
            }
            Op::Scatter(base, src, indices) => {
                let g = real_g(g);
                let gs: Vec<f64> = indices.iter().map(|&i| g.data()[i]).collect();
                let mut gb = g;
                for &i in indices.iter() {
                    gb.data_mut()[i] = 0.0;
                }
                let src_shape = self.shape(*src).to_vec();
                vec![(*base, r(gb)), (*src, r(Tensor::new(src_shape, gs)?))]
            }
        })
    }
}

fn transpose_geom(x: &Tensor, k: &Tensor) -> Result<ConvGeom> {
    match (x.shape(), k.shape()) {
        (&[c_in, h, w], &[kc, c_out, a, b]) if kc == c_in => {
            // Viewed as the stride-2 convolution it is the adjoint of:
            // that convolution maps [c_out, 2h, 2w] -> [c_in, h, w].
            ConvGeom::from_dims(c_in, c_out, a, b, 2 * h, 2 * w, 2, "conv_transpose2d")
        }
        _ => Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        }),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sums a broadcast gradient back down to a one-element operand.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::new(shape.to_vec(), vec![g.sum()]).expect("scalar operand")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let y = g.tanh(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adding_zero_is_bitwise_identity() {
        let mut g = Graph::new();
        let data = [0.1, -3.7, 1e-300, 5.5e10];
        let x = g.constant(t(&[4], &data));
        let z = g.constant(Tensor::zeros(&[4]));
        let y = g.add(x, z).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sin_matches_reference() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, std::f64::consts::FRAC_PI_2]));
        let y = g.sin(x).unwrap();
        assert!((g.value(y).data()[0]).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast_gradient_is_summed() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, s).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[5., 6.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);

        let id = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5));
        let p = g.matmul(id, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let z = g.constant(Tensor::zeros(&[2, 4]));
        let q = g.matmul(m, z).unwrap();
        assert!(g.value(q).data().iter().all(|&v| v == 0.0));

        assert!(g.matmul(a, m).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let l = g.sum_squares(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn sum_of_tanh_gradient() {
        let mut g = Graph::new();
        let data = [0.3, -1.2, 2.0];
        let x = g.leaf(t(&[3], &data));
        let y = g.tanh(x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        for (gv, &xv) in grads.get(x).unwrap().data().iter().zip(&data) {
            assert!((gv - (1.0 - xv.tanh().powi(2))).abs() < 1e-15);
        }
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let unused = g.leaf(Tensor::full(&[5], 1.0));
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[5]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut a = Graph::new();
        let _ = a.leaf(Tensor::zeros(&[1]));
        let v = a.leaf(Tensor::zeros(&[1]));
        let mut b = Graph::new();
        assert!(matches!(b.sin(v), Err(Error::ForeignVar { .. })));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y).data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);

        let img = g.constant(Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.37).sin()));
        let mut delta = Tensor::zeros(&[2, 2, 3, 3]);
        delta.data_mut()[4] = 1.0; // out 0 <- in 0 centre
        delta.data_mut()[9 + 9 + 9 + 4] = 1.0; // out 1 <- in 1 centre
        let dk = g.constant(delta);
        let out = g.conv2d(img, dk).unwrap();
        assert_eq!(g.value(out), g.value(img));

        let big = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let small = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(g.conv2d(small, big).is_err());
    }

    #[test]
    fn transposed_conv_of_delta_copies_kernel() {
        let mut g = Graph::new();
        let mut x = Tensor::zeros(&[1, 3, 3]);
        x.data_mut()[4] = 1.0; // (1, 1)
        let x = g.constant(x);
        let k = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = g.conv_transpose2d(x, k).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), &[1, 6, 6]);
        assert_eq!(y.at2_3(0, 2, 2), 1.0);
        assert_eq!(y.at2_3(0, 2, 3), 2.0);
        assert_eq!(y.at2_3(0, 3, 2), 3.0);
        assert_eq!(y.at2_3(0, 3, 3), 4.0);
        assert_eq!(y.sum(), 10.0);

        let z = g.constant(Tensor::zeros(&[2, 3, 3]));
        let kk = g.constant(Tensor::full(&[2, 3, 3, 3], 0.7));
        let yz = g.conv_transpose2d(z, kk).unwrap();
        assert!(g.value(yz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avgpool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        let c = g.constant(Tensor::full(&[2, 4, 6], 0.3));
        let p = g.avgpool2d(c, 2, 3).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(g.avgpool2d(c, 3, 3).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let taps = Arc::new(
            BilinearTaps::new(2, 2, (0.0, 0.0), 1.0, &[(0.5, 0.5), (0.0, 0.0), (0.5, 0.0), (1.0, 1.0)])
                .unwrap(),
        );
        let mut g = Graph::new();
        let f = g.constant(t(&[2, 2], &[0., 1., 2., 3.]));
        let s = g.bilinear_sample(f, &taps).unwrap();
        assert_eq!(g.value(s).data(), &[1.5, 0.0, 0.5, 3.0]);
    }

    impl Tensor {
        fn at2_3(&self, c: usize, r: usize, col: usize) -> f64 {
            let (h, w) = (self.shape()[1], self.shape()[2]);
            self.data()[(c * h + r) * w + col]
        }
    }
}
