//! Dynamic tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. `backward`
//! replays the tape in reverse execution order, so each node is visited once.

use std::collections::HashMap;

use super::linalg::{gemm, Strides};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{rows_cols, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor for group normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    sa: Strides,
    sb: Strides,
}

#[derive(Clone, Copy, Debug)]
struct Lerp {
    i0: usize,
    i1: usize,
    t: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    AddRowBias { x: Var, bias: Var },
    MulRowScale { x: Var, scale: Var },
    MatMul { a: Var, b: Var, dims: MatDims },
    Relu(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    SumRows(Var),
    Softmax0(Var),
    GroupNorm { x: Var, groups: usize, rstd: Vec<f64> },
    DyRelu { x: Var, coeffs: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Resize { x: Var, c: usize, in_hw: (usize, usize), ys: Vec<Lerp>, xs: Vec<Lerp> },
    AvgPool { x: Var, c: usize, in_hw: (usize, usize), bins_y: Vec<(usize, usize)>, bins_x: Vec<(usize, usize)> },
    Gather { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Execution record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    corrupt: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`], kept for leaves only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: gradients reaching `id` are deliberately distorted.
    pub fn corrupt_param_grad(&mut self, id: ParamId) {
        self.corrupt = Some(id);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Leaf whose gradient is tracked iff the tensor has `requires_grad` set.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Leaf bound to a parameter. Repeated calls return the same node, so
    /// a parameter shared by several sub-networks accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.node(a).shape.clone(), value, mk, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.node(x).value.iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(x);
        self.push(self.node(x).shape.clone(), value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds `bias[r]` to every element of row `r` of the matrix view of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        if self.node(bias).value.len() != r {
            return Err(Error::shape("add_row_bias", format!("{} rows, bias {}", r, self.node(bias).value.len())));
        }
        let xv = &self.node(x).value;
        let bv = &self.node(bias).value;
        let mut value = xv.clone();
        for (i, row) in value.chunks_mut(c).enumerate() {
            row.iter_mut().for_each(|v| *v += bv[i]);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.node(x).shape.clone(), value, Op::AddRowBias { x, bias }, rg))
    }

    /// Multiplies row `r` of the matrix view of `x` by `scale[r]`.
    pub fn mul_row_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        if self.node(scale).value.len() != r {
            return Err(Error::shape("mul_row_scale", format!("{} rows, scale {}", r, self.node(scale).value.len())));
        }
        let sv = &self.node(scale).value;
        let mut value = self.node(x).value.clone();
        for (i, row) in value.chunks_mut(c).enumerate() {
            row.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(self.node(x).shape.clone(), value, Op::MulRowScale { x, scale }, rg))
    }

    /// Matrix product of rank-2 tensors, optionally transposing either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa_shape, sb_shape) = (&self.node(a).shape, &self.node(b).shape);
        if sa_shape.len() != 2 || sb_shape.len() != 2 {
            return Err(Error::shape("matmul", format!("rank-2 operands required, got {sa_shape:?} and {sb_shape:?}")));
        }
        let (ra, ca) = (sa_shape[0], sa_shape[1]);
        let (rb, cb) = (sb_shape[0], sb_shape[1]);
        let (m, k, sa) = if ta { (ca, ra, Strides::row_major(ca).transposed()) } else { (ra, ca, Strides::row_major(ca)) };
        let (k2, n, sb) = if tb { (cb, rb, Strides::row_major(cb).transposed()) } else { (rb, cb, Strides::row_major(cb)) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, &self.node(a).value, sa, &self.node(b).value, sb, 0.0, &mut value, Strides::row_major(n));
        let rg = self.rg(a) || self.rg(b);
        let dims = MatDims { m, k, n, sa, sb };
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, dims }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `sum_i a_i * b_i` for two vectors of equal length.
    pub fn inner_product(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).value.len() != self.node(b).value.len() {
            return Err(Error::shape(
                "inner_product",
                format!("lengths {} and {}", self.node(a).value.len(), self.node(b).value.len()),
            ));
        }
        let a2 = self.reshape(a, vec![1, self.node(a).value.len()])?;
        let b2 = self.reshape(b, vec![self.node(b).value.len(), 1])?;
        let p = self.matmul(a2, b2)?;
        self.reshape(p, vec![])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.node(x).value.iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.node(x).shape.clone(), value, Op::Relu(x), rg)
    }

    /// Natural log; callers are responsible for positive inputs.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.node(x).value.iter().map(|v| v.ln()).collect();
        let rg = self.rg(x);
        self.push(self.node(x).shape.clone(), value, Op::Log(x), rg)
    }

    /// `sqrt(max(x, 0))`; the derivative is taken as zero where the argument is not positive.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.node(x).value.iter().map(|v| v.max(0.0).sqrt()).collect();
        let rg = self.rg(x);
        self.push(self.node(x).shape.clone(), value, Op::Sqrt(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.node(x).value.iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.node(x).shape.clone(), value, Op::Tanh(x), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.node(x).value.iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.rg(x);
        self.push(self.node(x).shape.clone(), value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same node has same shape")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x).value.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the leading axis: `[R, rest..] -> [rest..]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let shape = &self.node(x).shape;
        let out_shape: Vec<usize> = if shape.len() <= 1 { vec![] } else { shape[1..].to_vec() };
        let (r, c) = rows_cols(shape);
        let xv = &self.node(x).value;
        let mut value = vec![0.0; c];
        for i in 0..r {
            for (o, v) in value.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(out_shape, value, Op::SumRows(x), rg)
    }

    /// Softmax along the leading axis, independently for every trailing
    /// position. A vector is treated as a single column.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = rows_cols(&self.node(x).shape);
        let xv = &self.node(x).value;
        let mut value = vec![0.0; r * c];
        for j in 0..c {
            let mut m = f64::NEG_INFINITY;
            for i in 0..r {
                m = m.max(xv[i * c + j]);
            }
            let mut z = 0.0;
            for i in 0..r {
                let e = (xv[i * c + j] - m).exp();
                value[i * c + j] = e;
                z += e;
            }
            for i in 0..r {
                value[i * c + j] /= z;
            }
        }
        let rg = self.rg(x);
        self.push(self.node(x).shape.clone(), value, Op::Softmax0(x), rg)
    }

    /// Zero-mean unit-variance normalization over each group of consecutive
    /// leading-axis rows (all trailing positions pooled). No affine.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        if groups == 0 || r % groups != 0 {
            return Err(Error::shape("group_norm", format!("{groups} groups over {r} channels")));
        }
        let block = (r / groups) * c;
        let xv = &self.node(x).value;
        let mut value = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let src = &xv[g * block..(g + 1) * block];
            let mean = src.iter().sum::<f64>() / block as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in value[g * block..(g + 1) * block].iter_mut().zip(src) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(x);
        Ok(self.push(self.node(x).shape.clone(), value, Op::GroupNorm { x, groups, rstd }, rg))
    }

    /// Channelwise two-piece activation `max(a1 x + b1, a2 x + b2)`.
    ///
    /// `coeffs` holds `4 * C` values laid out as `[a1 | b1 | a2 | b2]`.
    pub fn dyrelu(&mut self, x: Var, coeffs: Var) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        if self.node(coeffs).value.len() != 4 * r {
            return Err(Error::shape("dyrelu", format!("{} channels need {} coefficients, got {}", r, 4 * r, self.node(coeffs).value.len())));
        }
        let xv = &self.node(x).value;
        let k = &self.node(coeffs).value;
        let mut value = vec![0.0; r * c];
        for ch in 0..r {
            let (a1, b1, a2, b2) = (k[ch], k[r + ch], k[2 * r + ch], k[3 * r + ch]);
            for j in 0..c {
                let v = xv[ch * c + j];
                value[ch * c + j] = (a1 * v + b1).max(a2 * v + b2);
            }
        }
        let rg = self.rg(x) || self.rg(coeffs);
        Ok(self.push(self.node(x).shape.clone(), value, Op::DyRelu { x, coeffs }, rg))
    }

    /// Cross-correlation of `x: [Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        let ws = self.node(w).shape.clone();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if xs[0] != ws[1] {
            return Err(Error::shape("conv2d", format!("input has {} channels, kernel expects {}", xs[0], ws[1])));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel extent {}x{} must be odd", ws[2], ws[3])));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", "kernel larger than padded input or zero stride"));
        }
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            oh: (xs[1] + 2 * pad - ws[2]) / stride + 1,
            ow: (xs[2] + 2 * pad - ws[3]) / stride + 1,
        };
        let cols = im2col(&self.node(x).value, &geom);
        let kdim = geom.cin * geom.kh * geom.kw;
        let p = geom.oh * geom.ow;
        let mut value = vec![0.0; geom.cout * p];
        gemm(geom.cout, kdim, p, &self.node(w).value, Strides::row_major(kdim), &cols, Strides::row_major(p), 0.0, &mut value, Strides::row_major(p));
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![geom.cout, geom.oh, geom.ow], value, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.node(*first).shape.get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = &self.node(p).shape;
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("trailing extents {:?} vs {:?}", s, tail)));
            }
            rows += s[0];
            value.extend_from_slice(&self.node(p).value);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {shape:?}")));
        }
        let (_, c) = rows_cols(&shape);
        let value = self.node(x).value[start * c..end * c].to_vec();
        let mut out = shape;
        out[0] = end - start;
        let rg = self.rg(x);
        Ok(self.push(out, value, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.node(x).value.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.node(x).shape, shape)));
        }
        let value = self.node(x).value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("rank-2 required, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = &self.node(x).value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], value, Op::Transpose(x), rg))
    }

    /// Bilinear resize of `[C, h, w]` to `[C, out_h, out_w]` with half-pixel
    /// centres (edge-clamped). Every output is a convex combination of inputs.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", format!("input {s:?} -> {out_h}x{out_w}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ys = lerp_table(h, out_h);
        let xs = lerp_table(w, out_w);
        let xv = &self.node(x).value;
        let mut value = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            let dst = &mut value[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, ly) in ys.iter().enumerate() {
                for (ox, lx) in xs.iter().enumerate() {
                    let top = (1.0 - lx.t) * src[ly.i0 * w + lx.i0] + lx.t * src[ly.i0 * w + lx.i1];
                    let bot = (1.0 - lx.t) * src[ly.i1 * w + lx.i0] + lx.t * src[ly.i1 * w + lx.i1];
                    dst[oy * out_w + ox] = (1.0 - ly.t) * top + ly.t * bot;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, out_h, out_w], value, Op::Resize { x, c, in_hw: (h, w), ys, xs }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() != 3 {
            return Err(Error::shape("upsample2x", format!("input {s:?}")));
        }
        self.resize_bilinear(x, s[1] * 2, s[2] * 2)
    }

    /// Adaptive average pooling of `[C, h, w]` to a `gh x gw` grid. Grid
    /// extents larger than the input are clamped to the input extent.
    pub fn adaptive_avg_pool(&mut self, x: Var, gh: usize, gw: usize) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() != 3 || gh == 0 || gw == 0 {
            return Err(Error::shape("adaptive_avg_pool", format!("input {s:?}, grid {gh}x{gw}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (gh.min(h), gw.min(w));
        let bins_y = pool_bins(h, gh);
        let bins_x = pool_bins(w, gw);
        let xv = &self.node(x).value;
        let mut value = vec![0.0; c * gh * gw];
        for ch in 0..c {
            for (by, &(y0, y1)) in bins_y.iter().enumerate() {
                for (bx, &(x0, x1)) in bins_x.iter().enumerate() {
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += xv[(ch * h + yy) * w + xx];
                        }
                    }
                    value[(ch * gh + by) * gw + bx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, gh, gw], value, Op::AvgPool { x, c, in_hw: (h, w), bins_y, bins_x }, rg))
    }

    /// Per-channel mean over all spatial positions: `[C, h, w] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let p = self.adaptive_avg_pool(x, 1, 1)?;
        let c = self.node(p).shape[0];
        self.reshape(p, vec![c])
    }

    /// Flat-index selection: `out[i] = x.flat[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.node(x).value.len();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather", format!("indices out of range for {n} elements")));
        }
        let xv = &self.node(x).value;
        let value = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len()], value, Op::Gather { x, idx }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::InvalidInput(format!("backward needs a scalar loss, got shape {:?}", ln.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for parameters of `store`, indexed by `ParamId`.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> ParamGrads {
        let mut out = vec![None; n_params];
        for (&id, &v) in &self.param_vars {
            if id.0 < n_params {
                if let Some(g) = grads.get(v) {
                    let mut g = g.to_vec();
                    if self.corrupt == Some(id) {
                        g.iter_mut().for_each(|x| *x = 1.5 * *x + 1e-3);
                    }
                    out[id.0] = Some(g);
                }
            }
        }
        ParamGrads(out)
    }

    /// Runs the backward sweep and accumulates into the store's grad slots.
    /// Parameters not reached by `loss` get a zero gradient.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        let pg = self.param_grads(&grads, store.len());
        store.accumulate(&pg, 1.0);
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                self.acc(grads, *a, |g| {
                    for ((o, d), y) in g.iter_mut().zip(gy).zip(bv) {
                        *o += d * y;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((o, d), x) in g.iter_mut().zip(gy).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o += scale * d));
            }
            Op::AddRowBias { x, bias } => {
                let (_, c) = rows_cols(&node.shape);
                self.acc(grads, *x, |g| add_into(g, gy));
                self.acc(grads, *bias, |g| {
                    for (o, row) in g.iter_mut().zip(gy.chunks(c)) {
                        *o += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MulRowScale { x, scale } => {
                let (_, c) = rows_cols(&node.shape);
                let (xv, sv) = (&self.node(*x).value, &self.node(*scale).value);
                self.acc(grads, *x, |g| {
                    for (i, (grow, dyrow)) in g.chunks_mut(c).zip(gy.chunks(c)).enumerate() {
                        grow.iter_mut().zip(dyrow).for_each(|(o, d)| *o += sv[i] * d);
                    }
                });
                self.acc(grads, *scale, |g| {
                    for (i, (xrow, dyrow)) in xv.chunks(c).zip(gy.chunks(c)).enumerate() {
                        g[i] += xrow.iter().zip(dyrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::MatMul { a, b, dims } => {
                let MatDims { m, k, n, sa, sb } = *dims;
                let sy = Strides::row_major(n);
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                // dA = dY * B^T, written straight into A's storage layout
                self.acc(grads, *a, |g| gemm(m, n, k, gy, sy, bv, sb.transposed(), 1.0, g, sa));
                // dB = A^T * dY
                self.acc(grads, *b, |g| gemm(k, m, n, av, sa.transposed(), gy, sy, 1.0, g, sb));
            }
            Op::Relu(x) => {
                let xv = &self.node(*x).value;
                self.acc(grads, *x, |g| {
                    for ((o, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        if *v > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = &self.node(*x).value;
                self.acc(grads, *x, |g| {
                    for ((o, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        *o += d / v;
                    }
                });
            }
            Op::Sqrt(x) => {
                let yv = &node.value;
                self.acc(grads, *x, |g| {
                    for ((o, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        if *y > 0.0 {
                            *o += d * 0.5 / y;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &node.value;
                self.acc(grads, *x, |g| {
                    for ((o, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        *o += d * (1.0 - y * y);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.node(*x).value;
                self.acc(grads, *x, |g| {
                    for ((o, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        if *v > *lo && *v < *hi {
                            *o += d;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let d = gy[0];
                self.acc(grads, *x, |g| g.iter_mut().for_each(|o| *o += d));
            }
            Op::SumRows(x) => {
                let c = gy.len();
                self.acc(grads, *x, |g| {
                    for row in g.chunks_mut(c) {
                        add_into(row, gy);
                    }
                });
            }
            Op::Softmax0(x) => {
                let (r, c) = rows_cols(&node.shape);
                let yv = &node.value;
                self.acc(grads, *x, |g| {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| yv[i * c + j] * gy[i * c + j]).sum();
                        for i in 0..r {
                            g[i * c + j] += yv[i * c + j] * (gy[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::GroupNorm { x, groups, rstd } => {
                let yv = &node.value;
                let block = yv.len() / groups;
                self.acc(grads, *x, |g| {
                    for (gi, rs) in rstd.iter().enumerate() {
                        let r = gi * block..(gi + 1) * block;
                        let (dy, y) = (&gy[r.clone()], &yv[r.clone()]);
                        let mean_dy = dy.iter().sum::<f64>() / block as f64;
                        let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / block as f64;
                        for ((o, d), yy) in g[r].iter_mut().zip(dy).zip(y) {
                            *o += rs * (d - mean_dy - yy * mean_dyy);
                        }
                    }
                });
            }
            Op::DyRelu { x, coeffs } => {
                let (r, c) = rows_cols(&node.shape);
                let xv = &self.node(*x).value;
                let k = &self.node(*coeffs).value;
                let first = |ch: usize, v: f64| k[ch] * v + k[r + ch] >= k[2 * r + ch] * v + k[3 * r + ch];
                self.acc(grads, *x, |g| {
                    for ch in 0..r {
                        for j in 0..c {
                            let i = ch * c + j;
                            let slope = if first(ch, xv[i]) { k[ch] } else { k[2 * r + ch] };
                            g[i] += gy[i] * slope;
                        }
                    }
                });
                self.acc(grads, *coeffs, |g| {
                    for ch in 0..r {
                        for j in 0..c {
                            let i = ch * c + j;
                            let off = if first(ch, xv[i]) { 0 } else { 2 * r };
                            g[off + ch] += gy[i] * xv[i];
                            g[off + r + ch] += gy[i];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom, cols } => {
                let kdim = geom.cin * geom.kh * geom.kw;
                let p = geom.oh * geom.ow;
                let wv = &self.node(*w).value;
                self.acc(grads, *w, |g| {
                    gemm(geom.cout, p, kdim, gy, Strides::row_major(p), cols, Strides::row_major(p).transposed(), 1.0, g, Strides::row_major(kdim));
                });
                self.acc(grads, *x, |g| {
                    let mut dcols = vec![0.0; kdim * p];
                    gemm(kdim, geom.cout, p, wv, Strides::row_major(kdim).transposed(), gy, Strides::row_major(p), 0.0, &mut dcols, Strides::row_major(p));
                    col2im_add(&dcols, geom, g);
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.node(p).value.len();
                    self.acc(grads, p, |g| add_into(g, &gy[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, c) = rows_cols(&node.shape);
                let off = start * c;
                self.acc(grads, *x, |g| add_into(&mut g[off..off + gy.len()], gy));
            }
            Op::Reshape(x) => self.acc(grads, *x, |g| add_into(g, gy)),
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                // node is r x c; source is c x r
                self.acc(grads, *x, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::Resize { x, c, in_hw: (h, w), ys, xs } => {
                let (oh, ow) = (ys.len(), xs.len());
                self.acc(grads, *x, |g| {
                    for ch in 0..*c {
                        let dst = &mut g[ch * h * w..(ch + 1) * h * w];
                        let src = &gy[ch * oh * ow..(ch + 1) * oh * ow];
                        for (oy, ly) in ys.iter().enumerate() {
                            for (ox, lx) in xs.iter().enumerate() {
                                let d = src[oy * ow + ox];
                                let (top, bot) = ((1.0 - ly.t) * d, ly.t * d);
                                dst[ly.i0 * w + lx.i0] += (1.0 - lx.t) * top;
                                dst[ly.i0 * w + lx.i1] += lx.t * top;
                                dst[ly.i1 * w + lx.i0] += (1.0 - lx.t) * bot;
                                dst[ly.i1 * w + lx.i1] += lx.t * bot;
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, c, in_hw: (h, w), bins_y, bins_x } => {
                let (gh, gw) = (bins_y.len(), bins_x.len());
                self.acc(grads, *x, |g| {
                    for ch in 0..*c {
                        for (by, &(y0, y1)) in bins_y.iter().enumerate() {
                            for (bx, &(x0, x1)) in bins_x.iter().enumerate() {
                                let d = gy[(ch * gh + by) * gw + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        g[(ch * h + yy) * w + xx] += d;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                self.acc(grads, *x, |g| {
                    for (&i, d) in idx.iter().zip(gy) {
                        g[i] += d;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}

fn lerp_table(input: usize, output: usize) -> Vec<Lerp> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Lerp { i0, i1, t }
        })
        .collect()
}

/// Adaptive pooling windows: `[floor(i*n/g), ceil((i+1)*n/g))`.
pub(crate) fn pool_bins(n: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g).map(|i| (i * n / g, ((i + 1) * n).div_ceil(g))).collect()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * p];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
