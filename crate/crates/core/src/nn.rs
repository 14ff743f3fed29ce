//! Minimal reverse-mode differentiation over [`Mat`] values, plus the
//! parameter store and AdamW optimizer used by the learned components.
//!
//! A [`Tape`] records one forward pass. Parameters are read from an
//! immutable [`ParamStore`]; calling [`Tape::backward`] yields gradients for
//! every parameter touched by the pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init scaled by `std`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let value = Mat::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.add(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Rounds every value to the nearest `f32`, so the store survives an
    /// `f32` round trip bit-exactly.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn to_named(&self) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from a name-keyed map; every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, Mat>) -> Result<()> {
        for p in &mut self.params {
            let v = named
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter '{}'", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{}' is {:?}, checkpoint holds {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<Mat>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.values {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(Mat::sq_norm).sum::<f64>().sqrt()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    FillRows {
        base: Var,
        keep: Vec<bool>,
        token: Var,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Mse(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The tape node for a parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.rows(), 1);
        let mut v = self.value(a).clone();
        let r = r.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// `x · w + b` with `w` as `in x out` and `b` as `1 x out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        const EPS: f64 = 1e-5;
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut y = xhat.clone();
        for i in 0..n {
            for ((o, gj), bj) in y.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gj + bj;
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Var {
        let v = self.value(a).slice_cols(start, count);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let v = self.value(a).slice_rows(start, count);
        self.push(v, Op::SliceRows(a, start))
    }

    /// Row `i` of the output is `base[i]` where `keep[i]`, otherwise the
    /// single-row `token`. Replaced rows of `base` are never read.
    pub fn fill_rows(&mut self, base: Var, keep: &[bool], token: Var) -> Var {
        let b = self.value(base);
        let t = self.value(token);
        debug_assert_eq!(b.rows(), keep.len());
        let mut v = Mat::zeros(b.rows(), b.cols());
        for (i, &k) in keep.iter().enumerate() {
            let src = if k { b.row(i) } else { t.row(0) };
            v.row_mut(i).copy_from_slice(src);
        }
        self.push(
            v,
            Op::FillRows {
                base,
                keep: keep.to_vec(),
                token,
            },
        )
    }

    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for a in row.iter_mut() {
                *a /= n;
            }
        }
        self.push(v, Op::RowNormalize { x, norms })
    }

    /// Mean squared error against a constant target, as a `1 x 1` value.
    pub fn mse(&mut self, a: Var, target: &Mat) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse shape mismatch");
        let loss = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.len() as f64;
        self.push(Mat::filled(1, 1, loss), Op::Mse(a, target.clone()))
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        let mut out = Grads::zeros_like(self.params);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.values[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = gemm(&g, false, self.value(*b), true);
                    let gb = gemm(self.value(*a), true, &g, false);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gemm(&g, false, self.value(*b), false);
                    let gb = gemm(&g, true, self.value(*a), false);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, column_sums(&g));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).row(0);
                    let (n, d) = g.shape();
                    let mut ggain = Mat::zeros(1, d);
                    let gbias = column_sums(&g);
                    let mut gx = Mat::zeros(n, d);
                    for i in 0..n {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut sum_gh = 0.0;
                        let mut sum_ghx = 0.0;
                        for j in 0..d {
                            ggain.data_mut()[j] += gr[j] * xr[j];
                            let gh = gr[j] * gv[j];
                            sum_gh += gh;
                            sum_ghx += gh * xr[j];
                        }
                        let is = inv_std[i] / d as f64;
                        let out_row = gx.row_mut(i);
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            out_row[j] = is * (d as f64 * gh - sum_gh - xr[j] * sum_ghx);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let gx = self.value(*a).zip_map(&g, |x, gy| gelu_grad(x) * gy);
                    acc(&mut grads, *a, gx);
                }
                Op::Silu(a) => {
                    let gx = self.value(*a).zip_map(&g, |x, gy| {
                        let s = sigmoid(x);
                        gy * s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, gx);
                }
                Op::Tanh(a) => {
                    let gx = node.value.zip_map(&g, |y, gy| gy * (1.0 - y * y));
                    acc(&mut grads, *a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut gx = Mat::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let pr = p.row(i);
                        let gr = g.row(i);
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (pj, gj)) in gx.row_mut(i).iter_mut().zip(pr.iter().zip(gr)) {
                            *o = pj * (gj - dot);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut gx = Mat::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        acc(&mut grads, *p, g.slice_cols(off, c));
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut gx = Mat::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        gx.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::FillRows { base, keep, token } => {
                    let mut gb = Mat::zeros(g.rows(), g.cols());
                    let mut gt = Mat::zeros(1, g.cols());
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            gb.row_mut(i).copy_from_slice(g.row(i));
                        } else {
                            for (o, v) in gt.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                    acc(&mut grads, *base, gb);
                    acc(&mut grads, *token, gt);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yj, gj)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (gj - yj * dot) / norms[i];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Mse(a, target) => {
                    let av = self.value(*a);
                    let s = 2.0 * g.get(0, 0) / av.len() as f64;
                    let gx = av.zip_map(target, |x, y| s * (x - y));
                    acc(&mut grads, *a, gx);
                }
            }
        }
        out
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = Grads::zeros_like(store).values;
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(1.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. With `quantize`, parameters and moments are rounded to
    /// `f32` afterwards so a checkpoint captures the exact optimizer state.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, quantize: bool) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(c) => {
                let n = grads.global_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in store.iter_mut().enumerate() {
            let g = grads.values[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let decay = if p.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
                if quantize {
                    *w = *w as f32 as f64;
                    *mi = *mi as f32 as f64;
                    *vi = *vi as f32 as f64;
                }
            }
        }
    }
}
