//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is built per forward pass (define-by-run) and discarded after
//! [`Tape::backward`]. Recorded nodes are topological by construction, so the
//! backward sweep is a single reverse pass with cotangent accumulation.

use std::collections::HashMap;

use crate::error::{DueError, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    ConcatCols(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    ScaleByScalar(Var, Var),
    Col(Var, usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

// Abramowitz & Stegun 7.1.26 rational approximation of erf.
const ERF_P: f64 = 0.327_591_1;
const ERF_A: [f64; 5] = [
    0.254_829_592,
    -0.284_496_736,
    1.421_413_741,
    -1.453_152_027,
    1.061_405_429,
];

fn erf_approx(x: f64) -> f64 {
    let s = x.abs();
    let t = 1.0 / (1.0 + ERF_P * s);
    let poly = ((((ERF_A[4] * t + ERF_A[3]) * t + ERF_A[2]) * t + ERF_A[1]) * t + ERF_A[0]) * t;
    let e = 1.0 - poly * (-s * s).exp();
    if x < 0.0 {
        -e
    } else {
        e
    }
}

/// Exact derivative of `erf_approx`, so tape gradients match finite
/// differences of the implemented forward to machine precision.
fn erf_approx_deriv(x: f64) -> f64 {
    let s = x.abs();
    let t = 1.0 / (1.0 + ERF_P * s);
    let poly = ((((ERF_A[4] * t + ERF_A[3]) * t + ERF_A[2]) * t + ERF_A[1]) * t + ERF_A[0]) * t;
    let dpoly =
        (((5.0 * ERF_A[4] * t + 4.0 * ERF_A[3]) * t + 3.0 * ERF_A[2]) * t + 2.0 * ERF_A[1]) * t
            + ERF_A[0];
    (-s * s).exp() * (2.0 * s * poly + ERF_P * t * t * dpoly)
}

/// Standard normal CDF via the erf approximation.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf_approx(x / std::f64::consts::SQRT_2))
}

fn norm_cdf_deriv(x: f64) -> f64 {
    0.5 * erf_approx_deriv(x / std::f64::consts::SQRT_2) / std::f64::consts::SQRT_2
}

/// gelu(x) = x·Φ(x).
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

pub fn gelu_deriv(x: f64) -> f64 {
    norm_cdf(x) + x * norm_cdf_deriv(x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_value(a: &Tensor) -> Result<Tensor> {
    if !a.is_finite() {
        return Err(DueError::Numeric(
            "softmax_rows received non-finite input".into(),
        ));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let row = a.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..n {
            out.set(i, j, out.at(i, j) / sum);
        }
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        // Constants are leaves too; callers just never read their gradient.
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward seed with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), out))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DueError::Dimension(format!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| c * x);
        self.push(Op::Scale(a, c), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = map(self.value(a), softplus);
        self.push(Op::Softplus(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows_value(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    fn reduce_check(&self, a: Var, what: &str) -> Result<()> {
        if self.value(a).is_empty() {
            return Err(DueError::Domain(format!("{} of an empty tensor", what)));
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce_check(a, "sum")?;
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce_check(a, "mean")?;
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(s)))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        self.reduce_check(a, "sum_of_squares")?;
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        Ok(self.push(Op::SumSquares(a), Tensor::scalar(s)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(DueError::Dimension(format!(
                "concat_cols: row counts {} and {} differ",
                ta.rows(),
                tb.rows()
            )));
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, p + q]);
        for i in 0..m {
            for j in 0..p {
                out.set(i, j, ta.at(i, j));
            }
            for j in 0..q {
                out.set(i, p + j, tb.at(i, j));
            }
        }
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    /// Add a bias row (shape 1×n or n) to every row of `a` (m×n).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.cols() != tb.len() {
            return Err(DueError::Dimension(format!(
                "add_bias: width {} vs bias length {}",
                ta.cols(),
                tb.len()
            )));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = ta.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.at(i, j) + tb.data()[j];
                out.set(i, j, v);
            }
        }
        Ok(self.push(Op::AddBias(a, bias), out))
    }

    /// Scale row i of `a` (m×n) by `s[i]` (m×1).
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != ta.rows() {
            return Err(DueError::Dimension(format!(
                "scale_rows: {} rows vs {} scales",
                ta.rows(),
                ts.len()
            )));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = ta.clone();
        for i in 0..m {
            let c = ts.data()[i];
            for j in 0..n {
                out.set(i, j, out.at(i, j) * c);
            }
        }
        Ok(self.push(Op::ScaleRows(a, s), out))
    }

    /// Scale every entry of `a` by a one-element tensor `s`.
    pub fn scale_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(DueError::Dimension(
                "scale_by_scalar: scale must have exactly one element".into(),
            ));
        }
        let c = self.value(s).data()[0];
        let out = map(self.value(a), |x| c * x);
        Ok(self.push(Op::ScaleByScalar(a, s), out))
    }

    /// Column j of `a` as an m×1 tensor.
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = self.value(a);
        if j >= ta.cols() {
            return Err(DueError::Dimension(format!(
                "col: index {} out of {} columns",
                j,
                ta.cols()
            )));
        }
        let m = ta.rows();
        let mut out = Tensor::zeros(vec![m, 1]);
        for i in 0..m {
            out.set(i, 0, ta.at(i, j));
        }
        Ok(self.push(Op::Col(a, j), out))
    }

    /// Reverse sweep from a scalar seed. Gradients of earlier backward calls
    /// on the same tape are cleared first.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if self.value(seed).len() != 1 {
            return Err(DueError::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(seed).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[seed.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=seed.0).rev() {
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => self.grads[v.0] = Some(delta.clone()),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let ta = self.value(a).clone();
                let tb = self.value(b).clone();
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // a_grad += g·bᵀ
                let mut da = Tensor::zeros(vec![m, k]);
                matmul_into(g.data(), tb.transpose().data(), da.data_mut(), m, n, k);
                // b_grad += aᵀ·g
                let mut db = Tensor::zeros(vec![k, n]);
                matmul_into(ta.transpose().data(), g.data(), db.data_mut(), k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg = map(g, |x| -x);
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let da = zip(g, self.value(b), |x, y| x * y);
                let db = zip(g, self.value(a), |x, y| x * y);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(a, c) => {
                let da = map(g, |x| c * x);
                self.accumulate(a, &da);
            }
            Op::Exp(a) => {
                let y = self.nodes[idx].value.clone();
                let da = zip(g, &y, |gi, yi| gi * yi);
                self.accumulate(a, &da);
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.clone();
                let da = zip(g, &y, |gi, yi| gi * (1.0 - yi * yi));
                self.accumulate(a, &da);
            }
            Op::Relu(a) => {
                let x = self.value(a).clone();
                let da = zip(g, &x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(a, &da);
            }
            Op::Gelu(a) => {
                let x = self.value(a).clone();
                let da = zip(g, &x, |gi, xi| gi * gelu_deriv(xi));
                self.accumulate(a, &da);
            }
            Op::Softplus(a) => {
                let x = self.value(a).clone();
                let da = zip(g, &x, |gi, xi| gi * sigmoid(xi));
                self.accumulate(a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.clone();
                let (m, n) = (y.rows(), y.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..n {
                        da.set(i, j, y.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Sum(a) => {
                let c = g.data()[0];
                let da = map(self.value(a), |_| c);
                self.accumulate(a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                let c = g.data()[0] / n;
                let da = map(self.value(a), |_| c);
                self.accumulate(a, &da);
            }
            Op::SumSquares(a) => {
                let c = g.data()[0];
                let da = map(self.value(a), |x| 2.0 * c * x);
                self.accumulate(a, &da);
            }
            Op::ConcatCols(a, b) => {
                let (pa, pb) = (self.value(a).cols(), self.value(b).cols());
                let m = g.rows();
                let mut da = Tensor::zeros(vec![m, pa]);
                let mut db = Tensor::zeros(vec![m, pb]);
                for i in 0..m {
                    for j in 0..pa {
                        da.set(i, j, g.at(i, j));
                    }
                    for j in 0..pb {
                        db.set(i, j, g.at(i, pa + j));
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(a, g);
                let (m, n) = (g.rows(), g.cols());
                let mut db = Tensor::zeros(self.value(bias).shape().to_vec());
                for j in 0..n {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += g.at(i, j);
                    }
                    db.data_mut()[j] = s;
                }
                self.accumulate(bias, &db);
            }
            Op::ScaleRows(a, s) => {
                let ta = self.value(a).clone();
                let ts = self.value(s).clone();
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                let mut ds = Tensor::zeros(ts.shape().to_vec());
                for i in 0..m {
                    let c = ts.data()[i];
                    let mut acc = 0.0;
                    for j in 0..n {
                        da.set(i, j, g.at(i, j) * c);
                        acc += g.at(i, j) * ta.at(i, j);
                    }
                    ds.data_mut()[i] = acc;
                }
                self.accumulate(a, &da);
                self.accumulate(s, &ds);
            }
            Op::ScaleByScalar(a, s) => {
                let c = self.value(s).data()[0];
                let da = map(g, |x| c * x);
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                self.accumulate(a, &da);
                self.accumulate(s, &Tensor::scalar(dot));
            }
            Op::Col(a, j) => {
                let ta = self.value(a);
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    da.set(i, j, g.at(i, 0));
                }
                self.accumulate(a, &da);
            }
        }
        Ok(())
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (o, &bi) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, bi);
    }
    out
}

/// Named parameter tensors with stable ordering and per-parameter gradient
/// buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor, Tensor)>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a [`ParamSet`], created by
/// [`ParamSet::bind`] at the start of a forward pass.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(DueError::Contract(format!("duplicate parameter {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value, grad));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn grad_of(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].2)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries.iter().map(|(n, v, g)| (n.as_str(), v, g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|(n, v, g)| (n.as_str(), v, g))
    }

    pub fn zero_grads(&mut self) {
        for (_, _, g) in self.entries.iter_mut() {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Leaf every parameter onto the tape, in insertion order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(_, v, _)| tape.leaf(v.clone()))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Pull gradients from a tape after backward. Parameters unreached by the
    /// seed accumulate zero.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (i, (_, _, g)) in self.entries.iter_mut().enumerate() {
            if let Some(tg) = tape.grad(bound.vars[i]) {
                for (gi, ti) in g.data_mut().iter_mut().zip(tg.data()) {
                    *gi += ti;
                }
            }
        }
    }

    /// Global ℓ₂ norm of all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, _, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for (_, _, g) in self.entries.iter_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}
