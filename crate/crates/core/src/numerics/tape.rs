use super::flops;
use super::param::{Gradients, ParamId, ParamSet};
use super::Tensor;
use crate::error::{Error, Result};

/// Whether a tape records operations for differentiation.
///
/// A frozen tape still evaluates every op but records no edges, so nothing
/// computed on it can ever reach a parameter gradient. This is how the
/// target network and all inference run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Recording,
    Frozen,
}

/// Handle to a value living on a [`Tape`] or in its parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Node(usize),
    Param(ParamId),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Relu,
    LeakyRelu(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Act(Var, Activation),
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    ConcatCols(Var, Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording context over a borrowed parameter set.
///
/// Nodes are appended in execution order and [`Tape::backward`] walks them
/// in exact reverse. A tape supports a single backward pass.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    mode: TapeMode,
    flops: u64,
    bytes: usize,
    consumed: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet, mode: TapeMode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            mode,
            flops: 0,
            bytes: 0,
            consumed: false,
        }
    }

    pub fn recording(params: &'p ParamSet) -> Self {
        Self::new(params, TapeMode::Recording)
    }

    pub fn frozen(params: &'p ParamSet) -> Self {
        Self::new(params, TapeMode::Frozen)
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// FLOPs performed by ops on this tape.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Bytes held by recorded node values.
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.len() * std::mem::size_of::<f64>())
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match v {
            Var::Node(i) => &self.nodes[i].value,
            Var::Param(id) => self.params.get(id).value(),
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        match v {
            Var::Node(i) => self.nodes[i].requires_grad,
            Var::Param(_) => self.mode == TapeMode::Recording,
        }
    }

    fn note_bytes(&mut self, values: usize) {
        self.bytes += values * std::mem::size_of::<f64>();
        flops::note_bytes(self.bytes);
    }

    pub fn param(&self, id: ParamId) -> Var {
        Var::Param(id)
    }

    /// Inserts a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.note_bytes(value.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var::Node(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], flops: u64, what: &str) -> Result<Var> {
        self.flops += flops;
        flops::add(flops);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: what.to_string(),
            });
        }
        let requires_grad =
            self.mode == TapeMode::Recording && inputs.iter().any(|&v| self.requires_grad(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.note_bytes(value.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var::Node(self.nodes.len() - 1))
    }

    /// `x W + b` with `x: N x in`, `W: in x out`, `b: out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(Error::contract(format!(
                "affine shape mismatch: x {:?}, W {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, k, m) = (xv.rows(), wv.rows(), wv.cols());
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::contract(format!(
                    "affine bias has {} values, expected {m}",
                    bv.len()
                )));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, k, m, xv.data(), (k, 1), wv.data(), (m, 1), &mut out, 1.0);
        let value = Tensor::from_parts_unchecked(vec![n, m], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Affine { x, w, b },
            &inputs,
            flops::affine(n, k, m, b.is_some()),
            "affine",
        )
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts_unchecked(av.shape().to_vec(), data)
        } else if bv.len() == 1 {
            let s = bv.data()[0];
            av.map(|x| f(x, s))
        } else if av.len() == 1 {
            let s = av.data()[0];
            bv.map(|y| f(s, y))
        } else {
            return Err(Error::contract(format!(
                "{what}: shapes {:?} and {:?} do not conform",
                av.shape(),
                bv.shape()
            )));
        };
        let n = value.len() as u64;
        self.push(value, op, &[a, b], n, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let n = value.len() as u64;
        self.push(value, Op::Scale(a, s), &[a], n, "scale")
    }

    fn row_binary(&mut self, a: Var, r: Var, mul: bool) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let m = av.cols();
        if rv.len() != m {
            return Err(Error::contract(format!(
                "row broadcast: matrix {:?} against row {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(m) {
            for (x, &y) in row.iter_mut().zip(rv.data()) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(av.shape().to_vec(), data);
        let n = value.len() as u64;
        let (op, what) = if mul {
            (Op::MulRow(a, r), "mul_row")
        } else {
            (Op::AddRow(a, r), "add_row")
        };
        self.push(value, op, &[a, r], n, what)
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_binary(a, row, false)
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_binary(a, row, true)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let value = self.value(a).map(|x| match act {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        });
        let n = value.len() as u64;
        self.push(value, Op::Act(a, act), &[a], n, "activation")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.activation(a, Activation::LeakyRelu(slope))
    }

    /// Channel-wise maximum over rows: `N x D -> 1 x D`.
    ///
    /// The first row attaining the maximum receives the gradient.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let m = av.cols();
        let mut best = av.data()[..m].to_vec();
        let mut argmax = vec![0usize; m];
        for (r, row) in av.data().chunks_exact(m).enumerate().skip(1) {
            for j in 0..m {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = r;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![1, m], best);
        let n = av.len() as u64;
        self.push(value, Op::MaxPoolRows { x: a, argmax }, &[a], n, "max_pool")
    }

    /// Column concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::contract(format!(
                "concat: {:?} and {:?} differ in rows",
                av.shape(),
                bv.shape()
            )));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::from_parts_unchecked(vec![rows, ca + cb], data);
        self.push(value, Op::ConcatCols(a, b), &[a, b], 0, "concat")
    }

    /// Sum of squared entries as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s: f64 = av.data().iter().map(|x| x * x).sum();
        let n = 2 * av.len() as u64;
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a], n, "sum_squares")
    }

    /// Propagates gradients from the scalar `loss` to every reachable
    /// parameter. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.mode == TapeMode::Frozen {
            return Err(Error::contract("backward on a frozen tape"));
        }
        if self.consumed {
            return Err(Error::contract(
                "backward already ran on this tape; re-run the forward pass",
            ));
        }
        let Var::Node(root) = loss else {
            return Err(Error::contract("backward target must be a computed node"));
        };
        if self.nodes[root].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads = Grads {
            nodes: (0..=root).map(|_| None).collect(),
            params: vec![None; self.params.len()],
        };
        grads.nodes[root] = Some(Tensor::filled(self.nodes[root].value.shape(), 1.0));

        for i in (0..=root).rev() {
            let Some(g) = grads.nodes[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients {
            per_param: grads.params,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut Grads) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (n, k, m) = (xv.rows(), wv.rows(), wv.cols());
                if self.requires_grad(x) {
                    // dX = dY W^T
                    let mut gx = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (m, 1), wv.data(), (1, m), &mut gx, 0.0);
                    self.accumulate(
                        grads,
                        x,
                        Tensor::from_parts_unchecked(xv.shape().to_vec(), gx),
                    );
                }
                if self.requires_grad(w) {
                    // dW = X^T dY
                    let mut gw = vec![0.0; k * m];
                    gemm(k, n, m, xv.data(), (1, k), g.data(), (m, 1), &mut gw, 0.0);
                    self.accumulate(grads, w, Tensor::from_parts_unchecked(vec![k, m], gw));
                }
                if let Some(b) = b {
                    if self.requires_grad(b) {
                        let gb = column_sums(g);
                        let shape = self.value(b).shape().to_vec();
                        self.accumulate(grads, b, Tensor::from_parts_unchecked(shape, gb));
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate_broadcast(grads, a, g.clone());
                self.accumulate_broadcast(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, a, g.clone());
                self.accumulate_broadcast(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    self.accumulate_broadcast(grads, a, times_broadcast(g, bv));
                }
                if self.requires_grad(b) {
                    self.accumulate_broadcast(grads, b, times_broadcast(g, av));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            &Op::AddRow(a, r) => {
                if self.requires_grad(r) {
                    let shape = self.value(r).shape().to_vec();
                    self.accumulate(grads, r, Tensor::from_parts_unchecked(shape, column_sums(g)));
                }
                self.accumulate(grads, a, g.clone());
            }
            &Op::MulRow(a, r) => {
                let (av, rv) = (self.value(a), self.value(r));
                let m = av.cols();
                if self.requires_grad(r) {
                    let mut gr = vec![0.0; m];
                    for (grow, arow) in g.data().chunks_exact(m).zip(av.data().chunks_exact(m)) {
                        for j in 0..m {
                            gr[j] += grow[j] * arow[j];
                        }
                    }
                    let shape = rv.shape().to_vec();
                    self.accumulate(grads, r, Tensor::from_parts_unchecked(shape, gr));
                }
                if self.requires_grad(a) {
                    let mut ga = g.data().to_vec();
                    for row in ga.chunks_exact_mut(m) {
                        for (x, &y) in row.iter_mut().zip(rv.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, a, Tensor::from_parts_unchecked(g.shape().to_vec(), ga));
                }
            }
            &Op::Act(a, act) => {
                let av = self.value(a);
                let out = &node.value;
                let data = match act {
                    Activation::Sigmoid => g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gy, &s)| gy * s * (1.0 - s))
                        .collect(),
                    Activation::Relu => g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gy, &x)| if x > 0.0 { gy } else { 0.0 })
                        .collect(),
                    Activation::LeakyRelu(slope) => g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gy, &x)| if x > 0.0 { gy } else { slope * gy })
                        .collect(),
                };
                self.accumulate(grads, a, Tensor::from_parts_unchecked(av.shape().to_vec(), data));
            }
            Op::MaxPoolRows { x, argmax } => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                for (j, &r) in argmax.iter().enumerate() {
                    gx[r * m + j] = g.data()[j];
                }
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(xv.shape().to_vec(), gx));
            }
            &Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (ca, cb) = (av.cols(), bv.cols());
                let rows = av.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in g.data().chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, Tensor::from_parts_unchecked(av.shape().to_vec(), ga));
                self.accumulate(grads, b, Tensor::from_parts_unchecked(bv.shape().to_vec(), gb));
            }
            &Op::SumSquares(a) => {
                let s = 2.0 * g.data()[0];
                let ga = self.value(a).map(|x| s * x);
                self.accumulate(grads, a, ga);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut Grads, v: Var, g: Tensor) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = match v {
            Var::Node(i) => &mut grads.nodes[i],
            Var::Param(id) => &mut grads.params[id.index()],
        };
        match slot {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Accumulates `g` into `v`, summing over a broadcast scalar operand.
    fn accumulate_broadcast(&self, grads: &mut Grads, v: Var, g: Tensor) {
        let shape = self.value(v).shape();
        if shape == g.shape() {
            self.accumulate(grads, v, g);
        } else {
            let s: f64 = g.data().iter().sum();
            self.accumulate(grads, v, Tensor::from_parts_unchecked(shape.to_vec(), vec![s]));
        }
    }
}

struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let m = g.cols();
    let mut out = vec![0.0; m];
    for row in g.data().chunks_exact(m) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `g * other`, where `other` is either a broadcast scalar or matches `g`.
fn times_broadcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.len() == 1 {
        let s = other.data()[0];
        g.map(|v| v * s)
    } else {
        debug_assert_eq!(other.len(), g.len());
        let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_parts_unchecked(g.shape().to_vec(), data)
    }
}

/// `c = a * b + beta * c` with row-major `c`; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover the strided extents implied by (m, k, n) for every
    // call site in this module; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
