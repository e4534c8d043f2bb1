//! Reverse-mode automatic differentiation over a fixed set of 2-D ops.
//!
//! A [`Tape`] records every op in creation order, so operands always
//! precede their results and one reverse sweep visits each node once.
//! Handles ([`Var`]) are plain indices into the tape.
//!
//! ```
//! use mlrbfn::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_rows(&[[0.0, 0.0]]));
//! let y = tape.softplus(x);
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 0.5]);
//! ```

use std::cell::{Ref, RefCell};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    CdistPow { x: Var, c: Var, k: T },
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Scale(Var, T),
    AddScalar(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MinConst(Var, T),
    ClampMin(Var, T),
    MaxOverCols { x: Var, argmax: Vec<usize> },
    LogSubExp(Var, Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records ops and their values for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Overflow-safe `ln(1 + eˣ)`.
#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `ln(eʸ − 1)`, the inverse of softplus.
///
/// The argument of the log is clamped to `[1e-6, 1e4]`; values `y ≥ 5` are
/// returned unchanged.
pub fn inverse_softplus(y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::Domain(format!(
            "inverse_softplus needs a positive argument, got {y}"
        )));
    }
    if y >= 5.0 {
        return Ok(y);
    }
    Ok(y.exp_m1().clamp(1e-6, 1e4).ln())
}

/// `ln(eᵃ − eᵇ)` for `a > b`, shifted by `max(a, b)`.
#[inline]
pub fn log_sub_exp_scalar<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    m + ((a - m).exp() - (b - m).exp()).ln()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Trainable leaf; accumulates gradient on [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached leaf; never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(&self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Pairwise `Σ_t |x[i,t] − c[j,t]|^k` (the k-norm raised to the k-th power).
    pub fn cdist_pow(&self, x: Var, c: Var, k: f64) -> Result<Var> {
        if k < 1.0 {
            return Err(Error::Domain(format!("norm order must be >= 1, got {k}")));
        }
        let value = cdist_pow_values(&self.value(x), &self.value(c), k)?;
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(value, Op::CdistPow { x, c, k: T::of(k) }, rg))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    /// Natural log; every entry must be positive.
    pub fn ln(&self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("ln of non-positive value {bad}")));
        }
        Ok(self.unary(x, T::ln, Op::Ln(x)))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    fn binary_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(&self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast(
        &self,
        a: Var,
        b: Var,
        along_rows: bool,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            let (m, n) = av.shape();
            let expected = if along_rows { (1, n) } else { (m, 1) };
            bv.expect_shape(expected, "broadcast operand")?;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for (j, &x) in av.row_slice(i).iter().enumerate() {
                    let y = if along_rows { bv.data()[j] } else { bv.data()[i] };
                    out.push(f(x, y));
                }
            }
            Tensor::from_vec(m, n, out)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// `a[i,j] * r[0,j]` for a `1 x n` row `r`.
    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        self.broadcast(a, r, true, |x, y| x * y, Op::MulRow(a, r))
    }

    /// `a[i,j] * c[i,0]` for an `m x 1` column `c`.
    pub fn mul_col(&self, a: Var, c: Var) -> Result<Var> {
        self.broadcast(a, c, false, |x, y| x * y, Op::MulCol(a, c))
    }

    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        self.broadcast(a, r, true, |x, y| x + y, Op::AddRow(a, r))
    }

    pub fn add_col(&self, a: Var, c: Var) -> Result<Var> {
        self.broadcast(a, c, false, |x, y| x + y, Op::AddCol(a, c))
    }

    /// Elementwise `min(x, c)`; gradient flows only where `x < c`.
    pub fn min_const(&self, x: Var, c: T) -> Var {
        self.unary(x, |v| v.min(c), Op::MinConst(x, c))
    }

    /// Elementwise `max(x, c)`; gradient flows only where `x > c`.
    pub fn clamp_min(&self, x: Var, c: T) -> Var {
        self.unary(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    /// Per-row maximum as an `m x 1` column. Ties go to the lowest column.
    pub fn max_over_cols(&self, x: Var) -> Result<Var> {
        let (value, argmax) = {
            let xv = self.value(x);
            if xv.cols() == 0 {
                return dim_err("max_over_cols on a tensor with no columns");
            }
            let mut vals = Vec::with_capacity(xv.rows());
            let mut idx = Vec::with_capacity(xv.rows());
            for i in 0..xv.rows() {
                let (j, v) = argmax_row(xv.row_slice(i));
                vals.push(v);
                idx.push(j);
            }
            (Tensor::column(vals), idx)
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxOverCols { x, argmax }, rg))
    }

    /// Stable `ln(eᵃ − eᵇ)`; requires `a > b` everywhere.
    pub fn log_sub_exp(&self, a: Var, b: Var) -> Result<Var> {
        {
            let av = self.value(a);
            let bv = self.value(b);
            av.expect_shape(bv.shape(), "log_sub_exp operand")?;
            if let Some((x, y)) = av
                .data()
                .iter()
                .zip(bv.data())
                .find(|(x, y)| **x <= **y)
            {
                return Err(Error::Domain(format!(
                    "log_sub_exp needs a > b, got a={x}, b={y}"
                )));
            }
        }
        self.binary_same(a, b, log_sub_exp_scalar, Op::LogSubExp(a, b))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self, x: Var) -> Var {
        let value = {
            let xv = self.value(x);
            let mut out = xv.clone();
            for i in 0..xv.rows() {
                let row = out.row_slice_mut(i);
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        };
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let xv = self.value(x);
            Tensor::scalar(xv.sum() / T::of(xv.len() as f64))
        };
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Propagates d(loss)/d(node) to every trainable leaf.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.0];
            if root.value.shape() != (1, 1) {
                return Err(Error::Usage(format!(
                    "backward needs a scalar loss, got {}x{}",
                    root.value.rows(),
                    root.value.cols()
                )));
            }
            let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
            grads[loss.0] = Some(Tensor::ones(1, 1));
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.0).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                for (operand, contrib) in local_backward(&nodes, node, &g)? {
                    if !nodes[operand.0].requires_grad {
                        continue;
                    }
                    match &mut grads[operand.0] {
                        Some(acc) => acc.add_assign(&contrib)?,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn argmax_row<T: Scalar>(row: &[T]) -> (usize, T) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    (best, row[best])
}

pub(crate) fn cdist_pow_values<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
    if x.cols() != c.cols() {
        return dim_err(format!(
            "cdist_pow feature dimensions {} vs {}",
            x.cols(),
            c.cols()
        ));
    }
    let (m, n) = (x.rows(), c.rows());
    let mut out = Vec::with_capacity(m * n);
    let kt = T::of(k);
    for i in 0..m {
        let xi = x.row_slice(i);
        for j in 0..n {
            let cj = c.row_slice(j);
            let d: T = if k == 2.0 {
                xi.iter().zip(cj).map(|(&a, &b)| (a - b) * (a - b)).sum()
            } else if k == 1.0 {
                xi.iter().zip(cj).map(|(&a, &b)| (a - b).abs()).sum()
            } else {
                xi.iter().zip(cj).map(|(&a, &b)| (a - b).abs().powf(kt)).sum()
            };
            out.push(d);
        }
    }
    Tensor::from_vec(m, n, out)
}

/// `k·|u|^(k−1)·sign(u)`, the derivative of `|u|^k`. Zero at `u = 0`.
#[inline]
fn pow_abs_deriv<T: Scalar>(u: T, k: T) -> T {
    if u == T::zero() {
        T::zero()
    } else if k == T::of(2.0) {
        T::of(2.0) * u
    } else if k == T::one() {
        u.signum()
    } else {
        k * u.abs().powf(k - T::one()) * u.signum()
    }
}

fn local_backward<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let mut res = Vec::with_capacity(2);
            if nodes[a.0].requires_grad {
                res.push((*a, g.matmul_t(val(*b))?));
            }
            if nodes[b.0].requires_grad {
                res.push((*b, val(*a).t_matmul(g)?));
            }
            res
        }
        Op::CdistPow { x, c, k } => {
            let (xv, cv) = (val(*x), val(*c));
            let (m, n, d) = (xv.rows(), cv.rows(), xv.cols());
            let mut gx = Tensor::zeros(m, d);
            let mut gc = Tensor::zeros(n, d);
            for i in 0..m {
                let xi = xv.row_slice(i);
                let gi = g.row_slice(i);
                for j in 0..n {
                    let gij = gi[j];
                    if gij == T::zero() {
                        continue;
                    }
                    let cj = cv.row_slice(j);
                    for t in 0..d {
                        let dv = gij * pow_abs_deriv(xi[t] - cj[t], *k);
                        gx.data_mut()[i * d + t] += dv;
                        gc.data_mut()[j * d + t] -= dv;
                    }
                }
            }
            vec![(*x, gx), (*c, gc)]
        }
        Op::Softplus(x) => vec![(*x, g.zip_map(val(*x), |g, x| g * sigmoid(x))?)],
        Op::Exp(x) => vec![(*x, g.zip_map(out, |g, y| g * y)?)],
        Op::Ln(x) => vec![(*x, g.zip_map(val(*x), |g, x| g / x)?)],
        Op::Relu(x) => vec![(
            *x,
            g.zip_map(val(*x), |g, x| if x > T::zero() { g } else { T::zero() })?,
        )],
        Op::Scale(x, s) => vec![(*x, g.map(|g| g * *s))],
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |g, y| g * y)?),
            (*b, g.zip_map(val(*a), |g, x| g * x)?),
        ],
        Op::MulRow(a, r) => {
            let (av, rv) = (val(*a), val(*r));
            let (m, n) = av.shape();
            let mut ga = g.clone();
            let mut gr = Tensor::zeros(1, n);
            for i in 0..m {
                for j in 0..n {
                    let gij = g.get(i, j);
                    ga.set(i, j, gij * rv.data()[j]);
                    gr.data_mut()[j] += gij * av.get(i, j);
                }
            }
            vec![(*a, ga), (*r, gr)]
        }
        Op::MulCol(a, c) => {
            let (av, cv) = (val(*a), val(*c));
            let (m, n) = av.shape();
            let mut ga = g.clone();
            let mut gc = Tensor::zeros(m, 1);
            for i in 0..m {
                let ci = cv.data()[i];
                let mut acc = T::zero();
                for j in 0..n {
                    let gij = g.get(i, j);
                    ga.set(i, j, gij * ci);
                    acc += gij * av.get(i, j);
                }
                gc.data_mut()[i] = acc;
            }
            vec![(*a, ga), (*c, gc)]
        }
        Op::AddRow(a, r) => {
            let n = g.cols();
            let mut gr = Tensor::zeros(1, n);
            for i in 0..g.rows() {
                for (acc, &v) in gr.data_mut().iter_mut().zip(g.row_slice(i)) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*r, gr)]
        }
        Op::AddCol(a, c) => {
            let sums = (0..g.rows()).map(|i| g.row_slice(i).iter().copied().sum()).collect();
            vec![(*a, g.clone()), (*c, Tensor::column(sums))]
        }
        Op::MinConst(x, c) => vec![(
            *x,
            g.zip_map(val(*x), |g, x| if x < *c { g } else { T::zero() })?,
        )],
        Op::ClampMin(x, c) => vec![(
            *x,
            g.zip_map(val(*x), |g, x| if x > *c { g } else { T::zero() })?,
        )],
        Op::MaxOverCols { x, argmax } => {
            let xv = val(*x);
            let mut gx = Tensor::zeros(xv.rows(), xv.cols());
            for (i, &j) in argmax.iter().enumerate() {
                gx.set(i, j, g.data()[i]);
            }
            vec![(*x, gx)]
        }
        Op::LogSubExp(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = g.clone();
            let mut gb = g.clone();
            for (idx, (&x, &y)) in av.data().iter().zip(bv.data()).enumerate() {
                let u = y - x;
                let em1 = u.exp_m1();
                ga.data_mut()[idx] = g.data()[idx] * (-T::one() / em1);
                gb.data_mut()[idx] = g.data()[idx] * (u.exp() / em1);
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::LogSoftmax(x) => {
            let mut gx = g.clone();
            for i in 0..g.rows() {
                let gsum: T = g.row_slice(i).iter().copied().sum();
                let orow = out.row_slice(i);
                for (v, &lp) in gx.row_slice_mut(i).iter_mut().zip(orow) {
                    *v -= lp.exp() * gsum;
                }
            }
            vec![(*x, gx)]
        }
        Op::Sum(x) => {
            let (m, n) = val(*x).shape();
            vec![(*x, Tensor::full(m, n, g.data()[0]))]
        }
        Op::Mean(x) => {
            let (m, n) = val(*x).shape();
            let s = g.data()[0] / T::of((m * n) as f64);
            vec![(*x, Tensor::full(m, n, s))]
        }
    })
}
