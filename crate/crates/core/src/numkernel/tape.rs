//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`] holding the
//! forward value and one local vector-Jacobian closure per parent. Nodes are
//! appended in evaluation order, so a single reverse sweep over node ids is a
//! valid topological traversal. A tape is rebuilt for every training batch.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

type Vjp = Box<dyn Fn(&Tensor) -> Tensor>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<(usize, Vjp)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.val().shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new())
    }

    fn push(&self, value: Tensor, parents: Vec<(usize, Vjp)>) -> Var<'_> {
        self.push_rc(Rc::new(value), parents)
    }

    fn push_rc(&self, value: Rc<Tensor>, parents: Vec<(usize, Vjp)>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(root_value.shape()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (parent, vjp) in &nodes[id].parents {
                let contrib = vjp(&g);
                debug_assert_eq!(contrib.shape(), nodes[*parent].value.shape());
                match &mut grads[*parent] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        (*self.val()).clone()
    }

    fn val(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.val();
        let y = Rc::new(x.map(f));
        let yc = Rc::clone(&y);
        let vjp: Vjp = Box::new(move |g| {
            let mut out = g.clone();
            for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(x.data()).zip(yc.data()) {
                *o *= df(xi, yi);
            }
            out
        });
        self.tape.push_rc(y, vec![(self.id, vjp)])
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    /// Absolute value; the derivative at 0 is taken as 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| sign(x))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    fn binary_same_shape(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.val(), rhs.val());
        if !a.same_shape(&b) {
            return Err(shape_err(op, &a, &b));
        }
        let y = a.zip_map(&b, op, f)?;
        let (a1, b1) = (Rc::clone(&a), Rc::clone(&b));
        let va: Vjp = Box::new(move |g| {
            let mut out = g.clone();
            for ((o, &x), &z) in out.data_mut().iter_mut().zip(a1.data()).zip(b1.data()) {
                *o *= da(x, z);
            }
            out
        });
        let vb: Vjp = Box::new(move |g| {
            let mut out = g.clone();
            for ((o, &x), &z) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o *= db(x, z);
            }
            out
        });
        Ok(self.tape.push(y, vec![(self.id, va), (rhs.id, vb)]))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.val(), rhs.val());
        let y = a.matmul(&b)?;
        let a_shape = a.shape().to_vec();
        let b_shape = b.shape().to_vec();
        let va: Vjp = Box::new(move |g| {
            g.matmul_t(&b)
                .and_then(|t| t.reshape(a_shape.clone()))
                .expect("matmul vjp shape")
        });
        let vb: Vjp = Box::new(move |g| {
            a.t_matmul(g)
                .and_then(|t| t.reshape(b_shape.clone()))
                .expect("matmul vjp shape")
        });
        Ok(self.tape.push(y, vec![(self.id, va), (rhs.id, vb)]))
    }

    fn check_row(&self, row: &Tensor, x: &Tensor, op: &'static str) -> Result<()> {
        if row.numel() != x.cols() {
            return Err(shape_err(op, x, row));
        }
        Ok(())
    }

    /// Adds a length-`cols` row vector to every row (bias broadcast).
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let (x, r) = (self.val(), row.val());
        self.check_row(&r, &x, "add_row")?;
        let mut y = (*x).clone();
        let c = x.cols();
        for chunk in y.data_mut().chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let r_shape = r.shape().to_vec();
        let vx: Vjp = Box::new(|g| g.clone());
        let vr: Vjp = Box::new(move |g| {
            Tensor::new(r_shape.clone(), g.col_sums().into_data()).expect("row shape")
        });
        Ok(self.tape.push(y, vec![(self.id, vx), (row.id, vr)]))
    }

    /// Multiplies every row elementwise by a length-`cols` row vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let (x, r) = (self.val(), row.val());
        self.check_row(&r, &x, "mul_row")?;
        let c = x.cols();
        let mut y = (*x).clone();
        for chunk in y.data_mut().chunks_mut(c) {
            for (v, s) in chunk.iter_mut().zip(r.data()) {
                *v *= s;
            }
        }
        let rc = Rc::clone(&r);
        let vx: Vjp = Box::new(move |g| {
            let mut out = g.clone();
            for chunk in out.data_mut().chunks_mut(c) {
                for (v, s) in chunk.iter_mut().zip(rc.data()) {
                    *v *= s;
                }
            }
            out
        });
        let r_shape = r.shape().to_vec();
        let vr: Vjp = Box::new(move |g| {
            let mut acc = vec![0.0; c];
            for (gr, xr) in g.data().chunks(c).zip(x.data().chunks(c)) {
                for j in 0..c {
                    acc[j] += gr[j] * xr[j];
                }
            }
            Tensor::new(r_shape.clone(), acc).expect("row shape")
        });
        Ok(self.tape.push(y, vec![(self.id, vx), (row.id, vr)]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.val();
        let shape = x.shape().to_vec();
        let vjp: Vjp = Box::new(move |g| Tensor::full(&shape, g.item()));
        self.tape.push(Tensor::scalar(x.sum()), vec![(self.id, vjp)])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.val().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-row sums, `rows x 1`.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.val();
        let (r, c) = (x.rows(), x.cols());
        let y = Tensor::matrix(r, 1, x.data().chunks(c).map(|row| row.iter().sum()).collect())
            .expect("rows > 0");
        let shape = x.shape().to_vec();
        let vjp: Vjp = Box::new(move |g| {
            let mut data = Vec::with_capacity(r * c);
            for &gi in g.data() {
                data.extend(std::iter::repeat_n(gi, c));
            }
            Tensor::new(shape.clone(), data).expect("shape")
        });
        self.tape.push(y, vec![(self.id, vjp)])
    }

    /// Per-column sums, `1 x cols`.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.val();
        let (r, c) = (x.rows(), x.cols());
        let shape = x.shape().to_vec();
        let vjp: Vjp = Box::new(move |g| {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                data.extend_from_slice(g.data());
            }
            Tensor::new(shape.clone(), data).expect("shape")
        });
        self.tape.push(x.col_sums(), vec![(self.id, vjp)])
    }

    /// Row-wise `log(sum(exp(x)))`, `rows x 1`, max-shifted.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let x = self.val();
        let (r, c) = (x.rows(), x.cols());
        let mut lse = Vec::with_capacity(r);
        let mut soft = Vec::with_capacity(r * c);
        for row in x.data().chunks(c) {
            let (l, p) = lse_and_softmax(row);
            lse.push(l);
            soft.extend(p);
        }
        let shape = x.shape().to_vec();
        let vjp: Vjp = Box::new(move |g| {
            let mut out = soft.clone();
            for (chunk, &gi) in out.chunks_mut(c).zip(g.data()) {
                for v in chunk {
                    *v *= gi;
                }
            }
            Tensor::new(shape.clone(), out).expect("shape")
        });
        self.tape
            .push(Tensor::matrix(r, 1, lse).expect("rows > 0"), vec![(self.id, vjp)])
    }

    /// Row-wise softmax, max-shifted.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.val();
        let c = x.cols();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(c) {
            let (_, p) = lse_and_softmax(row);
            row.copy_from_slice(&p);
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        let vjp: Vjp = Box::new(move |g| {
            let mut out = g.clone();
            for (orow, prow) in out.data_mut().chunks_mut(c).zip(yc.data().chunks(c)) {
                let dot: f64 = orow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (o, p) in orow.iter_mut().zip(prow) {
                    *o = p * (*o - dot);
                }
            }
            out
        });
        self.tape.push_rc(y, vec![(self.id, vjp)])
    }

    /// Mean softmax cross-entropy of `rows x classes` logits against labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.val();
        let (r, c) = (x.rows(), x.cols());
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(r * c);
        for (row, &label) in x.data().chunks(c).zip(labels) {
            let (lse, mut p) = lse_and_softmax(row);
            total += lse - row[label];
            p[label] -= 1.0;
            grad.extend(p);
        }
        let n = r as f64;
        let shape = x.shape().to_vec();
        let vjp: Vjp = Box::new(move |g| {
            let s = g.item() / n;
            Tensor::new(shape.clone(), grad.iter().map(|v| v * s).collect()).expect("shape")
        });
        Ok(self.tape.push(Tensor::scalar(total / n), vec![(self.id, vjp)]))
    }

    /// Row-wise L1 distance to `other`, `rows x 1`.
    pub fn l1_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(other)?.abs().sum_rows())
    }

    /// Row-wise squared Euclidean distance to `other`, `rows x 1`.
    pub fn sq_dist_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(other)?.square().sum_rows())
    }

    /// Total L1 distance to `other`, as a scalar.
    pub fn l1_distance(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.l1_rows(other)?.sum())
    }

    /// Total squared Euclidean distance to `other`, as a scalar.
    pub fn sq_euclidean(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sq_dist_rows(other)?.sum())
    }

    /// Row-wise Euclidean distance, `rows x 1`. Rows at distance zero get a
    /// zero subgradient.
    pub fn euclid_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        let diff = self.sub(other)?;
        let dv = diff.val();
        let c = dv.cols();
        let norms: Vec<f64> = dv
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = dv.shape().to_vec();
        let n2 = norms.clone();
        let vjp: Vjp = Box::new(move |g| {
            let mut out = dv.data().to_vec();
            for ((row, &nrm), &gi) in out.chunks_mut(c).zip(&n2).zip(g.data()) {
                let s = if nrm > 0.0 { gi / nrm } else { 0.0 };
                for v in row {
                    *v *= s;
                }
            }
            Tensor::new(shape.clone(), out).expect("shape")
        });
        let y = Tensor::matrix(norms.len(), 1, norms).expect("rows > 0");
        Ok(self.tape.push(y, vec![(diff.id, vjp)]))
    }

    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.val();
        if idx.is_empty() || idx.iter().any(|&i| i >= x.rows()) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let y = x.select_rows(idx);
        let idx = idx.to_vec();
        let (r, c) = (x.rows(), x.cols());
        let shape = x.shape().to_vec();
        let vjp: Vjp = Box::new(move |g| {
            let mut out = vec![0.0; r * c];
            for (gi, &src) in g.data().chunks(c).zip(&idx) {
                for (o, v) in out[src * c..(src + 1) * c].iter_mut().zip(gi) {
                    *o += v;
                }
            }
            Tensor::new(shape.clone(), out).expect("shape")
        });
        Ok(self.tape.push(y, vec![(self.id, vjp)]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().expect("concat_cols needs at least one part");
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.val()).collect();
        let r = values[0].rows();
        for v in &values[1..] {
            if v.rows() != r {
                return Err(shape_err("concat_cols", &values[0], v));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let mut parents: Vec<(usize, Vjp)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            let (w, off, shape) = (v.cols(), offset, v.shape().to_vec());
            let vjp: Vjp = Box::new(move |g| {
                let mut out = Vec::with_capacity(r * w);
                for row in g.data().chunks(total) {
                    out.extend_from_slice(&row[off..off + w]);
                }
                Tensor::new(shape.clone(), out).expect("shape")
            });
            parents.push((p.id, vjp));
            offset += w;
        }
        Ok(tape.push(Tensor::matrix(r, total, data)?, parents))
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Log-sum-exp of a slice together with its softmax.
pub fn lse_and_softmax(row: &[f64]) -> (f64, Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}
