//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during a
//! forward pass. [`Tape::backward`] replays the record in reverse and returns
//! the accumulated gradient of a scalar loss with respect to every node.
//! Tapes are rebuilt per forward pass; a tape supports exactly one backward
//! pass until [`Tape::reset`] is called.
//!
//! Every op validates its output and fails with [`TensorError::NonFinite`]
//! instead of letting NaN or Inf propagate.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::{dims2, gemm, gemm_nt, gemm_tn, Tensor};

type OpResult<'t> = Result<Var<'t>, TensorError>;
type Backward = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

/// Deliberately broken backward rules, used as negative controls for the
/// gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// tanh backward uses `1 - y` instead of `1 - y²`.
    TanhBackward,
}

struct Node {
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
    tracked: bool,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    fault: Option<Fault>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// contribute to the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Tensor {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, None)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, None)
    }

    pub(crate) fn constant_raw(&self, shape: Vec<usize>, data: Vec<f64>) -> Var<'_> {
        self.push(shape, data, false, None)
    }

    fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        tracked: bool,
        backward: Option<Backward>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(data),
            shape,
            tracked,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Pushes an op output after checking it is finite. `parents` decides
    /// whether the backward rule is kept at all.
    fn record<'t>(
        &'t self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var<'t>],
        backward: impl Fn(&[f64]) -> Vec<(usize, Vec<f64>)> + 'static,
    ) -> OpResult<'t> {
        assert!(
            parents.iter().all(|p| std::ptr::eq(p.tape, self)),
            "{op}: operands recorded on different tapes"
        );
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op, index });
        }
        let tracked = parents.iter().any(|p| p.tracked());
        let bw: Option<Backward> = if tracked {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(shape, data, tracked, bw))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.shape.clone()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (parent, contrib) in bw(&g) {
                if !nodes[parent].tracked {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn ensure_same(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<(), TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::Shape { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, v: &Var<'_>) -> Result<(usize, usize), TensorError> {
    let shape = v.shape();
    dims2(&shape).ok_or_else(|| TensorError::Invalid(format!("{op} needs rank ≤ 2, got {shape:?}")))
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    fn tracked(&self) -> bool {
        self.node().tracked
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn value_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.node().value)
    }

    pub fn value(&self) -> Tensor {
        let n = self.node();
        Tensor::from_parts(n.shape.clone(), n.value.as_ref().clone())
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.node().value[0]
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // derivative from (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> OpResult<'t> {
        let x = self.value_rc();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.tape.record(op, self.shape(), y, &[self], move |g| {
            let dx = g
                .iter()
                .zip(x.iter().zip(y_rc.iter()))
                .map(|(g, (&xi, &yi))| g * df(xi, yi))
                .collect();
            vec![(id, dx)]
        })
    }

    pub fn add(self, other: Var<'t>) -> OpResult<'t> {
        ensure_same("add", &self, &other)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let y = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.record("add", self.shape(), y, &[self, other], move |g| {
            vec![(ia, g.to_vec()), (ib, g.to_vec())]
        })
    }

    pub fn sub(self, other: Var<'t>) -> OpResult<'t> {
        ensure_same("sub", &self, &other)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let y = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.record("sub", self.shape(), y, &[self, other], move |g| {
            vec![(ia, g.to_vec()), (ib, g.iter().map(|v| -v).collect())]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> OpResult<'t> {
        ensure_same("mul", &self, &other)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let y = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.record("mul", self.shape(), y, &[self, other], move |g| {
            let da = g.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
            let db = g.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
            vec![(ia, da), (ib, db)]
        })
    }

    pub fn neg(self) -> OpResult<'t> {
        self.affine(-1.0, 0.0)
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> OpResult<'t> {
        self.unary("affine", move |x| scale * x + shift, move |_, _| scale)
    }

    pub fn scale(self, c: f64) -> OpResult<'t> {
        self.affine(c, 0.0)
    }

    pub fn tanh(self) -> OpResult<'t> {
        if self.tape.fault == Some(Fault::TanhBackward) {
            return self.unary("tanh", f64::tanh, |_, y| 1.0 - y);
        }
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> OpResult<'t> {
        self.unary("sigmoid", stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> OpResult<'t> {
        self.unary("softplus", stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn exp(self) -> OpResult<'t> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(self) -> OpResult<'t> {
        if let Some((index, &value)) = self
            .value_rc()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0))
        {
            return Err(TensorError::Domain {
                op: "ln",
                index,
                value,
            });
        }
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(self, other: Var<'t>) -> OpResult<'t> {
        let (m, k) = matrix_dims("matmul", &self)?;
        let (k2, n) = matrix_dims("matmul", &other)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (a, b) = (self.value_rc(), other.value_rc());
        let y = gemm(&a, &b, m, k, n);
        let (ia, ib) = (self.id, other.id);
        self.tape
            .record("matmul", vec![m, n], y, &[self, other], move |g| {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let da = gemm_nt(g, &b, m, n, k);
                let db = gemm_tn(&a, g, m, k, n);
                vec![(ia, da), (ib, db)]
            })
    }

    /// `self · otherᵀ` for `m×k` and `n×k` operands.
    pub fn matmul_nt(self, other: Var<'t>) -> OpResult<'t> {
        let (m, k) = matrix_dims("matmul_nt", &self)?;
        let (n, k2) = matrix_dims("matmul_nt", &other)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (a, b) = (self.value_rc(), other.value_rc());
        let y = gemm_nt(&a, &b, m, k, n);
        let (ia, ib) = (self.id, other.id);
        self.tape
            .record("matmul_nt", vec![m, n], y, &[self, other], move |g| {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = gemm(g, &b, m, n, k);
                let db = gemm_tn(g, &a, m, n, k);
                vec![(ia, da), (ib, db)]
            })
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> OpResult<'t> {
        let (m, n) = matrix_dims("add_row", &self)?;
        if bias.value_rc().len() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let (x, b) = (self.value_rc(), bias.value_rc());
        let y = x
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(x, b)| x + b))
            .collect();
        let (ix, ib) = (self.id, bias.id);
        self.tape
            .record("add_row", vec![m, n], y, &[self, bias], move |g| {
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                vec![(ix, g.to_vec()), (ib, db)]
            })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> OpResult<'t> {
        let (m, n) = matrix_dims("softmax_rows", &self)?;
        let x = self.value_rc();
        let mut y = Vec::with_capacity(m * n);
        for row in x.chunks(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = y.len();
            y.extend(row.iter().map(|v| (v - max).exp()));
            let total: f64 = y[start..].iter().sum();
            y[start..].iter_mut().for_each(|v| *v /= total);
        }
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.tape
            .record("softmax_rows", vec![m, n], y, &[self], move |g| {
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let ys = &y_rc[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        dx[r * n + c] = ys[c] * (gs[c] - dot);
                    }
                }
                vec![(id, dx)]
            })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> OpResult<'t> {
        let x = self.value_rc();
        let total = x.iter().sum();
        let (id, len) = (self.id, x.len());
        self.tape
            .record("sum", Vec::new(), vec![total], &[self], move |g| {
                vec![(id, vec![g[0]; len])]
            })
    }

    pub fn mean(self) -> OpResult<'t> {
        let n = self.value_rc().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> OpResult<'t> {
        let (m, n) = matrix_dims("slice_cols", &self)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let x = self.value_rc();
        let y = x
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let id = self.id;
        self.tape
            .record("slice_cols", vec![m, len], y, &[self], move |g| {
                let mut dx = vec![0.0; m * n];
                for (r, grow) in g.chunks(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                }
                vec![(id, dx)]
            })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> OpResult<'t> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let (m, _) = matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value_rc()).collect();
        let mut y = Vec::with_capacity(m * n);
        for r in 0..m {
            for (v, &w) in values.iter().zip(&widths) {
                y.extend_from_slice(&v[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record("concat_cols", vec![m, n], y, parts, move |g| {
            let mut out: Vec<(usize, Vec<f64>)> =
                ids.iter().zip(&widths).map(|(&i, &w)| (i, Vec::with_capacity(m * w))).collect();
            for grow in g.chunks(n) {
                let mut off = 0;
                for ((_, d), &w) in out.iter_mut().zip(&widths) {
                    d.extend_from_slice(&grow[off..off + w]);
                    off += w;
                }
            }
            out
        })
    }

    /// Block-diagonal `Q·Kᵀ`: rows are split into consecutive groups of
    /// `group` rows and each group only sees itself. Output is `(B·g)×g`.
    pub fn group_matmul_nt(self, other: Var<'t>, group: usize) -> OpResult<'t> {
        let (m, k) = matrix_dims("group_matmul_nt", &self)?;
        let (m2, k2) = matrix_dims("group_matmul_nt", &other)?;
        if m != m2 || k != k2 || group == 0 || m % group != 0 {
            return Err(TensorError::Shape {
                op: "group_matmul_nt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (a, b) = (self.value_rc(), other.value_rc());
        let blocks = m / group;
        let (gk, gg) = (group * k, group * group);
        let mut y = Vec::with_capacity(m * group);
        for blk in 0..blocks {
            let ab = &a[blk * gk..(blk + 1) * gk];
            let bb = &b[blk * gk..(blk + 1) * gk];
            y.extend(gemm_nt(ab, bb, group, k, group));
        }
        let (ia, ib) = (self.id, other.id);
        self.tape
            .record("group_matmul_nt", vec![m, group], y, &[self, other], move |g| {
                let mut da = Vec::with_capacity(m * k);
                let mut db = Vec::with_capacity(m * k);
                for blk in 0..blocks {
                    let gb = &g[blk * gg..(blk + 1) * gg];
                    let ab = &a[blk * gk..(blk + 1) * gk];
                    let bb = &b[blk * gk..(blk + 1) * gk];
                    da.extend(gemm(gb, bb, group, group, k));
                    db.extend(gemm_tn(gb, ab, group, group, k));
                }
                vec![(ia, da), (ib, db)]
            })
    }

    /// Block-diagonal `W·V` with `W` of shape `(B·g)×g` and `V` of shape `(B·g)×d`.
    pub fn group_matmul(self, other: Var<'t>, group: usize) -> OpResult<'t> {
        let (m, g_cols) = matrix_dims("group_matmul", &self)?;
        let (m2, d) = matrix_dims("group_matmul", &other)?;
        if m != m2 || g_cols != group || group == 0 || m % group != 0 {
            return Err(TensorError::Shape {
                op: "group_matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (w, v) = (self.value_rc(), other.value_rc());
        let blocks = m / group;
        let (gg, gd) = (group * group, group * d);
        let mut y = Vec::with_capacity(m * d);
        for blk in 0..blocks {
            y.extend(gemm(
                &w[blk * gg..(blk + 1) * gg],
                &v[blk * gd..(blk + 1) * gd],
                group,
                group,
                d,
            ));
        }
        let (iw, iv) = (self.id, other.id);
        self.tape
            .record("group_matmul", vec![m, d], y, &[self, other], move |g| {
                let mut dw = Vec::with_capacity(m * group);
                let mut dv = Vec::with_capacity(m * d);
                for blk in 0..blocks {
                    let gb = &g[blk * gd..(blk + 1) * gd];
                    let wb = &w[blk * gg..(blk + 1) * gg];
                    let vb = &v[blk * gd..(blk + 1) * gd];
                    dw.extend(gemm_nt(gb, vb, group, d, group));
                    dv.extend(gemm_tn(wb, gb, group, group, d));
                }
                vec![(iw, dw), (iv, dv)]
            })
    }

    /// Mean over each consecutive group of `group` rows: `(B·g)×c → B×c`.
    pub fn group_mean_rows(self, group: usize) -> OpResult<'t> {
        let (m, c) = matrix_dims("group_mean_rows", &self)?;
        if group == 0 || m % group != 0 {
            return Err(TensorError::Invalid(format!(
                "group_mean_rows: {m} rows not divisible into groups of {group}"
            )));
        }
        let x = self.value_rc();
        let blocks = m / group;
        let inv = 1.0 / group as f64;
        let mut y = vec![0.0; blocks * c];
        for (r, row) in x.chunks(c).enumerate() {
            let out = &mut y[(r / group) * c..(r / group + 1) * c];
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v * inv);
        }
        let id = self.id;
        self.tape
            .record("group_mean_rows", vec![blocks, c], y, &[self], move |g| {
                let mut dx = Vec::with_capacity(m * c);
                for r in 0..m {
                    let blk = r / group;
                    dx.extend(g[blk * c..(blk + 1) * c].iter().map(|v| v * inv));
                }
                vec![(id, dx)]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let id = tape.constant(&Tensor::eye(2));
        let b = tape.constant(&t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(id.matmul(b).unwrap().value(), t(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let row = tape.constant(&t(&[&[1.0, 2.0]]));
        let col = tape.constant(&t(&[&[3.0], &[4.0]]));
        assert_eq!(row.matmul(col).unwrap().value().data(), &[11.0]);

        let zero = tape.constant(&Tensor::zeros(&[2, 2]));
        let any = tape.constant(&t(&[&[1.5, -2.0, 7.0], &[0.3, 9.0, -1.0]]));
        assert!(zero.matmul(any).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![0.5, -1.2]).unwrap());
        let back = x.exp().unwrap().ln().unwrap().value();
        assert!((back.data()[0] - 0.5).abs() < 1e-15);
        assert!((back.data()[1] + 1.2).abs() < 1e-15);

        let zero = tape.constant(&Tensor::scalar(0.0));
        assert!((zero.softplus().unwrap().item() - 0.693147).abs() < 1e-6);
        assert!((zero.softplus().unwrap().item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(zero.sigmoid().unwrap().item(), 0.5);
    }

    #[test]
    fn ln_domain_error_names_index() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![1.0, 2.0, -0.5]).unwrap());
        assert_eq!(
            x.ln().unwrap_err(),
            TensorError::Domain {
                op: "ln",
                index: 2,
                value: -0.5
            }
        );
    }

    #[test]
    fn overflow_is_reported_not_propagated() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![1.0, 1000.0]).unwrap());
        assert_eq!(
            x.exp().unwrap_err(),
            TensorError::NonFinite { op: "exp", index: 1 }
        );
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let c = 2.7;
        let x = tape.constant(&t(&[&[c, c, c], &[0.0, 3f64.ln(), f64::MIN_POSITIVE]]));
        let y = x.slice_cols(0, 2).unwrap().softmax_rows().unwrap().value();
        assert!((y.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((y.at(1, 0) - 0.25).abs() < 1e-15);
        assert!((y.at(1, 1) - 0.75).abs() < 1e-15);

        let u = x.softmax_rows().unwrap().value();
        for v in u.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.constant(&t(&[&[1000.0, 0.0]]));
        let s = big.softmax_rows().unwrap().value();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap());
        let unused = tape.param(&Tensor::vector(vec![5.0, 6.0]).unwrap());
        let loss = w.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let loss = w.mul(w).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss(_))
        ));
        let loss = w.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::BackwardTwice);
        tape.reset();
        assert!(tape.is_empty());
        let w = tape.param(&Tensor::scalar(3.0));
        let loss = w.mul(w).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(w).data(), &[6.0]);
    }

    #[test]
    fn ln_exp_gradient_is_one() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![-1.7, 0.0, 0.4, 2.2]).unwrap());
        let loss = w.exp().unwrap().ln().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().get(w);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fan_out_accumulates_over_paths() {
        // loss = sum(x*x + x) => dx = 2x + 1
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![0.5, -2.0]).unwrap());
        let loss = x.mul(x).unwrap().add(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().get(x);
        assert_eq!(g.data(), &[2.0, -3.0]);
    }

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::new();
        let c = tape.constant(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = c.tanh().unwrap();
        assert!(!y.tracked());
        assert!(tape.nodes.borrow()[y.id].backward.is_none());
    }

    #[test]
    fn grouped_ops_match_per_block_products() {
        let tape = Tape::new();
        // two blocks of 2 rows, k = 3
        let q = tape.constant(&t(&[
            &[1.0, 0.0, 2.0],
            &[0.0, 1.0, 1.0],
            &[3.0, 1.0, 0.0],
            &[1.0, 1.0, 1.0],
        ]));
        let s = q.group_matmul_nt(q, 2).unwrap().value();
        assert_eq!(s.shape(), &[4, 2]);
        assert_eq!(s.row(0), &[5.0, 2.0]);
        assert_eq!(s.row(1), &[2.0, 2.0]);
        assert_eq!(s.row(2), &[10.0, 4.0]);
        assert_eq!(s.row(3), &[4.0, 3.0]);

        let w = tape.constant(&t(&[&[1.0, 0.0], &[0.5, 0.5], &[0.0, 1.0], &[0.25, 0.75]]));
        let v = tape.constant(&t(&[&[2.0], &[4.0], &[8.0], &[16.0]]));
        let o = w.group_matmul(v, 2).unwrap().value();
        assert_eq!(o.data(), &[2.0, 3.0, 16.0, 14.0]);

        let m = v.group_mean_rows(2).unwrap().value();
        assert_eq!(m.data(), &[3.0, 12.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.param(&t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(&t(&[&[5.0], &[6.0]]));
        let c = Var::concat_cols(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice_cols(2, 1).unwrap().value(), b.value());
        let loss = c.slice_cols(1, 2).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g.get(b).data(), &[1.0, 1.0]);
    }
}
