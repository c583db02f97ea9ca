//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse, accumulates the gradient
//! of a scalar loss into the [`ParamStore`], and drops all intermediates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::parallel::Exec;
use crate::tensor::{self, Tensor};

/// Clamp applied to scores before taking logarithms in the BCE loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ScaleByColumn { x: Var, weights: Var, col: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    MulConst { x: Var, factor: Vec<f64> },
    RowSelect { new: Var, old: Var, keep_new: Vec<bool> },
    Bce { scores: Var, targets: Tensor, row_mask: Vec<bool>, count: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    exec: Exec,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(exec: Exec) -> Self {
        Graph {
            exec,
            ..Default::default()
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node
    /// so that shared weights (e.g. across time steps) accumulate once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b), self.exec)?;
        self.push(y, Op::MatMul(a, b))
    }

    /// `x + b` with `b` (a vector of length `cols(x)`) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut y = xv.clone();
        let c = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        self.push(y, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(y, Op::Mul(a, b))
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|p| 1.0 - p);
        self.push(y, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(sigmoid);
        self.push(y, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(f64::tanh);
        self.push(y, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|p| p.max(0.0));
        self.push(y, Op::Relu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut y = x.clone();
        for i in 0..y.rows() {
            softmax_in_place(y.row_mut(i));
        }
        self.push(y, Op::SoftmaxRows(a))
    }

    /// Scales row `i` of `x` by `weights[i, col]` (or `weights[0, col]` when
    /// `weights` has a single row).
    pub fn scale_by_column(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        if col >= wv.cols() || (wv.rows() != 1 && wv.rows() != xv.rows()) {
            return Err(Error::dim("scale_by_column", xv.shape(), wv.shape()));
        }
        let mut y = xv.clone();
        for i in 0..y.rows() {
            let w = wv.at(if wv.rows() == 1 { 0 } else { i }, col);
            y.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        self.push(y, Op::ScaleByColumn { x, weights, col })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("stack_rows", self.value(parts[0]).shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        self.push(Tensor::new(vec![rows, cols], data)?, Op::StackRows(parts.to_vec()))
    }

    /// Elementwise product with a constant tensor of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.len() {
            return Err(Error::dim("mul_const", xv.shape(), &[factor.len()]));
        }
        let mut y = xv.clone();
        y.data_mut().iter_mut().zip(&factor).for_each(|(v, f)| *v *= f);
        self.push(y, Op::MulConst { x, factor })
    }

    /// Row `i` of the result comes from `new` when `keep_new[i]`, else from `old`.
    pub fn row_select(&mut self, new: Var, old: Var, keep_new: Vec<bool>) -> Result<Var> {
        let (nv, ov) = (self.value(new), self.value(old));
        if nv.shape() != ov.shape() || keep_new.len() != nv.rows() {
            return Err(Error::dim("row_select", nv.shape(), ov.shape()));
        }
        let mut y = ov.clone();
        for (i, &k) in keep_new.iter().enumerate() {
            if k {
                y.row_mut(i).copy_from_slice(nv.row(i));
            }
        }
        self.push(y, Op::RowSelect { new, old, keep_new })
    }

    /// Mean binary cross entropy over all unmasked cells. `scores` must
    /// already be sigmoid outputs; they are clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, scores: Var, targets: Tensor, row_mask: Option<Vec<bool>>) -> Result<Var> {
        let sv = self.value(scores);
        if (sv.rows(), sv.cols()) != (targets.rows(), targets.cols()) {
            return Err(Error::dim("bce", sv.shape(), targets.shape()));
        }
        if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("BCE target {bad} is not 0 or 1")));
        }
        let rows = sv.rows();
        let row_mask = row_mask.unwrap_or_else(|| vec![true; rows]);
        if row_mask.len() != rows {
            return Err(Error::dim("bce mask", sv.shape(), &[row_mask.len()]));
        }
        let n = sv.cols();
        let mut total = 0.0;
        let mut count = 0;
        for i in (0..rows).filter(|&i| row_mask[i]) {
            for (&s, &y) in sv.row(i).iter().zip(targets.row(i)) {
                total += bce_cell(s, y);
            }
            count += n;
        }
        if count == 0 {
            return Err(Error::Data("BCE over an empty (fully masked) batch".into()));
        }
        let loss = total / count as f64;
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                scores,
                targets,
                row_mask,
                count,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Backpropagates from the scalar `loss`, adding every parameter
    /// gradient into `store`. Consumes the tape.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (id, g) in grads {
            store.accumulate_grad(id, &g)?;
        }
        Ok(())
    }

    /// Backpropagates from `loss` and returns the gradient of each parameter
    /// leaf reached, in tape order.
    pub fn gradients(self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let exec = self.exec;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Vec::new();
        let mut nodes = self.nodes;
        nodes.truncate(loss.0 + 1);

        while let Some(node) = nodes.pop() {
            let idx = nodes.len();
            let Some(dy) = grads[idx].take() else { continue };
            let y = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            match node.op {
                Op::Input => {}
                Op::Param(id) => out.push((id, dy)),
                Op::MatMul(a, b) => {
                    let da = tensor::matmul_bt(&dy, val(b), exec)?;
                    let db = tensor::matmul_at(val(a), &dy, exec)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::AddBias(x, b) => {
                    let c = dy.cols();
                    let mut db = vec![0.0; c];
                    for i in 0..dy.rows() {
                        for (acc, v) in db.iter_mut().zip(dy.row(i)) {
                            *acc += v;
                        }
                    }
                    let db = Tensor::new(val(b).shape().to_vec(), db)?;
                    accumulate(&mut grads, b, db)?;
                    accumulate(&mut grads, x, dy)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, dy.clone())?;
                    accumulate(&mut grads, b, dy)?;
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(val(b), |g, q| g * q)?;
                    let db = dy.zip_map(val(a), |g, p| g * p)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::OneMinus(a) => accumulate(&mut grads, a, dy.map(|g| -g))?,
                Op::Sigmoid(a) => {
                    let da = dy.zip_map(y, |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut grads, a, da)?;
                }
                Op::Tanh(a) => {
                    let da = dy.zip_map(y, |g, t| g * (1.0 - t * t))?;
                    accumulate(&mut grads, a, da)?;
                }
                Op::Relu(a) => {
                    let da = dy.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, a, da)?;
                }
                Op::SoftmaxRows(a) => {
                    let mut da = dy.clone();
                    for i in 0..da.rows() {
                        let yr = y.row(i);
                        let dot: f64 = dy.row(i).iter().zip(yr).map(|(g, s)| g * s).sum();
                        for (d, (&g, &s)) in da.row_mut(i).iter_mut().zip(dy.row(i).iter().zip(yr)) {
                            *d = s * (g - dot);
                        }
                    }
                    accumulate(&mut grads, a, da)?;
                }
                Op::ScaleByColumn { x, weights, col } => {
                    let (xv, wv) = (val(x), val(weights));
                    let broadcast = wv.rows() == 1;
                    let mut dx = dy.clone();
                    let mut dw = Tensor::zeros(wv.shape());
                    let wc = wv.cols();
                    for i in 0..dx.rows() {
                        let wi = if broadcast { 0 } else { i };
                        let w = wv.at(wi, col);
                        let dot: f64 = dy.row(i).iter().zip(xv.row(i)).map(|(g, p)| g * p).sum();
                        dw.data_mut()[wi * wc + col] += dot;
                        dx.row_mut(i).iter_mut().for_each(|g| *g *= w);
                    }
                    accumulate(&mut grads, x, dx)?;
                    accumulate(&mut grads, weights, dw)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(p);
                        let (r, c) = (pv.rows(), pv.cols());
                        let mut dp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dp.extend_from_slice(&dy.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        let dp = Tensor::new(pv.shape().to_vec(), dp)?;
                        accumulate(&mut grads, p, dp)?;
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    let data = dy.data();
                    for p in parts {
                        let pv = val(p);
                        let n = pv.len();
                        let dp = Tensor::new(pv.shape().to_vec(), data[offset..offset + n].to_vec())?;
                        offset += n;
                        accumulate(&mut grads, p, dp)?;
                    }
                }
                Op::MulConst { x, factor } => {
                    let mut dx = dy;
                    dx.data_mut().iter_mut().zip(&factor).for_each(|(g, f)| *g *= f);
                    accumulate(&mut grads, x, dx)?;
                }
                Op::RowSelect { new, old, keep_new } => {
                    let mut dn = dy.clone();
                    let mut dold = dy;
                    for (i, &k) in keep_new.iter().enumerate() {
                        if k {
                            dold.row_mut(i).fill(0.0);
                        } else {
                            dn.row_mut(i).fill(0.0);
                        }
                    }
                    accumulate(&mut grads, new, dn)?;
                    accumulate(&mut grads, old, dold)?;
                }
                Op::Bce {
                    scores,
                    targets,
                    row_mask,
                    count,
                } => {
                    let g = dy.data()[0] / count as f64;
                    let sv = val(scores);
                    let mut ds = Tensor::zeros(sv.shape());
                    let n = sv.cols();
                    for i in (0..sv.rows()).filter(|&i| row_mask[i]) {
                        for j in 0..n {
                            let s = sv.at(i, j);
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&s) {
                                continue;
                            }
                            let t = targets.at(i, j);
                            ds.data_mut()[i * n + j] = g * (-t / s + (1.0 - t) / (1.0 - s));
                        }
                    }
                    accumulate(&mut grads, scores, ds)?;
                }
                Op::Sum(a) => {
                    let g = dy.data()[0];
                    let da = Tensor::filled(val(a).shape(), g);
                    accumulate(&mut grads, a, da)?;
                }
            }
        }
        out.reverse();
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::OneMinus(_) => "one_minus",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Relu(_) => "relu",
        Op::SoftmaxRows(_) => "softmax",
        Op::ScaleByColumn { .. } => "scale_by_column",
        Op::ConcatCols(_) => "concat_cols",
        Op::StackRows(_) => "stack_rows",
        Op::MulConst { .. } => "mul_const",
        Op::RowSelect { .. } => "row_select",
        Op::Bce { .. } => "bce",
        Op::Sum(_) => "sum",
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn bce_cell(s: f64, y: f64) -> f64 {
    let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y * s.ln() - (1.0 - y) * (1.0 - s).ln()
}

#[cfg(test)]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_without_forward_is_state_error() {
        let g = Graph::new(Exec::Sequential);
        let mut store = ParamStore::new();
        let err = g.backward(Var(0), &mut store).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(g.gradients(x), Err(Error::State(_))));
    }

    #[test]
    fn scalar_sigmoid_gradient_symbolic() {
        // loss = sigmoid(x * w), d/dw = x * s * (1 - s)
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::new(vec![1, 1], vec![0.7]).unwrap()).unwrap();
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::new(vec![1, 1], vec![1.3]).unwrap()).unwrap();
        let wv = g.param(&store, w).unwrap();
        let z = g.matmul(x, wv).unwrap();
        let s = g.sigmoid(z).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l, &mut store).unwrap();
        let sv = sigmoid(1.3 * 0.7);
        assert!((store.grad(w).data()[0] - 1.3 * sv * (1.0 - sv)).abs() < 1e-15);
    }

    #[test]
    fn shared_param_accumulates() {
        // loss = sum(w * w) through two uses of one param node
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::vector(vec![2.0, -3.0])).unwrap();
        let mut g = Graph::new(Exec::Sequential);
        let a = g.param(&store, w).unwrap();
        let b = g.param(&store, w).unwrap();
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[4.0, -6.0]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::vector(vec![1000.0, 999.0, -1000.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(g.value(y).is_finite());
    }
}
