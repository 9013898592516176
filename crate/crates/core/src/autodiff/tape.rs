//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every value recorded on a [`Tape`] is a 2-D `f64` matrix; rows index the
//! batch and columns the features. Scalars are `1 x 1`. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order and each node is visited exactly once.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    CenterCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    PickCols(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for a single reverse pass. One writer per tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<(u64, ParamId), Var>,
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node, if the node
    /// requires a gradient and the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(s, id, node)| self.node_grads[node].as_ref().map(|g| (s, id, g)))
    }
}

fn shape(t: &Tensor) -> (usize, usize) {
    (t.nrows(), t.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when no gradient can flow into `v`.
    pub fn is_constant(&self, v: Var) -> bool {
        !self.rg(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that does receive gradients (used for gradient checks on inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let t = Tensor::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(t)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same
    /// parameter on one tape share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.param_vars.get(&key) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            true,
        );
        self.param_vars.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(Error::config(format!(
                "matmul shape mismatch: ({ra}x{ca}) . ({rb}x{cb})"
            )));
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a (n x m) + bias (1 x m)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, ca) = self.shape(a);
        let (rb, cb) = self.shape(bias);
        if rb != 1 || cb != ca {
            return Err(Error::config(format!(
                "bias shape ({rb}x{cb}) does not match width {ca}"
            )));
        }
        let v = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(v, Op::AddBias(a, bias), rg))
    }

    /// `a (n x m) + col (n x 1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ra, _) = self.shape(a);
        let (rc, cc) = self.shape(col);
        if cc != 1 || rc != ra {
            return Err(Error::usage(format!(
                "column shape ({rc}x{cc}) does not match {ra} rows"
            )));
        }
        let v = self.value(a) + self.value(col);
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(v, Op::AddCol(a, col), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::usage(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Elementwise clamp; the gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = if t.is_empty() { 0.0 } else { t.sum() / t.len() as f64 };
        let rg = self.rg(a);
        self.push(Tensor::from_elem((1, 1), s), Op::Mean(a), rg)
    }

    /// Sum across columns: `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::RowSum(a), rg)
    }

    /// Subtract each row's mean from that row.
    pub fn center_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.mean_axis(Axis(1)).expect("nonempty row").insert_axis(Axis(1));
        let v = t - &m;
        let rg = self.rg(a);
        self.push(v, Op::CenterCols(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let rows = self.shape(first).0;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::usage(format!(
                    "concat row mismatch: {r} vs {rows}"
                )));
            }
            width += c;
        }
        let mut out = Tensor::zeros((rows, width));
        let mut off = 0;
        for &p in parts {
            let c = self.shape(p).1;
            out.slice_mut(ndarray::s![.., off..off + c])
                .assign(self.value(p));
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let c = self.shape(a).1;
        if start > end || end > c {
            return Err(Error::usage(format!("column slice {start}..{end} of width {c}")));
        }
        let v = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ra) {
            return Err(Error::usage(format!("row index {bad} out of {ra}")));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros((idx.len(), ca));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `out[seg[r]] += a[r]` with `segments` output rows.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        if seg.len() != ra {
            return Err(Error::usage(format!(
                "segment ids ({}) do not match rows ({ra})",
                seg.len()
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
            return Err(Error::usage(format!("segment id {bad} out of {segments}")));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros((segments, ca));
        for (r, &s) in seg.iter().enumerate() {
            let mut row = out.row_mut(s);
            row += &src.row(r);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentSum(a, seg.to_vec()), rg))
    }

    /// Multiply row `r` by the constant `c[r]`.
    pub fn scale_rows(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let (ra, _) = self.shape(a);
        if c.len() != ra {
            return Err(Error::usage(format!(
                "row scale length {} does not match {ra} rows",
                c.len()
            )));
        }
        let mut v = self.value(a).clone();
        for (mut row, &k) in v.rows_mut().into_iter().zip(c) {
            row *= k;
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::ScaleRows(a, c.to_vec()), rg))
    }

    /// `out[r, 0] = a[r, idx[r]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        if idx.len() != ra {
            return Err(Error::usage(format!(
                "pick indices ({}) do not match rows ({ra})",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= ca) {
            return Err(Error::usage(format!("column {bad} out of {ca}")));
        }
        let src = self.value(a);
        let v = Tensor::from_shape_fn((ra, 1), |(r, _)| src[[r, idx[r]]]);
        let rg = self.rg(a);
        Ok(self.push(v, Op::PickCols(a, idx.to_vec()), rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } => Some((store, id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::AddBias(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(a, col) => {
                acc(*a, g.clone());
                acc(*col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| *d *= sigmoid(x));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Abs(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| *d *= sign(x));
                acc(*a, d);
            }
            Op::Square(a) => {
                let mut d = g * val(*a);
                d *= 2.0;
                acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Sum(a) => {
                let s = g[[0, 0]];
                acc(*a, Tensor::from_elem(val(*a).raw_dim(), s));
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                let s = g[[0, 0]] / n;
                acc(*a, Tensor::from_elem(val(*a).raw_dim(), s));
            }
            Op::RowSum(a) => {
                let (r, c) = shape(val(*a));
                acc(*a, Tensor::from_shape_fn((r, c), |(i, _)| g[[i, 0]]));
            }
            Op::CenterCols(a) => {
                let m = g.mean_axis(Axis(1)).expect("nonempty").insert_axis(Axis(1));
                acc(*a, g - &m);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = shape(val(p)).1;
                    if self.rg(p) {
                        acc(p, g.slice(ndarray::s![.., off..off + c]).to_owned());
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let mut d = Tensor::zeros(val(*a).raw_dim());
                    let c = g.ncols();
                    d.slice_mut(ndarray::s![.., *start..*start + c]).assign(g);
                    acc(*a, d);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let mut d = Tensor::zeros(val(*a).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(*a, d);
                }
            }
            Op::SegmentSum(a, seg) => {
                if self.rg(*a) {
                    let mut d = Tensor::zeros(val(*a).raw_dim());
                    for (r, &s) in seg.iter().enumerate() {
                        d.row_mut(r).assign(&g.row(s));
                    }
                    acc(*a, d);
                }
            }
            Op::ScaleRows(a, c) => {
                let mut d = g.clone();
                for (mut row, &k) in d.rows_mut().into_iter().zip(c) {
                    row *= k;
                }
                acc(*a, d);
            }
            Op::PickCols(a, idx) => {
                if self.rg(*a) {
                    let mut d = Tensor::zeros(val(*a).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        d[[r, i]] = g[[r, 0]];
                    }
                    acc(*a, d);
                }
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
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

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
