//! Tape-based reverse-mode differentiation over a fixed set of tensor
//! primitives.
//!
//! Values on the tape are vectors (order 1), row-batched matrices (order 2)
//! or scalars (order 0). A forward computation records one [`Node`] per
//! primitive application; [`Tape::backward`] walks the tape once in reverse
//! and returns a [`GradSet`] keyed by parameter name.
//!
//! ```
//! use pinet::autodiff::Tape;
//! use pinet::tensor::DenseTensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param("x", DenseTensor::scalar(3.0)).unwrap();
//! let y = tape.hadamard(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{DenseTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0:?} is not a recordable primitive")]
    NotAPrimitive(Op),
    #[error("{op:?} expects {expected} inputs, got {found}")]
    Arity { op: Op, expected: usize, found: usize },
    #[error("{op:?}: incompatible input shapes {shapes:?}")]
    Shape { op: Op, shapes: Vec<Vec<usize>> },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("backward requires a scalar output, node has shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("parameter '{0}' does not influence the output")]
    DetachedLeaf(String),
    #[error("parameter '{0}' registered twice")]
    DuplicateParam(String),
    #[error("non-finite forward value in {0}")]
    NonFinite(String),
    #[error("gather label {label} out of range for {classes} columns")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. `Leaf` and `Constant` are created through
/// [`Tape::param`] and [`Tape::constant`] and cannot be recorded.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    /// `a + b`, equal shapes.
    Add,
    /// `a - b`, equal shapes.
    Sub,
    /// `a * b` elementwise, equal shapes.
    Hadamard,
    /// `[rows, n] + [n]`, broadcasting the vector over rows.
    BiasAdd,
    /// `x · w` (`[rows, p] · [p, q]`), or `x · wᵀ` when `trans_w`
    /// (`[rows, p] · [q, p]ᵀ`).
    MatMul { trans_w: bool },
    /// `m · v`, or `mᵀ · v` when `transpose`.
    MatVec { transpose: bool },
    Scale(f64),
    Tanh,
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Row-wise `(x - mean) / sqrt(var + eps)` with the population variance.
    Standardize { eps: f64 },
    /// Row-wise stabilized `ln Σ exp`.
    LogSumExp,
    /// Picks column `labels[r]` from row `r`.
    Gather(Vec<usize>),
}

impl Op {
    fn arity(&self) -> usize {
        match self {
            Op::Leaf | Op::Constant => 0,
            Op::Add | Op::Sub | Op::Hadamard | Op::BiasAdd | Op::MatMul { .. } | Op::MatVec { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: DenseTensor,
}

/// Gradients keyed by parameter name; every entry matches its parameter's shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradSet {
    grads: BTreeMap<String, DenseTensor>,
}

impl GradSet {
    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: DenseTensor) {
        self.grads.insert(name.into(), grad);
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

fn shape_err(op: &Op, vals: &[&DenseTensor]) -> AutodiffError {
    AutodiffError::Shape {
        op: op.clone(),
        shapes: vals.iter().map(|v| v.shape().to_vec()).collect(),
    }
}

fn zip_map(a: &DenseTensor, b: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> DenseTensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseTensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn map(a: &DenseTensor, f: impl Fn(f64) -> f64) -> DenseTensor {
    DenseTensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
}

/// Row-major rows of an order-1 or order-2 value; a vector is one row.
fn as_rows(t: &DenseTensor) -> (usize, usize) {
    match t.order() {
        2 => (t.rows(), t.cols()),
        _ => (1, t.len()),
    }
}

pub(crate) fn standardize_row(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn forward(op: &Op, vals: &[&DenseTensor]) -> Result<DenseTensor> {
    let err = || shape_err(op, vals);
    Ok(match op {
        Op::Leaf | Op::Constant => return Err(AutodiffError::NotAPrimitive(op.clone())),
        Op::Add | Op::Sub | Op::Hadamard => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape() != b.shape() {
                return Err(err());
            }
            match op {
                Op::Add => zip_map(a, b, |x, y| x + y),
                Op::Sub => zip_map(a, b, |x, y| x - y),
                _ => zip_map(a, b, |x, y| x * y),
            }
        }
        Op::BiasAdd => {
            let (m, v) = (vals[0], vals[1]);
            let (_, cols) = as_rows(m);
            if v.order() != 1 || v.len() != cols || m.order() > 2 {
                return Err(err());
            }
            let data = m
                .data()
                .chunks(cols)
                .flat_map(|row| row.iter().zip(v.data()).map(|(a, b)| a + b))
                .collect();
            DenseTensor::new(m.shape().to_vec(), data)?
        }
        Op::MatMul { trans_w } => {
            let (x, w) = (vals[0], vals[1]);
            if x.order() != 2 || w.order() != 2 {
                return Err(err());
            }
            if *trans_w {
                if x.cols() != w.cols() {
                    return Err(err());
                }
                let (rows, q) = (x.rows(), w.rows());
                let mut out = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    let xr = x.row(r);
                    for j in 0..q {
                        let mut s = 0.0;
                        for (a, b) in w.row(j).iter().zip(xr) {
                            s += a * b;
                        }
                        out.push(s);
                    }
                }
                DenseTensor::new(vec![rows, q], out)?
            } else {
                if x.cols() != w.rows() {
                    return Err(err());
                }
                x.matmul(w)?
            }
        }
        Op::MatVec { transpose } => {
            let (m, v) = (vals[0], vals[1]);
            if m.order() != 2 || v.order() != 1 {
                return Err(err());
            }
            let out = if *transpose { m.t_matvec(v.data()) } else { m.matvec(v.data()) };
            DenseTensor::vector(out.map_err(|_| err())?)
        }
        Op::Scale(c) => map(vals[0], |x| c * x),
        Op::Tanh => map(vals[0], f64::tanh),
        Op::Sum => DenseTensor::scalar(vals[0].data().iter().sum()),
        Op::Standardize { eps } => {
            let x = vals[0];
            if x.order() > 2 || *eps <= 0.0 {
                return Err(err());
            }
            let (_, cols) = as_rows(x);
            let data = x.data().chunks(cols).flat_map(|r| standardize_row(r, *eps)).collect();
            DenseTensor::new(x.shape().to_vec(), data)?
        }
        Op::LogSumExp => {
            let x = vals[0];
            if x.order() > 2 {
                return Err(err());
            }
            let (_, cols) = as_rows(x);
            let out: Vec<f64> = x.data().chunks(cols).map(log_sum_exp).collect();
            if x.order() == 2 {
                DenseTensor::vector(out)
            } else {
                DenseTensor::scalar(out[0])
            }
        }
        Op::Gather(labels) => {
            let x = vals[0];
            if x.order() != 2 || labels.len() != x.rows() {
                return Err(err());
            }
            let mut out = Vec::with_capacity(labels.len());
            for (r, &l) in labels.iter().enumerate() {
                if l >= x.cols() {
                    return Err(AutodiffError::LabelOutOfRange { label: l, classes: x.cols() });
                }
                out.push(x.at(r, l));
            }
            DenseTensor::vector(out)
        }
    })
}

fn accumulate(slot: &mut Option<DenseTensor>, g: DenseTensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
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

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: DenseTensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a named differentiable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: DenseTensor) -> Result<NodeId> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = self.push(Op::Leaf, Vec::new(), value);
        self.params.push((name, id));
        Ok(id)
    }

    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        self.push(Op::Constant, Vec::new(), value)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(n, id)| (n.as_str(), *id))
    }

    /// Applies `op` to recorded inputs, caching the forward value.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf | Op::Constant) {
            return Err(AutodiffError::NotAPrimitive(op));
        }
        if inputs.len() != op.arity() {
            return Err(AutodiffError::Arity {
                expected: op.arity(),
                found: inputs.len(),
                op,
            });
        }
        for id in inputs {
            self.node(*id)?;
        }
        let vals: Vec<&DenseTensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &vals)?;
        Ok(self.push(op, inputs.to_vec(), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Hadamard, &[a, b])
    }

    pub fn bias_add(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.record(Op::BiasAdd, &[m, v])
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul { trans_w: false }, &[x, w])
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul { trans_w: true }, &[x, w])
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.record(Op::MatVec { transpose: false }, &[m, v])
    }

    pub fn t_matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.record(Op::MatVec { transpose: true }, &[m, v])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn standardize(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.record(Op::Standardize { eps }, &[a])
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSumExp, &[a])
    }

    pub fn gather(&mut self, a: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.record(Op::Gather(labels), &[a])
    }

    /// Row-batched `(x · a) * (y · b)`: the Khatri-Rao-free form of
    /// `(a ⊙ b)ᵀ (x ⊙ y)` applied to every row.
    pub fn mixed_product(&mut self, a: NodeId, b: NodeId, x: NodeId, y: NodeId) -> Result<NodeId> {
        let xa = self.matmul(x, a)?;
        let yb = self.matmul(y, b)?;
        self.hadamard(xa, yb)
    }

    /// Reverse pass from a scalar `output`. Fails if any registered parameter
    /// has no path to `output`.
    pub fn backward(&self, output: NodeId) -> Result<GradSet> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(map(&out.value, |_| 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let inputs: Vec<&DenseTensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            for (slot, contrib) in node.inputs.iter().zip(input_grads(node, &inputs, &g)?) {
                if let Some(c) = contrib {
                    accumulate(&mut grads[slot.0], c);
                }
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut set = GradSet::default();
        for (name, id) in &self.params {
            match grads.get(id.0).and_then(|g| g.clone()) {
                Some(g) => set.insert(name.clone(), g),
                None => return Err(AutodiffError::DetachedLeaf(name.clone())),
            }
        }
        Ok(set)
    }
}

fn outer(u: &[f64], v: &[f64]) -> DenseTensor {
    let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
    DenseTensor::new(vec![u.len(), v.len()], data).expect("outer shape")
}

fn input_grads(node: &Node, inputs: &[&DenseTensor], g: &DenseTensor) -> Result<Vec<Option<DenseTensor>>> {
    let y = &node.value;
    Ok(match &node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scaled(-1.0))],
        Op::Hadamard => vec![
            Some(zip_map(g, inputs[1], |a, b| a * b)),
            Some(zip_map(g, inputs[0], |a, b| a * b)),
        ],
        Op::BiasAdd => {
            let cols = inputs[1].len();
            let mut gv = vec![0.0; cols];
            for row in g.data().chunks(cols) {
                for (acc, v) in gv.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(DenseTensor::vector(gv))]
        }
        Op::MatMul { trans_w } => {
            let (x, w) = (inputs[0], inputs[1]);
            if *trans_w {
                // y = x wᵀ: dx = g w, dw = gᵀ x
                vec![Some(g.matmul(w)?), Some(g.transpose()?.matmul(x)?)]
            } else {
                // y = x w: dx = g wᵀ, dw = xᵀ g
                vec![Some(g.matmul(&w.transpose()?)?), Some(x.transpose()?.matmul(g)?)]
            }
        }
        Op::MatVec { transpose } => {
            let (m, v) = (inputs[0], inputs[1]);
            if *transpose {
                // y = mᵀ v: dm[i,j] = v[i] g[j], dv = m g
                vec![Some(outer(v.data(), g.data())), Some(DenseTensor::vector(m.matvec(g.data())?))]
            } else {
                vec![Some(outer(g.data(), v.data())), Some(DenseTensor::vector(m.t_matvec(g.data())?))]
            }
        }
        Op::Scale(c) => vec![Some(g.scaled(*c))],
        Op::Tanh => vec![Some(zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi)))],
        Op::Sum => {
            let s = g.data()[0];
            vec![Some(map(inputs[0], |_| s))]
        }
        Op::Standardize { eps } => {
            let x = inputs[0];
            let (_, cols) = as_rows(x);
            let n = cols as f64;
            let mut out = Vec::with_capacity(x.len());
            for ((xr, yr), gr) in x.data().chunks(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let sd = (var + eps).sqrt();
                let g_mean = gr.iter().sum::<f64>() / n;
                let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                out.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - g_mean - yi * gy_mean) / sd));
            }
            vec![Some(DenseTensor::new(x.shape().to_vec(), out)?)]
        }
        Op::LogSumExp => {
            let x = inputs[0];
            let (_, cols) = as_rows(x);
            let mut out = Vec::with_capacity(x.len());
            for (xr, (&lse, &gi)) in x.data().chunks(cols).zip(y.data().iter().zip(g.data())) {
                out.extend(xr.iter().map(|v| gi * (v - lse).exp()));
            }
            vec![Some(DenseTensor::new(x.shape().to_vec(), out)?)]
        }
        Op::Gather(labels) => {
            let x = inputs[0];
            let mut gx = DenseTensor::zeros(x.shape());
            let cols = x.cols();
            for (r, (&l, &gi)) in labels.iter().zip(g.data()).enumerate() {
                gx.data_mut()[r * cols + l] += gi;
            }
            vec![Some(gx)]
        }
    })
}

/// Per-parameter comparison of analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its entries)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `build` receives a fresh tape and the node ids of `params` (in order) and
/// returns the scalar output node. Relative error for each entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, with `floor`
/// set to `1e-3` times the largest analytic gradient entry so entries that are
/// numerically zero are judged against the gradient's overall scale.
pub fn grad_check<F>(params: &[(String, DenseTensor)], build: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let eval = |values: &[(String, DenseTensor)]| -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .map(|(n, v)| tape.param(n.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &ids)?;
        let v = tape.value(out);
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite("grad_check forward".into()));
        }
        Ok((tape, out))
    };

    let (tape, out) = eval(params)?;
    let analytic = tape.backward(out)?;
    let floor = analytic
        .iter()
        .fold(0.0f64, |m, (_, g)| m.max(g.max_abs()))
        * 1e-3;
    let floor = floor.max(f64::MIN_POSITIVE);

    let mut work: Vec<(String, DenseTensor)> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let name = params[p].0.clone();
        let grad = analytic.get(&name).expect("registered parameter").clone();
        let mut worst = 0.0f64;
        for i in 0..params[p].1.len() {
            let orig = params[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + eps;
            let (t_plus, o_plus) = eval(&work)?;
            work[p].1.data_mut()[i] = orig - eps;
            let (t_minus, o_minus) = eval(&work)?;
            work[p].1.data_mut()[i] = orig;
            let f_plus = t_plus.value(o_plus).data()[0];
            let f_minus = t_minus.value(o_minus).data()[0];
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_param.push((name, worst));
    }
    let max_rel_error = per_param.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}
