//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends one node holding its forward value and whatever the
//! backward rule needs. Nodes are only ever appended, so the tape is in
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep. A tape belongs to one forward/backward sequence; run
//! independent tapes to parallelise.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::tensor::{self, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    AddRow,
    Add,
    Scale,
    Relu,
    LayerNorm,
    Softmax,
    ConcatCols,
    ConcatRows,
    ReduceMax,
    Gather,
    Reshape,
    Mul,
    Sum,
    Mse,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(op_name(*self))
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Mul(Var, Var),
    Sum(Var),
    Mse(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ReduceMax { .. } => OpKind::ReduceMax,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(..) => OpKind::Sum,
            Op::Mse(..) => OpKind::Mse,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap(BTreeMap<String, Tensor>);

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.0.insert(name, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &GradMap) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    similarity_products: usize,
    branch_hasher: DefaultHasher,
    fault: Option<OpKind>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Number of point-by-point similarity matrices formed so far.
    pub fn similarity_count(&self) -> usize {
        self.similarity_products
    }

    /// Hash of every branch decision taken so far (ReLU masks, max-pool
    /// argmaxes). Two forwards with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hasher.finish()
    }

    /// Test hook: perturbs the backward rule of one op kind so gradient
    /// checks have a negative control.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let kind = op.kind();
        if kind != OpKind::Leaf {
            value.check_finite(op_name(kind))?;
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.constant(value);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`. Counted as a similarity product when both operands are
    /// indexed by the same point set (equal row counts).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        if self.value(a).rows() == self.value(b).rows() {
            self.similarity_products += 1;
        }
        self.push(out, Op::MatMulNt(a, b))
    }

    /// Adds a `[c]` vector to every row of `x[N×c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() || xv.shape().len() != 2 {
            return Err(dim("add_row", xv, bv));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim("add", av, bv));
        }
        let out = av.zip_map(bv, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim("mul", av, bv));
        }
        let out = av.zip_map(bv, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = xv.map(|v| if v > 0.0 { v } else { 0.0 });
        for v in xv.data() {
            (*v > 0.0).hash(&mut self.branch_hasher);
        }
        self.push(out, Op::Relu(x))
    }

    /// Normalises each row across its channels, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if xv.shape().len() != 2 || gv.len() != c || bv.len() != c {
            return Err(dim("layer_norm", xv, gv));
        }
        let n = xv.rows();
        let mut normalized = Tensor::zeros(&[n, c]);
        let mut out = Tensor::zeros(&[n, c]);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + epsilon).sqrt();
            inv_std.push(r);
            for j in 0..c {
                let h = (row[j] - mean) * r;
                normalized.data_mut()[i * c + j] = h;
                out.data_mut()[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_cols(&values)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_rows(&values)?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// `[N×c] → [c]`; gradient flows to the first argmax row per channel.
    pub fn reduce_max_points(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = tensor::reduce_max_rows(self.value(x))?;
        argmax.hash(&mut self.branch_hasher);
        self.push(out, Op::ReduceMax { x, argmax })
    }

    /// `out[k] = table[indices[k]]`, shaped as `shape`.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= tv.len()) {
            return Err(TensorError::Dimension {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let data = indices.iter().map(|&i| tv.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::Gather { table, indices })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(dim("bc_loss", pv, tv));
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let out = Tensor::scalar(total / pv.len() as f64);
        self.push(out, Op::Mse(pred, target))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; every
    /// registered parameter gets an entry, zero if unreachable.
    pub fn backward(self, loss: Var) -> Result<GradMap> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut contributions = self.local_grads(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, c) in contributions.iter_mut() {
                    for v in c.data_mut() {
                        *v *= 1.01;
                    }
                }
            }
            for (parent, c) in contributions {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let mut out = GradMap::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, tensor::matmul_nt(g, val(*b))?),
                (*b, tensor::matmul_tn(val(*a), g)?),
            ],
            Op::MatMulNt(a, b) => vec![
                (*a, tensor::matmul(g, val(*b))?),
                (*b, tensor::matmul_tn(g, val(*a))?),
            ],
            Op::AddRow(x, b) => {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                vec![
                    (*x, g.clone()),
                    (*b, Tensor::new(val(*b).shape().to_vec(), gb)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * f))],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 }))],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (n, c) = (g.rows(), g.cols());
                let gv = val(*gamma).data();
                let mut dx = Tensor::zeros(&[n, c]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    let gr = g.row(i);
                    let hr = normalized.row(i);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    let out = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        out[j] = inv_std[i] * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?),
                    (*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?),
                ]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (n, m) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..n {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let out = &mut dx.data_mut()[i * m..(i + 1) * m];
                    for j in 0..m {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let c = pv.cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    res.push((*p, Tensor::new(pv.shape().to_vec(), d)?));
                    offset += c;
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let d = g.data()[offset..offset + pv.len()].to_vec();
                    res.push((*p, Tensor::new(pv.shape().to_vec(), d)?));
                    offset += pv.len();
                }
                res
            }
            Op::ReduceMax { x, argmax } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (j, &row) in argmax.iter().enumerate() {
                    dx.data_mut()[row * c + j] = g.data()[j];
                }
                vec![(*x, dx)]
            }
            Op::Gather { table, indices } => {
                let tv = val(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (k, &i) in indices.iter().enumerate() {
                    dt.data_mut()[i] += g.data()[k];
                }
                vec![(*table, dt)]
            }
            Op::Reshape(x) => vec![(*x, g.reshaped(val(*x).shape())?)],
            Op::Sum(x) => vec![(*x, Tensor::filled(val(*x).shape(), g.item()))],
            Op::Mse(pred, target) => {
                let (pv, tv) = (val(*pred), val(*target));
                let scale = 2.0 * g.item() / pv.len() as f64;
                let dp = pv.zip_map(tv, |p, t| scale * (p - t));
                let dt = dp.map(|v| -v);
                vec![(*pred, dp), (*target, dt)]
            }
        })
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::MatMulNt => "matmul_nt",
        OpKind::AddRow => "add_row",
        OpKind::Add => "add",
        OpKind::Scale => "scale",
        OpKind::Relu => "relu",
        OpKind::LayerNorm => "layer_norm",
        OpKind::Softmax => "softmax_rows",
        OpKind::ConcatCols => "concat_channels",
        OpKind::ConcatRows => "concat_rows",
        OpKind::ReduceMax => "reduce_max_points",
        OpKind::Gather => "gather",
        OpKind::Reshape => "reshape",
        OpKind::Mul => "mul",
        OpKind::Sum => "sum",
        OpKind::Mse => "mse",
    }
}

fn dim(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}
