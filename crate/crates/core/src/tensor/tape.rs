//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node to the [`Tape`]; creation order is a valid
//! topological order, so the backward pass is a single reverse sweep over the
//! nodes reachable from the root.

use super::matrix::{dot, gemm_nt, gemm_tn, norm, Matrix};
use crate::error::{Result, TartError};

/// Floor applied to row norms by [`Tape::row_normalize`].
pub const ROW_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruptions, used to prove that gradient checks
/// catch broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops the minus sign of the inverse backward rule.
    InverseBackwardSign,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    MeanRows(Var),
    Inverse(Var),
    RowNormalize { input: Var, norms: Vec<f64> },
    GatherRows { input: Var, indices: Vec<usize> },
    StackRows(Vec<Var>),
    CosineDistance { a: Var, b: Var, eps: f64 },
    SqEuclidean(Var, Var),
    LogSumExpRows(Var),
    PickPerRow { input: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: bool,
    /// True when some parameter is an ancestor (or the node itself).
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Matrix>>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = self.parents_of(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: false,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = true;
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].param
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last backward root with respect to `v`, if backward
    /// has run. Nodes that do not depend on any parameter report zeros.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.as_ref().map(|g| &g[v.0])
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, sign: f64, op: &'static str) -> Result<Matrix> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(TartError::shape(
                op,
                format!("{:?} with row {:?}", (m, n), self.shape(row)),
            ));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in value.row_mut(i).iter_mut().zip(&r) {
                *o += sign * b;
            }
        }
        Ok(value)
    }

    /// Adds a `1 x n` row to every row of an `m x n` node.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, 1.0, "add_row")?;
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Subtracts a `1 x n` row from every row of an `m x n` node.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, -1.0, "sub_row")?;
        Ok(self.push(value, Op::SubRow(a, row)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Sum of all entries, a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean of all entries, a `1 x 1` node.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TartError::EmptyInput("mean of an empty node".into()));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Column-wise mean, a `1 x n` node.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_rows()?;
        Ok(self.push(value, Op::MeanRows(a)))
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).inverse()?;
        Ok(self.push(value, Op::Inverse(a)))
    }

    /// Divides every row by `max(||row||, ROW_NORM_EPS)`.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (m, n) = src.shape();
        let mut value = Matrix::zeros(m, n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let nr = norm(src.row(i));
            let denom = nr.max(ROW_NORM_EPS);
            for (o, v) in value.row_mut(i).iter_mut().zip(src.row(i)) {
                *o = v / denom;
            }
            norms.push(nr);
        }
        self.push(value, Op::RowNormalize { input: a, norms })
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(TartError::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let value = Matrix::from_raw(indices.len(), n, data);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Concatenates nodes with equal column counts top to bottom.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TartError::EmptyInput("stack_rows of no nodes".into()))?;
        let n = self.shape(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(TartError::shape("stack_rows", format!("{} vs {} columns", v.cols(), n)));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_raw(rows, n, data);
        Ok(self.push(value, Op::StackRows(parts.to_vec())))
    }

    /// Pairwise cosine distance between the rows of `a` (`m x e`) and `b`
    /// (`n x e`): `1 - <a_i, b_j> / max(|a_i| |b_j|, eps)`.
    pub fn cosine_distance(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(TartError::shape(
                "cosine_distance",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, n) = (av.rows(), bv.rows());
        let an: Vec<f64> = (0..m).map(|i| norm(av.row(i))).collect();
        let bn: Vec<f64> = (0..n).map(|j| norm(bv.row(j))).collect();
        let mut value = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let denom = (an[i] * bn[j]).max(eps);
                value.set(i, j, 1.0 - dot(av.row(i), bv.row(j)) / denom);
            }
        }
        Ok(self.push(value, Op::CosineDistance { a, b, eps }))
    }

    /// Pairwise squared Euclidean distance between the rows of `a` and `b`.
    pub fn sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(TartError::shape(
                "sq_euclidean",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, n) = (av.rows(), bv.rows());
        let mut value = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let d: f64 = av.row(i).iter().zip(bv.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                value.set(i, j, d);
            }
        }
        Ok(self.push(value, Op::SqEuclidean(a, b)))
    }

    /// Numerically stable `log(sum_j exp(x_ij))` per row, an `m x 1` node.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.cols() == 0 {
            return Err(TartError::EmptyInput("log_sum_exp_rows with no columns".into()));
        }
        let data = (0..src.rows()).map(|i| log_sum_exp(src.row(i))).collect();
        let value = Matrix::from_raw(src.rows(), 1, data);
        Ok(self.push(value, Op::LogSumExpRows(a)))
    }

    /// Picks entry `(i, indices[i])` of every row, an `m x 1` node.
    pub fn pick_per_row(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if indices.len() != src.rows() {
            return Err(TartError::shape(
                "pick_per_row",
                format!("{} indices for {} rows", indices.len(), src.rows()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&c| c >= src.cols()) {
            return Err(TartError::shape(
                "pick_per_row",
                format!("column {bad} of {}", src.cols()),
            ));
        }
        let data = indices.iter().enumerate().map(|(i, &c)| src.get(i, c)).collect();
        let value = Matrix::from_raw(src.rows(), 1, data);
        Ok(self.push(
            value,
            Op::PickPerRow {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Accumulates d(root)/d(node) into every node reachable from `root`.
    ///
    /// Running backward a second time without [`Tape::reset_grads`] is an
    /// error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TartError::Autodiff(
                "backward already ran on this tape; reset gradients first".into(),
            ));
        }
        if self.shape(root) != (1, 1) {
            return Err(TartError::shape(
                "backward",
                format!("root must be 1x1, got {:?}", self.shape(root)),
            ));
        }
        let mut needed = vec![false; root.0 + 1];
        needed[root.0] = self.nodes[root.0].requires_grad;
        for i in (0..=root.0).rev() {
            if needed[i] {
                for p in self.parents_of(&self.nodes[i].op) {
                    if self.nodes[p.0].requires_grad {
                        needed[p.0] = true;
                    }
                }
            }
        }

        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        for i in (0..=root.0).rev() {
            if !needed[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            self.backprop_node(i, &upper[0], lower);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn parents_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubRow(a, b)
            | Op::SqEuclidean(a, b)
            | Op::CosineDistance { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::Inverse(a)
            | Op::LogSumExpRows(a)
            | Op::RowNormalize { input: a, .. }
            | Op::GatherRows { input: a, .. }
            | Op::PickPerRow { input: a, .. } => vec![*a],
            Op::StackRows(parts) => parts.clone(),
        }
    }

    /// Pushes the gradient `g` of node `i` to its parents, all of which live
    /// in `grads` (indices below `i`).
    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Matrix]) {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let req = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if req(a) {
                    gemm_nt(g, val(b), &mut grads[a.0]);
                }
                if req(b) {
                    gemm_tn(val(a), g, &mut grads[b.0]);
                }
            }
            Op::Add(a, b) => {
                grads[a.0].add_scaled_assign(g, 1.0);
                grads[b.0].add_scaled_assign(g, 1.0);
            }
            Op::Sub(a, b) => {
                grads[a.0].add_scaled_assign(g, 1.0);
                grads[b.0].add_scaled_assign(g, -1.0);
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(val(b)).expect("shapes checked at forward");
                let db = g.hadamard(val(a)).expect("shapes checked at forward");
                grads[a.0].add_scaled_assign(&da, 1.0);
                grads[b.0].add_scaled_assign(&db, 1.0);
            }
            Op::Scale(a, factor) => grads[a.0].add_scaled_assign(g, *factor),
            Op::Transpose(a) => grads[a.0].add_scaled_assign(&g.transpose(), 1.0),
            Op::AddRow(a, row) | Op::SubRow(a, row) => {
                let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                grads[a.0].add_scaled_assign(g, 1.0);
                let gr = &mut grads[row.0];
                for r in 0..g.rows() {
                    for (x, gv) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *x += sign * gv;
                    }
                }
            }
            Op::Exp(a) => {
                let d = g.hadamard(&node.value).expect("same shape");
                grads[a.0].add_scaled_assign(&d, 1.0);
            }
            Op::Log(a) => {
                let d = Matrix::from_raw(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(val(a).data()).map(|(gv, x)| gv / x).collect(),
                );
                grads[a.0].add_scaled_assign(&d, 1.0);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                grads[a.0].data_mut().iter_mut().for_each(|x| *x += s);
            }
            Op::MeanRows(a) => {
                let m = val(a).rows() as f64;
                let ga = &mut grads[a.0];
                for r in 0..ga.rows() {
                    for (x, gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *x += gv / m;
                    }
                }
            }
            Op::Inverse(a) => {
                // d(A^-1) = -A^-T G A^-T
                let inv_t = node.value.transpose();
                let tmp = inv_t.matmul(g).expect("square");
                let d = tmp.matmul(&inv_t).expect("square");
                let sign = match self.fault {
                    Some(Fault::InverseBackwardSign) => 1.0,
                    None => -1.0,
                };
                grads[a.0].add_scaled_assign(&d, sign);
            }
            Op::RowNormalize { input, norms } => {
                let y = &node.value;
                let ga = &mut grads[input.0];
                for (r, &nr) in norms.iter().enumerate() {
                    let gr = g.row(r);
                    if nr > ROW_NORM_EPS {
                        let yg = dot(y.row(r), gr);
                        let yr = y.row(r);
                        for ((x, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *x += (gv - yv * yg) / nr;
                        }
                    } else {
                        for (x, gv) in ga.row_mut(r).iter_mut().zip(gr) {
                            *x += gv / ROW_NORM_EPS;
                        }
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                let ga = &mut grads[input.0];
                for (r, &src) in indices.iter().enumerate() {
                    for (x, gv) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *x += gv;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let gp = &mut grads[p.0];
                    let rows = gp.rows();
                    for r in 0..rows {
                        for (x, gv) in gp.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                            *x += gv;
                        }
                    }
                    offset += rows;
                }
            }
            Op::CosineDistance { a, b, eps } => {
                let (av, bv) = (val(a), val(b));
                let (m, n) = (av.rows(), bv.rows());
                let mut da = Matrix::zeros(av.rows(), av.cols());
                let mut db = Matrix::zeros(bv.rows(), bv.cols());
                let an: Vec<f64> = (0..m).map(|i| norm(av.row(i))).collect();
                let bn: Vec<f64> = (0..n).map(|j| norm(bv.row(j))).collect();
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let (ar, br) = (av.row(i), bv.row(j));
                        let prod = an[i] * bn[j];
                        // distance = 1 - sim, so d/dx distance = -d/dx sim
                        if prod > *eps {
                            let sim = dot(ar, br) / prod;
                            let ca = sim / (an[i] * an[i]);
                            let cb = sim / (bn[j] * bn[j]);
                            for (k, x) in da.row_mut(i).iter_mut().enumerate() {
                                *x -= gij * (br[k] / prod - ca * ar[k]);
                            }
                            for (k, x) in db.row_mut(j).iter_mut().enumerate() {
                                *x -= gij * (ar[k] / prod - cb * br[k]);
                            }
                        } else {
                            for (k, x) in da.row_mut(i).iter_mut().enumerate() {
                                *x -= gij * br[k] / eps;
                            }
                            for (k, x) in db.row_mut(j).iter_mut().enumerate() {
                                *x -= gij * ar[k] / eps;
                            }
                        }
                    }
                }
                grads[a.0].add_scaled_assign(&da, 1.0);
                grads[b.0].add_scaled_assign(&db, 1.0);
            }
            Op::SqEuclidean(a, b) => {
                let (av, bv) = (val(a), val(b));
                let mut da = Matrix::zeros(av.rows(), av.cols());
                let mut db = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..av.cols() {
                            let diff = 2.0 * gij * (av.get(i, k) - bv.get(j, k));
                            da.row_mut(i)[k] += diff;
                            db.row_mut(j)[k] -= diff;
                        }
                    }
                }
                grads[a.0].add_scaled_assign(&da, 1.0);
                grads[b.0].add_scaled_assign(&db, 1.0);
            }
            Op::LogSumExpRows(a) => {
                let av = val(a);
                let ga = &mut grads[a.0];
                for r in 0..av.rows() {
                    let lse = node.value.get(r, 0);
                    let gr = g.get(r, 0);
                    for (x, v) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                        *x += gr * (v - lse).exp();
                    }
                }
            }
            Op::PickPerRow { input, indices } => {
                let ga = &mut grads[input.0];
                for (r, &c) in indices.iter().enumerate() {
                    ga.row_mut(r)[c] += g.get(r, 0);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
