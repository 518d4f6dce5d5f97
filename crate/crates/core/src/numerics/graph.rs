//! Reverse-mode differentiation over a dynamically recorded operation list.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. [`Graph::backward`] walks the list in reverse creation order, which
//! is a valid reverse topological order by construction.

use std::collections::{BTreeMap, HashMap};

use super::kan::SplineGrid;
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParameterStore, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const BCE_LOGIT_CLAMP: f64 = 30.0;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, batch: usize },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    L2NormRows(Var),
    L2NormCols(Var),
    RowNorms(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    Reshape(Var),
    GroupMax(Var, Vec<usize>),
    SplineBasis(Var, Tensor),
    QuatToRotation(Var),
    BceLogitsMean(Var, Vec<f64>),
    LogSumExpAt(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf node; gradients are tracked but it is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Batched product: `a` is `(B·m)×k`, `b` is `(B·k)×n`, result `(B·m)×n`.
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if batch == 0 || av.rows() % batch != 0 || bv.rows() % batch != 0 || av.cols() != bv.rows() / batch {
            return Err(shape_err("bmm", av, bv));
        }
        let (m, k, n) = (av.rows() / batch, av.cols(), bv.cols());
        let mut out = Tensor::zeros(batch * m, n);
        for bi in 0..batch {
            matmul_into(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(out, Op::Bmm { a, b, batch }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a (n×d) + row (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += *b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a (n×d) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("mul_col", av, cv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.get(r, 0);
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows_value(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let out = softmax_rows_value(&self.value(a).transpose()).transpose();
        self.push(out, Op::SoftmaxCols(a))
    }

    /// Rows scaled to unit L2 norm; `x / (‖x‖ + 1e-12)`, so zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let out = l2_rows_value(self.value(a));
        self.push(out, Op::L2NormRows(a))
    }

    pub fn l2_normalize_cols(&mut self, a: Var) -> Var {
        let out = l2_rows_value(&self.value(a).transpose()).transpose();
        self.push(out, Op::L2NormCols(a))
    }

    /// Euclidean norm of each row, `n×1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_vec(av.rows(), 1, data).expect("row count");
        self.push(out, Op::RowNorms(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Per-row sum across columns, `n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(av.rows(), 1, data).expect("row count");
        self.push(out, Op::SumCols(a))
    }

    /// Mean over rows, `1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows().max(1) as f64;
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += *x / n;
            }
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), pv));
            }
            cols += pv.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let row = self.value(*p).row(r);
                out.row_mut(r)[off..off + row.len()].copy_from_slice(row);
                off += row.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), pv));
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows(), "slice_rows out of range");
        let out = Tensor::from_vec(
            end - start,
            av.cols(),
            av.data()[start * av.cols()..end * av.cols()].to_vec(),
        )
        .expect("slice shape");
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let opt: Vec<Option<usize>> = idx.iter().map(|i| Some(*i)).collect();
        self.gather_rows_opt(a, opt)
    }

    /// Row gather where `None` yields a zero row.
    pub fn gather_rows_opt(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols());
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out.row_mut(r).copy_from_slice(av.row(*i));
            }
        }
        self.push(out, Op::Gather(a, idx))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if rows * cols != av.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: av.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let out = av.clone().reshaped(rows, cols);
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || !av.rows().is_multiple_of(group) {
            return Err(Error::ShapeMismatch {
                op: "group_max",
                left: av.shape().to_vec(),
                right: vec![group],
            });
        }
        let n = av.rows() / group;
        let c = av.cols();
        let mut out = Tensor::zeros(n, c);
        let mut arg = vec![0usize; n * c];
        for g in 0..n {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = g * group;
                for r in g * group..(g + 1) * group {
                    let v = av.get(r, j);
                    if v > best {
                        best = v;
                        bi = r;
                    }
                }
                out.set(g, j, best);
                arg[g * c + j] = bi;
            }
        }
        Ok(self.push(out, Op::GroupMax(a, arg)))
    }

    /// B-spline basis expansion: `n×in` to `n×(in·nb)`, inputs clamped to the grid.
    pub fn spline_basis(&mut self, a: Var, grid: &SplineGrid) -> Var {
        let av = self.value(a);
        let nb = grid.basis_count();
        let mut out = Tensor::zeros(av.rows(), av.cols() * nb);
        let mut deriv = Tensor::zeros(av.rows(), av.cols() * nb);
        for r in 0..av.rows() {
            for i in 0..av.cols() {
                let (vals, ders) = grid.eval_with_derivative(av.get(r, i));
                for c in 0..nb {
                    out.set(r, i * nb + c, vals[c]);
                    deriv.set(r, i * nb + c, ders[c]);
                }
            }
        }
        self.push(out, Op::SplineBasis(a, deriv))
    }

    /// 3×3 rotation matrix of the normalized raw quaternion `[s, x, y, z]` (1×4).
    pub fn quat_to_rotation(&mut self, q: Var) -> Result<Var> {
        let qv = self.value(q);
        if qv.shape() != [1, 4] {
            return Err(Error::ShapeMismatch {
                op: "quat_to_rotation",
                left: qv.shape().to_vec(),
                right: vec![1, 4],
            });
        }
        let (u, _) = unit_quat(qv.data());
        let out = Tensor::from_vec(3, 3, rotation_entries(u).to_vec())?;
        Ok(self.push(out, Op::QuatToRotation(q)))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// with logits clamped to ±30.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::LengthMismatch(lv.len(), targets.len()));
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(z, t)| {
                let z = z.clamp(-BCE_LOGIT_CLAMP, BCE_LOGIT_CLAMP);
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceLogitsMean(logits, targets.to_vec()),
        ))
    }

    /// `log Σ exp(a[p])` over flat positions `p`, computed stably.
    pub fn logsumexp_at(&mut self, a: Var, positions: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if positions.is_empty() {
            return Err(Error::EmptyPoints);
        }
        let m = positions
            .iter()
            .map(|&p| av.data()[p])
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = positions.iter().map(|&p| (av.data()[p] - m).exp()).sum();
        Ok(self.push(
            Tensor::scalar(m + s.ln()),
            Op::LogSumExpAt(a, positions.to_vec()),
        ))
    }

    /// Gradient of the scalar `root` with respect to every node.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter touched by this graph, by name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let value = &self.nodes[id].value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Tensor::zeros(m, k);
                matmul_nt_into(g.data(), bv.data(), ga.data_mut(), m, n, k);
                let mut gb = Tensor::zeros(k, n);
                matmul_tn_into(av.data(), g.data(), gb.data_mut(), m, k, n);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Bmm { a, b, batch } => {
                let (av, bv) = (val(a), val(b));
                let batch = *batch;
                let (m, k, n) = (av.rows() / batch, av.cols(), bv.cols());
                let mut ga = Tensor::zeros(av.rows(), k);
                let mut gb = Tensor::zeros(bv.rows(), n);
                for bi in 0..batch {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    matmul_nt_into(
                        gs,
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    matmul_tn_into(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        gs,
                        &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let ga = zip(g, bv, |x, y| x * y);
                let gb = zip(g, av, |x, y| x * y);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRow(a, row) => {
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += *x;
                    }
                }
                acc(*a, g.clone());
                acc(*row, gr);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(a), val(col));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv.get(r, 0);
                    let mut d = 0.0;
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        d += *o * av.get(r, j);
                        *o *= s;
                    }
                    gc.set(r, 0, d);
                }
                acc(*a, ga);
                acc(*col, gc);
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Gelu(a) => {
                let d = val(a).map(|x| {
                    let u = GELU_K * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
                });
                acc(*a, zip(g, &d, |x, y| x * y));
            }
            Op::Silu(a) => {
                let d = val(a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                acc(*a, zip(g, &d, |x, y| x * y));
            }
            Op::Sigmoid(a) => acc(*a, zip(g, value, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, zip(g, value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, zip(g, val(a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => acc(*a, zip(g, value, |x, y| x * y)),
            Op::Log(a) => acc(*a, zip(g, val(a), |x, y| x / y)),
            Op::SoftmaxRows(a) => acc(*a, softmax_rows_backward(value, g)),
            Op::SoftmaxCols(a) => {
                let gt = softmax_rows_backward(&value.transpose(), &g.transpose());
                acc(*a, gt.transpose())
            }
            Op::L2NormRows(a) => acc(*a, l2_rows_backward(val(a), g)),
            Op::L2NormCols(a) => {
                let gt = l2_rows_backward(&val(a).transpose(), &g.transpose());
                acc(*a, gt.transpose())
            }
            Op::RowNorms(a) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let n = value.get(r, 0);
                    if n > 0.0 {
                        let k = g.get(r, 0) / n;
                        for (o, x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = k * x;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let av = val(a);
                acc(*a, Tensor::filled(av.rows(), av.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let av = val(a);
                let k = g.item() / av.len().max(1) as f64;
                acc(*a, Tensor::filled(av.rows(), av.cols(), k));
            }
            Op::SumCols(a) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    ga.row_mut(r).fill(g.get(r, 0));
                }
                acc(*a, ga);
            }
            Op::MeanRows(a) => {
                let av = val(a);
                let n = av.rows().max(1) as f64;
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = *x / n;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = val(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), pc);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                    }
                    off += pc;
                    acc(*p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pr = val(p).rows();
                    let gp = Tensor::from_vec(
                        pr,
                        g.cols(),
                        g.data()[off * g.cols()..(off + pr) * g.cols()].to_vec(),
                    )
                    .expect("concat_rows grad");
                    off += pr;
                    acc(*p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, ga);
            }
            Op::Gather(a, idx) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        for (o, x) in ga.row_mut(*i).iter_mut().zip(g.row(r)) {
                            *o += *x;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let av = val(a);
                acc(*a, g.clone().reshaped(av.rows(), av.cols()));
            }
            Op::GroupMax(a, arg) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                for (k, src) in arg.iter().enumerate() {
                    let j = k % c;
                    let cur = ga.get(*src, j);
                    ga.set(*src, j, cur + g.data()[k]);
                }
                acc(*a, ga);
            }
            Op::SplineBasis(a, deriv) => {
                let av = val(a);
                let nb = deriv.cols() / av.cols().max(1);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for i in 0..av.cols() {
                        let mut s = 0.0;
                        for c in 0..nb {
                            s += g.get(r, i * nb + c) * deriv.get(r, i * nb + c);
                        }
                        ga.set(r, i, s);
                    }
                }
                acc(*a, ga);
            }
            Op::QuatToRotation(q) => {
                let (u, n) = unit_quat(val(q).data());
                let jac = rotation_jacobian(u);
                let mut gu = [0.0; 4];
                for (k, gk) in gu.iter_mut().enumerate() {
                    *gk = (0..9).map(|e| g.data()[e] * jac[e][k]).sum();
                }
                let dot: f64 = (0..4).map(|k| u[k] * gu[k]).sum();
                let gq: Vec<f64> = (0..4).map(|k| (gu[k] - u[k] * dot) / n).collect();
                acc(*q, Tensor::from_vec(1, 4, gq).expect("quat grad"));
            }
            Op::BceLogitsMean(a, targets) => {
                let av = val(a);
                let n = targets.len().max(1) as f64;
                let k = g.item() / n;
                let data = av
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(z, t)| {
                        if z.abs() > BCE_LOGIT_CLAMP {
                            0.0
                        } else {
                            k * (sigmoid(*z) - t)
                        }
                    })
                    .collect();
                acc(*a, Tensor::from_vec(av.rows(), av.cols(), data).expect("bce grad"));
            }
            Op::LogSumExpAt(a, positions) => {
                let av = val(a);
                let lse = value.item();
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for &p in positions {
                    ga.data_mut()[p] += g.item() * (av.data()[p] - lse).exp();
                }
                acc(*a, ga);
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("zip shape")
}

pub(crate) fn softmax_rows_value(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (yv, gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - dot);
        }
    }
    out
}

pub(crate) fn l2_rows_value(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d = n + NORM_EPS;
        for v in row.iter_mut() {
            *v /= d;
        }
    }
    out
}

fn l2_rows_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (xr, gr) = (x.row(r), g.row(r));
        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = n + NORM_EPS;
        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let k = if n > 0.0 { dot / (n * d * d) } else { 0.0 };
        for (o, (xv, gv)) in out.row_mut(r).iter_mut().zip(xr.iter().zip(gr)) {
            *o = gv / d - xv * k;
        }
    }
    out
}

fn unit_quat(q: &[f64]) -> ([f64; 4], f64) {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

fn rotation_entries(u: [f64; 4]) -> [f64; 9] {
    let [s, x, y, z] = u;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - s * z),
        2.0 * (x * z + s * y),
        2.0 * (x * y + s * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - s * x),
        2.0 * (x * z - s * y),
        2.0 * (y * z + s * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// ∂R[e]/∂u[k] for the unit-quaternion rotation formula.
fn rotation_jacobian(u: [f64; 4]) -> [[f64; 4]; 9] {
    let [s, x, y, z] = u;
    [
        [0.0, 0.0, -4.0 * y, -4.0 * z],
        [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * s],
        [2.0 * y, 2.0 * z, 2.0 * s, 2.0 * x],
        [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * s],
        [0.0, -4.0 * x, 0.0, -4.0 * z],
        [-2.0 * x, -2.0 * s, 2.0 * z, 2.0 * y],
        [-2.0 * y, 2.0 * z, -2.0 * s, 2.0 * x],
        [2.0 * x, 2.0 * s, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
    ]
}
