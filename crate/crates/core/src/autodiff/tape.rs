//! Tape-based reverse-mode differentiation over matrices.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so
//! the record is already in topological order and [`Tape::backward`] can
//! sweep it once from the loss down to index 0.

use std::sync::Arc;

use rand::Rng;

use super::matrix::{dot, DenseMatrix};
use super::sparse::SparseCsr;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Implementors return the adjoint contribution for each of their inputs;
/// the tape accumulates them.
pub trait CustomBackward {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    fn backward(&self, tape: &Tape, output: Var, grad: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseCsr>, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    LeakyRelu(Var, f64),
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        labels: Vec<usize>,
        probs: DenseMatrix,
    },
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    RowDiv(Var, Var),
    SoftmaxRows(Var),
    Custom(Box<dyn CustomBackward>),
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> DenseMatrix {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&DenseMatrix> {
        self.adjoints[v.0].as_ref()
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, contrib: DenseMatrix) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&contrib),
        None => {
            *slot = Some(contrib);
            Ok(())
        }
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

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input node: a parameter or a constant. Both receive adjoints.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Registers a node whose backward rule lives elsewhere.
    pub fn custom(&mut self, value: DenseMatrix, rule: Box<dyn CustomBackward>) -> Var {
        debug_assert!(rule.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.push(value, Op::Custom(rule))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `s * h` with `s` treated as a constant.
    pub fn spmm(&mut self, s: Arc<SparseCsr>, h: Var) -> Result<Var> {
        let value = s.spmm(self.value(h))?;
        Ok(self.push(value, Op::SpMM(s, h)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row (a bias) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.value(x).add_row_broadcast(self.value(row))?;
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// `s * x` where `s` is a `1 x 1` node.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return shape_err("scalar_mul", format!("scalar operand is {:?}", self.shape(s)));
        }
        let factor = self.value(s).get(0, 0);
        let value = self.value(x).scale(factor);
        Ok(self.push(value, Op::ScalarMul(s, x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere. The derivative at 0 is 1.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = DenseMatrix::from_vec(src.rows(), src.cols(), data)?;
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Mean over `mask` rows of `-log softmax(logits)[label]`.
    ///
    /// `labels` is indexed by logits row; only masked rows are read.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
        if mask.is_empty() {
            return Err(Error::InvalidArgument("cross-entropy over an empty mask".into()));
        }
        let x = self.value(logits);
        if labels.len() != x.rows() {
            return shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), x.rows()),
            );
        }
        let classes = x.cols();
        let mut probs = DenseMatrix::zeros(mask.len(), classes);
        let mut total = 0.0;
        let mut picked = Vec::with_capacity(mask.len());
        for (k, &r) in mask.iter().enumerate() {
            if r >= x.rows() {
                return shape_err("softmax_cross_entropy", format!("mask row {r} out of range"));
            }
            let label = labels[r];
            if label >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {label} at row {r} exceeds {classes} classes"
                )));
            }
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs.row_mut(k).iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            total += denom.ln() - (row[label] - max);
            picked.push(label);
        }
        let value = DenseMatrix::scalar(total / mask.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                rows: mask.to_vec(),
                labels: picked,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if let Some(&r) = rows.iter().find(|&&r| r >= src.rows()) {
            return shape_err("gather_rows", format!("row {r} of {}", src.rows()));
        }
        let value = src.select_rows(rows);
        Ok(self.push(value, Op::GatherRows(x, rows.to_vec())))
    }

    /// Stacks the inputs on top of each other.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return shape_err("vstack", format!("{} columns vs {cols}", m.cols()));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = DenseMatrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::VStack(parts.to_vec())))
    }

    /// Concatenates the inputs along the feature axis.
    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return shape_err("hstack", format!("{} rows vs {rows}", self.shape(p).0));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::HStack(parts.to_vec())))
    }

    /// Divides row `i` of `x` by `d[i]`, where `d` is `rows x 1`.
    pub fn row_div(&mut self, x: Var, d: Var) -> Result<Var> {
        let (xm, dm) = (self.value(x), self.value(d));
        if dm.shape() != (xm.rows(), 1) {
            return shape_err("row_div", format!("{:?} / {:?}", xm.shape(), dm.shape()));
        }
        let value = DenseMatrix::from_fn(xm.rows(), xm.cols(), |i, j| xm.get(i, j) / dm.get(i, 0));
        Ok(self.push(value, Op::RowDiv(x, d)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut adjoints: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(DenseMatrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let (before, rest) = adjoints.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(g)?;
                    accumulate(&mut before[a.0], ga)?;
                    accumulate(&mut before[b.0], gb)?;
                }
                Op::SpMM(s, h) => accumulate(&mut before[h.0], s.spmm_t(g)?)?,
                Op::Transpose(x) => accumulate(&mut before[x.0], g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut before[a.0], g.clone())?;
                    accumulate(&mut before[b.0], g.clone())?;
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut before[x.0], g.clone())?;
                    accumulate(&mut before[row.0], g.column_sums())?;
                }
                Op::AddConst(x) => accumulate(&mut before[x.0], g.clone())?,
                Op::Scale(x, factor) => accumulate(&mut before[x.0], g.scale(*factor))?,
                Op::ScalarMul(s, x) => {
                    let factor = self.value(*s).get(0, 0);
                    let gs = dot(g.data(), self.value(*x).data());
                    accumulate(&mut before[s.0], DenseMatrix::scalar(gs))?;
                    accumulate(&mut before[x.0], g.scale(factor))?;
                }
                Op::LeakyRelu(x, slope) => {
                    let input = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(gv, xv)| if *xv >= 0.0 { *gv } else { slope * gv })
                        .collect();
                    accumulate(&mut before[x.0], DenseMatrix::from_vec(g.rows(), g.cols(), data)?)?;
                }
                Op::Dropout(x, mask) => {
                    let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut before[x.0], DenseMatrix::from_vec(g.rows(), g.cols(), data)?)?;
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    labels,
                    probs,
                } => {
                    let seed = g.get(0, 0) / rows.len() as f64;
                    let (n, c) = self.shape(*logits);
                    let mut out = DenseMatrix::zeros(n, c);
                    for (k, (&r, &label)) in rows.iter().zip(labels).enumerate() {
                        let target = out.row_mut(r);
                        for (j, (t, p)) in target.iter_mut().zip(probs.row(k)).enumerate() {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            *t += seed * (p - onehot);
                        }
                    }
                    accumulate(&mut before[logits.0], out)?;
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut before[x.0], DenseMatrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::GatherRows(x, rows) => {
                    let (r, c) = self.shape(*x);
                    let mut out = DenseMatrix::zeros(r, c);
                    for (k, &src) in rows.iter().enumerate() {
                        for (o, v) in out.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut before[x.0], out)?;
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        accumulate(&mut before[p.0], DenseMatrix::from_vec(r, c, slice)?)?;
                        offset += r;
                    }
                }
                Op::HStack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let part = DenseMatrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        accumulate(&mut before[p.0], part)?;
                        offset += c;
                    }
                }
                Op::RowDiv(x, d) => {
                    let (xm, dm) = (self.value(*x), self.value(*d));
                    let gx = DenseMatrix::from_fn(xm.rows(), xm.cols(), |i, j| g.get(i, j) / dm.get(i, 0));
                    let gd = DenseMatrix::from_fn(xm.rows(), 1, |i, _| {
                        let di = dm.get(i, 0);
                        -dot(g.row(i), xm.row(i)) / (di * di)
                    });
                    accumulate(&mut before[x.0], gx)?;
                    accumulate(&mut before[d.0], gd)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for ((o, gv), yv) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut before[x.0], out)?;
                }
                Op::Custom(rule) => {
                    for (input, contrib) in rule.backward(self, Var(i), g)? {
                        if input.0 >= i {
                            return Err(Error::InvalidArgument(format!(
                                "custom op {} returned a non-input adjoint",
                                rule.name()
                            )));
                        }
                        if contrib.shape() != self.shape(input) {
                            return shape_err(
                                "custom backward",
                                format!(
                                    "{} produced {:?} for input of shape {:?}",
                                    rule.name(),
                                    contrib.shape(),
                                    self.shape(input)
                                ),
                            );
                        }
                        accumulate(&mut before[input.0], contrib)?;
                    }
                }
            }
        }
        Ok(Gradients {
            adjoints,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{finite_diff_check, numeric_gradient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Sum of the diagonal of a square node, built from tape primitives.
    fn trace_loss(t: &mut Tape, m: Var) -> Var {
        let n = t.shape(m).0;
        let mut parts = Vec::new();
        for i in 0..n {
            let row = t.gather_rows(m, &[i]).unwrap();
            let pick = t.leaf(DenseMatrix::from_fn(n, 1, |r, _| if r == i { 1.0 } else { 0.0 }));
            parts.push(t.matmul(row, pick).unwrap());
        }
        let stacked = t.vstack(&parts).unwrap();
        t.sum(stacked)
    }

    #[test]
    fn identity_matmul_passes_gradient_through() {
        let mut t = Tape::new();
        let i = t.leaf(DenseMatrix::identity(3));
        let b = t.leaf(DenseMatrix::from_fn(3, 2, |r, c| (r + 2 * c) as f64));
        let y = t.matmul(i, b).unwrap();
        assert_eq!(t.value(y), t.value(b));
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b), DenseMatrix::filled(3, 2, 1.0));
    }

    #[test]
    fn scalar_matmul_derivative() {
        let mut t = Tape::new();
        let a = t.leaf(DenseMatrix::scalar(3.0));
        let b = t.leaf(DenseMatrix::scalar(-2.0));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).get(0, 0), -6.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a).get(0, 0), -2.0);
        assert_eq!(g.get(b).get(0, 0), 3.0);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let a0 = DenseMatrix::uniform(2, 3, -1.0, 1.0, &mut r);
        let b0 = DenseMatrix::uniform(3, 2, -1.0, 1.0, &mut r);
        let probe = DenseMatrix::uniform(2, 2, -1.0, 1.0, &mut r);
        let eval = |a: &DenseMatrix, b: &DenseMatrix| {
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let bv = t.leaf(b.clone());
            let pv = t.leaf(probe.clone());
            let y = t.matmul(av, bv).unwrap();
            let y = t.matmul(y, pv).unwrap();
            let l = trace_loss(&mut t, y);
            let g = t.backward(l).unwrap();
            (t.value(l).get(0, 0), g.get(av), g.get(bv))
        };
        let (_, ga, gb) = eval(&a0, &b0);
        let f_a = |p: &[f64]| Ok(eval(&DenseMatrix::from_vec(2, 3, p.to_vec()).unwrap(), &b0).0);
        let check = finite_diff_check(f_a, a0.data(), ga.data(), 1e-6).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        let f_b = |p: &[f64]| Ok(eval(&a0, &DenseMatrix::from_vec(3, 2, p.to_vec()).unwrap()).0);
        let check = finite_diff_check(f_b, b0.data(), gb.data(), 1e-6).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn quadratic_form_gradient_is_w() {
        let mut r = rng();
        let w0 = DenseMatrix::uniform(3, 4, -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let w = t.leaf(w0.clone());
        let wt = t.transpose(w);
        let m = t.matmul(wt, w).unwrap();
        let tr = trace_loss(&mut t, m);
        let half = t.scale(tr, 0.5);
        let g = t.backward(half).unwrap().get(w);
        assert!(g.max_abs_diff(&w0) < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones_and_untouched_leaves_get_zeros() {
        let mut t = Tape::new();
        let w = t.leaf(DenseMatrix::filled(3, 4, 0.5));
        let untouched = t.leaf(DenseMatrix::filled(2, 2, 5.0));
        assert!(t.backward(w).is_err(), "non-scalar loss");
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w), DenseMatrix::filled(3, 4, 1.0));
        assert_eq!(g.get(untouched), DenseMatrix::zeros(2, 2));
        assert!(g.try_get(untouched).is_none());
    }

    #[test]
    fn leaky_relu_values_and_kink_convention() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::row_vector(vec![-2.0, 0.0, 3.0]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[-0.02, 0.0, 3.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut r = rng();
        // keep entries away from the kink so central differences stay valid
        let x0 = DenseMatrix::from_fn(3, 3, |i, j| {
            let v = 0.2 + 0.1 * (i * 3 + j) as f64;
            if (i + j) % 2 == 0 {
                v
            } else {
                -v
            }
        });
        let w = DenseMatrix::uniform(3, 3, -1.0, 1.0, &mut r);
        for slope in [0.0, 0.01, 0.2] {
            let eval = |x: &DenseMatrix| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let wv = t.leaf(w.clone());
                let a = t.leaky_relu(xv, slope);
                let y = t.matmul(a, wv).unwrap();
                let y2 = t.leaky_relu(y, slope);
                let l = t.sum(y2);
                let g = t.backward(l).unwrap();
                (t.value(l).get(0, 0), g.get(xv))
            };
            let (_, analytic) = eval(&x0);
            let check = finite_diff_check(
                |p: &[f64]| Ok(eval(&DenseMatrix::from_vec(3, 3, p.to_vec()).unwrap()).0),
                x0.data(),
                analytic.data(),
                1e-6,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "slope {slope}: {check:?}");
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut r = rng();
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::filled(2, 2, 1.5));
        assert_eq!(t.dropout(x, 0.0, true, &mut r).unwrap(), x);
        assert_eq!(t.dropout(x, 0.6, false, &mut r).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut r).is_err());
    }

    #[test]
    fn dropout_monte_carlo_keep_rate() {
        let mut r = rng();
        let mut t = Tape::new();
        let n = 100_000;
        let x = t.leaf(DenseMatrix::filled(1, n, 2.0));
        let y = t.dropout(x, 0.6, true, &mut r).unwrap();
        let kept = t.value(y).data().iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        assert!((kept - 0.4).abs() < 0.01, "keep fraction {kept}");
        let mean = t.value(y).sum() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
        let s = t.sum(y);
        let g = t.backward(s).unwrap().get(x);
        for (gv, yv) in g.data().iter().zip(t.value(y).data()) {
            assert_eq!(*gv == 0.0, *yv == 0.0);
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut t = Tape::new();
        let logits = t.leaf(DenseMatrix::from_rows(&[vec![1e6, 0.0, 0.0], vec![0.0, 1e6, 0.0]]).unwrap());
        let l = t.softmax_cross_entropy(logits, &[0, 1], &[0, 1]).unwrap();
        assert!(t.value(l).get(0, 0).abs() < 1e-12);

        let mut t = Tape::new();
        let c = 5;
        let logits = t.leaf(DenseMatrix::filled(4, c, 0.3));
        let l = t.softmax_cross_entropy(logits, &[0, 1, 2, 3], &[0, 2, 3]).unwrap();
        assert!((t.value(l).get(0, 0) - (c as f64).ln()).abs() < 1e-15);
        let g = t.backward(l).unwrap().get(logits);
        assert!(g.row(1).iter().all(|v| *v == 0.0), "unmasked rows get no gradient");

        let mut t = Tape::new();
        let logits = t.leaf(DenseMatrix::zeros(2, 2));
        assert!(t.softmax_cross_entropy(logits, &[0, 1], &[]).is_err());
        assert!(t.softmax_cross_entropy(logits, &[0, 2], &[1]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut r = rng();
        let x0 = DenseMatrix::uniform(5, 3, -2.0, 2.0, &mut r);
        let labels = [0, 2, 1, 1, 0];
        let mask = [0, 1, 3, 4];
        let eval = |x: &DenseMatrix| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let l = t.softmax_cross_entropy(xv, &labels, &mask).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).get(0, 0), g.get(xv))
        };
        let (_, analytic) = eval(&x0);
        let check = finite_diff_check(
            |p: &[f64]| Ok(eval(&DenseMatrix::from_vec(5, 3, p.to_vec()).unwrap()).0),
            x0.data(),
            analytic.data(),
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn stacking_and_row_ops_gradients() {
        let mut r = rng();
        let a0 = DenseMatrix::uniform(2, 3, -1.0, 1.0, &mut r);
        let b0 = DenseMatrix::uniform(2, 2, -1.0, 1.0, &mut r);
        let d0 = DenseMatrix::uniform(2, 1, 0.5, 2.0, &mut r);
        let s0 = DenseMatrix::uniform(1, 5, -1.0, 1.0, &mut r);
        let probe = DenseMatrix::uniform(5, 2, -1.0, 1.0, &mut r);
        let eval = |p: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf(DenseMatrix::from_vec(2, 3, p[0..6].to_vec()).unwrap());
            let b = t.leaf(DenseMatrix::from_vec(2, 2, p[6..10].to_vec()).unwrap());
            let d = t.leaf(DenseMatrix::from_vec(2, 1, p[10..12].to_vec()).unwrap());
            let s = t.leaf(DenseMatrix::from_vec(1, 5, p[12..17].to_vec()).unwrap());
            let k = t.leaf(DenseMatrix::scalar(p[17]));
            let h = t.hstack(&[a, b]).unwrap();
            let h = t.row_div(h, d).unwrap();
            let sm = t.softmax_rows(s);
            let h = t.add_row(h, sm).unwrap();
            let v = t.vstack(&[h, h]).unwrap();
            let g = t.gather_rows(v, &[3, 0, 0]).unwrap();
            let pr = t.leaf(probe.clone());
            let out = t.matmul(g, pr).unwrap();
            let out = t.scalar_mul(k, out).unwrap();
            let out = t.add_const(out, 0.25);
            let out = t.leaky_relu(out, 0.3);
            let l = t.sum(out);
            let grads = t.backward(l).unwrap();
            let mut all = Vec::new();
            for v in [a, b, d, s, k] {
                all.extend_from_slice(grads.get(v).data());
            }
            (t.value(l).get(0, 0), all)
        };
        let mut p0 = Vec::new();
        for m in [&a0, &b0, &d0, &s0] {
            p0.extend_from_slice(m.data());
        }
        p0.push(0.7);
        let (_, analytic) = eval(&p0);
        let numeric = numeric_gradient(|p: &[f64]| Ok(eval(p).0), &p0, 1e-6).unwrap();
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-4, "coordinate {i}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn spmm_gradient_is_transpose_product() {
        let s = Arc::new(
            SparseCsr::from_triplets(3, 2, &[(0, 0, 1.0), (1, 1, 2.0), (2, 0, -1.0), (2, 1, 0.5)]).unwrap(),
        );
        let mut t = Tape::new();
        let h = t.leaf(DenseMatrix::from_fn(2, 2, |i, j| (i + j) as f64));
        let y = t.spmm(s.clone(), h).unwrap();
        assert!(t.value(y).max_abs_diff(&s.to_dense().matmul(t.value(h)).unwrap()) < 1e-15);
        let l = t.sum(y);
        let g = t.backward(l).unwrap().get(h);
        let expected = s.to_dense().transpose().matmul(&DenseMatrix::filled(3, 2, 1.0)).unwrap();
        assert!(g.max_abs_diff(&expected) < 1e-15);
    }
}
