//! Layer building blocks on the tape.

use std::sync::Arc;

use crate::autodiff::{CustomBackward, DenseMatrix, SparseCsr, Tape, Var};
use crate::error::{shape_err, Result};
use crate::relemb::{self, normalize_adjacency, AdjacencyPattern, Normalization, SelfLoopMode};

/// How a layer mixes node states.
#[derive(Clone)]
pub enum Propagation {
    /// Weighted adjacency built from relation embeddings.
    Relational {
        pattern: Arc<AdjacencyPattern>,
        alpha: Var,
        beta: Var,
        self_loops: SelfLoopMode,
        norm: Normalization,
    },
    /// A constant propagation matrix.
    Fixed(Arc<SparseCsr>),
}

pub fn propagate(tape: &mut Tape, prop: &Propagation, h: Var) -> Result<Var> {
    match prop {
        Propagation::Relational {
            pattern,
            alpha,
            beta,
            self_loops,
            norm,
        } => Ok(relemb::aggregate(tape, pattern, *alpha, *beta, h, *self_loops, *norm)?.0),
        Propagation::Fixed(s) => tape.spmm(s.clone(), h),
    }
}

/// `x W + b`, followed by ReLU when `activate`.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Var, activate: bool) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    Ok(if activate { tape.relu(z) } else { z })
}

/// `sigma(A_tilde H W + b)`.
pub fn regcn_layer(tape: &mut Tape, prop: &Propagation, h: Var, w: Var, b: Var, activate: bool) -> Result<Var> {
    let agg = propagate(tape, prop, h)?;
    dense(tape, agg, w, b, activate)
}

/// Parameters of one GIN-style layer.
#[derive(Clone, Copy)]
pub struct GinWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub eps: Var,
}

/// The summed input `A_hat H + (1 + eps) H` of a GIN-style layer.
pub fn regin_aggregate(tape: &mut Tape, prop: &Propagation, h: Var, eps: Var) -> Result<Var> {
    let neigh = propagate(tape, prop, h)?;
    let scaled = tape.scalar_mul(eps, h)?;
    let own = tape.add(h, scaled)?;
    tape.add(neigh, own)
}

/// `sigma(sigma((A_hat H + (1 + eps) H) W1 + b1) W2 + b2)`; the outer
/// activation is skipped when `activate` is false.
pub fn regin_layer(tape: &mut Tape, prop: &Propagation, h: Var, p: GinWeights, activate: bool) -> Result<Var> {
    let s = regin_aggregate(tape, prop, h, p.eps)?;
    let inner = dense(tape, s, p.w1, p.b1, true)?;
    dense(tape, inner, p.w2, p.b2, activate)
}

/// Collapsed propagation `(D_{L-1} ... D_0)^-1 A_{L-1} ... A_0 H` over the
/// unnormalised per-layer adjacencies. `weights` holds `(alpha, beta)` per layer.
pub fn resgc_propagate(
    tape: &mut Tape,
    pattern: &Arc<AdjacencyPattern>,
    weights: &[(Var, Var)],
    self_loops: SelfLoopMode,
    h: Var,
) -> Result<Var> {
    let mut z = h;
    for &(alpha, beta) in weights {
        z = relemb::aggregate(tape, pattern, alpha, beta, z, self_loops, Normalization::None)?.0;
    }
    for &(alpha, beta) in weights {
        let d = relemb::degrees(tape, pattern, alpha, beta, self_loops)?;
        z = tape.row_div(z, d)?;
    }
    Ok(z)
}

/// `(sum_r a_r A_r) X` with `a` a `1 x |R|` node.
struct MixApply {
    mats: Vec<Arc<SparseCsr>>,
    products: Vec<DenseMatrix>,
    weights: Var,
    x: Var,
}

impl CustomBackward for MixApply {
    fn name(&self) -> &'static str {
        "relation_mixture"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.weights, self.x]
    }

    fn backward(&self, tape: &Tape, _output: Var, grad: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>> {
        let a = tape.value(self.weights).data();
        let (r, c) = tape.shape(self.x);
        let mut dx = DenseMatrix::zeros(r, c);
        let mut da = Vec::with_capacity(self.mats.len());
        for ((m, p), &w) in self.mats.iter().zip(&self.products).zip(a) {
            dx.add_assign(&m.spmm_t(grad)?.scale(w))?;
            da.push(crate::autodiff::dot(grad.data(), p.data()));
        }
        Ok(vec![(self.x, dx), (self.weights, DenseMatrix::row_vector(da))])
    }
}

pub fn mix_apply(tape: &mut Tape, mats: &[Arc<SparseCsr>], weights: Var, x: Var) -> Result<Var> {
    if tape.shape(weights) != (1, mats.len()) {
        return shape_err("mix_apply", format!("{:?} weights for {} relations", tape.shape(weights), mats.len()));
    }
    let (r, c) = tape.shape(x);
    let products = mats
        .iter()
        .map(|m| m.spmm(tape.value(x)))
        .collect::<Result<Vec<_>>>()?;
    let mut value = DenseMatrix::zeros(r, c);
    for (p, &w) in products.iter().zip(tape.value(weights).data()) {
        value.add_assign(&p.scale(w))?;
    }
    let rule = MixApply {
        mats: mats.to_vec(),
        products,
        weights,
        x,
    };
    Ok(tape.custom(value, Box::new(rule)))
}

/// `D^-1 (A_P + I) H` where `A_P = M_1 M_2 ... M_l` and `M_j` mixes the
/// relations with `softmax(scores[j])`. Differentiable in the scores.
pub fn gtn_propagate(tape: &mut Tape, mats: &[Arc<SparseCsr>], scores: &[Var], h: Var) -> Result<Var> {
    let n = tape.shape(h).0;
    let mixes: Vec<Var> = scores.iter().map(|&s| tape.softmax_rows(s)).collect();
    let mut z = h;
    let mut ones = tape.leaf(DenseMatrix::filled(n, 1, 1.0));
    for &m in mixes.iter().rev() {
        z = mix_apply(tape, mats, m, z)?;
        ones = mix_apply(tape, mats, m, ones)?;
    }
    let d = tape.add_const(ones, 1.0);
    let with_self = tape.add(z, h)?;
    tape.row_div(with_self, d)
}

/// Product of the convex relation mixtures, left to right.
pub fn gtn_composite_adjacency(mats: &[SparseCsr], mixtures: &[Vec<f64>]) -> Result<SparseCsr> {
    let n = mats.first().map_or(0, SparseCsr::rows);
    let mix = |w: &Vec<f64>| -> Result<SparseCsr> {
        if w.len() != mats.len() {
            return shape_err("gtn_composite_adjacency", format!("{} weights for {} relations", w.len(), mats.len()));
        }
        mats.iter()
            .zip(w)
            .try_fold(SparseCsr::zeros(n, n), |acc, (m, &a)| acc.add(&m.scale(a)))
    };
    let mut out: Option<SparseCsr> = None;
    for w in mixtures {
        let m = mix(w)?;
        out = Some(match out {
            None => m,
            Some(acc) => acc.matmul(&m)?,
        });
    }
    out.ok_or_else(|| crate::Error::InvalidArgument("meta-path length must be at least 1".into()))
}

/// `D^-1 (A_P + I)` for a fixed composite adjacency.
pub fn gtn_propagation_matrix(a_p: &SparseCsr) -> Result<SparseCsr> {
    let with_self = a_p.add(&SparseCsr::identity(a_p.rows()))?;
    Ok(normalize_adjacency(with_self, Normalization::Row)?.normalized)
}

/// `sigma(D^-1 (A_P + I) H W + B)` on a fixed `A_P`.
pub fn gtn_layer(tape: &mut Tape, a_p: &SparseCsr, h: Var, w: Var, b: Var, activate: bool) -> Result<Var> {
    let prop = Propagation::Fixed(Arc::new(gtn_propagation_matrix(a_p)?));
    regcn_layer(tape, &prop, h, w, b, activate)
}

/// Concatenates channel outputs along the feature axis.
pub fn gtn_ensemble(tape: &mut Tape, channels: &[Var]) -> Result<Var> {
    if channels.len() == 1 {
        return Ok(channels[0]);
    }
    tape.hstack(channels)
}
