//! Relation and self-loop embeddings and the weighted adjacency they induce.
//!
//! Layer `l` owns one scalar `e_r` per relation and one scalar `s_t` per
//! node type. With `alpha = lambda * e` and `beta = lambda * s`, the layer
//! aggregates over
//!
//! ```text
//! A_hat[u, v] = sum_{r : (u, v) in r} tau(alpha_r) + [u == v] tau(beta_type(u))
//! ```
//!
//! where `tau` is LeakyReLU. Gradients reach `alpha` and `beta` through both
//! the entries and the degree normalisation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, DenseMatrix, SparseCsr, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::hgraph::HeteroGraph;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Degrees at or below this are clamped before division.
pub const DEGREE_EPS: f64 = 1e-12;

pub fn tau(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn tau_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Per-layer `e` (relations) and `s` (node types) with the shared factor `lambda`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationEmbeddings {
    lambda: f64,
    relations: Vec<Vec<f64>>,
    self_loops: Vec<Vec<f64>>,
}

impl RelationEmbeddings {
    /// Every `e` and `s` starts at `1 / lambda`, so `alpha = beta = 1`.
    pub fn init(lambda: f64, num_relations: usize, num_types: usize, num_layers: usize) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            relations: vec![vec![1.0 / lambda; num_relations]; num_layers],
            self_loops: vec![vec![1.0 / lambda; num_types]; num_layers],
        })
    }

    pub fn from_parts(lambda: f64, relations: Vec<Vec<f64>>, self_loops: Vec<Vec<f64>>) -> Result<Self> {
        check_lambda(lambda)?;
        if relations.len() != self_loops.len() {
            return Err(Error::InvalidArgument("relation and self-loop layer counts differ".into()));
        }
        Ok(Self {
            lambda,
            relations,
            self_loops,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_layers(&self) -> usize {
        self.relations.len()
    }

    pub fn e(&self, layer: usize) -> &[f64] {
        &self.relations[layer]
    }

    pub fn s(&self, layer: usize) -> &[f64] {
        &self.self_loops[layer]
    }

    pub fn e_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.relations[layer]
    }

    pub fn s_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.self_loops[layer]
    }

    pub fn alpha(&self, layer: usize) -> Vec<f64> {
        self.relations[layer].iter().map(|e| self.lambda * e).collect()
    }

    pub fn beta(&self, layer: usize) -> Vec<f64> {
        self.self_loops[layer].iter().map(|s| self.lambda * s).collect()
    }

    /// Number of scalars added per layer.
    pub fn per_layer_count(&self) -> usize {
        self.relations.first().map_or(0, Vec::len) + self.self_loops.first().map_or(0, Vec::len)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")))
    }
}

/// How the diagonal of `A_hat` is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfLoopMode {
    /// `tau(beta_type(u))` per node type.
    Embedded,
    /// A fixed weight of 1 on every node.
    Identity,
    /// No self-loops.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `D^-1 A`.
    Row,
    /// `D^-1/2 A D^-1/2`; all entries must be non-negative.
    Symmetric,
    /// `A` as is.
    None,
}

/// Union sparsity pattern of all relations plus the diagonal, with the
/// relation ids that contribute to every stored position.
#[derive(Clone, Debug)]
pub struct AdjacencyPattern {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    contributions: Vec<(usize, usize)>,
    diag: Vec<usize>,
    node_types: Vec<usize>,
    num_relations: usize,
    num_types: usize,
}

impl AdjacencyPattern {
    pub fn new(relations: &[SparseCsr], node_types: Vec<usize>, num_types: usize) -> Result<Self> {
        let n = node_types.len();
        if let Some(t) = node_types.iter().find(|&&t| t >= num_types) {
            return Err(Error::InvalidArgument(format!("node type {t} >= {num_types}")));
        }
        for a in relations {
            if a.rows() != n || a.cols() != n {
                return shape_err("AdjacencyPattern::new", format!("relation is {}x{}, want {n}x{n}", a.rows(), a.cols()));
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        let mut row_cols = Vec::new();
        for u in 0..n {
            row_cols.clear();
            row_cols.push(u);
            for a in relations {
                row_cols.extend_from_slice(a.row(u).0);
            }
            row_cols.sort_unstable();
            row_cols.dedup();
            indices.extend_from_slice(&row_cols);
            indptr.push(indices.len());
        }
        let position = |u: usize, v: usize| -> usize {
            let row = &indices[indptr[u]..indptr[u + 1]];
            indptr[u] + row.binary_search(&v).expect("column present in union pattern")
        };
        let mut contributions = Vec::new();
        for (r, a) in relations.iter().enumerate() {
            for u in 0..n {
                for &v in a.row(u).0 {
                    contributions.push((position(u, v), r));
                }
            }
        }
        let diag = (0..n).map(|u| position(u, u)).collect();
        Ok(Self {
            n,
            indptr,
            indices,
            contributions,
            diag,
            node_types,
            num_relations: relations.len(),
            num_types,
        })
    }

    pub fn from_graph(g: &HeteroGraph) -> Result<Self> {
        let s = g.relation_structures();
        Self::new(&s.adjacency, g.node_type_ids(), g.num_types())
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// `(position, relation)` for every relation edge.
    pub fn contributions(&self) -> &[(usize, usize)] {
        &self.contributions
    }

    /// Position of `(u, u)` in the value array.
    pub fn diagonal_position(&self, u: usize) -> usize {
        self.diag[u]
    }

    fn check(&self, alpha: &[f64], beta: &[f64]) -> Result<()> {
        if alpha.len() != self.num_relations || beta.len() != self.num_types {
            return shape_err(
                "adjacency",
                format!(
                    "{} relation and {} self-loop weights for {} relations and {} types",
                    alpha.len(),
                    beta.len(),
                    self.num_relations,
                    self.num_types
                ),
            );
        }
        Ok(())
    }

    /// `A_hat` values over the pattern.
    pub fn assemble(&self, alpha: &[f64], beta: &[f64], self_loops: SelfLoopMode) -> Result<SparseCsr> {
        self.check(alpha, beta)?;
        let mut values = vec![0.0; self.nnz()];
        for &(p, r) in &self.contributions {
            values[p] += tau(alpha[r]);
        }
        for u in 0..self.n {
            values[self.diag[u]] += match self_loops {
                SelfLoopMode::Embedded => tau(beta[self.node_types[u]]),
                SelfLoopMode::Identity => 1.0,
                SelfLoopMode::None => 0.0,
            };
        }
        SparseCsr::new(self.n, self.n, self.indptr.clone(), self.indices.clone(), values)
    }

    /// Maps per-position adjoints of `A_hat` to adjoints of `alpha` and `beta`.
    fn route(
        &self,
        entry_grads: &[f64],
        alpha: &[f64],
        beta: &[f64],
        self_loops: SelfLoopMode,
    ) -> (DenseMatrix, DenseMatrix) {
        let mut da = vec![0.0; self.num_relations];
        for &(p, r) in &self.contributions {
            da[r] += entry_grads[p];
        }
        for (g, a) in da.iter_mut().zip(alpha) {
            *g *= tau_grad(*a);
        }
        let mut db = vec![0.0; self.num_types];
        if self_loops == SelfLoopMode::Embedded {
            for u in 0..self.n {
                db[self.node_types[u]] += entry_grads[self.diag[u]];
            }
            for (g, b) in db.iter_mut().zip(beta) {
                *g *= tau_grad(*b);
            }
        }
        (DenseMatrix::row_vector(da), DenseMatrix::row_vector(db))
    }
}

/// `A_hat`, its normalised form and the raw row sums.
#[derive(Clone, Debug)]
pub struct WeightedAdjacency {
    pub raw: SparseCsr,
    pub normalized: SparseCsr,
    pub degrees: Vec<f64>,
    pub mode: Normalization,
}

impl WeightedAdjacency {
    pub fn build(
        pattern: &AdjacencyPattern,
        alpha: &[f64],
        beta: &[f64],
        self_loops: SelfLoopMode,
        mode: Normalization,
    ) -> Result<Self> {
        let raw = pattern.assemble(alpha, beta, self_loops)?;
        normalize_adjacency(raw, mode)
    }
}

/// Normalises `raw`. Row mode divides by `max(degree, 1e-12)`; symmetric
/// mode leaves zero-degree rows and columns at zero.
pub fn normalize_adjacency(raw: SparseCsr, mode: Normalization) -> Result<WeightedAdjacency> {
    let degrees = raw.row_sums();
    let normalized = match mode {
        Normalization::None => raw.clone(),
        Normalization::Row => {
            let inv: Vec<f64> = degrees.iter().map(|d| 1.0 / d.max(DEGREE_EPS)).collect();
            raw.scale_rows(&inv)
        }
        Normalization::Symmetric => {
            for u in 0..raw.rows() {
                let (cols, vals) = raw.row(u);
                if let Some((c, v)) = cols.iter().zip(vals).find(|(_, v)| **v < 0.0) {
                    return Err(Error::Domain(format!(
                        "symmetric normalisation needs non-negative weights, entry ({u}, {c}) is {v}"
                    )));
                }
            }
            let inv = inv_sqrt(&degrees);
            let mut values = raw.values().to_vec();
            for u in 0..raw.rows() {
                for p in raw.indptr()[u]..raw.indptr()[u + 1] {
                    values[p] *= inv[u] * inv[raw.indices()[p]];
                }
            }
            raw.with_values(values)?
        }
    };
    Ok(WeightedAdjacency {
        raw,
        normalized,
        degrees,
        mode,
    })
}

fn inv_sqrt(degrees: &[f64]) -> Vec<f64> {
    degrees
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect()
}

struct Aggregate {
    pattern: Arc<AdjacencyPattern>,
    adj: Arc<WeightedAdjacency>,
    alpha: Var,
    beta: Var,
    h: Var,
    self_loops: SelfLoopMode,
}

impl Aggregate {
    /// Adjoint of every stored entry of `A_hat`, through the normalisation.
    fn entry_grads(&self, g: &DenseMatrix, h: &DenseMatrix, y: &DenseMatrix) -> Vec<f64> {
        let a = &self.adj;
        let (indptr, indices) = (a.raw.indptr(), a.raw.indices());
        let n = a.raw.rows();
        let dot = crate::autodiff::dot;
        let mut out = vec![0.0; a.raw.nnz()];
        match a.mode {
            Normalization::None => {
                for u in 0..n {
                    for p in indptr[u]..indptr[u + 1] {
                        out[p] = dot(g.row(u), h.row(indices[p]));
                    }
                }
            }
            Normalization::Row => {
                for u in 0..n {
                    let d = a.degrees[u];
                    let gy = if d > DEGREE_EPS { dot(g.row(u), y.row(u)) } else { 0.0 };
                    let denom = d.max(DEGREE_EPS);
                    for p in indptr[u]..indptr[u + 1] {
                        out[p] = (dot(g.row(u), h.row(indices[p])) - gy) / denom;
                    }
                }
            }
            Normalization::Symmetric => {
                let inv = inv_sqrt(&a.degrees);
                let norm_vals = a.normalized.values();
                let mut s = vec![0.0; a.raw.nnz()];
                let mut mass = vec![0.0; n];
                for u in 0..n {
                    for p in indptr[u]..indptr[u + 1] {
                        let v = indices[p];
                        s[p] = dot(g.row(u), h.row(v));
                        let contrib = norm_vals[p] * s[p];
                        mass[u] += contrib;
                        mass[v] += contrib;
                    }
                }
                let dd: Vec<f64> = (0..n)
                    .map(|u| {
                        let d = a.degrees[u];
                        if d > 0.0 {
                            -mass[u] / (2.0 * d)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for u in 0..n {
                    for p in indptr[u]..indptr[u + 1] {
                        out[p] = s[p] * inv[u] * inv[indices[p]] + dd[u];
                    }
                }
            }
        }
        out
    }
}

impl CustomBackward for Aggregate {
    fn name(&self) -> &'static str {
        "relational_aggregate"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.alpha, self.beta, self.h]
    }

    fn backward(&self, tape: &Tape, output: Var, grad: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>> {
        let h = tape.value(self.h);
        let dh = self.adj.normalized.spmm_t(grad)?;
        let entry = self.entry_grads(grad, h, tape.value(output));
        let (da, db) = self.pattern.route(
            &entry,
            tape.value(self.alpha).data(),
            tape.value(self.beta).data(),
            self.self_loops,
        );
        Ok(vec![(self.h, dh), (self.alpha, da), (self.beta, db)])
    }
}

/// `A_tilde(alpha, beta) * H`, differentiable in `alpha` (`1 x |R|`),
/// `beta` (`1 x |F|`) and `H`. Also returns the adjacency that was used.
pub fn aggregate(
    tape: &mut Tape,
    pattern: &Arc<AdjacencyPattern>,
    alpha: Var,
    beta: Var,
    h: Var,
    self_loops: SelfLoopMode,
    mode: Normalization,
) -> Result<(Var, Arc<WeightedAdjacency>)> {
    if tape.shape(h).0 != pattern.num_nodes() {
        return shape_err(
            "aggregate",
            format!("{} feature rows for {} nodes", tape.shape(h).0, pattern.num_nodes()),
        );
    }
    let adj = Arc::new(WeightedAdjacency::build(
        pattern,
        tape.value(alpha).data(),
        tape.value(beta).data(),
        self_loops,
        mode,
    )?);
    let value = adj.normalized.spmm(tape.value(h))?;
    let rule = Aggregate {
        pattern: pattern.clone(),
        adj: adj.clone(),
        alpha,
        beta,
        h,
        self_loops,
    };
    Ok((tape.custom(value, Box::new(rule)), adj))
}

struct Degrees {
    pattern: Arc<AdjacencyPattern>,
    alpha: Var,
    beta: Var,
    clamped: Vec<bool>,
    self_loops: SelfLoopMode,
}

impl CustomBackward for Degrees {
    fn name(&self) -> &'static str {
        "relational_degrees"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.alpha, self.beta]
    }

    fn backward(&self, tape: &Tape, _output: Var, grad: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>> {
        let p = &self.pattern;
        let mut entry = vec![0.0; p.nnz()];
        for u in 0..p.n {
            if !self.clamped[u] {
                for e in &mut entry[p.indptr[u]..p.indptr[u + 1]] {
                    *e = grad.get(u, 0);
                }
            }
        }
        let (da, db) = p.route(
            &entry,
            tape.value(self.alpha).data(),
            tape.value(self.beta).data(),
            self.self_loops,
        );
        Ok(vec![(self.alpha, da), (self.beta, db)])
    }
}

/// Row sums of `A_hat` as an `N x 1` node, clamped below at `1e-12`.
pub fn degrees(
    tape: &mut Tape,
    pattern: &Arc<AdjacencyPattern>,
    alpha: Var,
    beta: Var,
    self_loops: SelfLoopMode,
) -> Result<Var> {
    let raw = pattern.assemble(tape.value(alpha).data(), tape.value(beta).data(), self_loops)?;
    let sums = raw.row_sums();
    let clamped: Vec<bool> = sums.iter().map(|d| *d <= DEGREE_EPS).collect();
    let value = DenseMatrix::from_vec(sums.len(), 1, sums.iter().map(|d| d.max(DEGREE_EPS)).collect())?;
    let rule = Degrees {
        pattern: pattern.clone(),
        alpha,
        beta,
        clamped,
        self_loops,
    };
    Ok(tape.custom(value, Box::new(rule)))
}

/// `D^-1 (sum_i A_i + I)` (or the symmetric form) of the homogenized graph,
/// the propagation matrix of a plain GCN.
pub fn homogeneous_gcn_adjacency(g: &HeteroGraph, mode: Normalization) -> Result<SparseCsr> {
    let n = g.num_nodes();
    let raw = g.homogenized_adjacency().add(&SparseCsr::identity(n))?;
    Ok(normalize_adjacency(raw, mode)?.normalized)
}
