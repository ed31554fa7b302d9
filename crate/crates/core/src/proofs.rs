//! Numeric checks of the expressivity constructions.
//!
//! The forward direction builds relation-weighted GCN stacks that are meant to
//! reproduce meta-path GTN layers and measures how far apart the outputs are.
//! The reverse direction evaluates two witnesses that a two-layer
//! relation-weighted GCN computes maps no GTN can. Everything runs through the
//! same layer code the models use.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseMatrix, SparseCsr, Tape};
use crate::error::{Error, Result};
use crate::layers::{gtn_composite_adjacency, gtn_layer, regcn_layer, Propagation};
use crate::relemb::{AdjacencyPattern, Normalization, SelfLoopMode, WeightedAdjacency};

/// Bounds of a dense layer: squared 2-norm for inputs and weight columns,
/// max-abs for the bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub k_in: f64,
    pub k_w: f64,
    pub k_b: f64,
}

impl BoundSpec {
    pub fn of_layer(k_in: f64, w: &DenseMatrix, b: &[f64]) -> Self {
        Self {
            k_in,
            k_w: w.max_col_sq_norm(),
            k_b: b.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    /// The bound of the layer, `max(k_in, k_w, k_b)`.
    pub fn k(&self) -> f64 {
        self.k_in.max(self.k_w).max(self.k_b)
    }
}

/// One side condition of a construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
        }
    }

    fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            passed: value < limit,
        }
    }

    fn above(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            passed: value > limit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub construction: String,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub checks: Vec<Check>,
    /// The request was degenerate and nothing was tested.
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub passed: bool,
}

impl EquivalenceReport {
    fn new(construction: impl Into<String>, deviation: f64, tolerance: f64, checks: Vec<Check>) -> Self {
        let passed = deviation < tolerance && checks.iter().all(|c| c.passed);
        Self {
            construction: construction.into(),
            max_abs_deviation: deviation,
            tolerance,
            checks,
            skipped: false,
            note: None,
            passed,
        }
    }

    fn skipped(construction: impl Into<String>, note: impl Into<String>) -> Self {
        Self {
            construction: construction.into(),
            max_abs_deviation: 0.0,
            tolerance: 0.0,
            checks: Vec::new(),
            skipped: true,
            note: Some(note.into()),
            passed: false,
        }
    }

    /// A failure that should turn verification red; skips are not failures.
    pub fn failed(&self) -> bool {
        !self.passed && !self.skipped
    }

    /// Folds many runs of one construction into a single report.
    pub fn merge(construction: impl Into<String>, runs: &[EquivalenceReport]) -> Self {
        let live: Vec<&EquivalenceReport> = runs.iter().filter(|r| !r.skipped).collect();
        let deviation = live.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max);
        let tolerance = live.iter().map(|r| r.tolerance).fold(f64::INFINITY, f64::min);
        let mut checks: Vec<Check> = Vec::new();
        for c in live.iter().flat_map(|r| &r.checks) {
            match checks.iter_mut().find(|m| m.name == c.name) {
                // keep the worst instance of every named check
                Some(m) if m.passed && !c.passed => *m = c.clone(),
                Some(_) => {}
                None => checks.push(c.clone()),
            }
        }
        let passed = !live.is_empty() && live.iter().all(|r| r.passed);
        Self {
            construction: construction.into(),
            max_abs_deviation: deviation,
            tolerance: if tolerance.is_finite() { tolerance } else { 0.0 },
            checks,
            skipped: live.is_empty(),
            note: Some(format!(
                "{} of {} runs passed",
                live.iter().filter(|r| r.passed).count(),
                live.len()
            )),
            passed,
        }
    }
}

fn broadcast(rows: usize, b: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(rows, b.len(), |_, j| b[j])
}

fn relu(m: &DenseMatrix) -> DenseMatrix {
    m.map(|v| v.max(0.0))
}

fn check_rows_bounded(x: &DenseMatrix, k: f64, what: &str) -> Result<()> {
    for i in 0..x.rows() {
        let sq: f64 = x.row(i).iter().map(|v| v * v).sum();
        if !(sq < k) {
            return Err(Error::Bound(format!("{what} row {i} has squared norm {sq}, bound is {k}")));
        }
    }
    Ok(())
}

/// Splits `h -> relu(hW + b)` into `relu(relu(hW + b1) I + (b - b1))` with
/// `b1 = (k + k_w) / 2` per coordinate, which keeps the inner
/// pre-activations positive for every input within the bound.
pub fn mlp_split_equivalence(w: &DenseMatrix, b: &[f64], k_in: f64, samples: &DenseMatrix) -> Result<EquivalenceReport> {
    if b.len() != w.cols() || samples.cols() != w.rows() {
        return Err(Error::Shape {
            op: "mlp_split_equivalence",
            detail: format!("W {:?}, b {}, samples {:?}", w.shape(), b.len(), samples.shape()),
        });
    }
    check_rows_bounded(samples, k_in, "sample")?;
    let spec = BoundSpec::of_layer(k_in, w, b);
    let k = spec.k();
    let shift = (k + spec.k_w) / 2.0;
    let b1 = vec![shift; b.len()];
    let b2: Vec<f64> = b.iter().map(|v| v - shift).collect();

    let n = samples.rows();
    let hw = samples.matmul(w)?;
    let direct = relu(&hw.add(&broadcast(n, b))?);
    let inner = hw.add(&broadcast(n, &b1))?;
    let composed = relu(&relu(&inner).matmul(&DenseMatrix::identity(b.len()))?.add(&broadcast(n, &b2))?);

    let outer_bound = 1f64.max(2.0 * k);
    let min_pre = inner.data().iter().copied().fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::above("inner pre-activations positive", min_pre, 0.0),
        Check::at_most("first layer bias within k", shift, k),
        Check::at_most("second layer columns within max(1, 2k)", 1.0, outer_bound),
        Check::at_most(
            "second layer bias within max(1, 2k)",
            b2.iter().fold(0.0, |m, v| m.max(v.abs())),
            outer_bound,
        ),
    ];
    Ok(EquivalenceReport::new(
        "two dense layers reproduce one",
        composed.max_abs_diff(&direct),
        1e-10,
        checks,
    ))
}

/// `||sum_i p_i h_i||^2 < k` for rows `h_i` bounded by `k` and convex `p`.
pub fn convex_combination_bound(h: &DenseMatrix, p: &[f64], k: f64) -> Result<Check> {
    if p.len() != h.rows() {
        return Err(Error::Shape {
            op: "convex_combination_bound",
            detail: format!("{} weights for {} vectors", p.len(), h.rows()),
        });
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("weights are not convex (sum {total})")));
    }
    check_rows_bounded(h, k, "vector")?;
    let o = DenseMatrix::row_vector(p.to_vec()).matmul(h)?;
    let sq: f64 = o.data().iter().map(|v| v * v).sum();
    Ok(Check::below("convex combination within k", sq, k))
}

fn ball_sample(dim: usize, k: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    // squared radius uniform in [0, k)
    let radius = (k * rng.random::<f64>()).sqrt();
    dir.iter().map(|v| v / norm * radius).collect()
}

fn convex_weights(count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..count).map(|_| rng.random::<f64>() + 1e-12).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // push the rounding error into the largest weight so the sum is 1 to the ulp
    let drift = 1.0 - p.iter().sum::<f64>();
    let top = (0..count).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    p[top] += drift;
    p
}

/// Random convex combinations of random bounded vectors; the value is the
/// number of combinations that left the bound.
pub fn convex_combination_trials(draws: usize, vectors: usize, dim: usize, k: f64, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    for _ in 0..draws {
        let rows: Vec<Vec<f64>> = (0..vectors).map(|_| ball_sample(dim, k, &mut rng)).collect();
        let h = DenseMatrix::from_rows(&rows)?;
        let p = convex_weights(vectors, &mut rng);
        if !convex_combination_bound(&h, &p, k)?.passed {
            violations += 1;
        }
    }
    Ok(Check::at_most("convex combinations leaving the bound", violations as f64, 0.0))
}

/// `max |A B - B|` for row-stochastic `A` and `B` broadcasting `row`.
pub fn row_stochastic_absorption(a: &SparseCsr, row: &[f64]) -> Result<f64> {
    for (u, s) in a.row_sums().iter().enumerate() {
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("row {u} sums to {s}, not 1")));
        }
    }
    if a.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("matrix has negative entries".into()));
    }
    let b = broadcast(a.cols(), row);
    Ok(a.spmm(&b)?.max_abs_diff(&b))
}

/// One GTN layer with fixed relation mixtures, one per meta-path step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtnLayerSpec {
    pub mixtures: Vec<Vec<f64>>,
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

/// A relation-weighted GCN layer with plain `+I` self-loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructedLayer {
    pub alpha: Vec<f64>,
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

fn validate_gtn(relations: &[SparseCsr], layers: &[GtnLayerSpec]) -> Result<usize> {
    let length = layers
        .first()
        .map(|l| l.mixtures.len())
        .ok_or_else(|| Error::InvalidArgument("at least one GTN layer is required".into()))?;
    if length == 0 {
        return Err(Error::InvalidArgument("meta-path length must be at least 1".into()));
    }
    for (k, layer) in layers.iter().enumerate() {
        if layer.mixtures.len() != length {
            return Err(Error::InvalidArgument(format!(
                "layer {k} has {} steps, expected {length}",
                layer.mixtures.len()
            )));
        }
        for m in &layer.mixtures {
            if m.len() != relations.len() {
                return Err(Error::Shape {
                    op: "gtn mixture",
                    detail: format!("{} weights for {} relations", m.len(), relations.len()),
                });
            }
            if let Some(v) = m.iter().find(|&&v| v < 0.0) {
                return Err(Error::Domain(format!("negative mixture weight {v} in layer {k}")));
            }
        }
        if layer.b.len() != layer.w.cols() {
            return Err(Error::Shape {
                op: "gtn layer",
                detail: format!("W {:?} with bias of {}", layer.w.shape(), layer.b.len()),
            });
        }
    }
    Ok(length)
}

/// Output of the GTN stack, ReLU after every layer.
pub fn gtn_stack_output(relations: &[SparseCsr], layers: &[GtnLayerSpec], x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let mut h = tape.leaf(x.clone());
    for layer in layers {
        let a_p = gtn_composite_adjacency(relations, &layer.mixtures)?;
        let w = tape.leaf(layer.w.clone());
        let b = tape.leaf(DenseMatrix::row_vector(layer.b.clone()));
        h = gtn_layer(&mut tape, &a_p, h, w, b, true)?;
    }
    Ok(tape.value(h).clone())
}

/// Pre-activation of one relation-weighted GCN layer, row-normalised.
fn regcn_preactivation(
    pattern: &Arc<AdjacencyPattern>,
    alpha: &[f64],
    beta: &[f64],
    self_loops: SelfLoopMode,
    h: &DenseMatrix,
    w: &DenseMatrix,
    b: &[f64],
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let prop = Propagation::Relational {
        pattern: pattern.clone(),
        alpha: tape.leaf(DenseMatrix::row_vector(alpha.to_vec())),
        beta: tape.leaf(DenseMatrix::row_vector(beta.to_vec())),
        self_loops,
        norm: Normalization::Row,
    };
    let hv = tape.leaf(h.clone());
    let wv = tape.leaf(w.clone());
    let bv = tape.leaf(DenseMatrix::row_vector(b.to_vec()));
    let z = regcn_layer(&mut tape, &prop, hv, wv, bv, false)?;
    Ok(tape.value(z).clone())
}

/// Replaces each GTN layer of meta-path length `L` by `L` relation-weighted
/// GCN layers: the first carries `W` and a positive shift, the middle ones
/// are identities, the last removes the shift and adds the GTN bias. Layer
/// `j` of a block weights relations with the mixture of step `L - j`, so the
/// product of propagation matrices has the GTN's factor order.
pub struct StackRun {
    pub layers: Vec<ConstructedLayer>,
    pub output: DenseMatrix,
    pub checks: Vec<Check>,
}

pub fn construct_regcn_stack(
    relations: &[SparseCsr],
    gtn: &[GtnLayerSpec],
    x: &DenseMatrix,
    xi: f64,
) -> Result<StackRun> {
    let length = validate_gtn(relations, gtn)?;
    check_rows_bounded(x, xi, "feature")?;
    let n = x.rows();
    let pattern = Arc::new(AdjacencyPattern::new(relations, vec![0; n], 1)?);
    let ones = [1.0];
    let mut layers = Vec::new();
    let mut checks = Vec::new();
    let mut h = x.clone();
    for (k, layer) in gtn.iter().enumerate() {
        let k_in = if k == 0 {
            xi
        } else {
            // strict bound just above the largest observed row
            h.max_row_sq_norm() * (1.0 + 1e-9) + f64::MIN_POSITIVE
        };
        let spec = BoundSpec::of_layer(k_in, &layer.w, &layer.b);
        let bound = spec.k();
        let shift = (bound + spec.k_w) / 2.0;
        let d = layer.w.cols();
        let mut min_inner = f64::INFINITY;
        for j in 0..length {
            let alpha = layer.mixtures[length - 1 - j].clone();
            let (w, b) = match (j == 0, j == length - 1) {
                (true, true) => (layer.w.clone(), layer.b.clone()),
                (true, false) => (layer.w.clone(), vec![shift; d]),
                (false, false) => (DenseMatrix::identity(d), vec![0.0; d]),
                (false, true) => (DenseMatrix::identity(d), layer.b.iter().map(|v| v - shift).collect()),
            };
            let pre = regcn_preactivation(&pattern, &alpha, &ones, SelfLoopMode::Identity, &h, &w, &b)?;
            if j + 1 < length {
                min_inner = min_inner.min(pre.data().iter().copied().fold(f64::INFINITY, f64::min));
            }
            h = relu(&pre);
            layers.push(ConstructedLayer { alpha, w, b });
        }
        if length > 1 {
            let outer = 1f64.max(2.0 * bound);
            let last_bias = layer.b.iter().fold(0.0_f64, |m, v| m.max((v - shift).abs()));
            checks.push(Check::above(format!("block {k} inner pre-activations positive"), min_inner, 0.0));
            checks.push(Check::at_most(format!("block {k} first layer bias within k"), shift, bound));
            checks.push(Check::at_most(format!("block {k} last layer columns within max(1, 2k)"), 1.0, outer));
            checks.push(Check::at_most(format!("block {k} last layer bias within max(1, 2k)"), last_bias, outer));
        }
    }
    Ok(StackRun {
        layers,
        output: h,
        checks,
    })
}

fn check_gtn_bound(layer: &GtnLayerSpec, xi: f64) -> Result<()> {
    let spec = BoundSpec::of_layer(xi, &layer.w, &layer.b);
    if spec.k_w > xi || spec.k_b > xi {
        return Err(Error::Bound(format!(
            "GTN layer exceeds its bound {xi}: k_w = {}, k_b = {}",
            spec.k_w, spec.k_b
        )));
    }
    Ok(())
}

/// Two relation-weighted GCN layers built to reproduce one GTN layer of
/// meta-path length 2. Besides the output deviation the report carries
/// the two identities the construction leans on: a row-stochastic matrix
/// leaves a row-constant matrix unchanged, and the degree matrix of
/// `A1 A0` factors into the per-layer degree matrices.
pub fn two_step_gtn_equivalence(
    relations: &[SparseCsr],
    layer: &GtnLayerSpec,
    x: &DenseMatrix,
    xi: f64,
) -> Result<EquivalenceReport> {
    if layer.mixtures.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected a meta-path of length 2, got {}",
            layer.mixtures.len()
        )));
    }
    check_gtn_bound(layer, xi)?;
    let gtn = std::slice::from_ref(layer);
    let run = construct_regcn_stack(relations, gtn, x, xi)?;
    let target = gtn_stack_output(relations, gtn, x)?;

    let n = x.rows();
    let pattern = AdjacencyPattern::new(relations, vec![0; n], 1)?;
    let build = |alpha: &[f64]| WeightedAdjacency::build(&pattern, alpha, &[1.0], SelfLoopMode::Identity, Normalization::Row);
    let first = build(&run.layers[0].alpha)?;
    let second = build(&run.layers[1].alpha)?;
    let product = second.raw.matmul(&first.raw)?;
    let factor_gap = product
        .row_sums()
        .iter()
        .zip(first.degrees.iter().zip(&second.degrees))
        .map(|(d, (d0, d1))| (d - d0 * d1).abs())
        .fold(0.0, f64::max);
    let absorption = row_stochastic_absorption(&second.normalized, &run.layers[0].b)?;

    let mut checks = run.checks;
    checks.push(Check::at_most("row-stochastic absorption of the shift", absorption, 1e-12));
    checks.push(Check::at_most("degree of the product factors per layer", factor_gap, 1e-12));
    Ok(EquivalenceReport::new(
        "two relation-weighted GCN layers reproduce a length-2 GTN layer",
        run.output.max_abs_diff(&target),
        1e-8,
        checks,
    ))
}

/// A `K`-layer, length-`L` GTN against the `K * L`-layer stack of
/// [`construct_regcn_stack`].
pub fn gtn_stack_equivalence(
    relations: &[SparseCsr],
    layers: &[GtnLayerSpec],
    x: &DenseMatrix,
    xi: f64,
) -> Result<EquivalenceReport> {
    if let Some(first) = layers.first() {
        check_gtn_bound(first, xi)?;
    }
    let run = construct_regcn_stack(relations, layers, x, xi)?;
    let target = gtn_stack_output(relations, layers, x)?;
    let (k, l) = (layers.len(), layers[0].mixtures.len());
    Ok(EquivalenceReport::new(
        format!("{}-layer relation-weighted GCN reproduces a {k}-layer length-{l} GTN", k * l),
        run.output.max_abs_diff(&target),
        1e-7,
        run.checks,
    ))
}

/// Determinant by Gaussian elimination with partial pivoting. A column with
/// no nonzero pivot gives exactly 0.
pub fn determinant(m: &DenseMatrix) -> Result<f64> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape {
            op: "determinant",
            detail: format!("matrix is {:?}", m.shape()),
        });
    }
    let mut a = m.clone();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| a.get(x, c).abs().total_cmp(&a.get(y, c).abs()))
            .expect("non-empty range");
        let pivot = a.get(p, c);
        if pivot == 0.0 {
            return Ok(0.0);
        }
        if p != c {
            for j in 0..n {
                let (x, y) = (a.get(c, j), a.get(p, j));
                a.set(c, j, y);
                a.set(p, j, x);
            }
            det = -det;
        }
        det *= pivot;
        for r in c + 1..n {
            let f = a.get(r, c) / pivot;
            if f != 0.0 {
                for j in c..n {
                    a.set(r, j, a.get(r, j) - f * a.get(c, j));
                }
            }
        }
    }
    Ok(det)
}

fn matrix_power(m: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::identity(m.rows());
    for _ in 0..k {
        out = out.matmul(m)?;
    }
    Ok(out)
}

/// No single `A_P` has `A_P^k1 = a0` and `A_P^k2 = a1` when exactly one of
/// the two is singular, since `det(A^k) = det(A)^k`.
pub fn singularity_witness(a0: &DenseMatrix, a1: &DenseMatrix, k1: usize, k2: usize) -> Result<EquivalenceReport> {
    const NAME: &str = "per-layer adjacencies no shared meta-path power can produce";
    if k1 == 0 || k2 == 0 {
        return Err(Error::InvalidArgument("powers must be positive".into()));
    }
    if k1 == k2 && a0 == a1 {
        return Ok(EquivalenceReport::skipped(NAME, "equal powers of equal matrices separate nothing"));
    }
    let (d0, d1) = (determinant(a0)?, determinant(a1)?);
    if (d0 == 0.0) == (d1 == 0.0) {
        return Ok(EquivalenceReport::skipped(
            NAME,
            format!("determinants {d0} and {d1} are both zero or both nonzero"),
        ));
    }
    let (regular, singular, k_regular) = if d0 != 0.0 { (a0, d1, k1) } else { (a1, d0, k2) };
    let d_reg = determinant(regular)?;
    let d_pow = determinant(&matrix_power(regular, k_regular)?)?;
    let power_gap = (d_pow - d_reg.powi(k_regular as i32)).abs() / d_reg.abs().powi(k_regular as i32);
    let checks = vec![
        Check::above("nonsingular side has nonzero determinant", d_reg.abs(), 0.0),
        Check::at_most("power of the nonsingular side stays nonsingular", power_gap, 1e-12),
    ];
    Ok(EquivalenceReport::new(NAME, singular.abs(), f64::MIN_POSITIVE, checks))
}

fn least_squares_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope, (sy - slope * sx) / n)
}

/// On a single node with a self-loop the propagation is 1 and two layers
/// act as a two-layer MLP. The constructed pair computes
/// `max(x, 0) - max(-x, 0) + max(x - 1, 0)`, which no affine map matches.
pub fn nonlinearity_witness() -> Result<EquivalenceReport> {
    let xs: [f64; 3] = [-1.0, 0.5, 2.0];
    let target: Vec<f64> = xs.iter().map(|&x| x.max(0.0) - (-x).max(0.0) + (x - 1.0).max(0.0)).collect();

    let loop_rel = SparseCsr::identity(1);
    let pattern = Arc::new(AdjacencyPattern::new(std::slice::from_ref(&loop_rel), vec![0], 1)?);
    let w1 = DenseMatrix::from_rows(&[vec![1.0, -1.0, 1.0]])?;
    let b1 = [0.0, 0.0, -1.0];
    let w2 = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0]])?;
    let b2 = [0.0];
    let mut built = Vec::with_capacity(xs.len());
    for &x in &xs {
        let h = DenseMatrix::scalar(x);
        let hidden = relu(&regcn_preactivation(&pattern, &[1.0], &[1.0], SelfLoopMode::Embedded, &h, &w1, &b1)?);
        let out = regcn_preactivation(&pattern, &[1.0], &[1.0], SelfLoopMode::Embedded, &hidden, &w2, &b2)?;
        built.push(out.get(0, 0));
    }
    let residual = |pred: &[f64]| pred.iter().zip(&target).map(|(p, t)| (p - t).powi(2)).sum::<f64>().sqrt();
    let constructed = residual(&built);
    let (slope, intercept) = least_squares_line(&xs, &target);
    let linear: Vec<f64> = xs.iter().map(|x| slope * x + intercept).collect();
    let linear_res = residual(&linear);
    let checks = vec![Check::above(
        "best affine fit residual exceeds 10x the construction's",
        linear_res,
        10.0 * constructed,
    )];
    Ok(EquivalenceReport::new(
        "two layers on one node compute a map no single layer can",
        constructed,
        1e-6,
        checks,
    ))
}

/// The adjacency pair used by [`separation_witnesses`]: three nodes of two
/// types, one relation between nodes 0 and 1. The first layer zeroes the
/// relation weight, leaving the identity; the second weights the relation
/// and zeroes the self-loop of node 2's type, leaving node 2 a zero row.
pub fn witness_adjacencies() -> Result<(DenseMatrix, DenseMatrix)> {
    let rel = SparseCsr::from_triplets(3, 3, &[(0, 1, 1.0), (1, 0, 1.0)])?;
    let pattern = AdjacencyPattern::new(std::slice::from_ref(&rel), vec![0, 0, 1], 2)?;
    let a0 = pattern.assemble(&[0.0], &[1.0, 1.0], SelfLoopMode::Embedded)?;
    let a1 = pattern.assemble(&[1.0], &[1.0, 0.0], SelfLoopMode::Embedded)?;
    Ok((a0.to_dense(), a1.to_dense()))
}

/// Both witnesses that some two-layer relation-weighted GCN has no GTN
/// equivalent.
pub fn separation_witnesses() -> Result<[EquivalenceReport; 2]> {
    let (a0, a1) = witness_adjacencies()?;
    Ok([nonlinearity_witness()?, singularity_witness(&a0, &a1, 1, 1)?])
}

/// Random relations, GTN layers within bound `xi` and features within `xi`.
#[derive(Clone, Debug)]
pub struct ProofInstance {
    pub relations: Vec<SparseCsr>,
    pub layers: Vec<GtnLayerSpec>,
    pub x: DenseMatrix,
    pub xi: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct InstanceShape {
    pub nodes: usize,
    pub relations: usize,
    pub length: usize,
    pub depth: usize,
    pub dim: usize,
    pub density: f64,
    pub xi: f64,
}

fn bounded_weight(dim: usize, xi: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut w = DenseMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    for j in 0..dim {
        let norm: f64 = (0..dim).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt();
        let target = (0.9 * xi * rng.random::<f64>()).sqrt();
        for i in 0..dim {
            w.set(i, j, w.get(i, j) / norm.max(f64::MIN_POSITIVE) * target);
        }
    }
    w
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn random_instance(shape: InstanceShape, rng: &mut ChaCha8Rng) -> Result<ProofInstance> {
    let n = shape.nodes;
    let relations = (0..shape.relations)
        .map(|_| {
            let mut t = Vec::new();
            for u in 0..n {
                for v in 0..n {
                    if u != v && rng.random::<f64>() < shape.density {
                        t.push((u, v, 1.0));
                    }
                }
            }
            SparseCsr::from_triplets(n, n, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = (0..shape.depth)
        .map(|_| GtnLayerSpec {
            mixtures: (0..shape.length)
                .map(|_| {
                    let s: Vec<f64> = (0..shape.relations).map(|_| StandardNormal.sample(rng)).collect();
                    softmax(&s)
                })
                .collect(),
            w: bounded_weight(shape.dim, shape.xi, rng),
            b: (0..shape.dim).map(|_| rng.random_range(-0.9..0.9) * shape.xi).collect(),
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| ball_sample(shape.dim, shape.xi * 0.999, rng))
        .collect();
    Ok(ProofInstance {
        relations,
        layers,
        x: DenseMatrix::from_rows(&rows)?,
        xi: shape.xi,
    })
}

/// The construction and witness checks run by `verify`, each family
/// folded into one report.
pub fn standard_suite(seed: u64) -> Result<Vec<EquivalenceReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut split_runs = Vec::new();
    for _ in 0..100 {
        let (din, dout) = (rng.random_range(1..6), rng.random_range(1..6));
        let w = DenseMatrix::from_fn(din, dout, |_, _| rng.random_range(-1.0..1.0));
        let w = w.scale((0.99 / w.max_col_sq_norm().max(1.0)).sqrt());
        let b: Vec<f64> = (0..dout).map(|_| rng.random_range(-0.99..0.99)).collect();
        let samples: Vec<Vec<f64>> = (0..100).map(|_| ball_sample(din, 1.0, &mut rng)).collect();
        split_runs.push(mlp_split_equivalence(&w, &b, 1.0, &DenseMatrix::from_rows(&samples)?)?);
    }
    out.push(EquivalenceReport::merge("two dense layers reproduce one (100 random layers)", &split_runs));

    let convex = convex_combination_trials(10_000, 5, 4, 1.0, rng.random())?;
    out.push(EquivalenceReport::new(
        "convex combinations keep the bound (10000 draws)",
        0.0,
        f64::MIN_POSITIVE,
        vec![convex],
    ));

    let shape = InstanceShape {
        nodes: 8,
        relations: 3,
        length: 2,
        depth: 1,
        dim: 4,
        density: 0.3,
        xi: 1.0,
    };
    let mut two_step = Vec::new();
    for _ in 0..20 {
        let inst = random_instance(shape, &mut rng)?;
        two_step.push(two_step_gtn_equivalence(&inst.relations, &inst.layers[0], &inst.x, inst.xi)?);
    }
    out.push(EquivalenceReport::merge("length-2 GTN layer via two layers (20 random 8-node graphs)", &two_step));

    let mut stacks = Vec::new();
    for _ in 0..5 {
        let inst = random_instance(
            InstanceShape {
                nodes: 6,
                depth: 2,
                ..shape
            },
            &mut rng,
        )?;
        stacks.push(gtn_stack_equivalence(&inst.relations, &inst.layers, &inst.x, inst.xi)?);
    }
    out.push(EquivalenceReport::merge("2-layer length-2 GTN via four layers (5 random 6-node graphs)", &stacks));

    out.extend(separation_witnesses()?);
    Ok(out)
}
