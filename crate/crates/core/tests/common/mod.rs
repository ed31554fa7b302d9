//! Shared fixtures and dense reference implementations for the integration
//! tests. Everything here works on plain `Vec<Vec<f64>>` so that it shares
//! no code paths with the sparse kernels under test.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regnn::autodiff::DenseMatrix;
use regnn::hgraph::{HeteroGraph, NodeTypeInput, RelationInput, Splits, TargetInput};

pub type Dense = Vec<Vec<f64>>;

/// A small random graph together with the raw inputs it was built from.
pub struct Fixture {
    pub graph: HeteroGraph,
    pub counts: Vec<usize>,
    /// Feature matrix per type, one-hot rows where the type has none.
    pub features: Vec<Dense>,
    /// `(src type, dst type, (src local, dst local) edges)`.
    pub relations: Vec<(usize, usize, Vec<(usize, usize)>)>,
    pub labels: Vec<usize>,
}

impl Fixture {
    pub fn num_nodes(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn offset(&self, t: usize) -> usize {
        self.counts[..t].iter().sum()
    }

    /// Dense `N x N` adjacency of relation `r`; row = receiver.
    pub fn adjacency(&self, r: usize) -> Dense {
        let n = self.num_nodes();
        let (s, d, edges) = &self.relations[r];
        let mut a = vec![vec![0.0; n]; n];
        for &(u, v) in edges {
            a[self.offset(*d) + v][self.offset(*s) + u] = 1.0;
        }
        a
    }

    pub fn type_of(&self, node: usize) -> usize {
        let mut acc = 0;
        for (t, &c) in self.counts.iter().enumerate() {
            acc += c;
            if node < acc {
                return t;
            }
        }
        unreachable!("node {node} out of range")
    }
}

/// Between 2 and 3 node types and at most 20 nodes, `relations` relations
/// with distinct edge sets, 3 classes on type 0 and every target node in
/// the training split.
pub fn random_fixture(rng: &mut ChaCha8Rng, relations: usize) -> Fixture {
    let types = rng.random_range(2..=3);
    let counts: Vec<usize> = (0..types).map(|_| rng.random_range(2..=20 / types)).collect();
    let features: Vec<Dense> = counts
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            if t == 1 {
                (0..c).map(|i| (0..c).map(|j| (i == j) as u8 as f64).collect()).collect()
            } else {
                let d = rng.random_range(2..=4);
                (0..c).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
            }
        })
        .collect();
    let mut rels = Vec::new();
    while rels.len() < relations {
        let (s, d) = (rng.random_range(0..types), rng.random_range(0..types));
        let mut edges = Vec::new();
        for u in 0..counts[s] {
            for v in 0..counts[d] {
                if rng.random::<f64>() < 0.4 {
                    edges.push((u, v));
                }
            }
        }
        if !edges.is_empty() {
            rels.push((s, d, edges));
        }
    }
    let labels: Vec<usize> = (0..counts[0]).map(|_| rng.random_range(0..3)).collect();
    assemble(counts, features, rels, labels)
}

/// Builds the graph for raw inputs; type 1 is left featureless so the
/// graph generates its one-hot rows, which `features` must already hold.
pub fn assemble(
    counts: Vec<usize>,
    features: Vec<Dense>,
    relations: Vec<(usize, usize, Vec<(usize, usize)>)>,
    labels: Vec<usize>,
) -> Fixture {
    let type_inputs = counts
        .iter()
        .enumerate()
        .map(|(t, &c)| NodeTypeInput {
            name: format!("T{t}"),
            count: c,
            features: (t != 1).then(|| DenseMatrix::from_rows(&features[t]).unwrap()),
        })
        .collect();
    let rel_inputs = relations
        .iter()
        .enumerate()
        .map(|(i, (s, d, e))| RelationInput {
            name: format!("R{i}"),
            src: *s,
            dst: *d,
            edges: e.clone(),
            is_reverse: false,
        })
        .collect();
    let target = TargetInput {
        node_type: 0,
        labels: Some(labels.clone()),
        splits: Some(Splits {
            train: (0..counts[0]).collect(),
            valid: Vec::new(),
            test: Vec::new(),
        }),
    };
    let graph = HeteroGraph::build(type_inputs, rel_inputs, Some(target)).expect("fixture builds");
    Fixture {
        graph,
        counts,
        features,
        relations,
        labels,
    }
}

/// The same graph with the nodes of every type renumbered by `perms[t]`
/// (old local index `i` becomes `perms[t][i]`). One-hot features of type 1
/// stay the identity, so type 1 is never permuted.
pub fn permuted(fx: &Fixture, perms: &[Vec<usize>]) -> Fixture {
    assert!(perms[1].iter().enumerate().all(|(i, &p)| i == p), "type 1 must stay put");
    let features = fx
        .features
        .iter()
        .zip(perms)
        .map(|(x, p)| {
            let mut out = x.clone();
            for (i, row) in x.iter().enumerate() {
                out[p[i]] = row.clone();
            }
            out
        })
        .collect();
    let relations = fx
        .relations
        .iter()
        .map(|(s, d, e)| (*s, *d, e.iter().map(|&(u, v)| (perms[*s][u], perms[*d][v])).collect()))
        .collect();
    let mut labels = fx.labels.clone();
    for (i, &l) in fx.labels.iter().enumerate() {
        labels[perms[0][i]] = l;
    }
    assemble(fx.counts.clone(), features, relations, labels)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_dense(m: &DenseMatrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add_bias(a: &Dense, b: &[f64]) -> Dense {
    a.iter()
        .map(|row| row.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn relu(a: &Dense) -> Dense {
    a.iter().map(|row| row.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn identity(n: usize) -> Dense {
    (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn scale(a: &Dense, f: f64) -> Dense {
    a.iter().map(|row| row.iter().map(|v| v * f).collect()).collect()
}

pub fn row_normalize(a: &Dense) -> Dense {
    a.iter()
        .map(|row| {
            let d: f64 = row.iter().sum();
            row.iter().map(|v| v / d.max(1e-12)).collect()
        })
        .collect()
}

pub fn sym_normalize(a: &Dense) -> Dense {
    let d: Vec<f64> = a.iter().map(|row| row.iter().sum::<f64>().max(1e-12).sqrt()).collect();
    a.iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(j, v)| v / (d[i] * d[j])).collect())
        .collect()
}

pub fn max_abs_diff(a: &Dense, b: &Dense) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts differ");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column counts differ");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}
