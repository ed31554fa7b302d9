//! Seeded generator for small labelled heterogeneous graphs.
//!
//! Every node of every type gets a latent class (balanced, `i mod C` then
//! shuffled). Features are a class-dependent mean plus Gaussian noise. An
//! edge of a relation with homophily `h` picks a uniform receiver, then a
//! sender of the same class with probability `h` and of a different class
//! otherwise. With two classes `h = 0.5` makes the relation independent of
//! the labels.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HeteroGraph, NodeTypeInput, RelationInput, Splits, TargetInput};
use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticType {
    pub name: String,
    pub count: usize,
    /// When false the type gets one-hot identity features.
    #[serde(default = "default_true")]
    pub features: bool,
    /// Overrides the spec-wide separation for this type.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRelation {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub num_edges: usize,
    pub homophily: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub node_types: Vec<SyntheticType>,
    pub target_type: String,
    pub num_classes: usize,
    pub relations: Vec<SyntheticRelation>,
    pub feature_dim: usize,
    pub separation: f64,
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two classes over 1000 `P` targets with weak features. Only the
    /// `A-P` relation is homophilous (0.95); `S-P` and `P-P` are dense and
    /// class-blind, and `A` and `S` carry pure-noise features.
    pub fn skewed_homophily() -> Self {
        let ty = |name: &str, count, separation| SyntheticType {
            name: name.into(),
            count,
            features: true,
            separation,
        };
        let rel = |name: &str, src: &str, dst: &str, num_edges, homophily| SyntheticRelation {
            name: name.into(),
            src: src.into(),
            dst: dst.into(),
            num_edges,
            homophily,
        };
        Self {
            node_types: vec![ty("P", 1000, None), ty("A", 500, Some(0.0)), ty("S", 100, Some(0.0))],
            target_type: "P".into(),
            num_classes: 2,
            relations: vec![
                rel("A-P", "A", "P", 3000, 0.95),
                rel("S-P", "S", "P", 10000, 0.5),
                rel("P-P", "P", "P", 10000, 0.5),
            ],
            feature_dim: 8,
            separation: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let gen = |m: String| Err(Error::Generation(m));
        if self.num_classes < 2 {
            return gen(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            return gen("feature_dim must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.separation.is_finite()) {
            return gen("noise must be finite and non-negative".into());
        }
        let Some(target) = self.node_types.iter().find(|t| t.name == self.target_type) else {
            return gen(format!("target type `{}` is not declared", self.target_type));
        };
        if target.count < self.num_classes {
            return gen(format!(
                "{} classes but only {} target nodes",
                self.num_classes, target.count
            ));
        }
        for t in &self.node_types {
            if t.count == 0 {
                return gen(format!("node type `{}` has no nodes", t.name));
            }
        }
        for r in &self.relations {
            if !(0.0..=1.0).contains(&r.homophily) {
                return gen(format!("relation `{}` homophily {} outside [0, 1]", r.name, r.homophily));
            }
        }
        Ok(())
    }
}

fn balanced_classes(count: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut c: Vec<usize> = (0..count).map(|i| i % classes).collect();
    c.shuffle(rng);
    c
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<HeteroGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let type_idx = |name: &str| {
        spec.node_types
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Generation(format!("unknown node type `{name}`")))
    };
    let target = type_idx(&spec.target_type)?;
    let c = spec.num_classes;

    let classes: Vec<Vec<usize>> = spec
        .node_types
        .iter()
        .map(|t| balanced_classes(t.count, c, &mut rng))
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;

    let mut types = Vec::with_capacity(spec.node_types.len());
    for (t, cls) in spec.node_types.iter().zip(&classes) {
        let features = if t.features {
            let sep = t.separation.unwrap_or(spec.separation);
            let mut x = DenseMatrix::zeros(t.count, spec.feature_dim);
            for (i, &ci) in cls.iter().enumerate() {
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    let mean = if j == ci % spec.feature_dim { sep } else { 0.0 };
                    *v = mean + noise.sample(&mut rng);
                }
            }
            Some(x)
        } else {
            None
        };
        types.push(NodeTypeInput {
            name: t.name.clone(),
            count: t.count,
            features,
        });
    }

    let mut relations = Vec::with_capacity(spec.relations.len());
    for r in &spec.relations {
        let (s, d) = (type_idx(&r.src)?, type_idx(&r.dst)?);
        let (sc, dc) = (spec.node_types[s].count, spec.node_types[d].count);
        let capacity = if s == d { sc * (sc - 1) } else { sc * dc };
        if r.num_edges > capacity {
            return Err(Error::Generation(format!(
                "relation `{}` asks for {} edges but only {capacity} are possible",
                r.name, r.num_edges
            )));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &ci) in classes[s].iter().enumerate() {
            by_class[ci].push(i);
        }
        let mut edges = Vec::with_capacity(r.num_edges);
        let mut seen = HashSet::with_capacity(r.num_edges);
        let mut attempts = 0usize;
        let max_attempts = 50 * r.num_edges.max(1) + 1000;
        while edges.len() < r.num_edges {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Generation(format!(
                    "relation `{}`: could not place {} distinct edges",
                    r.name, r.num_edges
                )));
            }
            let v = rng.random_range(0..dc);
            let cv = classes[d][v];
            let same = rng.random::<f64>() < r.homophily;
            let pool: Vec<usize> = if same {
                vec![cv]
            } else {
                (0..c).filter(|&k| k != cv).collect()
            };
            let candidates: usize = pool.iter().map(|&k| by_class[k].len()).sum();
            let u = if candidates == 0 {
                rng.random_range(0..sc)
            } else {
                let mut pick = rng.random_range(0..candidates);
                let mut chosen = 0;
                for &k in &pool {
                    if pick < by_class[k].len() {
                        chosen = by_class[k][pick];
                        break;
                    }
                    pick -= by_class[k].len();
                }
                chosen
            };
            if s == d && u == v {
                continue;
            }
            if seen.insert((u, v)) {
                edges.push((u, v));
            }
        }
        relations.push(RelationInput {
            name: r.name.clone(),
            src: s,
            dst: d,
            edges,
            is_reverse: false,
        });
    }

    let split_seed = rng.random::<u64>();
    let labels = classes[target].clone();
    let splits = Splits::random(labels.len(), split_seed);
    HeteroGraph::build(
        types,
        relations,
        Some(TargetInput {
            node_type: target,
            labels: Some(labels),
            splits: Some(splits),
        }),
    )
}

/// Latent classes of every node type, in the order used by the generator.
#[cfg(test)]
pub(crate) fn latent_classes(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.node_types
        .iter()
        .map(|t| balanced_classes(t.count, spec.num_classes, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hgraph::to_json_string;

    fn spec(h_main: f64) -> SyntheticSpec {
        SyntheticSpec {
            node_types: vec![
                SyntheticType {
                    name: "P".into(),
                    count: 300,
                    features: true,
                    separation: None,
                },
                SyntheticType {
                    name: "A".into(),
                    count: 200,
                    features: true,
                    separation: None,
                },
            ],
            target_type: "P".into(),
            num_classes: 2,
            relations: vec![
                SyntheticRelation {
                    name: "A-P".into(),
                    src: "A".into(),
                    dst: "P".into(),
                    num_edges: 3000,
                    homophily: h_main,
                },
                SyntheticRelation {
                    name: "P-P".into(),
                    src: "P".into(),
                    dst: "P".into(),
                    num_edges: 3000,
                    homophily: 0.5,
                },
            ],
            feature_dim: 4,
            separation: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(0.9);
        let a = to_json_string(&generate_synthetic(&s, 3).unwrap()).unwrap();
        let b = to_json_string(&generate_synthetic(&s, 3).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = to_json_string(&generate_synthetic(&s, 4).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_labels_and_splits() {
        let g = generate_synthetic(&spec(0.9), 1).unwrap();
        let labels = g.labels().unwrap();
        let ones = labels.iter().filter(|&&l| l == 1).count();
        assert!((ones as i64 - 150).abs() <= 1);
        let s = g.splits().unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (30, 30, 240));
    }

    #[test]
    fn latent_classes_match_labels() {
        let s = spec(0.9);
        let g = generate_synthetic(&s, 5).unwrap();
        assert_eq!(latent_classes(&s, 5)[0], g.labels().unwrap());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = spec(0.9);
        s.num_classes = 400;
        assert!(matches!(generate_synthetic(&s, 0), Err(Error::Generation(_))));
        let mut s = spec(0.9);
        s.relations[0].homophily = 1.5;
        assert!(generate_synthetic(&s, 0).is_err());
        let mut s = spec(0.9);
        s.relations[0].num_edges = 200 * 300 + 1;
        assert!(generate_synthetic(&s, 0).is_err());
    }
}
