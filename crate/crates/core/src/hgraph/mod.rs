//! Typed heterogeneous graphs.
//!
//! Nodes of all types share one global id space: types are laid out in
//! declaration order, so type `t` owns ids `offset(t)..offset(t) + count(t)`.
//! Relation adjacencies are stored over global ids with the receiver on the
//! row axis, so row `u` of `A_r` lists the nodes `u` aggregates from.

mod io;
mod synthetic;

pub use io::{load_graph, parse_graph, save_graph, to_json_string, to_json_with_meta, GRAPH_FORMAT};
pub use synthetic::{generate_synthetic, SyntheticRelation, SyntheticSpec, SyntheticType};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseMatrix, SparseCsr};
use crate::error::{Error, Result};

/// One edge type.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationDef {
    pub name: String,
    pub src_type: usize,
    pub dst_type: usize,
    /// Unit-valued `N x N` adjacency; row = receiver (dst), column = sender (src).
    pub edges: SparseCsr,
    pub is_reverse: bool,
}

impl RelationDef {
    pub fn num_edges(&self) -> usize {
        self.edges.nnz()
    }
}

/// Train/valid/test node sets, as local indices of the target type.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// 400/400/rest when the target type has at least 4000 nodes,
    /// otherwise 10%/10%/80%; nodes are shuffled with `seed` first.
    pub fn random(count: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (n_train, n_valid) = if count >= 4000 {
            (400, 400)
        } else {
            let tenth = (count as f64 * 0.1).round() as usize;
            (tenth.max(1).min(count), tenth.max(1).min(count.saturating_sub(1)))
        };
        let n_valid = n_valid.min(count - n_train);
        let mut train = order[..n_train].to_vec();
        let mut valid = order[n_train..n_train + n_valid].to_vec();
        let mut test = order[n_train + n_valid..].to_vec();
        train.sort_unstable();
        valid.sort_unstable();
        test.sort_unstable();
        Splits { train, valid, test }
    }
}

/// Node-type declaration used when building a graph.
#[derive(Clone, Debug)]
pub struct NodeTypeInput {
    pub name: String,
    pub count: usize,
    /// `count x d`; one-hot identity rows are generated when absent.
    pub features: Option<DenseMatrix>,
}

/// Relation declaration with local endpoint indices.
#[derive(Clone, Debug)]
pub struct RelationInput {
    pub name: String,
    pub src: usize,
    pub dst: usize,
    /// `(src local, dst local)` pairs; duplicates are collapsed.
    pub edges: Vec<(usize, usize)>,
    pub is_reverse: bool,
}

/// Labels and splits on the designated target type.
#[derive(Clone, Debug)]
pub struct TargetInput {
    pub node_type: usize,
    pub labels: Option<Vec<usize>>,
    pub splits: Option<Splits>,
}

/// `A_i` for every relation and the type-diagonal masks `I_j`.
#[derive(Clone, Debug)]
pub struct RelationStructures {
    pub adjacency: Vec<SparseCsr>,
    pub type_masks: Vec<SparseCsr>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    node_types: Vec<String>,
    node_counts: Vec<usize>,
    offsets: Vec<usize>,
    relations: Vec<RelationDef>,
    features: Vec<DenseMatrix>,
    one_hot: Vec<bool>,
    target_type: Option<usize>,
    labels: Option<Vec<usize>>,
    splits: Option<Splits>,
}

impl HeteroGraph {
    pub fn build(
        types: Vec<NodeTypeInput>,
        relations: Vec<RelationInput>,
        target: Option<TargetInput>,
    ) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::Validation("graph declares no node types".into()));
        }
        let mut seen = HashSet::new();
        let mut offsets = Vec::with_capacity(types.len());
        let mut total = 0usize;
        for t in &types {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Validation(format!("duplicate node type `{}`", t.name)));
            }
            if t.count == 0 {
                return Err(Error::Validation(format!("node type `{}` has no nodes", t.name)));
            }
            offsets.push(total);
            total += t.count;
        }

        let mut features = Vec::with_capacity(types.len());
        let mut one_hot = Vec::with_capacity(types.len());
        for t in &types {
            match &t.features {
                Some(x) => {
                    if x.rows() != t.count || x.cols() == 0 {
                        return Err(Error::Validation(format!(
                            "features of `{}` are {}x{}, expected {} rows",
                            t.name,
                            x.rows(),
                            x.cols(),
                            t.count
                        )));
                    }
                    if !x.is_finite() {
                        return Err(Error::Validation(format!("features of `{}` are not finite", t.name)));
                    }
                    features.push(x.clone());
                    one_hot.push(false);
                }
                None => {
                    features.push(DenseMatrix::identity(t.count));
                    one_hot.push(true);
                }
            }
        }

        let mut names = HashSet::new();
        let mut defs = Vec::with_capacity(relations.len());
        for rel in relations {
            if !names.insert(rel.name.clone()) {
                return Err(Error::Validation(format!("duplicate relation `{}`", rel.name)));
            }
            if rel.src >= types.len() || rel.dst >= types.len() {
                return Err(Error::Validation(format!(
                    "relation `{}` references an unknown node type",
                    rel.name
                )));
            }
            let (sc, dc) = (types[rel.src].count, types[rel.dst].count);
            let mut triplets = Vec::with_capacity(rel.edges.len());
            let mut unique = HashSet::with_capacity(rel.edges.len());
            for (idx, &(u, v)) in rel.edges.iter().enumerate() {
                if u >= sc || v >= dc {
                    return Err(Error::Validation(format!(
                        "relation `{}` edge #{idx} ({u}, {v}) is out of range for {} x {} nodes",
                        rel.name, sc, dc
                    )));
                }
                if unique.insert((u, v)) {
                    triplets.push((offsets[rel.dst] + v, offsets[rel.src] + u, 1.0));
                }
            }
            defs.push(RelationDef {
                edges: SparseCsr::from_triplets(total, total, &triplets)?,
                name: rel.name,
                src_type: rel.src,
                dst_type: rel.dst,
                is_reverse: rel.is_reverse,
            });
        }

        let (target_type, labels, splits) = match target {
            None => (None, None, None),
            Some(t) => {
                let name = types
                    .get(t.node_type)
                    .ok_or_else(|| Error::Validation("target type out of range".into()))?
                    .name
                    .clone();
                let count = types[t.node_type].count;
                if let Some(l) = &t.labels {
                    if l.len() != count {
                        return Err(Error::Validation(format!(
                            "{} labels for {count} nodes of `{name}`",
                            l.len()
                        )));
                    }
                }
                if let Some(s) = &t.splits {
                    validate_splits(s, count)?;
                }
                let splits = match (&t.labels, t.splits) {
                    (Some(_), None) => Some(Splits::random(count, 0)),
                    (_, s) => s,
                };
                (Some(t.node_type), t.labels, splits)
            }
        };

        Ok(Self {
            node_types: types.iter().map(|t| t.name.clone()).collect(),
            node_counts: types.iter().map(|t| t.count).collect(),
            offsets,
            relations: defs,
            features,
            one_hot,
            target_type,
            labels,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_counts.iter().sum()
    }

    pub fn num_types(&self) -> usize {
        self.node_types.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn type_names(&self) -> &[String] {
        &self.node_types
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|n| n == name)
    }

    pub fn node_count(&self, t: usize) -> usize {
        self.node_counts[t]
    }

    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn offset(&self, t: usize) -> usize {
        self.offsets[t]
    }

    pub fn relations(&self) -> &[RelationDef] {
        &self.relations
    }

    pub fn features(&self, t: usize) -> &DenseMatrix {
        &self.features[t]
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.cols()).collect()
    }

    /// True when the features of type `t` were generated as one-hot rows.
    pub fn has_generated_features(&self, t: usize) -> bool {
        self.one_hot[t]
    }

    pub fn target_type(&self) -> Option<usize> {
        self.target_type
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn to_global(&self, t: usize, local: usize) -> Result<usize> {
        if t >= self.num_types() || local >= self.node_counts[t] {
            return Err(Error::InvalidArgument(format!("node ({t}, {local}) does not exist")));
        }
        Ok(self.offsets[t] + local)
    }

    pub fn to_local(&self, global: usize) -> Result<(usize, usize)> {
        if global >= self.num_nodes() {
            return Err(Error::InvalidArgument(format!("global id {global} out of range")));
        }
        let t = self.offsets.partition_point(|&o| o <= global) - 1;
        Ok((t, global - self.offsets[t]))
    }

    /// Node type of every global id.
    pub fn node_type_ids(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_nodes());
        for (t, &c) in self.node_counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(t, c));
        }
        out
    }

    pub fn relation_structures(&self) -> RelationStructures {
        let n = self.num_nodes();
        let type_masks = (0..self.num_types())
            .map(|t| {
                let triplets: Vec<_> = (self.offsets[t]..self.offsets[t] + self.node_counts[t])
                    .map(|i| (i, i, 1.0))
                    .collect();
                SparseCsr::from_triplets(n, n, &triplets).expect("diagonal in range")
            })
            .collect();
        RelationStructures {
            adjacency: self.relations.iter().map(|r| r.edges.clone()).collect(),
            type_masks,
        }
    }

    /// `sum_i A_i`, the homogenized adjacency without self-loops.
    pub fn homogenized_adjacency(&self) -> SparseCsr {
        let n = self.num_nodes();
        self.relations
            .iter()
            .fold(SparseCsr::zeros(n, n), |acc, r| acc.add(&r.edges).expect("same shape"))
    }

    /// Appends the transpose of every relation that does not already have
    /// one. Symmetric same-type relations are their own reverse.
    pub fn add_reverse_relations(&self) -> HeteroGraph {
        let mut out = self.clone();
        let originals: Vec<RelationDef> = self.relations.iter().filter(|r| !r.is_reverse).cloned().collect();
        for rel in originals {
            let transposed = rel.edges.transpose();
            if rel.src_type == rel.dst_type && transposed == rel.edges {
                continue;
            }
            let covered = out
                .relations
                .iter()
                .any(|o| o.src_type == rel.dst_type && o.dst_type == rel.src_type && o.edges == transposed);
            if covered {
                continue;
            }
            let name = reverse_name(&rel.name, &out.relations);
            out.relations.push(RelationDef {
                name,
                src_type: rel.dst_type,
                dst_type: rel.src_type,
                edges: transposed,
                is_reverse: true,
            });
        }
        out
    }

    /// The graph with its target labels and splits replaced.
    pub fn with_target(mut self, node_type: usize, labels: Vec<usize>, splits: Splits) -> Result<Self> {
        if node_type >= self.num_types() || labels.len() != self.node_counts[node_type] {
            return Err(Error::Validation("labels do not match the target type".into()));
        }
        validate_splits(&splits, labels.len())?;
        self.target_type = Some(node_type);
        self.labels = Some(labels);
        self.splits = Some(splits);
        Ok(self)
    }
}

fn reverse_name(name: &str, existing: &[RelationDef]) -> String {
    let taken = |n: &str| existing.iter().any(|r| r.name == n);
    let mut parts = name.split('-');
    if let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) {
        let flipped = format!("{b}-{a}");
        if !taken(&flipped) {
            return flipped;
        }
    }
    let mut candidate = format!("{name}_rev");
    while taken(&candidate) {
        candidate.push('_');
    }
    candidate
}

fn validate_splits(s: &Splits, count: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for (set, idx) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
        for &i in idx.iter() {
            if i >= count {
                return Err(Error::Validation(format!("{set} index {i} exceeds {count} target nodes")));
            }
            if !seen.insert(i) {
                return Err(Error::Validation(format!("node {i} appears twice across splits")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(name: &str, count: usize) -> NodeTypeInput {
        NodeTypeInput {
            name: name.into(),
            count,
            features: None,
        }
    }

    fn rel(name: &str, src: usize, dst: usize, edges: &[(usize, usize)]) -> RelationInput {
        RelationInput {
            name: name.into(),
            src,
            dst,
            edges: edges.to_vec(),
            is_reverse: false,
        }
    }

    #[test]
    fn single_node_graph() {
        let g = HeteroGraph::build(vec![node("a", 1)], vec![], None).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.num_relations(), 0);
        assert_eq!(g.features(0), &DenseMatrix::identity(1));
    }

    #[test]
    fn out_of_range_edge_names_relation() {
        let err = HeteroGraph::build(vec![node("a", 3)], vec![rel("r", 0, 0, &[(5, 0)])], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`r`") && msg.contains("#0"), "{msg}");
    }

    #[test]
    fn receiver_rows_and_duplicate_collapse() {
        let g = HeteroGraph::build(
            vec![node("a", 1), node("b", 2)],
            vec![rel("b-a", 1, 0, &[(0, 0), (1, 0), (1, 0)])],
            None,
        )
        .unwrap();
        let a = &g.relations()[0].edges;
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(0, 2), 1.0);
        assert_eq!(a.get(1, 0), 0.0);
    }

    #[test]
    fn type_masks_partition_identity() {
        let g = HeteroGraph::build(vec![node("a", 1), node("b", 2)], vec![], None).unwrap();
        let s = g.relation_structures();
        assert_eq!(s.type_masks[0].to_dense(), DenseMatrix::from_fn(3, 3, |i, j| (i == j && i == 0) as u8 as f64));
        assert_eq!(s.type_masks[1].to_dense(), DenseMatrix::from_fn(3, 3, |i, j| (i == j && i > 0) as u8 as f64));
    }

    #[test]
    fn reverse_relation_counts() {
        let g = HeteroGraph::build(
            vec![node("A", 2), node("P", 3), node("T", 2)],
            vec![rel("A-P", 0, 1, &[(0, 0), (1, 2)]), rel("P-T", 1, 2, &[(2, 1)])],
            None,
        )
        .unwrap();
        let r = g.add_reverse_relations();
        assert_eq!(r.num_relations(), 4);
        assert_eq!(r.relations()[2].name, "P-A");
        assert!(r.relations()[2].is_reverse);
        assert_eq!(r.relations()[2].edges, r.relations()[0].edges.transpose());
        assert_eq!(r.add_reverse_relations(), r);
    }

    #[test]
    fn symmetric_same_type_relation_is_its_own_reverse() {
        let g = HeteroGraph::build(
            vec![node("P", 3)],
            vec![rel("P-P", 0, 0, &[(0, 1), (1, 0), (2, 2)])],
            None,
        )
        .unwrap();
        assert_eq!(g.add_reverse_relations().num_relations(), 1);
        let asym = HeteroGraph::build(vec![node("P", 3)], vec![rel("cites", 0, 0, &[(0, 1)])], None).unwrap();
        let r = asym.add_reverse_relations();
        assert_eq!(r.num_relations(), 2);
        assert_eq!(r.relations()[1].name, "cites_rev");
    }

    #[test]
    fn splits_rules() {
        let s = Splits::random(5000, 1);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (400, 400, 4200));
        let s = Splits::random(100, 1);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (10, 10, 80));
        let s = Splits::random(2, 1);
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), 2);
        assert!(validate_splits(
            &Splits {
                train: vec![0],
                valid: vec![0],
                test: vec![]
            },
            3
        )
        .is_err());
    }
}
