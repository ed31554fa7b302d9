//! JSON graph files.
//!
//! ```json
//! {
//!   "format": "regnn-graph/1",
//!   "node_types": [{"name": "paper", "count": 3, "features": [[..]], "labels": [0, 1, 0], "target": true}],
//!   "relations": [{"name": "author-paper", "src": "author", "dst": "paper", "edges": [[0, 2]]}],
//!   "splits": {"train": [0], "valid": [1], "test": [2]}
//! }
//! ```
//!
//! Edge pairs are `[src local index, dst local index]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeteroGraph, NodeTypeInput, RelationInput, Splits, TargetInput};
use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};

pub const GRAPH_FORMAT: &str = "regnn-graph/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    format: String,
    node_types: Vec<NodeTypeEntry>,
    #[serde(default)]
    relations: Vec<RelationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<Splits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeTypeEntry {
    name: String,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    target: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationEntry {
    name: String,
    src: String,
    dst: String,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    reverse: bool,
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn parse_graph(text: &str) -> Result<HeteroGraph> {
    let file: GraphFile = serde_json::from_str(text).map_err(parse_error)?;
    if file.format != GRAPH_FORMAT {
        return Err(Error::Validation(format!(
            "unsupported format `{}`, expected `{GRAPH_FORMAT}`",
            file.format
        )));
    }
    let type_of = |name: &str, rel: &str| {
        file.node_types
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Validation(format!("relation `{rel}` names unknown node type `{name}`")))
    };

    let mut target = None;
    for (i, t) in file.node_types.iter().enumerate() {
        if t.target || (t.labels.is_some() && !file.node_types.iter().any(|o| o.target)) {
            if target.is_some() {
                return Err(Error::Validation("more than one target node type".into()));
            }
            target = Some(i);
        }
    }

    let mut types = Vec::with_capacity(file.node_types.len());
    for t in &file.node_types {
        let features = match &t.features {
            None => None,
            Some(rows) => Some(
                DenseMatrix::from_rows(rows)
                    .map_err(|e| Error::Validation(format!("features of `{}`: {e}", t.name)))?,
            ),
        };
        types.push(NodeTypeInput {
            name: t.name.clone(),
            count: t.count,
            features,
        });
    }

    let mut relations = Vec::with_capacity(file.relations.len());
    for r in &file.relations {
        relations.push(RelationInput {
            name: r.name.clone(),
            src: type_of(&r.src, &r.name)?,
            dst: type_of(&r.dst, &r.name)?,
            edges: r.edges.iter().map(|e| (e[0], e[1])).collect(),
            is_reverse: r.reverse,
        });
    }

    let target = match target {
        None => {
            if file.splits.is_some() {
                return Err(Error::Validation("splits given without a target node type".into()));
            }
            None
        }
        Some(i) => {
            let entry = &file.node_types[i];
            let labels = match &entry.labels {
                None => None,
                Some(l) => Some(
                    l.iter()
                        .enumerate()
                        .map(|(k, &v)| {
                            usize::try_from(v).map_err(|_| {
                                Error::Validation(format!("label {v} of `{}` node {k} is negative", entry.name))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            Some(TargetInput {
                node_type: i,
                labels,
                splits: file.splits.clone(),
            })
        }
    };
    HeteroGraph::build(types, relations, target)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<HeteroGraph> {
    parse_graph(&fs::read_to_string(path)?)
}

/// Serializes `g`; generated one-hot features are omitted.
pub fn to_json_string(g: &HeteroGraph) -> Result<String> {
    to_json_with_meta(g, None)
}

/// As [`to_json_string`], with a free-form `meta` object such as the
/// generator settings.
pub fn to_json_with_meta(g: &HeteroGraph, meta: Option<serde_json::Value>) -> Result<String> {
    let node_types = (0..g.num_types())
        .map(|t| NodeTypeEntry {
            name: g.type_names()[t].clone(),
            count: g.node_count(t),
            features: (!g.has_generated_features(t)).then(|| {
                let x = g.features(t);
                (0..x.rows()).map(|i| x.row(i).to_vec()).collect()
            }),
            labels: (g.target_type() == Some(t))
                .then(|| g.labels().map(|l| l.iter().map(|&v| v as i64).collect()))
                .flatten(),
            target: g.target_type() == Some(t),
        })
        .collect();
    let relations = g
        .relations()
        .iter()
        .map(|r| {
            let (src_off, dst_off) = (g.offset(r.src_type), g.offset(r.dst_type));
            let mut edges = Vec::with_capacity(r.num_edges());
            for row in 0..r.edges.rows() {
                for &col in r.edges.row(row).0 {
                    edges.push([col - src_off, row - dst_off]);
                }
            }
            RelationEntry {
                name: r.name.clone(),
                src: g.type_names()[r.src_type].clone(),
                dst: g.type_names()[r.dst_type].clone(),
                edges,
                reverse: r.is_reverse,
            }
        })
        .collect();
    let file = GraphFile {
        format: GRAPH_FORMAT.into(),
        node_types,
        relations,
        splits: g.splits().cloned(),
        meta,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_graph(g: &HeteroGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json_string(g)?)?;
    Ok(())
}
