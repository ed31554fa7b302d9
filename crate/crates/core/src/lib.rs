//! Relation-embedding graph neural networks for heterogeneous graphs.
//!
//! A heterogeneous graph is flattened into a single weighted homogeneous
//! graph: every relation gets one learnable scalar per layer, every node
//! type gets one learnable self-loop scalar per layer, and an ordinary
//! homogeneous GNN layer (GCN, SGC-style collapse, GIN) runs on the result.
//! The scalars are reparameterised as `alpha = lambda * e` so that their
//! optimizer updates live on a useful scale.
//!
//! Module map:
//!
//! - [`hgraph`]: typed graph model, JSON file format, reverse relations and
//!   the synthetic generator.
//! - [`autodiff`]: dense/sparse matrices and a small reverse-mode tape.
//! - [`relemb`]: relation embeddings, weighted adjacency assembly and the
//!   differentiable aggregation.
//! - [`layers`]: feature projection, backbones, GTN comparison layers and
//!   the whole-model forward pass.
//! - [`optim`]: SGD, Momentum, Nesterov, Adagrad, Adam and the
//!   gradient-scaling identity checks.
//! - [`train`]: training loop, F1 metrics, K-Means and NMI/ARI.
//! - [`proofs`]: numeric witnesses for the RE-GCN versus GTN constructions.

pub mod autodiff;
pub mod error;
pub mod hgraph;
pub mod layers;
pub mod optim;
pub mod proofs;
pub mod relemb;
pub mod train;

pub use error::{Error, Result};
