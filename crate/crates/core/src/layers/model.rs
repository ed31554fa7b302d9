//! Whole-model parameters, forward pass and checkpoints.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{dense, gtn_propagate, propagate, regin_aggregate, resgc_propagate, Propagation};
use super::{Backbone, ModelConfig, Param, ParamKind};
use crate::autodiff::{DenseMatrix, SparseCsr, Tape, Var};
use crate::error::{Error, Result};
use crate::hgraph::HeteroGraph;
use crate::relemb::{AdjacencyPattern, Normalization, RelationEmbeddings, SelfLoopMode};

pub const CHECKPOINT_FORMAT: &str = "regnn-checkpoint/1";

/// Per-graph data shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub pattern: Arc<AdjacencyPattern>,
    pub relations: Vec<Arc<SparseCsr>>,
    pub features: Vec<DenseMatrix>,
    pub target_rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub type_names: Vec<String>,
    pub relation_names: Vec<String>,
}

impl GraphContext {
    pub fn new(g: &HeteroGraph) -> Result<Self> {
        let target = g
            .target_type()
            .ok_or_else(|| Error::Validation("graph has no target node type".into()))?;
        let labels = g.labels().map(<[usize]>::to_vec).unwrap_or_default();
        let num_classes = g.num_classes();
        if num_classes == 0 {
            return Err(Error::Validation("target node type carries no labels".into()));
        }
        let start = g.offset(target);
        Ok(Self {
            pattern: Arc::new(AdjacencyPattern::from_graph(g)?),
            relations: g.relations().iter().map(|r| Arc::new(r.edges.clone())).collect(),
            features: (0..g.num_types()).map(|t| g.features(t).clone()).collect(),
            target_rows: (start..start + g.node_count(target)).collect(),
            labels,
            num_classes,
            type_names: g.type_names().to_vec(),
            relation_names: g.relations().iter().map(|r| r.name.clone()).collect(),
        })
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_types(&self) -> usize {
        self.features.len()
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.features.iter().map(DenseMatrix::cols).collect()
    }
}

/// Training mode carries the dropout RNG.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

pub struct ForwardOutput {
    /// `N_target x C`.
    pub logits: Var,
    /// Input of the output layer after aggregation, target rows only.
    pub embeddings: Var,
    /// Tape leaf of every parameter, in store order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, Default)]
struct LayerSlots {
    rel: Option<usize>,
    self_loop: Option<usize>,
    w: Option<usize>,
    b: Option<usize>,
    w2: Option<usize>,
    b2: Option<usize>,
    eps: Option<usize>,
    channels: Vec<ChannelSlots>,
}

#[derive(Clone, Debug)]
struct ChannelSlots {
    scores: Vec<usize>,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    proj: Vec<(usize, usize)>,
    layers: Vec<LayerSlots>,
    head: Option<(usize, usize)>,
    feature_dims: Vec<usize>,
    num_classes: usize,
    num_relations: usize,
    num_types: usize,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, kind: ParamKind, layer: Option<usize>, value: DenseMatrix, trainable: bool) -> usize {
        self.params.push(Param {
            name,
            kind,
            layer,
            value,
            trainable,
        });
        self.params.len() - 1
    }

    fn weight(&mut self, name: String, layer: Option<usize>, rows: usize, cols: usize) -> usize {
        let w = DenseMatrix::xavier_uniform(rows, cols, self.rng);
        self.push(name, ParamKind::Weight, layer, w, true)
    }

    fn bias(&mut self, name: String, layer: Option<usize>, cols: usize) -> usize {
        self.push(name, ParamKind::Bias, layer, DenseMatrix::zeros(1, cols), true)
    }
}

impl Model {
    pub fn new(config: ModelConfig, ctx: &GraphContext, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let hidden = config.hidden;
        let c = ctx.num_classes;
        let nr = ctx.num_relations();
        let nt = ctx.num_types();

        let proj = ctx
            .type_names
            .iter()
            .zip(ctx.feature_dims())
            .map(|(name, d)| {
                let w = b.weight(format!("proj.{name}.w"), None, d, hidden);
                let bias = b.bias(format!("proj.{name}.b"), None, hidden);
                (w, bias)
            })
            .collect();

        let mut layers = Vec::with_capacity(config.layers);
        let mut head = None;
        let last = config.layers - 1;
        for l in 0..config.layers {
            let mut slots = LayerSlots::default();
            if config.uses_embeddings() {
                let init = 1.0 / config.lambda;
                slots.rel = Some(b.push(
                    format!("layer{l}.rel"),
                    ParamKind::RelationEmbedding,
                    Some(l),
                    DenseMatrix::filled(1, nr, init),
                    !config.freeze_relations,
                ));
                slots.self_loop = Some(b.push(
                    format!("layer{l}.self"),
                    ParamKind::SelfLoopEmbedding,
                    Some(l),
                    DenseMatrix::filled(1, nt, init),
                    !config.freeze_self_loops && config.self_loops == SelfLoopMode::Embedded,
                ));
            }
            let out = if l == last { c } else { hidden };
            match config.backbone {
                Backbone::Regcn => {
                    slots.w = Some(b.weight(format!("layer{l}.w"), Some(l), hidden, out));
                    slots.b = Some(b.bias(format!("layer{l}.b"), Some(l), out));
                }
                Backbone::Regin => {
                    slots.w = Some(b.weight(format!("layer{l}.w"), Some(l), hidden, hidden));
                    slots.b = Some(b.bias(format!("layer{l}.b"), Some(l), hidden));
                    slots.w2 = Some(b.weight(format!("layer{l}.w2"), Some(l), hidden, out));
                    slots.b2 = Some(b.bias(format!("layer{l}.b2"), Some(l), out));
                    slots.eps = Some(b.push(
                        format!("layer{l}.eps"),
                        ParamKind::GinEpsilon,
                        Some(l),
                        DenseMatrix::scalar(0.0),
                        true,
                    ));
                }
                Backbone::Resgc => {}
                Backbone::Gtn => {
                    let input = if l == 0 { hidden } else { hidden * config.gtn_channels };
                    for ch in 0..config.gtn_channels {
                        let scores = (0..config.gtn_length)
                            .map(|j| {
                                b.push(
                                    format!("layer{l}.ch{ch}.step{j}"),
                                    ParamKind::GtnScore,
                                    Some(l),
                                    DenseMatrix::zeros(1, nr),
                                    true,
                                )
                            })
                            .collect();
                        let w = b.weight(format!("layer{l}.ch{ch}.w"), Some(l), input, hidden);
                        let bias = b.bias(format!("layer{l}.ch{ch}.b"), Some(l), hidden);
                        slots.channels.push(ChannelSlots { scores, w, b: bias });
                    }
                }
            }
            layers.push(slots);
        }
        match config.backbone {
            Backbone::Resgc => {
                head = Some((b.weight("head.w".into(), None, hidden, c), b.bias("head.b".into(), None, c)));
            }
            Backbone::Gtn => {
                if nr == 0 {
                    return Err(Error::InvalidArgument("GTN needs at least one relation".into()));
                }
                let width = hidden * config.gtn_channels;
                head = Some((b.weight("head.w".into(), None, width, c), b.bias("head.b".into(), None, c)));
            }
            _ => {}
        }
        let params = b.params;
        Ok(Self {
            config,
            params,
            proj,
            layers,
            head,
            feature_dims: ctx.feature_dims(),
            num_classes: c,
            num_relations: nr,
            num_types: nt,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Current `e` and `s` per layer, or `None` for backbones without them.
    pub fn relation_embeddings(&self) -> Option<RelationEmbeddings> {
        if !self.config.uses_embeddings() {
            return None;
        }
        let rel = self
            .layers
            .iter()
            .map(|s| self.params[s.rel.expect("embedding slot")].value.data().to_vec())
            .collect();
        let selfl = self
            .layers
            .iter()
            .map(|s| self.params[s.self_loop.expect("embedding slot")].value.data().to_vec())
            .collect();
        RelationEmbeddings::from_parts(self.config.lambda, rel, selfl).ok()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    fn check_context(&self, ctx: &GraphContext) -> Result<()> {
        if ctx.feature_dims() != self.feature_dims
            || ctx.num_relations() != self.num_relations
            || ctx.num_types() != self.num_types
            || ctx.num_classes != self.num_classes
        {
            return Err(Error::Validation("graph does not match the model's schema".into()));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &GraphContext, tape: &mut Tape, mut mode: Mode) -> Result<ForwardOutput> {
        self.check_context(ctx)?;
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let cfg = &self.config;

        let mut blocks = Vec::with_capacity(self.proj.len());
        for (x, &(w, b)) in ctx.features.iter().zip(&self.proj) {
            let xv = tape.leaf(x.clone());
            blocks.push(dense(tape, xv, vars[w], vars[b], false)?);
        }
        let mut h = tape.vstack(&blocks)?;

        let relational = |tape: &mut Tape, slots: &LayerSlots, norm: Normalization| {
            let alpha = tape.scale(vars[slots.rel.expect("embedding slot")], cfg.lambda);
            let beta = tape.scale(vars[slots.self_loop.expect("embedding slot")], cfg.lambda);
            Propagation::Relational {
                pattern: ctx.pattern.clone(),
                alpha,
                beta,
                self_loops: cfg.self_loops,
                norm,
            }
        };

        let last = self.layers.len() - 1;
        let (out, emb) = match cfg.backbone {
            Backbone::Regcn => {
                let mut emb = h;
                for (l, slots) in self.layers.iter().enumerate() {
                    h = apply_dropout(tape, h, cfg.dropout, &mut mode)?;
                    let prop = relational(tape, slots, cfg.norm);
                    let agg = propagate(tape, &prop, h)?;
                    emb = agg;
                    h = dense(tape, agg, vars[slots.w.unwrap()], vars[slots.b.unwrap()], l != last)?;
                }
                (h, emb)
            }
            Backbone::Regin => {
                let mut emb = h;
                for (l, slots) in self.layers.iter().enumerate() {
                    h = apply_dropout(tape, h, cfg.dropout, &mut mode)?;
                    let prop = relational(tape, slots, Normalization::None);
                    let s = regin_aggregate(tape, &prop, h, vars[slots.eps.unwrap()])?;
                    emb = s;
                    let inner = dense(tape, s, vars[slots.w.unwrap()], vars[slots.b.unwrap()], true)?;
                    h = dense(tape, inner, vars[slots.w2.unwrap()], vars[slots.b2.unwrap()], l != last)?;
                }
                (h, emb)
            }
            Backbone::Resgc => {
                h = apply_dropout(tape, h, cfg.dropout, &mut mode)?;
                let weights: Vec<(Var, Var)> = self
                    .layers
                    .iter()
                    .map(|s| {
                        let a = tape.scale(vars[s.rel.unwrap()], cfg.lambda);
                        let b = tape.scale(vars[s.self_loop.unwrap()], cfg.lambda);
                        (a, b)
                    })
                    .collect();
                let z = resgc_propagate(tape, &ctx.pattern, &weights, cfg.self_loops, h)?;
                let (w, b) = self.head.unwrap();
                (dense(tape, z, vars[w], vars[b], false)?, z)
            }
            Backbone::Gtn => {
                for slots in &self.layers {
                    h = apply_dropout(tape, h, cfg.dropout, &mut mode)?;
                    let mut chans = Vec::with_capacity(slots.channels.len());
                    for ch in &slots.channels {
                        let scores: Vec<Var> = ch.scores.iter().map(|&s| vars[s]).collect();
                        let agg = gtn_propagate(tape, &ctx.relations, &scores, h)?;
                        chans.push(dense(tape, agg, vars[ch.w], vars[ch.b], true)?);
                    }
                    h = super::ops::gtn_ensemble(tape, &chans)?;
                }
                let (w, b) = self.head.unwrap();
                (dense(tape, h, vars[w], vars[b], false)?, h)
            }
        };
        let logits = tape.gather_rows(out, &ctx.target_rows)?;
        let embeddings = tape.gather_rows(emb, &ctx.target_rows)?;
        Ok(ForwardOutput {
            logits,
            embeddings,
            params: vars,
        })
    }

    /// Eval-mode logits and embeddings as plain matrices.
    pub fn predict(&self, ctx: &GraphContext) -> Result<(DenseMatrix, DenseMatrix)> {
        let mut tape = Tape::new();
        let out = self.forward(ctx, &mut tape, Mode::Eval)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.embeddings).clone()))
    }

    /// Logits of the RE-GCN stack with every layer propagating through the
    /// fixed matrix `adjacency` instead of the relation-weighted one.
    pub fn fixed_propagation_logits(&self, ctx: &GraphContext, adjacency: Arc<SparseCsr>) -> Result<DenseMatrix> {
        if self.config.backbone != Backbone::Regcn {
            return Err(Error::InvalidArgument("fixed propagation is defined for RE-GCN only".into()));
        }
        self.check_context(ctx)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let mut blocks = Vec::with_capacity(self.proj.len());
        for (x, &(w, b)) in ctx.features.iter().zip(&self.proj) {
            let xv = tape.leaf(x.clone());
            blocks.push(dense(&mut tape, xv, vars[w], vars[b], false)?);
        }
        let mut h = tape.vstack(&blocks)?;
        let prop = Propagation::Fixed(adjacency);
        let last = self.layers.len() - 1;
        for (l, slots) in self.layers.iter().enumerate() {
            let agg = propagate(&mut tape, &prop, h)?;
            h = dense(&mut tape, agg, vars[slots.w.unwrap()], vars[slots.b.unwrap()], l != last)?;
        }
        let logits = tape.gather_rows(h, &ctx.target_rows)?;
        Ok(tape.value(logits).clone())
    }

    pub fn checkpoint(&self, ctx: &GraphContext, seed: u64) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            seed,
            num_classes: self.num_classes,
            feature_dims: self.feature_dims.clone(),
            type_names: ctx.type_names.clone(),
            relation_names: ctx.relation_names.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, ctx: &GraphContext) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!("unsupported checkpoint format `{}`", ckpt.format)));
        }
        if ckpt.type_names != ctx.type_names || ckpt.relation_names != ctx.relation_names {
            return Err(Error::Validation("checkpoint was trained on a different schema".into()));
        }
        let mut model = Model::new(ckpt.config.clone(), ctx, ckpt.seed)?;
        if model.params.len() != ckpt.params.len() {
            return Err(Error::Validation("checkpoint parameter count mismatch".into()));
        }
        for (slot, saved) in model.params.iter_mut().zip(&ckpt.params) {
            if slot.name != saved.name || slot.value.shape() != saved.value.shape() {
                return Err(Error::Validation(format!("checkpoint parameter `{}` does not fit", saved.name)));
            }
            *slot = saved.clone();
        }
        Ok(model)
    }
}

fn apply_dropout(tape: &mut Tape, h: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    match mode {
        Mode::Train(rng) => tape.dropout(h, rate, true, &mut **rng),
        Mode::Eval => Ok(h),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub num_classes: usize,
    pub feature_dims: Vec<usize>,
    pub type_names: Vec<String>,
    pub relation_names: Vec<String>,
    pub params: Vec<Param>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Trainable embedding scalars per layer.
    pub overhead_per_layer: usize,
}

/// Trainable parameter count of `config` on `ctx`'s schema.
pub fn param_count(config: &ModelConfig, ctx: &GraphContext) -> Result<ParamCount> {
    let model = Model::new(config.clone(), ctx, 0)?;
    let total = model.trainable_count();
    let embedding: usize = model
        .params
        .iter()
        .filter(|p| p.trainable && p.kind.is_embedding())
        .map(|p| p.value.len())
        .sum();
    Ok(ParamCount {
        total,
        overhead_per_layer: embedding / config.layers,
    })
}
