//! Full-batch training with early stopping, and evaluation of the result.

mod cluster;
mod metrics;

pub use cluster::{clustering_metrics, kmeans, KMeansResult};
pub use metrics::evaluate_f1;

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, DenseMatrix, GradientCheck, Tape};
use crate::error::{Error, Result};
use crate::hgraph::{HeteroGraph, Splits};
use crate::layers::{param_count, Backbone, GraphContext, Mode, Model, ModelConfig, ParamCount};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::relemb::{homogeneous_gcn_adjacency, SelfLoopMode};

fn default_max_epochs() -> usize {
    200
}

fn default_patience() -> usize {
    50
}

fn default_lr() -> f64 {
    0.001
}

fn default_weight_decay() -> f64 {
    0.001
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Apply weight decay to relation and self-loop embeddings too.
    #[serde(default = "default_true")]
    pub decay_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            optimizer: default_optimizer(),
            seed: 0,
            decay_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidArgument(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cross-entropy of the training forward pass, before the update.
    pub train_loss: f64,
    /// Validation micro-F1 after the update.
    pub valid_micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_micro_f1: f64,
    /// `None` when the test split is empty.
    pub test_macro_f1: Option<f64>,
    pub test_micro_f1: Option<f64>,
    /// Learned `alpha` per layer; empty for backbones without embeddings.
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub param_count: ParamCount,
    /// Kept out of the serialized report so that reruns compare equal.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Per-epoch curve as CSV.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_micro_f1\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.valid_micro_f1);
        }
        out
    }
}

fn splits_of(g: &HeteroGraph) -> Result<Splits> {
    let splits = g
        .splits()
        .cloned()
        .ok_or_else(|| Error::Validation("target type has no splits".into()))?;
    if splits.train.is_empty() {
        return Err(Error::Validation("no labeled training nodes".into()));
    }
    Ok(splits)
}

/// Mean cross-entropy of the eval-mode forward pass over `mask`.
pub fn eval_loss(model: &Model, ctx: &GraphContext, mask: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(ctx, &mut tape, Mode::Eval)?;
    let loss = tape.softmax_cross_entropy(out.logits, &ctx.labels, mask)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Eval-mode input of the output layer for every target node.
pub fn extract_embeddings(model: &Model, ctx: &GraphContext) -> Result<DenseMatrix> {
    Ok(model.predict(ctx)?.1)
}

/// Central-difference check of every parameter's gradient of the eval-mode
/// cross-entropy over `mask`.
pub fn gradient_check(model: &Model, ctx: &GraphContext, mask: &[usize], h: f64) -> Result<Vec<(String, GradientCheck)>> {
    let mut tape = Tape::new();
    let out = model.forward(ctx, &mut tape, Mode::Eval)?;
    let loss = tape.softmax_cross_entropy(out.logits, &ctx.labels, mask)?;
    let grads = tape.backward(loss)?;
    let mut probe = model.clone();
    let mut checks = Vec::with_capacity(model.params().len());
    for (i, p) in model.params().iter().enumerate() {
        let analytic = grads.get(out.params[i]);
        let check = finite_diff_check(
            |x| {
                probe.params_mut()[i].value.data_mut().copy_from_slice(x);
                eval_loss(&probe, ctx, mask)
            },
            p.value.data(),
            analytic.data(),
            h,
        )?;
        probe.params_mut()[i].value = p.value.clone();
        checks.push((p.name.clone(), check));
    }
    Ok(checks)
}

/// Largest logit difference between a freshly initialised RE-GCN, whose
/// relation and self-loop weights all start at 1, and the same weights
/// run as a plain GCN on the homogenised graph with `+I` self-loops.
pub fn gcn_degeneration_deviation(g: &HeteroGraph, config: &ModelConfig, seed: u64) -> Result<f64> {
    if config.backbone != Backbone::Regcn || config.self_loops != SelfLoopMode::Embedded {
        return Err(Error::InvalidArgument(
            "degeneration is defined for RE-GCN with embedded self-loops".into(),
        ));
    }
    let ctx = GraphContext::new(g)?;
    let model = Model::new(config.clone(), &ctx, seed)?;
    let (logits, _) = model.predict(&ctx)?;
    let adjacency = Arc::new(homogeneous_gcn_adjacency(g, config.norm)?);
    Ok(logits.max_abs_diff(&model.fixed_propagation_logits(&ctx, adjacency)?))
}

/// Trains a fresh model on `g` and returns it with the best validation
/// parameters restored.
pub fn train(config: &ModelConfig, g: &HeteroGraph, tc: &TrainConfig) -> Result<(Model, TrainReport)> {
    let ctx = GraphContext::new(g)?;
    let splits = splits_of(g)?;
    train_on(config, &ctx, &splits, tc)
}

pub fn train_on(config: &ModelConfig, ctx: &GraphContext, splits: &Splits, tc: &TrainConfig) -> Result<(Model, TrainReport)> {
    tc.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Validation("no labeled training nodes".into()));
    }
    let started = Instant::now();
    let mut model = Model::new(config.clone(), ctx, tc.seed)?;
    let mut opt = Optimizer::new(OptimizerConfig {
        weight_decay: tc.weight_decay,
        ..OptimizerConfig::new(tc.optimizer, tc.lr)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    // an empty validation split falls back to the training nodes
    let valid: &[usize] = if splits.valid.is_empty() { &splits.train } else { &splits.valid };

    let mut epochs = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params().to_vec());
    let mut stale = 0usize;
    for epoch in 0..tc.max_epochs {
        let mut tape = Tape::new();
        let out = model.forward(ctx, &mut tape, Mode::Train(&mut rng))?;
        let loss = tape.softmax_cross_entropy(out.logits, &ctx.labels, &splits.train)?;
        let train_loss = tape.value(loss).get(0, 0);
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let grads = tape.backward(loss)?;
        opt.begin_step();
        for (i, (p, v)) in model.params_mut().iter_mut().zip(&out.params).enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = tc.decay_embeddings || !p.kind.is_embedding();
            opt.update(i, &mut p.value, &grads.get(*v), decay)?;
        }

        let (logits, _) = model.predict(ctx)?;
        let (_, valid_micro) = evaluate_f1(&logits, &ctx.labels, valid)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_micro_f1: valid_micro,
        });
        if valid_micro > best.0 {
            best = (valid_micro, epoch, model.params().to_vec());
            stale = 0;
        } else {
            stale += 1;
            if stale > tc.patience {
                break;
            }
        }
    }
    let (best_valid, best_epoch, best_params) = best;
    for (p, saved) in model.params_mut().iter_mut().zip(best_params) {
        *p = saved;
    }

    let (test_macro, test_micro) = if splits.test.is_empty() {
        (None, None)
    } else {
        let (logits, _) = model.predict(ctx)?;
        let (ma, mi) = evaluate_f1(&logits, &ctx.labels, &splits.test)?;
        (Some(ma), Some(mi))
    };
    let (alpha, beta) = match model.relation_embeddings() {
        Some(re) => (
            (0..re.num_layers()).map(|l| re.alpha(l)).collect(),
            (0..re.num_layers()).map(|l| re.beta(l)).collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    let report = TrainReport {
        model: config.clone(),
        train: tc.clone(),
        epochs,
        best_epoch,
        best_valid_micro_f1: best_valid,
        test_macro_f1: test_macro,
        test_micro_f1: test_micro,
        alpha,
        beta,
        param_count: param_count(config, ctx)?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hgraph::{generate_synthetic, SyntheticRelation, SyntheticSpec, SyntheticType};

    fn separable() -> HeteroGraph {
        let spec = SyntheticSpec {
            node_types: vec![
                SyntheticType {
                    name: "P".into(),
                    count: 60,
                    features: true,
                    separation: None,
                },
                SyntheticType {
                    name: "A".into(),
                    count: 20,
                    features: false,
                    separation: None,
                },
            ],
            target_type: "P".into(),
            num_classes: 2,
            relations: vec![SyntheticRelation {
                name: "A-P".into(),
                src: "A".into(),
                dst: "P".into(),
                num_edges: 120,
                homophily: 0.9,
            }],
            feature_dim: 4,
            separation: 3.0,
            noise: 0.3,
            seed: 0,
        };
        generate_synthetic(&spec, 2).unwrap().add_reverse_relations()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_drops_and_best_is_restored() {
        let g = separable();
        let tc = TrainConfig {
            max_epochs: 40,
            patience: 40,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let (model, report) = train(&small_model(), &g, &tc).unwrap();
        assert!(report.epochs[1].train_loss < report.epochs[0].train_loss);
        let max = report.epochs.iter().map(|e| e.valid_micro_f1).fold(0.0, f64::max);
        assert_eq!(report.best_valid_micro_f1, max);
        assert!(report.best_epoch < report.epochs.len());
        let ctx = GraphContext::new(&g).unwrap();
        let (logits, _) = model.predict(&ctx).unwrap();
        let (_, again) = evaluate_f1(&logits, &ctx.labels, &g.splits().unwrap().valid).unwrap();
        assert_eq!(again, report.best_valid_micro_f1);
    }

    #[test]
    fn patience_zero_stops_after_first_stale_epoch() {
        let g = separable();
        let tc = TrainConfig {
            max_epochs: 200,
            patience: 0,
            lr: 0.0,
            ..TrainConfig::default()
        };
        // with a zero learning rate nothing changes, so epoch 1 is stale
        let (_, report) = train(&small_model(), &g, &tc).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let g = separable();
        let tc = TrainConfig {
            max_epochs: 10,
            patience: 10,
            seed: 4,
            ..TrainConfig::default()
        };
        let cfg = ModelConfig {
            dropout: 0.5,
            ..small_model()
        };
        let (_, a) = train(&cfg, &g, &tc).unwrap();
        let (_, b) = train(&cfg, &g, &tc).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn rejects_bad_configs_and_missing_training_nodes() {
        let g = separable();
        let tc = TrainConfig {
            patience: 300,
            ..TrainConfig::default()
        };
        assert!(train(&small_model(), &g, &tc).is_err());
        let ctx = GraphContext::new(&g).unwrap();
        let empty = Splits::default();
        assert!(train_on(&small_model(), &ctx, &empty, &TrainConfig::default()).is_err());
    }

    #[test]
    fn small_model_gradients_match_finite_differences() {
        let g = separable();
        let ctx = GraphContext::new(&g).unwrap();
        let model = Model::new(small_model(), &ctx, 1).unwrap();
        for (name, c) in gradient_check(&model, &ctx, &[0, 1, 2, 3, 4, 5], 1e-6).unwrap() {
            assert!(c.max_rel_error < 1e-4, "{name}: {c:?}");
        }
    }

    #[test]
    fn fresh_regcn_is_a_gcn() {
        let g = separable();
        let dev = gcn_degeneration_deviation(&g, &small_model(), 3).unwrap();
        assert!(dev < 1e-12, "{dev}");
    }

    #[test]
    fn single_layer_embeddings_are_aggregated_projections() {
        let g = separable();
        let ctx = GraphContext::new(&g).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            ..small_model()
        };
        let model = Model::new(cfg, &ctx, 0).unwrap();
        let emb = extract_embeddings(&model, &ctx).unwrap();
        assert_eq!(emb.shape(), (60, 8));
        assert_eq!(emb, extract_embeddings(&model, &ctx).unwrap());
    }
}
