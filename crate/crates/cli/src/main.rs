use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use regnn::hgraph::{generate_synthetic, load_graph, to_json_with_meta, HeteroGraph, SyntheticSpec};
use regnn::layers::{Backbone, Checkpoint, GraphContext, Model, ModelConfig, ParamKind};
use regnn::optim::{random_trace, verify_scaling_identity, OptimizerKind};
use regnn::proofs::{standard_suite, EquivalenceReport};
use regnn::relemb::{Normalization, SelfLoopMode};
use regnn::train::{
    clustering_metrics, evaluate_f1, gcn_degeneration_deviation, gradient_check, kmeans, train, TrainConfig,
};

#[derive(Parser)]
#[command(name = "regnn", version, about = "Relation-embedding GNNs on heterogeneous graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic heterogeneous graph.
    Gen(GenArgs),
    /// Train a model and write checkpoint, report and curve.
    Train(TrainArgs),
    /// Score a checkpoint: test F1 and clustering of the embeddings.
    Eval(EvalArgs),
    /// Run the optimizer, gradient and construction checks.
    Verify(VerifyArgs),
    /// Dump the learned relation and self-loop weights as CSV.
    InspectWeights(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator settings (JSON); the skewed-homophily preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output graph file.
    #[arg(long)]
    out: PathBuf,
    /// Skip adding reverse relations.
    #[arg(long)]
    no_reverse: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Row,
    Sym,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelfLoopArg {
    Embedded,
    Identity,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Regcn,
    Resgc,
    Regin,
    Gtn,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, value_enum)]
    backbone: Option<BackboneArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long, value_enum)]
    selfloop: Option<SelfLoopArg>,
    #[arg(long)]
    freeze_relations: bool,
    #[arg(long)]
    freeze_selfloops: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Run settings (JSON with optional `model` and `train` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// K-Means seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the scores to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the summary to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Problems with what the caller handed us: missing files, bad JSON, bad
/// values. They exit with the usage code.
#[derive(Debug)]
struct InputError(String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input<T, E: fmt::Display>(r: std::result::Result<T, E>, what: impl fmt::Display) -> Result<T> {
    r.map_err(|e| InputError(format!("{what}: {e}")).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = input(fs::read_to_string(path), format_args!("cannot read {}", path.display()))?;
    input(serde_json::from_str(&text), format_args!("malformed {}", path.display()))
}

fn read_graph(path: &Path) -> Result<HeteroGraph> {
    input(load_graph(path), format_args!("cannot load graph {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn apply_flags(cfg: &mut ModelConfig, flags: &ModelFlags) {
    if let Some(b) = flags.backbone {
        cfg.backbone = match b {
            BackboneArg::Regcn => Backbone::Regcn,
            BackboneArg::Resgc => Backbone::Resgc,
            BackboneArg::Regin => Backbone::Regin,
            BackboneArg::Gtn => Backbone::Gtn,
        };
    }
    if let Some(l) = flags.lambda {
        cfg.lambda = l;
    }
    if let Some(n) = flags.norm {
        cfg.norm = match n {
            NormArg::Row => Normalization::Row,
            NormArg::Sym => Normalization::Symmetric,
        };
    }
    if let Some(s) = flags.selfloop {
        cfg.self_loops = match s {
            SelfLoopArg::Embedded => SelfLoopMode::Embedded,
            SelfLoopArg::Identity => SelfLoopMode::Identity,
            SelfLoopArg::None => SelfLoopMode::None,
        };
    }
    cfg.freeze_relations |= flags.freeze_relations;
    cfg.freeze_self_loops |= flags.freeze_selfloops;
}

fn header(seed: u64, config: &impl Serialize) -> Result<String> {
    Ok(format!("# seed={seed} config={}\n", serde_json::to_string(config)?))
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let mut spec = match &args.config {
        Some(path) => read_json::<SyntheticSpec>(path)?,
        None => SyntheticSpec::skewed_homophily(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    info!("generator settings: {}", serde_json::to_string(&spec)?);
    let mut g = input(generate_synthetic(&spec, spec.seed), "generation failed")?;
    if !args.no_reverse {
        g = g.add_reverse_relations();
    }
    let meta = json!({ "seed": spec.seed, "generator": spec, "reverse_relations": !args.no_reverse });
    write(&args.out, &to_json_with_meta(&g, Some(meta))?)?;
    info!("wrote {} nodes, {} relations to {}", g.num_nodes(), g.num_relations(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut run = match &args.config {
        Some(path) => read_json::<RunConfig>(path)?,
        None => RunConfig::default(),
    };
    apply_flags(&mut run.model, &args.model);
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    input(run.model.validate(), "invalid model settings")?;
    input(run.train.validate(), "invalid training settings")?;
    info!("resolved config: {}", serde_json::to_string(&run)?);

    let g = read_graph(&args.graph)?;
    let (model, report) = train(&run.model, &g, &run.train)?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let ctx = GraphContext::new(&g)?;
    model.checkpoint(&ctx, run.train.seed).save(args.out.join("checkpoint.json"))?;
    write(&args.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    let curve = header(run.train.seed, &run)? + &report.curve_csv();
    write(&args.out.join("curve.csv"), &curve)?;
    write(
        &args.out.join("timing.json"),
        &serde_json::to_string(&json!({
            "seed": run.train.seed,
            "config": run,
            "wall_clock_seconds": report.wall_clock_seconds,
        }))?,
    )?;
    info!(
        "best epoch {} of {}, valid micro-F1 {:.4}, test micro-F1 {:?}",
        report.best_epoch,
        report.epochs.len(),
        report.best_valid_micro_f1,
        report.test_micro_f1
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let g = read_graph(&args.graph)?;
    let ckpt = input(Checkpoint::load(&args.checkpoint), format_args!("cannot load {}", args.checkpoint.display()))?;
    info!("checkpoint config: {} (seed {})", serde_json::to_string(&ckpt.config)?, ckpt.seed);
    let ctx = input(GraphContext::new(&g), "graph has no labelled target type")?;
    let model = input(Model::from_checkpoint(&ckpt, &ctx), "checkpoint does not fit the graph")?;
    let mask: Vec<usize> = match g.splits() {
        Some(s) if !s.test.is_empty() => s.test.clone(),
        _ => (0..ctx.labels.len()).collect(),
    };
    let (logits, emb) = model.predict(&ctx)?;
    let (macro_f1, micro_f1) = evaluate_f1(&logits, &ctx.labels, &mask)?;
    let test_emb = emb.select_rows(&mask);
    let labels: Vec<usize> = mask.iter().map(|&i| ctx.labels[i]).collect();
    let clusters = kmeans(&test_emb, ctx.num_classes.min(mask.len()), 10, args.seed)?;
    let (nmi, ari) = clustering_metrics(&clusters.assignments, &labels)?;
    let scores = json!({
        "seed": args.seed,
        "checkpoint_seed": ckpt.seed,
        "config": ckpt.config,
        "nodes": mask.len(),
        "macro_f1": macro_f1,
        "micro_f1": micro_f1,
        "nmi": nmi,
        "ari": ari,
    });
    let text = serde_json::to_string_pretty(&scores)?;
    println!("{text}");
    if let Some(out) = &args.out {
        write(out, &text)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ScalingSummary {
    kind: OptimizerKind,
    lambda: f64,
    traces: usize,
    steps: usize,
    max_rel_deviation: f64,
    passed: bool,
}

#[derive(Serialize)]
struct NumericCheck {
    name: String,
    value: f64,
    tolerance: f64,
    passed: bool,
}

fn scaling_checks(seed: u64) -> Result<Vec<ScalingSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (traces, steps, lambda) = (100, 50, 100.0);
    let mut out = Vec::new();
    for kind in OptimizerKind::ALL {
        let mut worst = 0.0f64;
        let mut passed = true;
        for _ in 0..traces {
            let trace = random_trace(&mut rng, steps, 4);
            let r = verify_scaling_identity(kind, lambda, &trace, 1e-3, 0.0)?;
            worst = worst.max(r.max_rel_deviation);
            passed &= r.passed;
        }
        out.push(ScalingSummary {
            kind,
            lambda,
            traces,
            steps,
            max_rel_deviation: worst,
            passed,
        });
    }
    Ok(out)
}

fn model_checks(seed: u64) -> Result<Vec<NumericCheck>> {
    let spec = SyntheticSpec {
        node_types: vec![
            regnn::hgraph::SyntheticType {
                name: "P".into(),
                count: 12,
                features: true,
                separation: None,
            },
            regnn::hgraph::SyntheticType {
                name: "A".into(),
                count: 6,
                features: false,
                separation: None,
            },
        ],
        target_type: "P".into(),
        num_classes: 3,
        relations: vec![
            regnn::hgraph::SyntheticRelation {
                name: "A-P".into(),
                src: "A".into(),
                dst: "P".into(),
                num_edges: 20,
                homophily: 0.8,
            },
            regnn::hgraph::SyntheticRelation {
                name: "P-P".into(),
                src: "P".into(),
                dst: "P".into(),
                num_edges: 15,
                homophily: 0.5,
            },
        ],
        feature_dim: 4,
        separation: 1.0,
        noise: 0.5,
        seed,
    };
    let g = generate_synthetic(&spec, seed)?.add_reverse_relations();
    let mut out = Vec::new();
    for norm in [Normalization::Row, Normalization::Symmetric] {
        let cfg = ModelConfig {
            layers: 2,
            hidden: 6,
            norm,
            ..ModelConfig::default()
        };
        let dev = gcn_degeneration_deviation(&g, &cfg, seed)?;
        out.push(NumericCheck {
            name: format!("unit relation weights reduce to GCN ({norm:?} normalization)"),
            value: dev,
            tolerance: 1e-12,
            passed: dev < 1e-12,
        });
    }
    let ctx = GraphContext::new(&g)?;
    let mask: Vec<usize> = (0..ctx.labels.len()).collect();
    for backbone in [Backbone::Regcn, Backbone::Resgc, Backbone::Regin, Backbone::Gtn] {
        let cfg = ModelConfig {
            backbone,
            layers: 2,
            hidden: 5,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &ctx, seed)?;
        let worst = gradient_check(&model, &ctx, &mask, 1e-6)?
            .into_iter()
            .map(|(_, c)| c.max_rel_error)
            .fold(0.0, f64::max);
        out.push(NumericCheck {
            name: format!("{backbone:?} gradients against central differences"),
            value: worst,
            tolerance: 1e-4,
            passed: worst < 1e-4,
        });
    }
    Ok(out)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    info!("verify seed {}", args.seed);
    let scaling = scaling_checks(args.seed)?;
    let proofs: Vec<EquivalenceReport> = standard_suite(args.seed)?;
    let numeric = model_checks(args.seed)?;
    let passed = scaling.iter().all(|s| s.passed)
        && proofs.iter().all(|p| !p.failed())
        && numeric.iter().all(|n| n.passed);
    let summary = json!({
        "seed": args.seed,
        "passed": passed,
        "optimizer_scaling": scaling,
        "constructions": proofs,
        "model": numeric,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    println!("{text}");
    if let Some(out) = &args.out {
        write(out, &text)?;
    }
    for p in proofs.iter().filter(|p| p.failed()) {
        log::warn!("failed: {} (deviation {:e})", p.construction, p.max_abs_deviation);
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_inspect(args: InspectArgs) -> Result<ExitCode> {
    let ckpt = input(Checkpoint::load(&args.checkpoint), format_args!("cannot load {}", args.checkpoint.display()))?;
    let lambda = ckpt.config.lambda;
    let mut csv = header(ckpt.seed, &ckpt.config)?;
    csv.push_str("layer,kind,name,alpha\n");
    for p in &ckpt.params {
        let (kind, names) = match p.kind {
            ParamKind::RelationEmbedding => ("relation", &ckpt.relation_names),
            ParamKind::SelfLoopEmbedding => ("selfloop", &ckpt.type_names),
            _ => continue,
        };
        for (name, e) in names.iter().zip(p.value.data()) {
            csv.push_str(&format!("{},{kind},{name},{}\n", p.layer.unwrap_or(0), lambda * e));
        }
    }
    match &args.out {
        Some(out) => write(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version print to stdout and succeed
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::InspectWeights(a) => cmd_inspect(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
