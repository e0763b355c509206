//! `diam`: generate data, train, evaluate and score accounts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diam_core::gradcheck::{self, GradcheckConfig};
use diam_core::ingest::{split, subsample_illicit, Dataset, SplitAssignment, SplitKind};
use diam_core::metrics::{evaluate, DEFAULT_THRESHOLD};
use diam_core::model::Ablation;
use diam_core::synth::{self, SynthConfig};
use diam_core::train::{self, write_history, Checkpoint, TrainConfig};
use diam_core::{Direction, NodeId};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const HISTORY_FILE: &str = "history.csv";
const SPLIT_FILE: &str = "split.csv";

#[derive(Parser)]
#[command(name = "diam", version, about = "Illicit-account detection on transaction multigraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic transaction graph.
    GenSynth(GenSynthArgs),
    /// Load a dataset directory and print a summary.
    IngestCheck(DataArg),
    /// Train a model and write checkpoint, history and split files.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Write illicit probabilities for nodes.
    Predict(PredictArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory (edges.csv, optional nodes.csv and labels.csv).
    #[arg(long, env = "DIAM_DATA_DIR")]
    data: PathBuf,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    normal: Option<usize>,
    #[arg(long)]
    illicit: Option<usize>,
    #[arg(long)]
    mean_degree: Option<f64>,
    #[arg(long)]
    attr_dim: Option<usize>,
    /// Received / sent amount ratio of illicit accounts.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    in_skew: Option<f64>,
    #[arg(long)]
    camouflage: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Flat TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated, nearest hop first.
    #[arg(long, value_delimiter = ',')]
    fanouts: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, no_attention or no_mgd.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    standardize: Option<bool>,
    #[arg(long)]
    full_neighborhood: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Existing split file (node,split) instead of a fresh stratified split.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Downsample illicit training nodes to this fraction of the training set.
    #[arg(long)]
    illicit_ratio: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: SplitKind,
    /// Split file; defaults to split.csv next to the checkpoint.
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Report CSV; defaults to eval_<split>.csv next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    full_neighborhood: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated node ids; all nodes when omitted.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<String>>,
    /// Output CSV (node,probability); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    full_neighborhood: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 100)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long)]
    ablation: Option<Ablation>,
}

/// Bad flag combinations detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Gradient check finished but some coordinates were off.
#[derive(Debug)]
struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<diam_core::Error>() {
        Some(diam_core::Error::Argument(_)) => 1,
        Some(e) if e.is_numerical_fault() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    diam_core::alloc::retain_freed_memory();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::IngestCheck(a) => ingest_check(&a.data),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_normal: a.normal.unwrap_or(d.n_normal),
        n_illicit: a.illicit.unwrap_or(d.n_illicit),
        mean_out_degree: a.mean_degree.unwrap_or(d.mean_out_degree),
        attr_dim: a.attr_dim.unwrap_or(d.attr_dim),
        ratio: a.ratio.unwrap_or(d.ratio),
        in_skew: a.in_skew.unwrap_or(d.in_skew),
        camouflage: a.camouflage.unwrap_or(d.camouflage),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let (graph, labels) = synth::generate(&cfg)?;
    let files = synth::write(&graph, &labels, &a.out)?;
    println!(
        "nodes {}  edges {}  illicit {}  normal {}",
        graph.node_count(),
        graph.edge_count(),
        labels.count_illicit(),
        labels.count_normal()
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn ingest_check(dir: &Path) -> Result<()> {
    let ds = load_dataset(dir)?;
    let g = &ds.graph;
    let mut pairs: Vec<(NodeId, NodeId)> = g.edges().iter().map(|e| (e.src, e.dst)).collect();
    pairs.sort_unstable();
    let parallel = pairs.chunk_by(|a, b| a == b).filter(|c| c.len() > 1).count();
    let isolated = (0..g.node_count())
        .filter(|&v| g.degree(v, Direction::In) + g.degree(v, Direction::Out) == 0)
        .count();
    println!("schema          {:?}", ds.schema);
    println!("nodes           {}", g.node_count());
    println!("edges           {}", g.edge_count());
    println!("attributes      {}", g.attr_dim());
    println!("max degree      {}", g.max_degree());
    println!("parallel pairs  {parallel}");
    println!("isolated nodes  {isolated}");
    println!(
        "labels          {} ({} illicit, {} normal)",
        ds.labels.len(),
        ds.labels.count_illicit(),
        ds.labels.count_normal()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| UsageError(format!("config file {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag.clone() {
                cfg.$field = v;
            }
        };
    }
    set!(a.hidden, hidden);
    set!(a.layers, layers);
    set!(a.t_max, t_max);
    set!(a.lr, learning_rate);
    set!(a.dropout, dropout);
    set!(a.batch_size, batch_size);
    set!(a.epochs, epochs);
    set!(a.fanouts, fanouts);
    set!(a.seed, seed);
    set!(a.ablation, ablation);
    set!(a.standardize, standardize);
    set!(a.workers, workers);
    if a.full_neighborhood {
        cfg.full_neighborhood = true;
    }
    // a changed layer count without explicit fan-outs keeps the defaults' shape
    if a.fanouts.is_none() && cfg.fanouts.len() != cfg.layers {
        let fill = cfg.fanouts.last().copied().unwrap_or(10);
        cfg.fanouts.resize(cfg.layers, fill);
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let ds = load_dataset(&a.data.data)?;
    if ds.labels.is_empty() {
        bail!(diam_core::Error::Label("dataset has no labels.csv".into()));
    }
    let mut assignment = match &a.split {
        Some(p) => SplitAssignment::load(p, &ds.ids)?,
        None => split(&ds.labels, cfg.seed)?,
    };
    if let Some(r) = a.illicit_ratio {
        assignment = subsample_illicit(&assignment, &ds.labels, r, cfg.seed)?;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let history_path = a.out.join(HISTORY_FILE);
    assignment.write(&a.out.join(SPLIT_FILE), &ds.ids)?;

    let mut history = Vec::new();
    let outcome = train::train(&cfg, &ds.graph, &ds.labels, &assignment, |rec, best| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val f1 {:.4}  auc {}  {:.1}s{}",
            rec.epoch,
            rec.loss,
            rec.val.f1,
            rec.val.auc.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into()),
            rec.seconds,
            if best.is_some() { "  *" } else { "" }
        );
        if let Some(c) = best {
            c.save(&ckpt_path)?;
        }
        history.push(rec.clone());
        write_history(&history_path, &history)
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) if e.is_numerical_fault() && ckpt_path.exists() => {
            return Err(anyhow::Error::new(e).context(format!(
                "training aborted; last good checkpoint kept at {}",
                ckpt_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    if !assignment.test.is_empty() {
        let report = train::evaluate_nodes(
            &outcome.best.params,
            &outcome.prepared,
            &ds.labels,
            &assignment.test,
            &cfg,
        )?;
        eprintln!(
            "best epoch {} (val f1 {:.4}); test f1 {:.4}  auc {}",
            outcome.best.epoch,
            outcome.best.val_f1,
            report.f1,
            report.auc.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
        );
    }
    println!("{}", ckpt_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path, full: bool, workers: Option<usize>) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::load(path)?;
    if full {
        ckpt.config.full_neighborhood = true;
    }
    if let Some(w) = workers {
        if w == 0 {
            return Err(UsageError("workers must be at least 1".into()).into());
        }
        ckpt.config.workers = w;
    }
    Ok(ckpt)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint, a.full_neighborhood, a.workers)?;
    let ds = load_dataset(&a.data.data)?;
    let split_path = a.split_file.clone().unwrap_or_else(|| sibling(&a.checkpoint, SPLIT_FILE));
    if !split_path.exists() {
        bail!(diam_core::Error::Split(format!(
            "split file {} not found",
            split_path.display()
        )));
    }
    let assignment = SplitAssignment::load(&split_path, &ds.ids)?;
    let nodes = assignment.get(a.split);
    if nodes.is_empty() {
        bail!(diam_core::Error::Split(format!("split '{}' is empty", a.split.as_str())));
    }
    let labels: Vec<bool> = nodes
        .iter()
        .map(|&v| {
            ds.labels
                .get(v)
                .ok_or_else(|| diam_core::Error::Split(format!("node '{}' has no label", ds.ids.name(v))))
        })
        .collect::<Result<_, _>>()?;
    let probs = train::predict(&ckpt, &ds.graph, nodes)?;
    let report = evaluate(&probs, &labels, DEFAULT_THRESHOLD)?;
    let out = a
        .out
        .unwrap_or_else(|| sibling(&a.checkpoint, &format!("eval_{}.csv", a.split.as_str())));
    report.write_csv(&out)?;
    println!("split {} ({} nodes)\n{report}", a.split.as_str(), nodes.len());
    println!("wrote {}", out.display());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint, a.full_neighborhood, a.workers)?;
    let ds = load_dataset(&a.data.data)?;
    let nodes: Vec<NodeId> = match &a.nodes {
        Some(names) => names
            .iter()
            .map(|n| {
                ds.ids
                    .get(n)
                    .ok_or_else(|| UsageError(format!("unknown node '{n}'")))
            })
            .collect::<Result<_, _>>()?,
        None => (0..ds.graph.node_count()).collect(),
    };
    let probs = train::predict(&ckpt, &ds.graph, &nodes)?;
    let mut text = String::from("node,probability\n");
    for (&v, p) in nodes.iter().zip(&probs) {
        writeln!(text, "{},{p}", ds.ids.name(v))?;
    }
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    if a.coords == 0 {
        return Err(UsageError("--coords must be at least 1".into()).into());
    }
    let cfg = GradcheckConfig {
        seed: a.seed,
        tolerance: a.tolerance,
        coords_per_block: a.coords,
        step: a.step,
        ablation: a.ablation.unwrap_or_default(),
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    let failures = report.failures().count();
    println!(
        "checked {} coordinates in {} blocks; max relative error {:.3e} (tolerance {:.1e})",
        report.checks.len(),
        report.blocks,
        report.max_rel_error(),
        report.tolerance
    );
    if failures == 0 {
        println!("PASS");
        return Ok(());
    }
    println!("FAIL: {failures} coordinates beyond tolerance; worst offenders:");
    for c in report.worst(10) {
        println!(
            "  {}[{}]  analytic {:.6e}  numeric {:.6e}  rel {:.3e}",
            c.block, c.index, c.analytic, c.numeric, c.rel_error
        );
    }
    Err(GradcheckFailed.into())
}
