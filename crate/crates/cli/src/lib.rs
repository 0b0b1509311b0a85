//! `scan` command line: synthetic data, pre-training, embedding, mining,
//! evaluation and retrieval over the binary file formats of `scan_core`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use scan_core::data::{self, SyntheticSpec, VectorDataset};
use scan_core::encoder::{self, forward};
use scan_core::evaluation::{self, LinearProbeConfig};
use scan_core::mining::{self, mine_fast};
use scan_core::trainer::{self, Mode, TrainConfig};
use scan_core::EmbeddingMatrix;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "scan", version, about = "Neighborhood-supervised contrastive pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic class/mode benchmark as train.scnv (+ test.scnv).
    GenData(GenData),
    /// Pre-train a momentum encoder pair and write a checkpoint.
    Pretrain(Pretrain),
    /// Embed a dataset with a checkpoint's encoder.
    Embed(Embed),
    /// Mine top-k same-class appearance neighbors into a table.
    Mine(Mine),
    /// k-NN / linear probes and retrieval purity.
    Eval(Eval),
    /// Print the top-k neighbors of one query.
    Retrieve(Retrieve),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    modes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    per_mode: usize,
    /// Extra samples per mode written to test.scnv; 0 skips the file.
    #[arg(long, default_value_t = 50)]
    holdout_per_mode: usize,
    #[arg(long)]
    class_radius: Option<f64>,
    #[arg(long)]
    mode_radius: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Moco,
    Scan,
    Scl,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Neighbor table (required in scan mode).
    #[arg(long)]
    neighbors: Option<PathBuf>,
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Neighbors per anchor.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    bank: Option<usize>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Branch {
    Query,
    Key,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Layer {
    Final,
    Penultimate,
}

#[derive(Args, Debug)]
struct Embed {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "query")]
    encoder: Branch,
    /// Final normalized output, or the normalized last hidden layer.
    #[arg(long, value_enum, default_value = "final")]
    layer: Layer,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AppearanceSource {
    BootstrapCheckpoint,
    Raw,
}

#[derive(Args, Debug)]
struct Mine {
    /// Dataset supplying class labels (and raw features).
    #[arg(long)]
    data: PathBuf,
    /// Appearance embeddings of the dataset, from `embed`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bootstrap-checkpoint")]
    appearance_source: AppearanceSource,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Probe {
    Knn,
    Linear,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    train_embeddings: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_embeddings: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    /// Repeatable; defaults to knn.
    #[arg(long, value_enum)]
    probe: Vec<Probe>,
    #[arg(long, default_value_t = evaluation::KNN_DEFAULT_K)]
    knn_k: usize,
    #[arg(long, default_value_t = evaluation::RETRIEVAL_DEFAULT_K)]
    retrieval_k: usize,
    /// Per-query retrieval CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Summary JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Retrieve {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    query: usize,
    #[arg(long, default_value_t = evaluation::RETRIEVAL_DEFAULT_K)]
    k: usize,
    #[command(flatten)]
    common: Common,
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

type Outcome = std::result::Result<(), Failure>;

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let workers = match &cli.command {
        Command::GenData(a) => a.common.workers,
        Command::Pretrain(a) => a.common.workers,
        Command::Embed(a) => a.common.workers,
        Command::Mine(a) => a.common.workers,
        Command::Eval(a) => a.common.workers,
        Command::Retrieve(a) => a.common.workers,
    };
    if workers == 0 {
        eprintln!("error: --workers must be >= 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_DATA;
        }
    };
    let result = pool.install(|| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Embed(a) => embed(a),
        Command::Mine(a) => mine(a),
        Command::Eval(a) => eval(a),
        Command::Retrieve(a) => retrieve(a),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

fn read_dataset(p: &Path) -> Result<VectorDataset> {
    data::read_dataset(p).with_context(|| format!("reading dataset {}", p.display()))
}

fn read_embeddings(p: &Path) -> Result<EmbeddingMatrix> {
    data::read_embeddings(p)
        .and_then(|m| m.assume_normalized())
        .with_context(|| format!("reading embeddings {}", p.display()))
}

fn gen_data(a: GenData) -> Outcome {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        classes: a.classes,
        modes_per_class: a.modes,
        dim: a.dim,
        per_mode: a.per_mode,
        class_radius: a.class_radius.unwrap_or(d.class_radius),
        mode_radius: a.mode_radius.unwrap_or(d.mode_radius),
        noise: a.noise.unwrap_or(d.noise),
        seed: a.common.seed,
    };
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (train, test) = data::generate_synthetic_split(&spec, a.holdout_per_mode)
        .context("generating dataset")?;
    let train_path = a.out.join("train.scnv");
    data::write_dataset(&train, &train_path)
        .with_context(|| format!("writing {}", train_path.display()))?;
    println!("wrote {} ({} x {})", train_path.display(), train.len(), train.dim());
    if a.holdout_per_mode > 0 {
        let test_path = a.out.join("test.scnv");
        data::write_dataset(&test, &test_path)
            .with_context(|| format!("writing {}", test_path.display()))?;
        println!("wrote {} ({} x {})", test_path.display(), test.len(), test.dim());
    }
    Ok(())
}

fn build_config(a: &Pretrain) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))?;
        if let Err(e) = cfg.apply_text(&text) {
            return usage(format!("{}: {e}", p.display()));
        }
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for o in &a.overrides {
        match o.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => return usage(format!("--set expects KEY=VALUE, got {o:?}")),
        }
    }
    let flag = |key: &str, v: Option<String>| v.map(|v| (key.to_string(), v));
    pairs.extend(
        [
            flag("neighbors", a.k.map(|v| v.to_string())),
            flag("queries", a.queries.map(|v| v.to_string())),
            flag("epochs", a.epochs.map(|v| v.to_string())),
            flag("lr", a.lr.map(|v| v.to_string())),
            flag("temperature", a.temperature.map(|v| v.to_string())),
            flag("bank", a.bank.map(|v| v.to_string())),
        ]
        .into_iter()
        .flatten(),
    );
    for (k, v) in pairs {
        if let Err(e) = cfg.set(&k, &v) {
            return usage(e.to_string());
        }
    }
    cfg.mode = match a.mode {
        ModeArg::Moco => Mode::Moco,
        ModeArg::Scan => Mode::Scan,
        ModeArg::Scl => Mode::Scl,
    };
    cfg.seed = a.common.seed;
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    Ok(cfg)
}

fn pretrain(a: Pretrain) -> Outcome {
    let cfg = build_config(&a)?;
    if matches!(cfg.mode, Mode::Scan) && a.neighbors.is_none() {
        return usage("--mode scan requires --neighbors <table>");
    }
    let ds = read_dataset(&a.data)?;
    let table = match (&a.neighbors, cfg.mode) {
        (Some(p), Mode::Scan) => Some(
            mining::load_table(p).with_context(|| format!("reading table {}", p.display()))?,
        ),
        _ => None,
    };
    let out = trainer::pretrain(&ds, table.as_ref(), &cfg).context("pre-training")?;
    for e in &out.log {
        eprintln!(
            "epoch {:4}  loss {:.5}  lr {:.5}  bank {}  {:.1}s",
            e.epoch, e.mean_loss, e.lr, e.bank_occupancy, e.wall_seconds
        );
    }
    encoder::save_checkpoint(&out.pair, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.log {
        fs::write(p, trainer::log_to_csv(&out.log))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn embed(a: Embed) -> Outcome {
    let pair = encoder::load_checkpoint(&a.checkpoint)
        .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let ds = read_dataset(&a.data)?;
    let params = match a.encoder {
        Branch::Query => &pair.query,
        Branch::Key => &pair.key,
    };
    let emb = match a.layer {
        Layer::Final => forward(params, &ds.to_matrix()).map(|(e, _)| e),
        Layer::Penultimate => encoder::penultimate_features(params, &ds.to_matrix()),
    }
    .context("embedding")?;
    data::write_embeddings(&emb, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} ({} x {})", a.out.display(), emb.rows(), emb.dim());
    Ok(())
}

fn mine(a: Mine) -> Outcome {
    let ds = read_dataset(&a.data)?;
    let appearance = match (a.appearance_source, &a.embeddings) {
        (AppearanceSource::BootstrapCheckpoint, Some(p)) => read_embeddings(p)?,
        (AppearanceSource::BootstrapCheckpoint, None) => {
            return usage("--appearance-source bootstrap-checkpoint requires --embeddings");
        }
        (AppearanceSource::Raw, _) => ds
            .to_matrix()
            .l2_normalize_rows()
            .context("normalizing raw features")?,
    };
    let workers = a.common.workers;
    let table = mine_fast(&appearance, &ds.label_vector(), a.k, workers).context("mining")?;
    mining::save_table(&table, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let short = (0..table.len()).filter(|&q| table.shortfall(q) > 0).count();
    println!("wrote {} ({} queries, k = {}, {short} short)", a.out.display(), table.len(), a.k);
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    train_rows: usize,
    test_rows: usize,
    knn_k: Option<usize>,
    knn_accuracy: Option<f64>,
    linear_accuracy: Option<f64>,
    linear_converged: Option<bool>,
    linear_degenerate: Option<bool>,
    linear_iterations: Option<usize>,
    retrieval_k: usize,
    class_purity: f64,
    mode_purity: Option<f64>,
    joint_purity: Option<f64>,
}

fn eval(a: Eval) -> Outcome {
    let train_ds = read_dataset(&a.train_data)?;
    let test_ds = read_dataset(&a.test_data)?;
    let train = read_embeddings(&a.train_embeddings)?;
    let test = read_embeddings(&a.test_embeddings)?;
    let probes = if a.probe.is_empty() { vec![Probe::Knn] } else { a.probe.clone() };

    let mut s = EvalSummary {
        train_rows: train.rows(),
        test_rows: test.rows(),
        knn_k: None,
        knn_accuracy: None,
        linear_accuracy: None,
        linear_converged: None,
        linear_degenerate: None,
        linear_iterations: None,
        retrieval_k: a.retrieval_k,
        class_purity: 0.0,
        mode_purity: None,
        joint_purity: None,
    };
    if probes.contains(&Probe::Knn) {
        let acc = evaluation::knn_probe(&train, train_ds.labels(), &test, test_ds.labels(), a.knn_k)
            .context("k-NN probe")?;
        println!("knn@{} accuracy {acc:.4}", a.knn_k);
        s.knn_k = Some(a.knn_k);
        s.knn_accuracy = Some(acc);
    }
    if probes.contains(&Probe::Linear) {
        let r = evaluation::linear_probe(
            &train,
            train_ds.labels(),
            &test,
            test_ds.labels(),
            &LinearProbeConfig::default(),
        )
        .context("linear probe")?;
        println!(
            "linear accuracy {:.4} ({} iterations{})",
            r.accuracy,
            r.iterations,
            if r.converged { "" } else { ", not converged" }
        );
        s.linear_accuracy = Some(r.accuracy);
        s.linear_converged = Some(r.converged);
        s.linear_degenerate = Some(r.degenerate);
        s.linear_iterations = Some(r.iterations);
    }
    let queries: Vec<usize> = (0..test.rows()).collect();
    let report = evaluation::retrieval_report(&test, &test_ds.label_vector(), &queries, a.retrieval_k)
        .context("retrieval")?;
    println!("retrieval@{} class purity {:.4}", a.retrieval_k, report.mean_class_purity);
    if let (Some(m), Some(j)) = (report.mean_mode_purity, report.mean_joint_purity) {
        println!("retrieval@{} mode purity {m:.4} joint purity {j:.4}", a.retrieval_k);
    }
    s.class_purity = report.mean_class_purity;
    s.mode_purity = report.mean_mode_purity;
    s.joint_purity = report.mean_joint_purity;
    if let Some(p) = &a.csv {
        fs::write(p, evaluation::report_to_csv(&report))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.json {
        let mut text = serde_json::to_string_pretty(&s).context("encoding summary")?;
        text.push('\n');
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn retrieve(a: Retrieve) -> Outcome {
    let ds = read_dataset(&a.data)?;
    let emb = read_embeddings(&a.embeddings)?;
    if a.query >= emb.rows() {
        return usage(format!("--query {} out of range for {} rows", a.query, emb.rows()));
    }
    let report = evaluation::retrieval_report(&emb, &ds.label_vector(), &[a.query], a.k)
        .context("retrieval")?;
    let modes = ds.modes();
    let show = |i: usize| match modes {
        Some(m) => format!("class {} mode {}", ds.labels()[i], m[i]),
        None => format!("class {}", ds.labels()[i]),
    };
    println!("query {}  {}", a.query, show(a.query));
    let q = emb.row(a.query);
    for (rank, &j) in report.rows[0].retrieved.iter().enumerate() {
        let cos = scan_core::embedding::dot(q, emb.row(j));
        println!("{:3}  {:6}  cos {:+.5}  {}", rank + 1, j, cos, show(j));
    }
    Ok(())
}
