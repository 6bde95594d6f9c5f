use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentcatch::dataset::{generate_with_margin, DEFAULT_LABEL_MARGIN};
use latentcatch::decoder::{evaluate, train};
use latentcatch::manifold::embed_dataset;
use latentcatch::runner::{write_batch, ArtifactPaths};
use latentcatch::suite::generate_suite;
use latentcatch::{
    batch_run, graph, run_scenario, Aabb, ArmModel, Dataset, Embedding, Error, ErrorClass, ManifoldConfig,
    Pipeline, Result, RunnerConfig, Scenario, ScenarioConfig, SuiteConfig, TrainHyper,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "latentcatch", version, about = "Latent-manifold catching pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample arm configurations and label them against random obstacles.
    GenData(Common),
    /// Diffusion-map embedding of a dataset.
    Embed(Common),
    /// Train the latent-to-joint decoder.
    TrainDecoder(Common),
    /// kNN planning graph over the safe latent nodes.
    BuildGraph(Common),
    /// One scenario; writes its trace CSV.
    Run(Common),
    /// A seeded scenario suite; writes traces, metrics.csv and summary.json.
    Batch(Common),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    n: usize,
    seed: u64,
    obstacle_box: Aabb,
    margin: f64,
    arm: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            n: 5000,
            seed: 42,
            obstacle_box: Aabb::default_obstacle_box(),
            margin: DEFAULT_LABEL_MARGIN,
            arm: None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct EmbedConfig {
    dataset: PathBuf,
    #[serde(default)]
    manifold: ManifoldConfig,
}

#[derive(Debug, Deserialize)]
struct TrainConfig {
    dataset: PathBuf,
    embedding: PathBuf,
    #[serde(default)]
    arm: Option<PathBuf>,
    #[serde(default)]
    hyper: TrainHyper,
}

#[derive(Debug, Deserialize)]
struct GraphConfig {
    dataset: PathBuf,
    embedding: PathBuf,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    8
}

#[derive(Debug, Deserialize)]
struct ScenarioEntry {
    scenario: Scenario,
    #[serde(default)]
    runner: RunnerConfig,
}

/// Either a generated suite or an explicit scenario list.
#[derive(Debug, Deserialize)]
struct BatchConfig {
    artifacts: ArtifactPaths,
    #[serde(default)]
    suite: SuiteConfig,
    #[serde(default)]
    scenarios: Option<Vec<ScenarioEntry>>,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn require_config(c: &Common) -> Result<&Path> {
    c.config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))
}

fn base_dir(config: Option<&Path>) -> PathBuf {
    config
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_artifacts(base: &Path, a: &mut ArtifactPaths) {
    for p in [&mut a.dataset, &mut a.embedding, &mut a.graph] {
        resolve(base, p);
    }
    for p in [a.arm.as_mut(), a.decoder.as_mut()].into_iter().flatten() {
        resolve(base, p);
    }
}

fn load_arm(base: &Path, arm: Option<PathBuf>) -> Result<ArmModel> {
    match arm {
        Some(mut p) => {
            resolve(base, &mut p);
            ArmModel::load(p)
        }
        None => Ok(ArmModel::panda()),
    }
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg: GenDataConfig = match &c.config {
        Some(p) => read_config(p)?,
        None => GenDataConfig::default(),
    };
    cfg.obstacle_box.validate()?;
    let model = load_arm(&base_dir(c.config.as_deref()), cfg.arm)?;
    let seed = c.seed.unwrap_or(cfg.seed);
    let ds = generate_with_margin(&model, cfg.n, &cfg.obstacle_box, seed, cfg.margin)?;
    ds.save(&c.out)?;
    let colliding = ds.samples.iter().filter(|s| s.collision).count();
    print(json!({"out": c.out, "samples": ds.len(), "colliding": colliding, "hash": ds.hash}));
    Ok(())
}

fn embed_cmd(c: &Common) -> Result<()> {
    let path = require_config(c)?;
    let mut cfg: EmbedConfig = read_config(path)?;
    resolve(&base_dir(Some(path)), &mut cfg.dataset);
    cfg.manifold.validate()?;
    if c.seed.is_some() {
        log::info!("embedding is deterministic; --seed has no effect");
    }
    let ds = Dataset::load(&cfg.dataset)?;
    let (_, emb) = embed_dataset(&ds, &cfg.manifold)?;
    emb.save(&c.out)?;
    print(json!({"out": c.out, "nodes": emb.len(), "eigenvalues": emb.eigenvalues, "hash": emb.hash}));
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let path = require_config(c)?;
    let mut cfg: TrainConfig = read_config(path)?;
    let base = base_dir(Some(path));
    resolve(&base, &mut cfg.dataset);
    resolve(&base, &mut cfg.embedding);
    if let Some(s) = c.seed {
        cfg.hyper.seed = s;
    }
    let model = load_arm(&base, cfg.arm)?;
    let ds = Dataset::load(&cfg.dataset)?;
    let emb = Embedding::load(&cfg.embedding)?;
    let (net, report) = train(&emb, &ds, &model, &cfg.hyper)?;
    net.save(&c.out)?;
    let q = evaluate(&net, &emb, &ds)?;
    print(json!({
        "out": c.out,
        "best_epoch": report.best_epoch,
        "train_loss": report.train_loss,
        "validation_loss": report.validation_loss,
        "median_error": q.median_error,
        "variance_ratio": q.variance_ratio,
        "hash": net.content_hash(),
    }));
    Ok(())
}

fn graph_cmd(c: &Common) -> Result<()> {
    let path = require_config(c)?;
    let mut cfg: GraphConfig = read_config(path)?;
    let base = base_dir(Some(path));
    resolve(&base, &mut cfg.dataset);
    resolve(&base, &mut cfg.embedding);
    if c.seed.is_some() {
        log::info!("graph build is deterministic; --seed has no effect");
    }
    let ds = Dataset::load(&cfg.dataset)?;
    let emb = Embedding::load(&cfg.embedding)?;
    let g = graph::build(&emb, &ds, cfg.k)?;
    g.save(&c.out)?;
    print(json!({
        "out": c.out,
        "nodes": g.len(),
        "giant": g.giant_nodes().count(),
        "hash": g.hash,
    }));
    Ok(())
}

fn run_cmd(c: &Common) -> Result<()> {
    let path = require_config(c)?;
    let mut cfg = ScenarioConfig::load(path)?;
    let mut artifacts = cfg
        .artifacts
        .take()
        .ok_or_else(|| Error::Config(format!("{}: no artifacts section", path.display())))?;
    resolve_artifacts(&base_dir(Some(path)), &mut artifacts);
    if let Some(s) = c.seed {
        cfg.runner.seed = s;
    }
    let p = Pipeline::load(&artifacts)?;
    let (trace, m) = run_scenario(&p, &cfg.scenario, &cfg.runner)?;
    trace.save(&c.out)?;
    print(json!({"out": c.out, "metrics": m}));
    Ok(())
}

fn batch_cmd(c: &Common) -> Result<()> {
    let path = require_config(c)?;
    let mut cfg: BatchConfig = read_config(path)?;
    resolve_artifacts(&base_dir(Some(path)), &mut cfg.artifacts);
    if let Some(s) = c.seed {
        cfg.suite.seed = s;
    }
    let p = Pipeline::load(&cfg.artifacts)?;
    let runs: Vec<(Scenario, RunnerConfig)> = match cfg.scenarios {
        Some(list) => list.into_iter().map(|e| (e.scenario, e.runner)).collect(),
        None => generate_suite(&p, &cfg.suite)?,
    };
    let res = batch_run(&p, &runs)?;
    write_batch(&c.out, &runs, &res)?;
    print(json!({"out": c.out, "summary": res.summary}));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::GenData(c) => gen_data(c),
        Command::Embed(c) => embed_cmd(c),
        Command::TrainDecoder(c) => train_cmd(c),
        Command::BuildGraph(c) => graph_cmd(c),
        Command::Run(c) => run_cmd(c),
        Command::Batch(c) => batch_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Config => ExitCode::from(2),
                ErrorClass::Numerical => ExitCode::from(3),
                ErrorClass::Other => ExitCode::from(1),
            }
        }
    }
}
