//! Command-line front end. Every command writes under one output root:
//! `dataset/` for generated data and `runs/<mode>/<seed>/` per training run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::contrast::ContrastConfig;
use crate::eval::{write_embeddings_csv, EvalReport, SplitReport};
use crate::graph::{file_digest, load_dataset, save_dataset, save_scores, scores_to_dot, ScoreRecord, SplitName};
use crate::motif::{generate, GenConfig};
use crate::trainer::{metrics_csv, Checkpoint, Mode, RunConfig, TrainConfig, TrainError, Trainer};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_MISSING: u8 = 4;

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "iglab", version, about = "Invariant graph learning lab")]
pub struct Cli {
    /// Output root.
    #[arg(long, global = true, env = "IGLAB_OUT", default_value = "iglab-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a motif dataset into `<out>/dataset`.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one mode with one seed.
    Train {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every ablation mode over several seeds and tabulate results.
    Ablate {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// First seed; runs use `first_seed..first_seed + seeds`.
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Comma-separated subset of modes.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write per-node and per-edge scores (JSON, optional DOT files).
    ExportScores {
        #[command(flatten)]
        run: RunRef,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Also write DOT renderings for the first N graphs.
        #[arg(long, default_value_t = 0)]
        dot: usize,
    },
    /// Write projection-head embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        run: RunRef,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Re-evaluate a saved checkpoint on every split.
    Eval {
        #[command(flatten)]
        run: RunRef,
    },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory; defaults to `<out>/dataset`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `train.max_epoch`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RunRef {
    #[arg(long, default_value = "full")]
    pub mode: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// The run config file: one table per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub generator: GenConfig,
    pub train: TrainConfig,
    pub contrast: ContrastConfig,
}

impl LabConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| Failure::new(EXIT_MISSING, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Failure::new(EXIT_CONFIG, anyhow!("{}: {}", path.display(), e.message())))?;
        cfg.generator
            .validate()
            .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
        cfg.train.validate().map_err(|e| Failure::new(EXIT_CONFIG, e))?;
        cfg.contrast.validate().map_err(|e| Failure::new(EXIT_CONFIG, e))?;
        Ok(cfg)
    }
}

/// Files written by a command, with their digests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub dataset_digest: Option<String>,
    pub seeds: Vec<u64>,
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, dataset_digest: Option<String>, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            dataset_digest,
            seeds,
            files: BTreeMap::new(),
        }
    }

    fn record(&mut self, dir: &Path, name: &str) -> anyhow::Result<()> {
        let digest = file_digest(&dir.join(name))?;
        self.files.insert(name.to_string(), digest);
        Ok(())
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

pub fn dataset_dir(out: &Path, data: Option<&Path>) -> PathBuf {
    data.map_or_else(|| out.join("dataset"), Path::to_path_buf)
}

pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join("runs").join(mode.as_str()).join(seed.to_string())
}

fn parse_mode(s: &str) -> CliResult<Mode> {
    s.parse().map_err(|e: TrainError| Failure::new(EXIT_CONFIG, e))
}

fn load_data(dir: &Path) -> CliResult<(crate::graph::DatasetSplit, String)> {
    let path = dir.join("dataset.json");
    if !path.exists() {
        return Err(Failure::new(
            EXIT_MISSING,
            anyhow!("dataset not found at {}; run `generate` first", path.display()),
        ));
    }
    let data = load_dataset(&path).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let digest = file_digest(&path).map_err(anyhow::Error::from)?;
    Ok((data, digest))
}

fn load_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    let path = dir.join("ckpt.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        Failure::new(
            EXIT_MISSING,
            anyhow!("checkpoint not found at {}: {e}", path.display()),
        )
    })?;
    Checkpoint::from_json(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(|e| Failure::new(EXIT_CONFIG, e))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out;
    match cli.command {
        Command::Generate { config, seed } => cmd_generate(&out, &config, seed),
        Command::Train {
            common,
            mode,
            seed,
        } => {
            let mode = parse_mode(&mode)?;
            let (cfg, data_dir) = prepare(&out, &common)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let summary = train_one(&out, &data_dir, &cfg, mode, seed)?;
            println!(
                "{mode} seed {seed}: best epoch {}, val acc {:.4}, test acc {:.4}",
                summary.best_epoch, summary.val_accuracy, summary.test_accuracy
            );
            Ok(())
        }
        Command::Ablate {
            common,
            seeds,
            first_seed,
            modes,
            jobs,
        } => {
            let modes = match modes {
                Some(list) => list.iter().map(|m| parse_mode(m)).collect::<CliResult<Vec<_>>>()?,
                None => Mode::ALL.to_vec(),
            };
            let (cfg, data_dir) = prepare(&out, &common)?;
            let seeds: Vec<u64> = (first_seed..first_seed + seeds).collect();
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let table = ablate(&out, &data_dir, &cfg, &modes, &seeds, jobs)?;
            print!("{}", table.markdown());
            Ok(())
        }
        Command::ExportScores { run, split, dot } => cmd_export_scores(&out, &run, split, dot),
        Command::ExportEmbeddings { run, split } => cmd_export_embeddings(&out, &run, split),
        Command::Eval { run } => {
            let report = cmd_eval(&out, &run)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
            Ok(())
        }
    }
}

fn prepare(out: &Path, args: &RunArgs) -> CliResult<(LabConfig, PathBuf)> {
    let mut cfg = LabConfig::load(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.max_epoch = e;
        cfg.train.validate().map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    }
    Ok((cfg, dataset_dir(out, args.data.as_deref())))
}

fn cmd_generate(out: &Path, config: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = LabConfig::load(config)?.generator;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let split = generate(&cfg).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let dir = out.join("dataset");
    fs::create_dir_all(&dir).map_err(anyhow::Error::from)?;
    save_dataset(&split, &dir.join("dataset.json")).map_err(anyhow::Error::from)?;
    let digest = file_digest(&dir.join("dataset.json")).map_err(anyhow::Error::from)?;
    let mut manifest = RunManifest::new(
        "generate",
        serde_json::json!({
            "generator": cfg,
            "counts": {"train": split.train.len(), "val": split.val.len(), "test": split.test.len()},
        }),
        Some(digest.clone()),
        vec![cfg.seed],
    );
    manifest.record(&dir, "dataset.json")?;
    manifest.write(&dir)?;
    println!(
        "wrote {} graphs ({} / {} / {}) to {} [sha256 {digest}]",
        split.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

/// Headline numbers of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_auc: Option<f64>,
    pub test_worst_env: Option<f64>,
    pub test_alignment: Option<f64>,
}

/// Trains one run and writes `metrics.csv`, `ckpt.json` (best validation
/// epoch), `report.json`, and a manifest into its run directory.
pub fn train_one(out: &Path, data_dir: &Path, cfg: &LabConfig, mode: Mode, seed: u64) -> CliResult<RunSummary> {
    let (data, digest) = load_data(data_dir)?;
    let mut train = cfg.train.clone();
    train.seed = seed;
    let run_cfg = RunConfig {
        train,
        contrast: cfg.contrast.clone(),
        mode,
    };
    let dir = run_dir(out, mode, seed);
    fs::create_dir_all(&dir).map_err(anyhow::Error::from)?;
    let mut trainer = Trainer::new(&data, run_cfg.clone()).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let outcome = trainer.run(|r| {
        log::info!(
            "{mode}/{seed} epoch {} lr {:.2e} loss {:.4} (pred {:.4} sem {:.4} ins {:.4}) val {:.4} test {:.4}",
            r.epoch,
            r.lr,
            r.stats.loss_total,
            r.stats.loss_pred,
            r.stats.loss_sem,
            r.stats.loss_ins,
            r.val_metric,
            r.test_metric
        )
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Divergence {
            epoch,
            step,
            reason,
            last,
        }) => {
            let path = dir.join("last_finite.json");
            fs::write(&path, last.to_json()).map_err(anyhow::Error::from)?;
            return Err(Failure::new(
                EXIT_DIVERGED,
                anyhow!(
                    "training diverged at epoch {epoch}, step {step}: {reason}; last finite state saved to {}",
                    path.display()
                ),
            ));
        }
        Err(e) => return Err(Failure::new(1, e)),
    };
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.history)).map_err(anyhow::Error::from)?;
    fs::write(dir.join("ckpt.json"), outcome.best.to_json()).map_err(anyhow::Error::from)?;
    let model = outcome.best.model().map_err(anyhow::Error::from)?;
    let filter = mode.pipeline(&cfg.contrast).filter;
    let mut splits = BTreeMap::new();
    for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let graphs = data.split(name);
        if graphs.is_empty() {
            continue;
        }
        let r = crate::eval::evaluate(&model, graphs, filter).map_err(anyhow::Error::from)?;
        splits.insert(name.as_str().to_string(), r);
    }
    let report = EvalReport {
        mode: mode.as_str().to_string(),
        seed,
        best_epoch: outcome.best_epoch,
        config_hash: run_cfg.hash(),
        dataset_digest: Some(digest.clone()),
        splits,
    };
    write_json(&dir.join("report.json"), &report)?;
    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&run_cfg).map_err(anyhow::Error::from)?,
        Some(digest),
        vec![seed],
    );
    for f in ["metrics.csv", "ckpt.json", "report.json"] {
        manifest.record(&dir, f)?;
    }
    manifest.write(&dir)?;
    Ok(summarize(&report))
}

fn summarize(report: &EvalReport) -> RunSummary {
    let get = |s: &str| report.splits.get(s);
    let test: Option<&SplitReport> = get("test");
    RunSummary {
        mode: report.mode.parse().unwrap_or(Mode::Full),
        seed: report.seed,
        best_epoch: report.best_epoch,
        val_accuracy: get("val").map_or(f64::NAN, |r| r.accuracy),
        test_accuracy: test.map_or(f64::NAN, |r| r.accuracy),
        test_auc: test.and_then(|r| r.auc),
        test_worst_env: test.and_then(|r| r.worst_env_accuracy),
        test_alignment: test.and_then(|r| r.invariance_alignment),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").map_err(anyhow::Error::from)?;
    Ok(())
}

/// Seed-wise statistics of one mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub test_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub auc_mean: Option<f64>,
    pub worst_env_mean: Option<f64>,
    pub alignment_mean: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Directional checks: name and whether it held.
    pub checks: Vec<(String, bool)>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationTable {
    pub fn from_runs(seeds: Vec<u64>, runs: &[RunSummary]) -> Self {
        let mut rows = Vec::new();
        for mode in Mode::ALL {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == mode).collect();
            if mine.is_empty() {
                continue;
            }
            let acc: Vec<f64> = mine.iter().map(|r| r.test_accuracy).collect();
            let (mean, std) = mean_std(&acc);
            rows.push(AblationRow {
                mode,
                median: median(&acc),
                test_accuracy: acc,
                mean,
                std,
                auc_mean: mean_opt(mine.iter().map(|r| r.test_auc)),
                worst_env_mean: mean_opt(mine.iter().map(|r| r.test_worst_env)),
                alignment_mean: mean_opt(mine.iter().map(|r| r.test_alignment)),
            });
        }
        let med = |m: Mode| rows.iter().find(|r| r.mode == m).map(|r| r.median);
        let mut checks = Vec::new();
        if let Some(full) = med(Mode::Full) {
            for m in [Mode::S, Mode::I] {
                if let Some(x) = med(m) {
                    checks.push((format!("median full >= median {m}"), full >= x));
                }
            }
            if let Some(n) = med(Mode::N) {
                checks.push(("median full >= median N + 0.03".to_string(), full >= n + 0.03));
            }
        }
        Self { seeds, rows, checks }
    }

    pub fn markdown(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::from(
            "| mode | test acc (mean ± std) | test acc median | test AUC | worst env | alignment AUC |\n|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.2} ± {:.2} | {:.2} | {} | {} | {} |\n",
                r.mode,
                100.0 * r.mean,
                100.0 * r.std,
                100.0 * r.median,
                fmt(r.auc_mean),
                fmt(r.worst_env_mean),
                fmt(r.alignment_mean)
            ));
        }
        for (name, ok) in &self.checks {
            s.push_str(&format!("\n{}: {name}", if *ok { "PASS" } else { "FLAG" }));
        }
        if !self.checks.is_empty() {
            s.push('\n');
        }
        s
    }
}

/// Runs every (mode, seed) pair on a pool of `jobs` threads, then writes
/// `<out>/ablation/{table.md, table.json}`.
pub fn ablate(
    out: &Path,
    data_dir: &Path,
    cfg: &LabConfig,
    modes: &[Mode],
    seeds: &[u64],
    jobs: usize,
) -> CliResult<AblationTable> {
    let tasks: Vec<(Mode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(tasks.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(mode, seed)) = tasks.get(k) else { break };
                let r = train_one(out, data_dir, cfg, mode, seed);
                if let Ok(s) = &r {
                    log::info!("{mode}/{seed}: test acc {:.4}", s.test_accuracy);
                }
                results.lock().expect("no panics while locked").push((k, r));
            });
        }
    });
    let mut results = results.into_inner().expect("workers finished");
    results.sort_by_key(|(k, _)| *k);
    let mut runs = Vec::new();
    for (_, r) in results {
        runs.push(r?);
    }
    let table = AblationTable::from_runs(seeds.to_vec(), &runs);
    let dir = out.join("ablation");
    fs::create_dir_all(&dir).map_err(anyhow::Error::from)?;
    fs::write(dir.join("table.md"), table.markdown()).map_err(anyhow::Error::from)?;
    write_json(&dir.join("table.json"), &table)?;
    write_json(&dir.join("runs.json"), &runs)?;
    Ok(table)
}

fn open_run(out: &Path, run: &RunRef) -> CliResult<(Checkpoint, crate::graph::DatasetSplit, String, Mode)> {
    let mode = parse_mode(&run.mode)?;
    let ckpt = load_checkpoint(&run_dir(out, mode, run.seed))?;
    let (data, digest) = load_data(&dataset_dir(out, run.data.as_deref()))?;
    Ok((ckpt, data, digest, mode))
}

fn cmd_export_scores(out: &Path, run: &RunRef, split: SplitName, dot: usize) -> CliResult<()> {
    let (ckpt, data, _, mode) = open_run(out, run)?;
    let model = ckpt.model().map_err(anyhow::Error::from)?;
    let graphs = data.split(split);
    let filter = mode.pipeline(&ckpt.config.contrast).filter;
    let inf = model.infer(graphs, filter, 256).map_err(anyhow::Error::from)?;
    let records: Vec<ScoreRecord> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| ScoreRecord {
            graph_index: i,
            node_scores: inf.node_scores[i].clone(),
            edge_scores: inf.edge_scores[i].clone(),
            mask: g.invariance_mask.clone(),
        })
        .collect();
    let dir = run_dir(out, mode, run.seed);
    let path = dir.join(format!("scores_{}.json", split.as_str()));
    save_scores(&records, &path).map_err(anyhow::Error::from)?;
    if dot > 0 {
        let dot_dir = dir.join(format!("dot_{}", split.as_str()));
        fs::create_dir_all(&dot_dir).map_err(anyhow::Error::from)?;
        for (g, rec) in graphs.iter().zip(&records).take(dot) {
            fs::write(dot_dir.join(format!("graph_{}.dot", rec.graph_index)), scores_to_dot(g, rec))
                .map_err(anyhow::Error::from)?;
        }
    }
    println!("wrote {} score records to {}", records.len(), path.display());
    Ok(())
}

fn cmd_export_embeddings(out: &Path, run: &RunRef, split: SplitName) -> CliResult<()> {
    let (ckpt, data, _, mode) = open_run(out, run)?;
    let model = ckpt.model().map_err(anyhow::Error::from)?;
    let graphs = data.split(split);
    let filter = mode.pipeline(&ckpt.config.contrast).filter;
    let inf = model.infer(graphs, filter, 256).map_err(anyhow::Error::from)?;
    let path = run_dir(out, mode, run.seed).join(format!("embeddings_{}.csv", split.as_str()));
    write_embeddings_csv(&path, &inf.embeddings, graphs).map_err(anyhow::Error::from)?;
    println!("wrote {} embeddings to {}", graphs.len(), path.display());
    Ok(())
}

fn cmd_eval(out: &Path, run: &RunRef) -> CliResult<EvalReport> {
    let (ckpt, data, digest, mode) = open_run(out, run)?;
    let model = ckpt.model().map_err(anyhow::Error::from)?;
    let filter = mode.pipeline(&ckpt.config.contrast).filter;
    let mut splits = BTreeMap::new();
    for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let graphs = data.split(name);
        if !graphs.is_empty() {
            let r = crate::eval::evaluate(&model, graphs, filter).map_err(anyhow::Error::from)?;
            splits.insert(name.as_str().to_string(), r);
        }
    }
    Ok(EvalReport {
        mode: mode.as_str().to_string(),
        seed: run.seed,
        best_epoch: ckpt.epoch,
        config_hash: ckpt.config_hash.clone(),
        dataset_digest: Some(digest),
        splits,
    })
}
