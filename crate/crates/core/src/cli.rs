//! The `mixsgcl` command line.
//!
//! Training options come from an optional flat `key = value` file and are
//! overridden by flags. Relative input paths are resolved against
//! `$MIXSGCL_DATA_DIR` when it is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::augmentation::{AlphaMode, MixLossMode};
use crate::dataset::{apply_k_core, build_dataset, load_interactions, read_cache, write_cache, Split, SplitConfig, TextFormat};
use crate::embedding_io::{write_embeddings, write_index, EmbeddingIndex};
use crate::error::Error;
use crate::evaluator::{evaluate, DEFAULT_KS};
use crate::objectives::ViewMode;
use crate::trainer::{fit, fit_with_observer, read_checkpoint, write_checkpoint, ModelKind, TrainConfig};

pub const DATA_DIR_ENV: &str = "MIXSGCL_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "mixsgcl", version, about = "Graph collaborative filtering with supervised contrastive training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and split a raw interaction file into a binary cache.
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Full-ranking evaluation of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Per-epoch timing of several models on one cache.
    Bench(BenchArgs),
    /// Write a checkpoint's final embeddings and token index to given paths.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Delimited text with user, item and optional timestamp columns.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write dataset statistics (JSON); printed to stdout otherwise.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k_core: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Field separator; `tab`, `comma` and `space` are accepted by name.
    #[arg(long, default_value = "tab")]
    pub delimiter: String,
    #[arg(long, default_value_t = 0)]
    pub user_col: usize,
    #[arg(long, default_value_t = 1)]
    pub item_col: usize,
    /// Column of an integer timestamp; `none` disables it.
    #[arg(long, default_value = "2")]
    pub timestamp_col: String,
}

/// Options shared by `train` and `bench`. Every flag maps to a config key.
#[derive(Debug, Args, Default, Clone)]
pub struct TrainOverrides {
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_mix: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of training edges kept (sparsity study).
    #[arg(long)]
    pub train_keep_ratio: Option<f64>,
    /// Extra `key=value` settings, same keys as the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl TrainOverrides {
    fn flag_entries(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("model", self.model.clone());
        push("temperature", self.tau.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("n_mix", self.n_mix.map(|v| v.to_string()));
        push("learning_rate", self.lr.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("embedding_dim", self.dim.map(|v| v.to_string()));
        push("layers", self.layers.map(|v| v.to_string()));
        push("max_epochs", self.epochs.map(|v| v.to_string()));
        push("patience", self.patience.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("train_keep_ratio", self.train_keep_ratio.map(|v| v.to_string()));
        out
    }

    /// Config file entries, then `--set` entries, then dedicated flags.
    pub fn entries(&self) -> anyhow::Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            map.extend(parse_kv(&text, &path.display().to_string())?);
        }
        map.extend(parse_kv(&self.set.join("\n"), "--set")?);
        for (k, v) in self.flag_entries() {
            map.insert(k.to_string(), v);
        }
        Ok(map)
    }
}

/// Everything needed to launch one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_keep_ratio: f64,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, source: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{source}:{}: expected `key = value`, found {raw:?}", no + 1);
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "temperature",
    "lambda",
    "view_mode",
    "noise_eps",
    "include_self_terms",
    "n_mix",
    "beta_max",
    "mix_seed",
    "alpha_mode",
    "mix_loss_mode",
    "batch_size",
    "embedding_dim",
    "learning_rate",
    "layers",
    "max_epochs",
    "patience",
    "eval_k",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "train_keep_ratio",
];

/// Builds a run config from key/value entries. Unknown keys, unparsable
/// values and invariant violations are all reported in one error.
pub fn build_run_config(entries: &BTreeMap<String, String>) -> Result<RunConfig, Error> {
    let mut problems = Vec::new();
    let model = match entries.get("model") {
        Some(m) => m.parse::<ModelKind>().unwrap_or_else(|e| {
            problems.push(e);
            ModelKind::MixSgcl
        }),
        None => ModelKind::MixSgcl,
    };
    let mut cfg = TrainConfig::for_model(model);
    let mut keep = 1.0;
    let mut noise_eps = match cfg.loss.view_mode {
        ViewMode::Noise { eps } => Some(eps),
        ViewMode::Identity => None,
    };

    fn parse<T: std::str::FromStr>(key: &str, v: &str, problems: &mut Vec<String>) -> Option<T> {
        let parsed = v.parse::<T>().ok();
        if parsed.is_none() {
            problems.push(format!("{key}: cannot parse {v:?}"));
        }
        parsed
    }

    for (key, v) in entries {
        let p = &mut problems;
        match key.as_str() {
            "model" => {}
            "temperature" | "tau" => cfg.loss.temperature = parse(key, v, p).unwrap_or(cfg.loss.temperature),
            "lambda" => cfg.loss.lambda = parse(key, v, p).unwrap_or(cfg.loss.lambda),
            "view_mode" => match v.as_str() {
                "identity" => noise_eps = None,
                "noise" => noise_eps = noise_eps.or(Some(0.1)),
                other => p.push(format!("view_mode: expected identity or noise, got {other:?}")),
            },
            "noise_eps" => noise_eps = parse(key, v, p).or(noise_eps),
            "include_self_terms" => {
                cfg.loss.include_self_terms = parse(key, v, p).unwrap_or(cfg.loss.include_self_terms)
            }
            "n_mix" => cfg.mixup.n_mix = parse(key, v, p).unwrap_or(cfg.mixup.n_mix),
            "beta_max" => cfg.mixup.beta_max = parse(key, v, p).unwrap_or(cfg.mixup.beta_max),
            "mix_seed" => cfg.mixup.seed = parse(key, v, p).unwrap_or(cfg.mixup.seed),
            "alpha_mode" => match v.as_str() {
                "shared" => cfg.mixup.alpha_mode = AlphaMode::Shared,
                "per-node" | "per_node" => cfg.mixup.alpha_mode = AlphaMode::PerNode,
                other => p.push(format!("alpha_mode: expected shared or per-node, got {other:?}")),
            },
            "mix_loss_mode" => match v.as_str() {
                "joint" => cfg.mixup.loss_mode = MixLossMode::Joint,
                "separate" => cfg.mixup.loss_mode = MixLossMode::Separate,
                other => p.push(format!("mix_loss_mode: expected joint or separate, got {other:?}")),
            },
            "batch_size" => cfg.batch_size = parse(key, v, p).unwrap_or(cfg.batch_size),
            "embedding_dim" => cfg.embedding_dim = parse(key, v, p).unwrap_or(cfg.embedding_dim),
            "learning_rate" | "lr" => cfg.learning_rate = parse(key, v, p).unwrap_or(cfg.learning_rate),
            "layers" => cfg.layers = parse(key, v, p).unwrap_or(cfg.layers),
            "max_epochs" => cfg.max_epochs = parse(key, v, p).unwrap_or(cfg.max_epochs),
            "patience" => cfg.patience = parse(key, v, p).unwrap_or(cfg.patience),
            "eval_k" => cfg.eval_k = parse(key, v, p).unwrap_or(cfg.eval_k),
            "seed" => cfg.seed = parse(key, v, p).unwrap_or(cfg.seed),
            "adam_beta1" => cfg.adam.beta1 = parse(key, v, p).unwrap_or(cfg.adam.beta1),
            "adam_beta2" => cfg.adam.beta2 = parse(key, v, p).unwrap_or(cfg.adam.beta2),
            "adam_eps" => cfg.adam.eps = parse(key, v, p).unwrap_or(cfg.adam.eps),
            "train_keep_ratio" => keep = parse(key, v, p).unwrap_or(keep),
            other => p.push(format!("unknown config key {other:?}")),
        }
    }
    cfg.loss.view_mode = match noise_eps {
        Some(eps) => ViewMode::Noise { eps },
        None => ViewMode::Identity,
    };
    problems.extend(cfg.problems());
    if !(keep > 0.0 && keep <= 1.0) {
        problems.push(format!("train_keep_ratio must lie in (0, 1], got {keep}"));
    }
    if problems.is_empty() {
        Ok(RunConfig {
            train: cfg,
            train_keep_ratio: keep,
        })
    } else {
        Err(Error::InvalidConfig(problems))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cache: PathBuf,
    /// Checkpoint directory (one sub-directory per grid point when sweeping).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Learning rates to sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep_lr: Vec<f64>,
    /// Temperatures to sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep_tau: Vec<f64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
    /// Report path; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub cache: PathBuf,
    /// Per-epoch CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-model summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = ["bpr".to_string(), "sgcl".to_string(), "mixsgcl".to_string()])]
    pub models: Vec<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Token index JSON; defaults to `<out>.index.json`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Cache used to train the checkpoint; its tokens fill the index.
    #[arg(long)]
    pub cache: PathBuf,
}

/// Resolves a relative input path against `$MIXSGCL_DATA_DIR`.
pub fn resolve_input(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn pin_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_delimiter(s: &str) -> anyhow::Result<char> {
    Ok(match s {
        "tab" | "\\t" => '\t',
        "comma" => ',',
        "space" => ' ',
        other => {
            let mut chars = other.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => bail!("delimiter must be a single character, got {other:?}"),
            }
        }
    })
}

pub fn cmd_prepare(args: &PrepareArgs) -> anyhow::Result<()> {
    let format = TextFormat {
        delimiter: parse_delimiter(&args.delimiter)?,
        user_col: args.user_col,
        item_col: args.item_col,
        timestamp_col: match args.timestamp_col.as_str() {
            "none" => None,
            n => Some(n.parse().with_context(|| format!("--timestamp-col {n:?}"))?),
        },
    };
    let split = SplitConfig {
        ratios: [args.ratios[0], args.ratios[1], args.ratios[2]],
        seed: args.seed,
        ..SplitConfig::default()
    };
    split.validate()?;
    let raw = load_interactions(resolve_input(&args.input), &format)?;
    log::info!("{} interactions, {} users, {} items", raw.len(), raw.n_users(), raw.n_items());
    let filtered = apply_k_core(&raw, args.k_core)?;
    let ds = build_dataset(&filtered, &split)?;
    write_cache(&ds, &args.out)?;
    write_json(&ds.stats(), args.stats.as_deref())
}

fn load_training_data(cache: &Path, run: &RunConfig) -> anyhow::Result<crate::dataset::InteractionDataset> {
    let ds = read_cache(resolve_input(cache))?;
    Ok(ds.with_train_keep_ratio(run.train_keep_ratio, run.train.seed)?)
}

#[derive(Debug, Serialize)]
struct SweepEntry {
    learning_rate: f64,
    temperature: f64,
    checkpoint: PathBuf,
    best_epoch: usize,
    best_valid_ndcg: f64,
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let run = build_run_config(&args.overrides.entries()?)?;
    if args.dry_run {
        return write_json(&run, None);
    }
    let Some(out) = &args.out else {
        bail!("--out is required unless --dry-run is given");
    };
    pin_threads(args.threads)?;
    let ds = load_training_data(&args.cache, &run)?;
    if args.sweep_lr.is_empty() && args.sweep_tau.is_empty() {
        let (state, history) = fit(&ds, &run.train)?;
        write_checkpoint(out, &run.train, &state, &history, &ds)?;
        log::info!("best epoch {} (valid ndcg {:.4})", history.best_epoch, history.best_valid_ndcg);
        return Ok(());
    }
    let lrs = if args.sweep_lr.is_empty() { vec![run.train.learning_rate] } else { args.sweep_lr.clone() };
    let taus = if args.sweep_tau.is_empty() { vec![run.train.loss.temperature] } else { args.sweep_tau.clone() };
    let mut entries = Vec::new();
    for &lr in &lrs {
        for &tau in &taus {
            let mut cfg = run.train.clone();
            cfg.learning_rate = lr;
            cfg.loss.temperature = tau;
            cfg.validate()?;
            let dir = out.join(format!("lr{lr}_tau{tau}"));
            let (state, history) = fit(&ds, &cfg)?;
            write_checkpoint(&dir, &cfg, &state, &history, &ds)?;
            entries.push(SweepEntry {
                learning_rate: lr,
                temperature: tau,
                checkpoint: dir,
                best_epoch: history.best_epoch,
                best_valid_ndcg: history.best_valid_ndcg,
            });
        }
    }
    write_json(&entries, Some(&out.join("sweep.json")))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    pin_threads(args.threads)?;
    let ck = read_checkpoint(&args.checkpoint)?;
    let ds = read_cache(resolve_input(&args.cache))?;
    let report = evaluate(&ck.embeddings.view(), &ds, args.split, &args.ks)
        .with_context(|| format!("evaluating {}", args.checkpoint.display()))?;
    write_json(&report, args.out.as_deref())
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub model: String,
    pub threads: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stop_reason: crate::trainer::StopReason,
    pub mean_epoch_seconds: f64,
    pub total_train_seconds: f64,
    pub negative_sampling_calls: usize,
    pub test: BTreeMap<String, f64>,
}

pub fn cmd_bench(args: &BenchArgs) -> anyhow::Result<()> {
    pin_threads(Some(args.threads))?;
    let threads = rayon::current_num_threads();
    let base_entries = args.overrides.entries()?;
    let mut writer = csv::Writer::from_path(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut summaries = Vec::new();
    let mut header_written = false;
    for model in &args.models {
        let mut entries = base_entries.clone();
        entries.insert("model".into(), model.clone());
        // mixup settings only make sense for the mixup model
        if model != "mixsgcl" {
            entries.remove("n_mix");
        }
        let run = build_run_config(&entries)?;
        let ds = load_training_data(&args.cache, &run)?;
        let k = run.train.eval_k;
        if !header_written {
            writer.write_record([
                "model".to_string(),
                "threads".into(),
                "epoch".into(),
                "wall_seconds".into(),
                "loss".into(),
                format!("recall@{k}"),
                format!("ndcg@{k}"),
            ])?;
            header_written = true;
        }
        let mut rows = Vec::new();
        let (state, history) = fit_with_observer(&ds, &run.train, |r, _| rows.push(r.clone()))?;
        for r in &rows {
            writer.write_record([
                model.clone(),
                threads.to_string(),
                r.epoch.to_string(),
                format!("{:.6}", r.train_seconds),
                r.loss.to_string(),
                r.valid_recall.to_string(),
                r.valid_ndcg.to_string(),
            ])?;
        }
        writer.flush()?;
        let test = evaluate(&state.final_emb.view(), &ds, Split::Test, &DEFAULT_KS)?;
        let total = history.total_train_seconds();
        summaries.push(BenchSummary {
            model: model.clone(),
            threads,
            epochs: history.epochs.len(),
            best_epoch: history.best_epoch,
            stop_reason: history.stop_reason,
            mean_epoch_seconds: total / history.epochs.len() as f64,
            total_train_seconds: total,
            negative_sampling_calls: history.stats.negative_sampling_calls,
            test: test.metrics,
        });
    }
    write_json(&summaries, args.summary.as_deref())
}

pub fn cmd_export(args: &ExportArgs) -> anyhow::Result<()> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let ds = read_cache(resolve_input(&args.cache))?;
    if ck.embeddings.nrows() != ds.n_nodes() {
        bail!(
            "checkpoint has {} rows but the cache has {} nodes",
            ck.embeddings.nrows(),
            ds.n_nodes()
        );
    }
    write_embeddings(&ck.embeddings.view(), &args.out)?;
    let index = args.index.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".index.json");
        PathBuf::from(p)
    });
    write_index(&EmbeddingIndex::from_dataset(&ds), index)?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::ExportEmbeddings(a) => cmd_export(&a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn kv_parsing() {
        let m = parse_kv("# comment\nmodel = sgcl\n\n temperature=0.3 # trailing\n", "f").unwrap();
        assert_eq!(m["model"], "sgcl");
        assert_eq!(m["temperature"], "0.3");
        assert!(parse_kv("novalue\n", "f").unwrap_err().to_string().contains("f:1"));
    }

    #[test]
    fn presets() {
        let sgcl = build_run_config(&entries(&[("model", "sgcl"), ("temperature", "0.2")])).unwrap();
        assert_eq!(sgcl.train.loss.temperature, 0.2);
        assert_eq!(sgcl.train.mixup.n_mix, 0);
        let mix = build_run_config(&entries(&[("model", "mixsgcl"), ("n_mix", "1")])).unwrap();
        assert_eq!(mix.train.mixup.n_mix, 1);
        let ssl = build_run_config(&entries(&[("model", "sslrec"), ("view_mode", "identity")])).unwrap();
        assert_eq!(ssl.train.loss.view_mode, ViewMode::Identity);
    }

    #[test]
    fn all_problems_reported_together() {
        let err = build_run_config(&entries(&[
            ("bogus", "1"),
            ("batch_size", "0"),
            ("patience", "x"),
            ("train_keep_ratio", "2"),
        ]))
        .unwrap_err();
        let Error::InvalidConfig(problems) = err else { panic!() };
        assert_eq!(problems.len(), 4, "{problems:?}");
    }

    #[test]
    fn every_documented_key_is_accepted() {
        for key in CONFIG_KEYS {
            let value = match *key {
                "model" => "mixsgcl",
                "view_mode" => "noise",
                "alpha_mode" => "shared",
                "mix_loss_mode" => "joint",
                "include_self_terms" => "true",
                "train_keep_ratio" | "beta_max" | "adam_beta1" | "adam_beta2" => "0.5",
                _ => "1",
            };
            let res = build_run_config(&entries(&[(key, value)]));
            if let Err(Error::InvalidConfig(p)) = &res {
                assert!(p.iter().all(|m| !m.contains("unknown")), "{key}: {p:?}");
            }
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "model = sgcl\ntemperature = 0.5\nlearning_rate = 0.01\n").unwrap();
        let o = TrainOverrides {
            config: Some(path),
            tau: Some(0.2),
            ..TrainOverrides::default()
        };
        let run = build_run_config(&o.entries().unwrap()).unwrap();
        assert_eq!(run.train.loss.temperature, 0.2);
        assert_eq!(run.train.learning_rate, 0.01);
        assert_eq!(run.train.model, ModelKind::Sgcl);
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from(["mixsgcl", "train", "--cache", "c", "--model", "sgcl", "--dry-run"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert!(t.dry_run);
        let cli = Cli::try_parse_from(["mixsgcl", "evaluate", "--checkpoint", "d", "--cache", "c"]).unwrap();
        let Command::Evaluate(e) = cli.command else { panic!() };
        assert_eq!(e.ks, vec![20, 50]);
        assert_eq!(e.split, Split::Test);
    }
}
