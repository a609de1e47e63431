//! Subcommand implementations behind the `kgattn` binary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::Args;
use kgattn::checkpoint::{self, Manifest};
use kgattn::config::dataset_key;
use kgattn::data::{published_stats, Dataset, DatasetStats};
use kgattn::evaluation::{evaluate, EvalOptions, EvalReport, TieProtocol};
use kgattn::training::fit;
use kgattn::{count_embedding_params, count_nonembedding_params, DecodeFrom, DecoderKind, KgeError, ModelConfig};
use serde::{Deserialize, Serialize};

/// Command-line overrides applied on top of a config file or preset.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Decoder: twomult or tucker.
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    /// Embedding width.
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate every N epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Label every known training target of a query (1-N multi-label).
    #[arg(long)]
    pub multi_label: bool,
    /// Encoder output TwoMult decodes from: relation or source.
    #[arg(long)]
    pub decode_from: Option<DecodeFrom>,
}

/// Builds the run config: the file if given, else the matching preset row
/// for `(dataset, decoder, d)`, else library defaults; then the overrides.
pub fn resolve_config(config: Option<&Path>, dataset: Option<&str>, o: &Overrides) -> Result<ModelConfig> {
    let mut c = match config {
        Some(path) => ModelConfig::from_file(path)?,
        None => {
            let name = dataset.unwrap_or("FB15k-237");
            let decoder = o.decoder.unwrap_or(DecoderKind::TwoMult);
            let d = o.d.unwrap_or(100);
            match ModelConfig::preset(name, decoder, d) {
                Some(preset) => preset,
                None => {
                    log::warn!("no preset for {name}/{decoder}/d={d}; using library defaults");
                    ModelConfig {
                        dataset: name.to_string(),
                        ..ModelConfig::default()
                    }
                }
            }
        }
    };
    if let Some(v) = o.decoder {
        c.decoder = v;
    }
    if let Some(v) = o.d {
        c.d = v;
    }
    if let Some(v) = o.heads {
        c.heads = v;
    }
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.eval_every {
        c.eval_every = v;
    }
    if let Some(v) = o.label_smoothing {
        c.label_smoothing = v;
    }
    if o.multi_label {
        c.multi_label = true;
    }
    if let Some(v) = o.decode_from {
        c.decode_from = v;
    }
    c.validate()?;
    Ok(c)
}

fn dir_name(dir: &Path) -> Option<String> {
    dir.file_name().map(|n| n.to_string_lossy().into_owned())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let start = Instant::now();
    let data = Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    log::info!("loaded {} in {:.2}s", dir.display(), start.elapsed().as_secs_f64());
    Ok(data)
}

pub fn stats_table(name: &str, s: &DatasetStats) -> String {
    format!(
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}\n{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "dataset", "entities", "relations", "train", "valid", "test", name, s.entities, s.relations, s.train, s.valid,
        s.test
    )
}

/// Loads a dataset directory, writes processed artifacts to `out` and
/// returns the statistics table.
pub fn cmd_prepare(dataset_dir: &Path, out: Option<&Path>) -> Result<String> {
    let data = load_dataset(dataset_dir)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dataset_dir.join("processed"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    data.write_processed(&out)?;
    let stats = data.stats();
    let mut text = stats_table(&data.name, &stats);
    if let Some(reference) = published_stats(&data.name) {
        let verdict = if reference == stats { "matches" } else { "DIFFERS FROM" };
        text.push_str(&format!("{verdict} the published statistics for {}\n", data.name));
    }
    text.push_str(&format!("processed artifacts in {}\n", out.display()));
    Ok(text)
}

/// Immutable record of a training run, written before the first epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub dataset_dir: PathBuf,
    pub dataset_checksum: String,
    pub file_checksums: Vec<(String, String)>,
    pub build: String,
    pub started_unix: u64,
    pub outputs: RunOutputs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub summary: PathBuf,
}

pub const RUN_MANIFEST: &str = "run.json";

pub fn build_id() -> String {
    format!(
        "kgattn {} ({})",
        env!("CARGO_PKG_VERSION"),
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Completion record written next to the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub best_valid_mrr: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub dataset_dir: &'a Path,
    pub out_dir: &'a Path,
    pub overrides: &'a Overrides,
}

/// Trains per the resolved config; returns the run summary.
pub fn cmd_train(args: TrainArgs<'_>) -> Result<RunSummary> {
    let name = dir_name(args.dataset_dir);
    let config = resolve_config(args.config, name.as_deref(), args.overrides)?;
    let data = load_dataset(args.dataset_dir)?;
    check_dataset_name(&config, &data);
    run_training(&config, &data, args.dataset_dir, args.out_dir)
}

fn check_dataset_name(config: &ModelConfig, data: &Dataset) {
    if dataset_key(&config.dataset) != dataset_key(&data.name) {
        log::warn!("config is for `{}` but the dataset directory is `{}`", config.dataset, data.name);
    }
}

fn run_training(config: &ModelConfig, data: &Dataset, dataset_dir: &Path, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest = RunManifest {
        config: config.clone(),
        config_hash: config.hash(),
        dataset_dir: dataset_dir.to_path_buf(),
        dataset_checksum: data.checksum.clone(),
        file_checksums: data.file_checksums.clone(),
        build: build_id(),
        started_unix: unix_now(),
        outputs: RunOutputs {
            metrics: out_dir.join("metrics.csv"),
            best_checkpoint: out_dir.join("best"),
            final_checkpoint: out_dir.join("final"),
            summary: out_dir.join("summary.json"),
        },
    };
    let path = out_dir.join(RUN_MANIFEST);
    let mut file = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
        .with_context(|| format!("creating {} (output directory already holds a run?)", path.display()))?;
    file.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    drop(file);

    let start = Instant::now();
    let outcome = fit(config, data, out_dir)?;
    let summary = RunSummary {
        epochs_run: outcome.final_epoch,
        best_valid_mrr: outcome.best_valid_mrr,
        best_epoch: outcome.best_epoch,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(&manifest.outputs.summary, serde_json::to_string_pretty(&summary)?)?;
    if summary.best_valid_mrr.is_some_and(f64::is_nan) {
        bail!("validation MRR is NaN");
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset_dir: &'a Path,
    pub split: &'a str,
    pub seed: Option<u64>,
    pub out_dir: Option<&'a Path>,
    pub ties: TieProtocol,
    pub unfiltered: bool,
}

/// Evaluates a checkpoint on a split. Errors if the dataset or config hashes
/// disagree with what the checkpoint recorded, or if any metric is NaN.
pub fn cmd_eval(args: EvalArgs<'_>) -> Result<EvalReport> {
    let manifest = Manifest::read(args.checkpoint)?;
    let trainer = checkpoint::load::<f32>(args.checkpoint)?;
    if let Some(run) = args.checkpoint.parent().map(|p| p.join(RUN_MANIFEST)).filter(|p| p.is_file()) {
        let run: RunManifest = serde_json::from_str(&fs::read_to_string(&run)?)?;
        let found = trainer.config.hash();
        if run.config_hash != found {
            return Err(KgeError::HashMismatch {
                what: "run config",
                expected: run.config_hash,
                found,
            }
            .into());
        }
    }
    let data = load_dataset(args.dataset_dir)?;
    if let Some(expected) = manifest.dataset_checksum.clone() {
        if expected != data.checksum {
            return Err(KgeError::HashMismatch {
                what: "dataset",
                expected,
                found: data.checksum.clone(),
            }
            .into());
        }
    }
    let stats = data.stats();
    if manifest.entities != stats.entities || manifest.relation_rows != 2 * stats.relations {
        bail!(
            "checkpoint expects {} entities / {} relation rows, dataset has {} / {}",
            manifest.entities,
            manifest.relation_rows,
            stats.entities,
            2 * stats.relations
        );
    }
    let split = data
        .split(args.split)
        .with_context(|| format!("unknown split `{}` (train, valid, test)", args.split))?;
    let options = EvalOptions {
        batch: trainer.config.eval_batch,
        protocol: args.ties,
        unfiltered: args.unfiltered,
    };
    let seed = args.seed.unwrap_or(trainer.config.seed);
    let report = evaluate(&trainer.model, split, &data.filter, seed, options)?;
    if let Some(out) = args.out_dir {
        fs::create_dir_all(out)?;
        fs::write(out.join(format!("eval_{}.csv", args.split)), report.to_csv())?;
    }
    if report.has_nan() {
        bail!("evaluation produced NaN metrics:\n{report}");
    }
    Ok(report)
}

/// Values reported in the published parameter-efficiency table
/// (TwoMult, d = 100): `(NFP, EFP)`.
pub fn reported_param_counts(dataset: &str) -> Option<(f64, f64)> {
    match dataset_key(dataset).as_str() {
        "fb15k-237" => Some((1.50e6, 1.50e6)),
        "wn18rr" => Some((1.14e6, 4.10e6)),
        _ => None,
    }
}

fn millions(x: f64) -> String {
    format!("{:.2}M", x / 1e6)
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// NFP/EFP table for `config`, with vocabulary sizes from `dataset_dir` or
/// the published statistics of `config.dataset`.
pub fn cmd_params(config: &ModelConfig, dataset_dir: Option<&Path>) -> Result<String> {
    let stats = match dataset_dir {
        Some(dir) => Some(load_dataset(dir)?.stats()),
        None => published_stats(&config.dataset),
    };
    let nfp = count_nonembedding_params(&config.encoder_config(), &config.decoder_config());
    let efp = stats.map(|s| count_embedding_params(s.entities, s.relations, config.d));
    let reported = (config.decoder == DecoderKind::TwoMult && config.d == 100 && config.heads == 64)
        .then(|| reported_param_counts(&config.dataset))
        .flatten();
    let mut out = format!(
        "{} / {} / d={} / heads={}\n{:<6} {:>14} {:>10} {:>10}\n",
        config.dataset, config.decoder, config.d, config.heads, "", "computed", "", "reported"
    );
    let row = |label: &str, value: Option<u64>, rep: Option<f64>| {
        format!(
            "{:<6} {:>14} {:>10} {:>10}\n",
            label,
            value.map(grouped).unwrap_or_else(|| "?".into()),
            value.map(|v| millions(v as f64)).unwrap_or_default(),
            rep.map(millions).unwrap_or_else(|| "-".into())
        )
    };
    out.push_str(&row("NFP", Some(nfp), reported.map(|r| r.0)));
    out.push_str(&row("EFP", efp, reported.map(|r| r.1)));
    if efp.is_none() {
        out.push_str("EFP needs --dataset-dir for an unknown dataset\n");
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub heads: usize,
    pub nfp: u64,
    pub valid_mrr: f64,
    pub best_epoch: Option<usize>,
    pub budget_epochs: usize,
    pub full_budget: usize,
}

pub const ABLATION_HEADER: &str = "heads,nfp,valid_mrr,best_epoch,budget_epochs,full_budget";

impl AblationRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{}",
            self.heads,
            self.nfp,
            self.valid_mrr,
            self.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            self.budget_epochs,
            self.full_budget
        )
    }
}

/// Trains one model per head count under a shared epoch budget and writes
/// `ablate_heads.csv` under `out_dir`.
pub fn cmd_ablate_heads(
    base: &ModelConfig,
    heads: &[usize],
    budget_epochs: Option<usize>,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if heads.is_empty() {
        bail!("head list is empty");
    }
    let data = load_dataset(dataset_dir)?;
    check_dataset_name(base, &data);
    fs::create_dir_all(out_dir)?;
    let budget = budget_epochs.unwrap_or(base.epochs);
    let csv_path = out_dir.join("ablate_heads.csv");
    fs::write(&csv_path, format!("{ABLATION_HEADER}\n"))?;
    let mut rows = Vec::new();
    for &h in heads {
        let config = ModelConfig {
            heads: h,
            epochs: budget,
            ..base.clone()
        };
        config.validate()?;
        log::info!("heads = {h}: training for {budget} epochs");
        let summary = run_training(&config, &data, dataset_dir, &out_dir.join(format!("heads_{h}")))?;
        let row = AblationRow {
            heads: h,
            nfp: count_nonembedding_params(&config.encoder_config(), &config.decoder_config()),
            valid_mrr: summary.best_valid_mrr.unwrap_or(f64::NAN),
            best_epoch: summary.best_epoch,
            budget_epochs: budget,
            full_budget: base.epochs,
        };
        let mut file = OpenOptions::new().append(true).open(&csv_path)?;
        writeln!(file, "{}", row.to_csv_line())?;
        rows.push(row);
    }
    Ok(rows)
}

/// Caps the global rayon pool from `KGE_THREADS`, if set.
pub fn configure_threads() -> Result<Option<usize>> {
    match std::env::var("KGE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("KGE_THREADS must be a positive integer, got `{v}`"))?;
            if n == 0 {
                bail!("KGE_THREADS must be at least 1");
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}
