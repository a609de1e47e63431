//! 1-N training with reciprocal triples, binary cross-entropy over all
//! candidate targets, Adam with stepped learning-rate decay, and the
//! validation/checkpoint loop around it.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{bce_logit_term, Mode, Tape};
use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::{batch_queries, derive_seed, merge_singleton_tail, Dataset, FilterIndex, QueryBatch, TripleStore};
use crate::error::{KgeError, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalReport};
use crate::model::Model;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;

/// Binary cross-entropy of one score row against a single true target,
/// averaged over candidates, with optional label smoothing.
pub fn bce_loss(scores: &[f64], target: u32, smoothing: f64) -> Result<f64> {
    let n = scores.len();
    if n < 2 {
        return Err(KgeError::Parameter(format!("need at least 2 candidates, got {n}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(KgeError::Parameter(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    if target as usize >= n {
        return Err(KgeError::Contract(format!("target {target} out of range for {n} candidates")));
    }
    let base = smoothing / n as f64;
    let total: f64 = scores
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = if i == target as usize { 1.0 - smoothing + base } else { base };
            bce_logit_term(x, y)
        })
        .sum();
    Ok(total / n as f64)
}

/// `lr · decay_rate^⌊epoch / decay_step⌋` for a zero-based epoch.
pub fn lr_at_epoch(config: &ModelConfig, epoch: usize) -> f64 {
    config.lr * config.decay_rate.powi((epoch / config.decay_step.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// One-based index of the finished epoch.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub batches: usize,
    pub examples: usize,
    pub seconds: f64,
}

impl EpochStats {
    /// Training queries per second.
    pub fn throughput(&self) -> f64 {
        if self.seconds > 0.0 {
            self.examples as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }
}

/// Owns a model, its optimizer state and the epoch counter.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: ModelConfig,
    pub model: Model<T>,
    pub adam: AdamState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    train_targets: Option<FilterIndex>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: ModelConfig, entities: usize, relations: usize) -> Result<Self> {
        let model = Model::new(&config, entities, relations, config.seed)?;
        let adam = AdamState::new(model.store.tensors(), AdamConfig::default());
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
            train_targets: None,
        })
    }

    pub fn from_parts(config: ModelConfig, model: Model<T>, adam: AdamState<T>, epoch: usize) -> Self {
        Trainer {
            config,
            model,
            adam,
            epoch,
            train_targets: None,
        }
    }

    /// Runs one pass over `train`, which must already hold reciprocal triples.
    pub fn train_epoch(&mut self, train: &TripleStore) -> Result<EpochStats> {
        if !train.has_reciprocals() {
            return Err(KgeError::Contract("training store lacks reciprocal triples".into()));
        }
        if self.config.multi_label && self.train_targets.is_none() {
            self.train_targets = Some(FilterIndex::from_stores(&[train]));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = lr_at_epoch(&self.config, epoch);
        let batches = merge_singleton_tail(batch_queries(
            train,
            self.config.batch_size,
            self.config.seed,
            epoch as u64,
        )?);
        let mut total = 0.0;
        let mut examples = 0;
        for (index, batch) in batches.iter().enumerate() {
            let loss = self.step(batch, epoch, index, lr)?;
            total += loss;
            examples += batch.len();
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: total / batches.len().max(1) as f64,
            lr,
            batches: batches.len(),
            examples,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn positives(&self, batch: &QueryBatch) -> Vec<Vec<u32>> {
        match &self.train_targets {
            Some(index) if self.config.multi_label => batch
                .sources
                .iter()
                .zip(&batch.relations)
                .map(|(&s, &r)| {
                    let mut t: Vec<u32> = index
                        .targets(s, r)
                        .map(|set| set.iter().copied().collect())
                        .unwrap_or_default();
                    t.sort_unstable();
                    t
                })
                .collect(),
            _ => batch.targets.iter().map(|&t| vec![t]).collect(),
        }
    }

    /// Forward, backward and one Adam step on a batch; returns the batch loss.
    fn step(&mut self, batch: &QueryBatch, epoch: usize, index: usize, lr: f64) -> Result<f64> {
        let positives = self.positives(batch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            &[0x4452_4f50, epoch as u64, index as u64],
        ));
        let (loss, grads, stats) = {
            let mut tape = Tape::new();
            let fwd = self.model.forward(
                &mut tape,
                &batch.sources,
                &batch.relations,
                Mode::Train,
                &mut rng,
                true,
            )?;
            let loss = tape.bce_with_logits(fwd.scores, positives, self.config.label_smoothing)?;
            let value = tape.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(KgeError::NonFiniteLoss {
                    loss: value,
                    epoch,
                    batch: index,
                    lr,
                });
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = fwd.bound.vars().iter().map(|&v| grads.take(v)).collect();
            (value, grads, fwd.stats)
        };
        self.adam.step(self.model.store.tensors_mut(), &grads, lr)?;
        self.model.apply_stats(&stats);
        Ok(loss)
    }

    /// Mean loss over `store` in eval mode, without updating anything.
    pub fn eval_loss(&self, store: &TripleStore) -> Result<f64> {
        let mut total = 0.0;
        let mut rows = 0usize;
        for chunk in store.triples().chunks(self.config.eval_batch.max(1)) {
            let batch = QueryBatch::from_triples(chunk);
            let positives = self.positives(&batch);
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = self.model.forward(
                &mut tape,
                &batch.sources,
                &batch.relations,
                Mode::Eval,
                &mut rng,
                false,
            )?;
            let loss = tape.bce_with_logits(fwd.scores, positives, self.config.label_smoothing)?;
            total += tape.value(loss).data()[0].to_f64_lossy() * chunk.len() as f64;
            rows += chunk.len();
        }
        Ok(total / rows.max(1) as f64)
    }
}

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub report: Option<EvalReport>,
    pub loss: Option<f64>,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,mrr,hits1,hits3,hits10,loss,lr";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let metric = |f: fn(&EvalReport) -> f64| {
            self.report
                .as_ref()
                .map(|r| format!("{:.6}", f(r)))
                .unwrap_or_default()
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            metric(|r| r.overall.mrr),
            metric(|r| r.overall.hits1),
            metric(|r| r.overall.hits3),
            metric(|r| r.overall.hits10),
            self.loss.map(|l| format!("{l:.6}")).unwrap_or_default(),
            self.lr
        )
    }
}

/// Append-only CSV with the metrics header written once.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if !path.exists() {
            fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| KgeError::io(path, e))?;
        }
        Ok(MetricsLog { path: path.to_path_buf() })
    }

    pub fn append(&self, row: &MetricsRow) -> Result<()> {
        let mut file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| KgeError::io(&self.path, e))?;
        writeln!(file, "{}", row.to_csv_line()).map_err(|e| KgeError::io(&self.path, e))
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<MetricsRow>,
    pub best_valid_mrr: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Trains `config` on `dataset`, evaluating on validation every
/// `eval_every` epochs (and after the last one), and writes
/// `metrics.csv`, `best/` and `final/` checkpoints under `out_dir`.
pub fn fit(config: &ModelConfig, dataset: &Dataset, out_dir: &Path) -> Result<FitOutcome> {
    let stats = dataset.stats();
    let trainer = Trainer::<f32>::new(config.clone(), stats.entities, stats.relations)?;
    fit_from(trainer, dataset, out_dir)
}

/// Continues training an existing trainer up to `config.epochs`.
pub fn fit_from(mut trainer: Trainer<f32>, dataset: &Dataset, out_dir: &Path) -> Result<FitOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| KgeError::io(out_dir, e))?;
    let log = MetricsLog::create(&out_dir.join("metrics.csv"))?;
    let config = trainer.config.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut stale = 0usize;
    let best_dir = out_dir.join("best");
    let final_dir = out_dir.join("final");
    let options = EvalOptions {
        batch: config.eval_batch,
        ..EvalOptions::default()
    };
    while trainer.epoch < config.epochs {
        let epoch_stats = trainer.train_epoch(&dataset.train)?;
        log::info!(
            "epoch {} loss {:.6} lr {:.3e} ({:.0} queries/s)",
            epoch_stats.epoch,
            epoch_stats.mean_loss,
            epoch_stats.lr,
            epoch_stats.throughput()
        );
        let row = MetricsRow {
            epoch: epoch_stats.epoch,
            split: "train".into(),
            report: None,
            loss: Some(epoch_stats.mean_loss),
            lr: epoch_stats.lr,
        };
        log.append(&row)?;
        history.push(row);
        let last = trainer.epoch == config.epochs;
        if config.eval_every > 0 && (trainer.epoch.is_multiple_of(config.eval_every) || last) {
            let report = evaluate(&trainer.model, &dataset.valid, &dataset.filter, config.seed, options)?;
            let mrr = report.mrr();
            log::info!("epoch {} valid MRR {:.4}", trainer.epoch, mrr);
            let row = MetricsRow {
                epoch: trainer.epoch,
                split: "valid".into(),
                report: Some(report),
                loss: None,
                lr: epoch_stats.lr,
            };
            log.append(&row)?;
            history.push(row);
            if best.is_none_or(|(b, _)| mrr > b) {
                best = Some((mrr, trainer.epoch));
                stale = 0;
                checkpoint::save(&best_dir, &trainer, Some(&dataset.checksum))?;
            } else {
                stale += 1;
                if config.patience.is_some_and(|p| stale >= p) {
                    log::info!("stopping: no validation improvement in {stale} evaluations");
                    break;
                }
            }
        }
    }
    checkpoint::save(&final_dir, &trainer, Some(&dataset.checksum))?;
    Ok(FitOutcome {
        history,
        best_valid_mrr: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
        final_epoch: trainer.epoch,
        best_checkpoint: best.map(|_| best_dir),
        final_checkpoint: final_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let l = bce_loss(&[0.0; 7], 3, 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let mut s = vec![-60.0; 5];
        s[1] = 60.0;
        assert!(bce_loss(&s, 1, 0.0).unwrap() < 1e-20);
        assert!(bce_loss(&[0.0], 0, 0.0).is_err());
        assert!(bce_loss(&[0.0, 0.0], 0, 1.0).is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = ModelConfig::default();
        assert_eq!(lr_at_epoch(&c, 0), 0.001);
        assert_eq!(lr_at_epoch(&c, 1), 0.001);
        assert!((lr_at_epoch(&c, 4) - 0.00099003).abs() < 5e-9);
        let flat = ModelConfig {
            decay_rate: 1.0,
            ..c
        };
        assert_eq!(lr_at_epoch(&flat, 977), 0.001);
    }

    #[test]
    fn metrics_line_leaves_missing_fields_empty() {
        let row = MetricsRow {
            epoch: 3,
            split: "train".into(),
            report: None,
            loss: Some(0.5),
            lr: 0.001,
        };
        assert_eq!(row.to_csv_line(), "3,train,,,,,0.500000,0.001");
    }
}
