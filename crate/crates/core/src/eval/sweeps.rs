//! Multi-run analyses: augmentation grid, few-shot, temperature and batch size.
//!
//! Every cell trains a fresh encoder from the same seed and is scored by the
//! average test Spearman of its best-dev checkpoint. Cells are independent, so
//! they run on a rayon pool; results are assembled in cell order.

use super::{evaluate_sts, EvalError, ModelEncoder, ReportMeta, StsDataset};
use crate::augment::{AugmentationKind, AugmentationSpec};
use crate::data::{subsample, NliExample, SentencePairExample, Vocab};
use crate::encoder::{EncoderConfig, EncoderParams, SentenceModel};
use crate::train::{steps_per_epoch, train_regime, Regime, TrainConfig, TrainData, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

pub const FEW_SHOT_SIZES: [usize; 5] = [1, 10, 100, 1000, 10000];
pub const TEMPERATURES: [f64; 8] = [0.01, 0.03, 0.05, 0.08, 0.1, 0.12, 0.3, 1.0];
pub const BATCH_SIZES: [usize; 5] = [16, 48, 96, 192, 288];

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "CONSERT_THREADS";

/// Thread cap from `CONSERT_THREADS`; 0 lets rayon decide.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("cell {label}: {source}")]
    Train { label: String, source: TrainError },
    #[error("cell {label}: {source}")]
    Eval { label: String, source: EvalError },
    #[error("invalid sweep: {0}")]
    Invalid(String),
}

pub type Result<T, E = SweepError> = std::result::Result<T, E>;

/// Everything a cell needs besides its own train config.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub unlabeled: Vec<String>,
    pub nli: Vec<NliExample>,
    pub dev: Vec<SentencePairExample>,
    pub test: Vec<StsDataset>,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub sweep: String,
    pub label: String,
    pub config_hash: String,
    /// Average test `rho * 100` of the best-dev checkpoint.
    pub metric: f64,
    pub dev_best: f64,
    pub untrained_dev: f64,
    pub steps: usize,
    pub pool: usize,
    pub runtime_secs: f64,
}

/// Short SHA-256 over the JSON of everything that determines a cell.
pub fn config_hash(encoder: &EncoderConfig, train: &TrainConfig, pool: usize) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(encoder).expect("serializable"));
    h.update(serde_json::to_vec(train).expect("serializable"));
    h.update(train.seed.to_le_bytes());
    h.update((pool as u64).to_le_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl SweepSetup {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| SweepError::Invalid(format!("thread pool: {e}")))
    }

    fn run_cells(&self, sweep: &str, cells: Vec<(String, TrainConfig, Vec<String>)>) -> Result<Vec<CellResult>> {
        self.pool()?.install(|| {
            cells.into_par_iter().map(|(label, train, unlabeled)| self.run_cell(sweep, label, &train, &unlabeled)).collect()
        })
    }

    /// Trains one model from the setup's seed and scores it.
    pub fn run_cell(&self, sweep: &str, label: String, train: &TrainConfig, unlabeled: &[String]) -> Result<CellResult> {
        let start = Instant::now();
        let train_err = |source| SweepError::Train { label: label.clone(), source };
        let params = EncoderParams::init(&self.encoder, train.seed).map_err(|e| train_err(e.into()))?;
        let model = SentenceModel::new(params, self.vocab.clone()).map_err(|e| train_err(e.into()))?;
        let data = TrainData { unlabeled, nli: &self.nli, dev: &self.dev };
        let outcome = train_regime(model, data, train).map_err(train_err)?;
        let hash = config_hash(&self.encoder, train, unlabeled.len());
        let meta = ReportMeta { checkpoint: format!("{sweep}/{label}"), config_hash: hash.clone() };
        let pooling = self.encoder.pooling;
        let report = evaluate_sts(&ModelEncoder::new(&outcome.model, pooling), &self.test, pooling, &meta)
            .map_err(|source| SweepError::Eval { label: label.clone(), source })?;
        log::info!("{sweep} {label}: test avg {:.3}", report.average);
        Ok(CellResult {
            sweep: sweep.into(),
            label,
            config_hash: hash,
            metric: report.average,
            dev_best: outcome.best_dev,
            untrained_dev: outcome.history.first().map_or(f64::NAN, |h| h.dev_spearman),
            steps: outcome.records.iter().filter(|r| r.step > 0).count(),
            pool: unlabeled.len(),
            runtime_secs: start.elapsed().as_secs_f64(),
        })
    }

    fn unsup_base(&self) -> TrainConfig {
        TrainConfig { regime: Regime::Unsup, ..self.train.clone() }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub kinds: Vec<AugmentationKind>,
    /// Row-major: `cells[i * 5 + j]` uses `(kinds[i], kinds[j])`.
    pub cells: Vec<CellResult>,
    pub argmax: (AugmentationKind, AugmentationKind),
}

impl GridResult {
    pub fn metric(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.kinds.len() + j].metric
    }

    /// Matrix CSV with `aug1` down the rows and `aug2` across the columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("aug1");
        for k in &self.kinds {
            out.push_str(&format!(",{k}"));
        }
        out.push('\n');
        for (i, k) in self.kinds.iter().enumerate() {
            out.push_str(k.as_str());
            for j in 0..self.kinds.len() {
                out.push_str(&format!(",{:.6}", self.metric(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// One unsupervised run for every ordered pair of the five grid augmentations.
pub fn augmentation_grid(setup: &SweepSetup) -> Result<GridResult> {
    let kinds = AugmentationKind::GRID.to_vec();
    let base = setup.unsup_base();
    let mut cells = Vec::with_capacity(25);
    for &a in &kinds {
        for &b in &kinds {
            let train = TrainConfig {
                aug1: AugmentationSpec::default_for(a),
                aug2: AugmentationSpec::default_for(b),
                ..base.clone()
            };
            cells.push((format!("{a}+{b}"), train, setup.unlabeled.clone()));
        }
    }
    let cells = setup.run_cells("grid", cells)?;
    let best = argmax(cells.iter().map(|c| c.metric));
    Ok(GridResult { argmax: (kinds[best / 5], kinds[best % 5]), kinds, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub requested: usize,
    pub cell: CellResult,
}

/// Unsupervised runs on seeded subsamples of the unlabeled pool.
pub fn few_shot_sweep(setup: &SweepSetup, sizes: &[usize]) -> Result<Vec<FewShotRow>> {
    let base = setup.unsup_base();
    let cells = sizes
        .iter()
        .map(|&n| (n.to_string(), base.clone(), subsample(&setup.unlabeled, n, base.seed)))
        .collect();
    let results = setup.run_cells("few-shot", cells)?;
    Ok(sizes.iter().zip(results).map(|(&requested, cell)| FewShotRow { requested, cell }).collect())
}

pub fn few_shot_csv(rows: &[FewShotRow]) -> String {
    let mut out = String::from("requested,pool,spearman_x100,dev_best\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.requested, r.cell.pool, r.cell.metric, r.cell.dev_best));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSweep {
    pub rows: Vec<(f64, CellResult)>,
    pub best: f64,
}

impl TemperatureSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("temperature,spearman_x100,dev_best\n");
        for (t, c) in &self.rows {
            out.push_str(&format!("{t},{:.6},{:.6}\n", c.metric, c.dev_best));
        }
        out
    }
}

pub fn temperature_sweep(setup: &SweepSetup, taus: &[f64]) -> Result<TemperatureSweep> {
    if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(SweepError::Invalid(format!("temperature {t} is not positive")));
    }
    let base = setup.unsup_base();
    let cells =
        taus.iter().map(|&t| (t.to_string(), TrainConfig { temperature: t, ..base.clone() }, setup.unlabeled.clone())).collect();
    let results = setup.run_cells("temperature", cells)?;
    let best = taus[argmax(results.iter().map(|c| c.metric))];
    Ok(TemperatureSweep { rows: taus.iter().copied().zip(results).collect(), best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeRow {
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub cell: CellResult,
}

/// Equal-epoch runs: each batch size trains for `epochs` passes over the pool.
pub fn batch_size_sweep(setup: &SweepSetup, sizes: &[usize], epochs: usize) -> Result<Vec<BatchSizeRow>> {
    if epochs == 0 {
        return Err(SweepError::Invalid("epochs must be positive".into()));
    }
    let base = setup.unsup_base();
    let pool = setup.unlabeled.len();
    let plan: Vec<(usize, usize, usize)> = sizes
        .iter()
        .map(|&n| {
            let spe = steps_per_epoch(pool, n);
            (n, spe, spe * epochs)
        })
        .collect();
    let cells = plan
        .iter()
        .map(|&(n, _, total)| {
            let train = TrainConfig {
                batch_size: n,
                total_steps: total,
                eval_every: base.eval_every.min(total),
                ..base.clone()
            };
            (n.to_string(), train, setup.unlabeled.clone())
        })
        .collect();
    let results = setup.run_cells("batch-size", cells)?;
    Ok(plan
        .into_iter()
        .zip(results)
        .map(|((batch_size, steps_per_epoch, total_steps), cell)| BatchSizeRow { batch_size, steps_per_epoch, total_steps, cell })
        .collect())
}

pub fn batch_size_csv(rows: &[BatchSizeRow]) -> String {
    let mut out = String::from("batch_size,steps_per_epoch,total_steps,spearman_x100,dev_best\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.batch_size, r.steps_per_epoch, r.total_steps, r.cell.metric, r.cell.dev_best
        ));
    }
    out
}

/// One JSON object per line.
pub fn to_jsonl(cells: &[&CellResult]) -> String {
    cells.iter().map(|c| serde_json::to_string(c).expect("serializable") + "\n").collect()
}
