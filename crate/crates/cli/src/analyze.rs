//! `consert analyze ...`: collapse diagnostics and the multi-run sweeps.

use crate::resources::Resources;
use crate::{write, write_report};
use anyhow::{Context, Result};
use clap::Subcommand;
use consert::config::RunConfig;
use consert::data::{load_sts_tsv, SentencePairExample};
use consert::encoder::{load_checkpoint, SentenceModel};
use consert::eval::sweeps::{
    augmentation_grid, batch_size_csv, batch_size_sweep, few_shot_csv, few_shot_sweep, temperature_sweep,
    threads_from_env, to_jsonl, CellResult, SweepSetup,
};
use consert::eval::{frequency_masked_eval, similarity_histogram, FrequencyTable, ModelEncoder, ReportMeta};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Gold score against predicted cosine on the test pairs (figure1.csv).
    Histogram {
        /// Checkpoint to inspect; a freshly initialized encoder when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test scores with the k most frequent tokens left out of pooling (figure4.csv).
    FreqMask {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated k values; defaults to `eval.freq_k`.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Every ordered pair of the five view augmentations (figure5.csv).
    Grid,
    /// Unsupervised runs on subsampled unlabeled pools (figure6.csv).
    FewShot,
    /// Contrastive temperature sweep (figure7.csv).
    Temperature,
    /// Equal-epoch batch-size sweep (table4.csv).
    BatchSize,
}

fn model_or_init(checkpoint: Option<&Path>, res: &Resources, cfg: &RunConfig) -> Result<(SentenceModel, String)> {
    match checkpoint {
        Some(p) => {
            let model = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok((model, p.display().to_string()))
        }
        None => Ok((res.untrained_model(cfg)?, "untrained".into())),
    }
}

fn test_pairs(res: &Resources) -> Vec<SentencePairExample> {
    res.test.iter().flat_map(|d| d.merged()).collect()
}

fn append_results(cfg: &RunConfig, cells: &[&CellResult]) -> Result<()> {
    let path = cfg.out_dir.join("results.jsonl");
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.write_all(to_jsonl(cells).as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn setup(cfg: &RunConfig, res: Resources) -> Result<SweepSetup> {
    let vocab = res.vocab(cfg)?;
    Ok(SweepSetup {
        encoder: cfg.encoder_config(vocab.len()),
        vocab,
        train: cfg.train_config(),
        unlabeled: res.unlabeled,
        nli: res.nli,
        dev: res.dev,
        test: res.test,
        threads: threads_from_env(),
    })
}

fn emit(cfg: &RunConfig, file: &str, csv: &str) -> Result<()> {
    write(&cfg.out_dir.join(file), csv)?;
    print!("{csv}");
    Ok(())
}

pub fn run(cfg: &RunConfig, command: &AnalyzeCommand) -> Result<()> {
    let res = Resources::load(cfg)?;
    match command {
        AnalyzeCommand::Histogram { checkpoint } => {
            let (model, _) = model_or_init(checkpoint.as_deref(), &res, cfg)?;
            let enc = ModelEncoder::new(&model, cfg.eval.pooling);
            let h = similarity_histogram(&enc, &test_pairs(&res), cfg.eval.histogram_bins)?;
            write(&cfg.out_dir.join("figure1.csv"), &h.to_csv())?;
            println!("mean_pairwise_cosine\t{:.6}", h.mean_pairwise_cosine);
            println!("mean_pair_cosine\t{:.6}", h.mean_pair_cosine);
        }
        AnalyzeCommand::FreqMask { checkpoint, k } => {
            let (model, name) = model_or_init(checkpoint.as_deref(), &res, cfg)?;
            let texts: Vec<String> = match &cfg.data.freq_corpus {
                Some(p) => load_sts_tsv(p)
                    .with_context(|| format!("loading {}", p.display()))?
                    .into_iter()
                    .flat_map(|p| [p.sentence_a, p.sentence_b])
                    .collect(),
                None => res.test_texts(),
            };
            let table = FrequencyTable::from_corpus(&texts, &model.vocab, model.params.config.max_len)?;
            write(&cfg.out_dir.join("freq_table.tsv"), &table.to_tsv(&model.vocab))?;
            let ks = if k.is_empty() { &cfg.eval.freq_k } else { k };
            let meta = ReportMeta { checkpoint: name, config_hash: cfg.hash() };
            let reports = frequency_masked_eval(&model, cfg.eval.pooling, &res.test, &table, ks, &meta)?;
            let mut csv = String::from("k,spearman_x100\n");
            for (k, report) in &reports {
                csv.push_str(&format!("{k},{:.6}\n", report.average));
                write_report(&cfg.out_dir, &format!("freq_mask_k{k}"), report)?;
            }
            emit(cfg, "figure4.csv", &csv)?;
        }
        AnalyzeCommand::Grid => {
            let grid = augmentation_grid(&setup(cfg, res)?)?;
            append_results(cfg, &grid.cells.iter().collect::<Vec<_>>())?;
            emit(cfg, "figure5.csv", &grid.to_csv())?;
            log::info!("best pair: {} + {}", grid.argmax.0, grid.argmax.1);
        }
        AnalyzeCommand::FewShot => {
            let rows = few_shot_sweep(&setup(cfg, res)?, &cfg.eval.few_shot_sizes)?;
            append_results(cfg, &rows.iter().map(|r| &r.cell).collect::<Vec<_>>())?;
            emit(cfg, "figure6.csv", &few_shot_csv(&rows))?;
        }
        AnalyzeCommand::Temperature => {
            let sweep = temperature_sweep(&setup(cfg, res)?, &cfg.eval.temperatures)?;
            append_results(cfg, &sweep.rows.iter().map(|r| &r.1).collect::<Vec<_>>())?;
            emit(cfg, "figure7.csv", &sweep.to_csv())?;
            log::info!("best temperature {}", sweep.best);
        }
        AnalyzeCommand::BatchSize => {
            let rows = batch_size_sweep(&setup(cfg, res)?, &cfg.eval.batch_sizes, cfg.eval.batch_epochs)?;
            append_results(cfg, &rows.iter().map(|r| &r.cell).collect::<Vec<_>>())?;
            emit(cfg, "table4.csv", &batch_size_csv(&rows))?;
        }
    }
    Ok(())
}
