mod analyze;
mod resources;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use consert::config::{ConfigError, RunConfig};
use consert::data::{write_nli_tsv, write_sts_tsv, write_unlabeled};
use consert::encoder::{load_checkpoint, save_checkpoint, Pooling};
use consert::eval::{evaluate_sts, EvalReport, ModelEncoder, ReportMeta};
use consert::train::{train_regime, Regime, TrainData};
use resources::Resources;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "consert", version, about = "Contrastive sentence encoders trained from scratch")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact of the run.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// `key=value` override applied on top of the config file, e.g. `train.lr=1e-3`.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder, keep the best-dev checkpoint and score it on the test sets.
    Train {
        #[arg(long)]
        regime: Option<Regime>,
    },
    /// Score a checkpoint on STS files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// STS TSV file; repeat for several datasets. Defaults to the configured test sets.
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        pooling: Option<Pooling>,
    },
    /// Diagnostics and sweeps.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
    /// Write the synthetic corpus as data files.
    GenData {
        /// Output directory; defaults to `<out-dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl GlobalArgs {
    /// Flags become overrides applied after every `--override`.
    fn overrides(&self, extra: &[String]) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(seed) = self.seed {
            all.push(format!("seed={seed}"));
        }
        if let Some(dir) = &self.out_dir {
            all.push(format!("out_dir={}", serde_json::to_string(&dir.to_string_lossy()).expect("string")));
        }
        all.extend_from_slice(extra);
        all
    }

    fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides(extra))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write(&dir.join(format!("{stem}.tsv")), &report.to_tsv())?;
    write(&dir.join(format!("{stem}.json")), &(serde_json::to_string_pretty(report)? + "\n"))
}

fn cmd_train(global: &GlobalArgs, regime: Option<Regime>) -> Result<()> {
    let extra: Vec<String> = regime.map(|r| format!("train.regime=\"{r}\"")).into_iter().collect();
    let cfg = global.resolve(&extra)?;
    let out = &cfg.out_dir;
    write(&out.join("config.resolved.toml"), &cfg.to_toml())?;

    let res = Resources::load(&cfg)?;
    let model = res.untrained_model(&cfg)?;
    log::info!(
        "training {} on {} unlabeled / {} nli sentences, {} parameters",
        cfg.train.regime,
        res.unlabeled.len(),
        res.nli.len(),
        model.params.num_parameters()
    );
    let data = TrainData { unlabeled: &res.unlabeled, nli: &res.nli, dev: &res.dev };
    let outcome = train_regime(model, data, &cfg.train_config())?;
    write(&out.join("metrics.tsv"), &outcome.metrics_tsv())?;
    let checkpoint = out.join("checkpoints").join("best.csrt");
    save_checkpoint(&checkpoint, &outcome.model)?;
    log::info!("best dev {:.3}; checkpoint {}", outcome.best_dev, checkpoint.display());

    let pooling = cfg.eval.pooling;
    let meta = ReportMeta { checkpoint: checkpoint.display().to_string(), config_hash: cfg.hash() };
    let report = evaluate_sts(&ModelEncoder::new(&outcome.model, pooling), &res.test, pooling, &meta)?;
    write_report(out, "eval", &report)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_eval(global: &GlobalArgs, checkpoint: &Path, data: &[PathBuf], pooling: Option<Pooling>) -> Result<()> {
    let cfg = global.resolve(&[])?;
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let datasets = if data.is_empty() {
        Resources::load(&cfg)?.test
    } else {
        data.iter().map(|p| resources::load_sts_dataset(p)).collect::<Result<_>>()?
    };
    let pooling = pooling.unwrap_or(cfg.eval.pooling);
    let meta = ReportMeta { checkpoint: checkpoint.display().to_string(), config_hash: cfg.hash() };
    let report = evaluate_sts(&ModelEncoder::new(&model, pooling), &datasets, pooling, &meta)?;
    write_report(&cfg.out_dir, "eval", &report)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_gen_data(global: &GlobalArgs, out: Option<&Path>) -> Result<()> {
    let cfg = global.resolve(&[])?;
    let dir = out.map_or_else(|| cfg.out_dir.join("data"), Path::to_path_buf);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let corpus = resources::synthetic_corpus(&cfg);
    write_unlabeled(&dir.join("unlabeled.txt"), &corpus.unlabeled)?;
    write_sts_tsv(&dir.join("dev.tsv"), &corpus.dev)?;
    write_sts_tsv(&dir.join("test.tsv"), &corpus.test)?;
    write_nli_tsv(&dir.join("nli.tsv"), &corpus.nli)?;
    println!(
        "wrote {} unlabeled, {} dev, {} test, {} nli to {}",
        corpus.unlabeled.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.nli.len(),
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { regime } => cmd_train(&cli.global, *regime),
        Command::Eval { checkpoint, data, pooling } => cmd_eval(&cli.global, checkpoint, data, *pooling),
        Command::Analyze(sub) => analyze::run(&cli.global.resolve(&[])?, sub),
        Command::GenData { out } => cmd_gen_data(&cli.global, out.as_deref()),
    }
}

/// The error chain on one line, skipping causes a message already embeds.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
