//! Training loops for unsupervised transfer and the supervision-mixing regimes.
//!
//! A run is one or two phases. Each phase starts from the incoming encoder
//! parameters with a fresh Adam state and schedule, evaluates on the dev set at
//! step 0 and every `eval_every` steps, and hands its best-dev parameters to
//! the next phase.

mod optim;

pub use optim::{lr_at, Adam, ADAM_EPS, BETA1, BETA2};

use crate::augment::{AugmentError, AugmentationKind, AugmentationSpec, ViewPair};
use crate::data::{EncodedBatch, EncodedSentence, NliExample, SentencePairExample};
use crate::encoder::{parameter_layout, BoundEncoder, EncoderError, EncoderParams, Pooling, SentenceModel};
use crate::eval::{spearman_x100, EvalError, ModelEncoder};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::objectives::{nt_xent, PairClassifierParams, DEFAULT_ALPHA, DEFAULT_TEMPERATURE};
use crate::rng::{derive_seed, substream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train.{field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("{0}")]
    Data(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFinite { param: String },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "unsup")]
    Unsup,
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "sup-unsup")]
    SupUnsup,
    #[serde(rename = "joint-unsup")]
    JointUnsup,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Unsup => "unsup",
            Regime::Joint => "joint",
            Regime::SupUnsup => "sup-unsup",
            Regime::JointUnsup => "joint-unsup",
        }
    }

    pub fn needs_nli(self) -> bool {
        self != Regime::Unsup
    }

    pub fn needs_unlabeled(self) -> bool {
        matches!(self, Regime::Unsup | Regime::SupUnsup | Regime::JointUnsup)
    }

    fn phases(self) -> &'static [Phase] {
        match self {
            Regime::Unsup => &[Phase::Unsup],
            Regime::Joint => &[Phase::Joint],
            Regime::SupUnsup => &[Phase::Sup, Phase::Unsup],
            Regime::JointUnsup => &[Phase::Joint, Phase::Unsup],
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsup" => Ok(Regime::Unsup),
            "joint" => Ok(Regime::Joint),
            "sup-unsup" => Ok(Regime::SupUnsup),
            "joint-unsup" => Ok(Regime::JointUnsup),
            other => Err(TrainError::Config {
                field: "regime",
                message: format!("unknown regime {other:?} (expected unsup, joint, sup-unsup or joint-unsup)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Sup,
    Joint,
    Unsup,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Sup => "sup",
            Phase::Joint => "joint",
            Phase::Unsup => "unsup",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub lr: f64,
    pub warmup_fraction: f64,
    /// Steps of the contrastive phase (or of the whole joint run).
    pub total_steps: usize,
    /// Steps of the first phase of sup-unsup and joint-unsup; defaults to `total_steps`.
    pub supervised_steps: Option<usize>,
    pub eval_every: usize,
    pub aug1: AugmentationSpec,
    pub aug2: AugmentationSpec,
    /// Root seed; filled from the run config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Unsup,
            batch_size: 96,
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            lr: 1e-3,
            warmup_fraction: 0.1,
            total_steps: 1000,
            supervised_steps: None,
            eval_every: 200,
            aug1: AugmentationSpec::default_for(AugmentationKind::Shuffle),
            aug2: AugmentationSpec::default_for(AugmentationKind::FeatureCutoff),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn views(&self) -> ViewPair {
        ViewPair::new(self.aug1, self.aug2)
    }

    fn phase_steps(&self, phase: Phase) -> usize {
        match (self.regime, phase) {
            (Regime::SupUnsup | Regime::JointUnsup, Phase::Sup | Phase::Joint) => {
                self.supervised_steps.unwrap_or(self.total_steps)
            }
            _ => self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field, message: String| Err(TrainError::Config { field, message });
        if self.batch_size < 2 {
            return fail("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail("temperature", format!("must be positive, got {}", self.temperature));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail("alpha", format!("must be non-negative, got {}", self.alpha));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction", format!("must be in [0, 1), got {}", self.warmup_fraction));
        }
        if self.total_steps == 0 || self.supervised_steps == Some(0) {
            return fail("total_steps", "must be positive".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every", "must be positive".into());
        }
        for (field, spec) in [("aug1", self.aug1), ("aug2", self.aug2)] {
            if let Err(e) = spec.validate() {
                return fail(field, e.to_string());
            }
            if spec.is_adversarial() && self.regime != Regime::Joint {
                return fail(field, format!("{}; the {} regime has an unsupervised phase", AugmentError::Regime, self.regime));
            }
        }
        Ok(())
    }
}

/// `ceil(pool / min(batch, pool))`: steps needed to see every example once.
pub fn steps_per_epoch(pool: usize, batch: usize) -> usize {
    let b = batch.min(pool).max(1);
    pool.div_ceil(b)
}

/// Shuffled pass over `0..n`, reshuffled at every epoch boundary.
#[derive(Debug, Clone)]
struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    phase: u64,
}

impl EpochSampler {
    fn new(n: usize, seed: u64, phase: u64) -> Self {
        let mut s = Self { n, order: (0..n).collect(), pos: 0, epoch: 0, seed, phase };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut substream(self.seed, "order", &[self.phase, self.epoch]));
    }

    /// Up to `k` indices; the last batch of an epoch may be short.
    fn next(&mut self, k: usize) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let end = (self.pos + k).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub step: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_con: Option<f64>,
    pub dev_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub phase: String,
    pub step: usize,
    pub dev_spearman: f64,
}

/// Best parameters of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBest {
    pub phase: String,
    pub params: EncoderParams,
    pub dev_spearman: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best-dev model of the final phase.
    pub model: SentenceModel,
    pub best_dev: f64,
    pub history: Vec<EvalPoint>,
    pub records: Vec<StepRecord>,
    pub phases: Vec<PhaseBest>,
}

pub const METRICS_HEADER: &str = "phase\tstep\tlr\tloss\tl_ce\tl_con\tdev_spearman";

impl TrainOutcome {
    /// Tab-separated metrics log; absent values are written as `-`.
    pub fn metrics_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{:.8}\t{}\t{}\t{}\t{}\n",
                r.phase,
                r.step,
                r.lr,
                opt(r.loss),
                opt(r.l_ce),
                opt(r.l_con),
                opt(r.dev_spearman)
            ));
        }
        out
    }
}

/// Inputs of a run. Slices not needed by the regime may be empty.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub unlabeled: &'a [String],
    pub nli: &'a [NliExample],
    pub dev: &'a [SentencePairExample],
}

/// Unsupervised contrastive transfer on unlabeled texts.
pub fn train_unsupervised(
    model: SentenceModel,
    unlabeled: &[String],
    dev: &[SentencePairExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let config = TrainConfig { regime: Regime::Unsup, ..config.clone() };
    train_regime(model, TrainData { unlabeled, nli: &[], dev }, &config)
}

/// Runs every phase of `config.regime`, starting from `model`.
pub fn train_regime(mut model: SentenceModel, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.dev.len() < 2 {
        return Err(TrainError::Data("the dev set needs at least 2 pairs".into()));
    }
    if config.regime.needs_nli() && data.nli.is_empty() {
        return Err(TrainError::Data(format!("the {} regime needs NLI examples", config.regime)));
    }
    if config.regime.needs_unlabeled() && data.unlabeled.is_empty() {
        return Err(TrainError::Data(format!("the {} regime needs unlabeled texts", config.regime)));
    }
    let mut history = Vec::new();
    let mut records = Vec::new();
    let mut phases = Vec::new();
    for (i, &phase) in config.regime.phases().iter().enumerate() {
        let mut runner = PhaseRunner::new(phase, i as u64, &model, data, config)?;
        runner.run(&mut model)?;
        history.append(&mut runner.history);
        records.append(&mut runner.records);
        model.params = runner.best_params.clone();
        phases.push(PhaseBest { phase: phase.name().into(), params: runner.best_params, dev_spearman: runner.best_dev });
    }
    let best_dev = phases.last().expect("at least one phase").dev_spearman;
    Ok(TrainOutcome { model, best_dev, history, records, phases })
}

fn dev_score(model: &SentenceModel, dev: &[SentencePairExample]) -> Result<f64> {
    let enc = ModelEncoder::new(model, model.params.config.pooling);
    Ok(spearman_x100(&enc, dev)?)
}

struct PhaseRunner<'a> {
    phase: Phase,
    index: u64,
    config: &'a TrainConfig,
    data: TrainData<'a>,
    steps: usize,
    unlabeled: Vec<EncodedSentence>,
    nli: Vec<(EncodedSentence, EncodedSentence, usize)>,
    classifier: Option<PairClassifierParams>,
    best_params: EncoderParams,
    best_dev: f64,
    history: Vec<EvalPoint>,
    records: Vec<StepRecord>,
}

struct StepLosses {
    total: f64,
    l_ce: Option<f64>,
    l_con: Option<f64>,
    encoder_grads: Vec<Tensor>,
    classifier_grads: Option<Vec<Tensor>>,
}

impl<'a> PhaseRunner<'a> {
    fn new(phase: Phase, index: u64, model: &SentenceModel, data: TrainData<'a>, config: &'a TrainConfig) -> Result<Self> {
        let encode = |t: &str| model.encode_text(t);
        let unlabeled = if phase == Phase::Unsup {
            data.unlabeled.iter().map(|t| encode(t)).collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let nli = if phase == Phase::Unsup {
            Vec::new()
        } else {
            data.nli
                .iter()
                .map(|ex| Ok((encode(&ex.premise)?, encode(&ex.hypothesis)?, ex.label.index())))
                .collect::<Result<Vec<_>, EncoderError>>()?
        };
        let classifier = (phase != Phase::Unsup)
            .then(|| PairClassifierParams::init(model.params.config.d_model, derive_seed(config.seed, "classifier", &[index])));
        Ok(Self {
            phase,
            index,
            config,
            data,
            steps: config.phase_steps(phase),
            unlabeled,
            nli,
            classifier,
            best_params: model.params.clone(),
            best_dev: f64::NEG_INFINITY,
            history: Vec::new(),
            records: Vec::new(),
        })
    }

    fn evaluate(&mut self, model: &SentenceModel, step: usize) -> Result<f64> {
        let score = dev_score(model, self.data.dev)?;
        log::info!("{} step {step}: dev spearman {score:.3}", self.phase.name());
        self.history.push(EvalPoint { phase: self.phase.name().into(), step, dev_spearman: score });
        if score > self.best_dev {
            self.best_dev = score;
            self.best_params = model.params.clone();
        }
        Ok(score)
    }

    fn run(&mut self, model: &mut SentenceModel) -> Result<()> {
        let dev0 = self.evaluate(model, 0)?;
        self.records.push(StepRecord {
            phase: self.phase.name().into(),
            step: 0,
            lr: 0.0,
            loss: None,
            l_ce: None,
            l_con: None,
            dev_spearman: Some(dev0),
        });
        let pool = if self.phase == Phase::Unsup { self.unlabeled.len() } else { self.nli.len() };
        let batch = self.config.batch_size.min(pool);
        if batch < self.config.batch_size {
            log::warn!(
                "batch size {} exceeds the {pool} available examples; using {batch} per step",
                self.config.batch_size
            );
        }
        let mut sampler = EpochSampler::new(pool, self.config.seed, self.index);
        let mut adam = Adam::new(&model.params.tensors());
        let mut head_adam = self.classifier.as_ref().map(|c| Adam::new(&[&c.weight, &c.bias]));
        for step in 1..=self.steps {
            let lr = lr_at(step, self.steps, self.config.warmup_fraction, self.config.lr);
            let idx = sampler.next(batch);
            let losses = match self.phase {
                Phase::Unsup => self.unsup_step(model, &idx, step)?,
                Phase::Sup | Phase::Joint => self.supervised_step(model, &idx, step)?,
            };
            check_finite(&losses.encoder_grads, &model.params)?;
            adam.step(model.params.tensors_mut(), &losses.encoder_grads, lr);
            if let (Some(c), Some(a), Some(g)) = (self.classifier.as_mut(), head_adam.as_mut(), &losses.classifier_grads) {
                if g.iter().any(|t| !t.is_finite()) {
                    return Err(TrainError::NonFinite { param: "classifier".into() });
                }
                a.step(c.tensors_mut().into_iter().collect(), g, lr);
            }
            let dev = if step % self.config.eval_every == 0 { Some(self.evaluate(model, step)?) } else { None };
            self.records.push(StepRecord {
                phase: self.phase.name().into(),
                step,
                lr,
                loss: Some(losses.total),
                l_ce: losses.l_ce,
                l_con: losses.l_con,
                dev_spearman: dev,
            });
        }
        Ok(())
    }

    fn unsup_step(&self, model: &SentenceModel, idx: &[usize], step: usize) -> Result<StepLosses> {
        let sentences: Vec<EncodedSentence> = idx.iter().map(|&i| self.unlabeled[i].clone()).collect();
        let mut rng = substream(self.config.seed, "augment", &[self.index, step as u64]);
        let (l_con, grads) = contrastive_grads(&model.params, &sentences, &self.config.views(), self.config.temperature, &mut rng, None)?;
        Ok(StepLosses { total: l_con, l_ce: None, l_con: Some(l_con), encoder_grads: grads, classifier_grads: None })
    }

    fn supervised_step(&self, model: &SentenceModel, idx: &[usize], step: usize) -> Result<StepLosses> {
        let n = idx.len();
        let mut sentences: Vec<EncodedSentence> = idx.iter().map(|&i| self.nli[i].0.clone()).collect();
        sentences.extend(idx.iter().map(|&i| self.nli[i].1.clone()));
        let labels: Vec<usize> = idx.iter().map(|&i| self.nli[i].2).collect();
        let classifier = self.classifier.as_ref().expect("supervised phases own a classifier");

        let batch = EncodedBatch::pad(&sentences);
        let mut tape = Tape::<f32>::new();
        let enc = model.params.bind(&mut tape, true);
        let head = classifier.bind(&mut tape, true);
        let e = enc.embed(&mut tape, &batch)?;
        let layers = enc.encode(&mut tape, e, &batch.mask, batch.seq_len)?;
        let r = enc.pool(&mut tape, &layers, &batch.mask, batch.seq_len, Pooling::LastLayerMean)?;
        let r1 = tape.select_rows(r, &(0..n).collect::<Vec<_>>())?;
        let r2 = tape.select_rows(r, &(n..2 * n).collect::<Vec<_>>())?;
        let loss = head.loss(&mut tape, r1, r2, &labels)?;
        backward(&mut tape, loss, &enc)?;
        let l_ce = tape.value(loss).item().expect("scalar") as f64;
        let mut encoder_grads = enc.grads(&tape);
        let classifier_grads = head.vars().iter().map(|&v| tape.grad(v).expect("trainable").clone()).collect();

        if self.phase == Phase::Sup || self.config.alpha == 0.0 {
            return Ok(StepLosses {
                total: l_ce,
                l_ce: Some(l_ce),
                l_con: None,
                encoder_grads,
                classifier_grads: Some(classifier_grads),
            });
        }
        let views = self.config.views();
        let embed_grad = views.uses_adversarial().then(|| tape.grad(e).expect("embeddings require grad").clone());
        drop(tape);
        let mut rng = substream(self.config.seed, "augment", &[self.index, step as u64]);
        let (l_con, con_grads) =
            contrastive_grads(&model.params, &sentences, &views, self.config.temperature, &mut rng, embed_grad.as_ref())?;
        let alpha = self.config.alpha as f32;
        for (g, c) in encoder_grads.iter_mut().zip(&con_grads) {
            g.data_mut().iter_mut().zip(c.data()).for_each(|(a, b)| *a += alpha * b);
        }
        Ok(StepLosses {
            total: l_ce + self.config.alpha * l_con,
            l_ce: Some(l_ce),
            l_con: Some(l_con),
            encoder_grads,
            classifier_grads: Some(classifier_grads),
        })
    }
}

fn param_name(params_config: &crate::encoder::EncoderConfig, i: usize) -> String {
    parameter_layout(params_config).get(i).map_or_else(|| format!("#{i}"), |(n, _)| n.clone())
}

fn check_finite(grads: &[Tensor], params: &EncoderParams) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(TrainError::NonFinite { param: param_name(&params.config, i) }),
        None => Ok(()),
    }
}

/// Backward pass that names the offending encoder parameter on non-finite gradients.
fn backward(tape: &mut Tape<f32>, loss: Var, enc: &BoundEncoder) -> Result<()> {
    match tape.backward(loss) {
        Err(NumericsError::NonFinite { node, .. }) => {
            let param = match enc.vars().iter().position(|v| v.index() == node) {
                Some(i) => param_name(enc.config(), i),
                None => "classifier".into(),
            };
            Err(TrainError::NonFinite { param })
        }
        other => Ok(other?),
    }
}

/// NT-Xent loss and encoder gradients for two views of each sentence.
pub fn contrastive_grads(
    params: &EncoderParams,
    sentences: &[EncodedSentence],
    views: &ViewPair,
    temperature: f64,
    rng: &mut crate::rng::Rng,
    supervised_grad: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>)> {
    let aug = views.build(sentences, params.config.d_model, rng, supervised_grad)?;
    let mut tape = Tape::<f32>::new();
    let enc = params.bind(&mut tape, true);
    let mut e = enc.embed(&mut tape, &aug.batch)?;
    if let Some(keep) = aug.keep {
        let k = tape.constant(keep);
        e = tape.mul(e, k)?;
    }
    if let Some(delta) = aug.additive {
        let d = tape.constant(delta);
        e = tape.add(e, d)?;
    }
    let layers = enc.encode(&mut tape, e, &aug.batch.mask, aug.batch.seq_len)?;
    let r = enc.pool(&mut tape, &layers, &aug.batch.mask, aug.batch.seq_len, Pooling::LastLayerMean)?;
    let loss = nt_xent(&mut tape, r, temperature as f32)?;
    backward(&mut tape, loss, &enc)?;
    Ok((tape.value(loss).item().expect("scalar") as f64, enc.grads(&tape)))
}
