//! Pre-LN transformer encoder with learned absolute positions.
//!
//! There is no dropout inside the encoder: the only stochasticity during
//! training comes from view augmentation, so a forward pass is a pure function
//! of its inputs.

mod checkpoint;

pub use checkpoint::{
    decode_params, encode_params, load_checkpoint, save_checkpoint, vocab_path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::data::{tokenize, EncodedBatch, EncodedSentence, Vocab};
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};
use crate::rng::substream;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mask-aware mean of the final layer.
    LastLayerMean,
    /// Average of the mask-aware means of the final two layers.
    LastTwoLayersMean,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::LastLayerMean => "last_layer_mean",
            Pooling::LastTwoLayersMean => "last_two_layers_mean",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_layer_mean" | "last_layer" => Ok(Pooling::LastLayerMean),
            "last_two_layers_mean" | "last_two" => Ok(Pooling::LastTwoLayersMean),
            other => Err(EncoderError::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Pooling used for evaluation; training always pools the last layer.
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            max_len: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            pooling: Pooling::LastTwoLayersMean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail(format!("all sizes must be positive: {self:?}"));
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.pooling == Pooling::LastTwoLayersMean && self.n_layers < 2 {
            return fail("last_two_layers_mean pooling needs at least 2 layers".into());
        }
        Ok(())
    }
}

/// Weights of one pre-LN block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_gamma, &self.ln2_beta, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_gamma, &mut self.ln2_beta,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// All learnable encoder weights plus the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
}

/// Expected `(name, shape)` of every parameter, in canonical order.
pub fn parameter_layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (config.d_model, config.d_ff);
    let mut out = vec![
        ("token_embedding".to_string(), vec![config.vocab_size, d]),
        ("position_embedding".to_string(), vec![config.max_len, d]),
    ];
    let shapes = [
        vec![d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d],
        vec![d], vec![d], vec![d, f], vec![f], vec![f, d], vec![d],
    ];
    for l in 0..config.n_layers {
        for (name, shape) in LAYER_FIELDS.iter().zip(&shapes) {
            out.push((format!("layers.{l}.{name}"), shape.clone()));
        }
    }
    out
}

impl EncoderParams {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm scales.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let tensors: Vec<Tensor> = parameter_layout(config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                if name.ends_with(".gamma") {
                    Tensor::ones(shape)
                } else if name.ends_with(".beta") || name.contains(".b") {
                    Tensor::zeros(shape)
                } else {
                    let mut rng = substream(seed, "init", &[i as u64]);
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                    Tensor::new(shape, data).expect("layout shape")
                }
            })
            .collect();
        Self::from_tensors(config.clone(), tensors)
    }

    /// Assembles parameters from tensors in [`parameter_layout`] order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if tensors.len() != layout.len() {
            return Err(EncoderError::Config(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(EncoderError::Config(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let token_embedding = it.next().expect("layout");
        let position_embedding = it.next().expect("layout");
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut f: Vec<Tensor> = it.by_ref().take(16).collect();
            let mut next = || f.remove(0);
            layers.push(LayerParams {
                ln1_gamma: next(),
                ln1_beta: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        Ok(Self { config, token_embedding, position_embedding, layers })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        parameter_layout(&self.config).into_iter().map(|(n, _)| n).zip(self.tensors()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundEncoder {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t.cast(), trainable)).collect();
        BoundEncoder { config: self.config.clone(), vars }
    }
}

/// Encoder parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    config: EncoderConfig,
    vars: Vec<Var>,
}

struct LayerVars<'a>(&'a [Var]);

impl LayerVars<'_> {
    fn get(&self, name: &str) -> Var {
        let i = LAYER_FIELDS.iter().position(|f| *f == name).expect("known field");
        self.0[i]
    }
}

impl BoundEncoder {
    /// Wraps existing leaves given in [`parameter_layout`] order.
    pub fn from_vars<T: Real>(tape: &Tape<T>, config: EncoderConfig, vars: Vec<Var>) -> Result<Self> {
        let layout = parameter_layout(&config);
        if vars.len() != layout.len() {
            return Err(EncoderError::Config(format!("expected {} parameter vars, got {}", layout.len(), vars.len())));
        }
        for ((name, shape), &v) in layout.iter().zip(&vars) {
            if tape.value(v).shape() != shape.as_slice() {
                return Err(EncoderError::Config(format!("{name}: expected shape {shape:?}, got {:?}", tape.value(v).shape())));
            }
        }
        Ok(Self { config, vars })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameter leaves in canonical order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn token_table(&self) -> Var {
        self.vars[0]
    }

    pub fn position_table(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize) -> LayerVars<'_> {
        LayerVars(&self.vars[2 + 16 * l..2 + 16 * (l + 1)])
    }

    /// Gradients of all parameters after `tape.backward`, as f32.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.cast(),
                None => Tensor::zeros(tape.value(v).shape().to_vec()),
            })
            .collect()
    }

    /// `token_table[token_ids] + position_table[position_ids]` for a padded batch.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, batch: &EncodedBatch) -> Result<Var> {
        if batch.seq_len > self.config.max_len {
            return Err(EncoderError::Config(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if batch.token_ids.len() != batch.position_ids.len() {
            return Err(EncoderError::Config("token and position id counts differ".into()));
        }
        let tok = tape.embedding(self.token_table(), &batch.token_ids, "token_embedding")?;
        let pos = tape.embedding(self.position_table(), &batch.position_ids, "position_embedding")?;
        Ok(tape.add(tok, pos)?)
    }

    /// Runs every block over `e[B*L, d]`; returns each layer's output.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, e: Var, mask: &[bool], seq_len: usize) -> Result<Vec<Var>> {
        let eps = T::c(LN_EPS);
        let mut x = e;
        let mut outputs = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let p = self.layer(l);
            let h = tape.layer_norm(x, p.get("ln1.gamma"), p.get("ln1.beta"), eps)?;
            let q = tape.matmul(h, p.get("attn.wq"))?;
            let q = tape.add_bias(q, p.get("attn.bq"))?;
            let k = tape.matmul(h, p.get("attn.wk"))?;
            let k = tape.add_bias(k, p.get("attn.bk"))?;
            let v = tape.matmul(h, p.get("attn.wv"))?;
            let v = tape.add_bias(v, p.get("attn.bv"))?;
            let a = tape.attention(q, k, v, mask, seq_len, self.config.n_heads)?;
            let o = tape.matmul(a, p.get("attn.wo"))?;
            let o = tape.add_bias(o, p.get("attn.bo"))?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, p.get("ln2.gamma"), p.get("ln2.beta"), eps)?;
            let f = tape.matmul(h, p.get("ffn.w1"))?;
            let f = tape.add_bias(f, p.get("ffn.b1"))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p.get("ffn.w2"))?;
            let f = tape.add_bias(f, p.get("ffn.b2"))?;
            x = tape.add(x, f)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Sentence representations `[B, d]` from layer outputs.
    ///
    /// `pool_mask` selects the rows that are averaged; it is usually the
    /// attention mask but may exclude further tokens.
    pub fn pool<T: Real>(
        &self,
        tape: &mut Tape<T>,
        layers: &[Var],
        pool_mask: &[bool],
        seq_len: usize,
        pooling: Pooling,
    ) -> Result<Var> {
        pool(tape, layers, pool_mask, seq_len, pooling)
    }

    /// Embed, encode and pool a padded batch.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, batch: &EncodedBatch, pooling: Pooling) -> Result<Var> {
        let e = self.embed(tape, batch)?;
        let layers = self.encode(tape, e, &batch.mask, batch.seq_len)?;
        self.pool(tape, &layers, &batch.mask, batch.seq_len, pooling)
    }
}

/// Mask-aware pooling over per-layer outputs.
pub fn pool<T: Real>(
    tape: &mut Tape<T>,
    layers: &[Var],
    pool_mask: &[bool],
    seq_len: usize,
    pooling: Pooling,
) -> Result<Var> {
    match (pooling, layers) {
        (_, []) => Err(EncoderError::Config("no layer outputs to pool".into())),
        (Pooling::LastLayerMean, [.., last]) => Ok(tape.masked_mean(*last, pool_mask, seq_len)?),
        (Pooling::LastTwoLayersMean, [.., prev, last]) => {
            let a = tape.masked_mean(*last, pool_mask, seq_len)?;
            let b = tape.masked_mean(*prev, pool_mask, seq_len)?;
            let s = tape.add(a, b)?;
            Ok(tape.scale(s, T::c(0.5))?)
        }
        (Pooling::LastTwoLayersMean, [_]) => {
            Err(EncoderError::Config("last_two_layers_mean pooling needs at least 2 layers".into()))
        }
    }
}

/// Encoder parameters together with the vocabulary that produced their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceModel {
    pub params: EncoderParams,
    pub vocab: Vocab,
}

const EVAL_CHUNK: usize = 128;

impl SentenceModel {
    pub fn new(params: EncoderParams, vocab: Vocab) -> Result<Self> {
        if vocab.len() != params.config.vocab_size {
            return Err(EncoderError::Config(format!(
                "vocabulary has {} tokens but the encoder expects {}",
                vocab.len(),
                params.config.vocab_size
            )));
        }
        Ok(Self { params, vocab })
    }

    pub fn encode_text(&self, text: &str) -> Result<EncodedSentence> {
        Ok(tokenize(text, &self.vocab, self.params.config.max_len)?)
    }

    /// Pooled representations of `sentences`.
    ///
    /// Tokens whose id is in `excluded` are left out of the pooling average
    /// (they still attend and are attended to). A sentence whose every token is
    /// excluded falls back to ordinary pooling.
    pub fn represent(
        &self,
        sentences: &[EncodedSentence],
        pooling: Pooling,
        excluded: Option<&HashSet<usize>>,
    ) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(EVAL_CHUNK) {
            let batch = EncodedBatch::pad(chunk);
            let pool_mask = match excluded {
                Some(ex) if !ex.is_empty() => frequency_pool_mask(&batch, ex),
                _ => batch.mask.clone(),
            };
            let mut tape = Tape::<f32>::new();
            let enc = self.params.bind(&mut tape, false);
            let e = enc.embed(&mut tape, &batch)?;
            let layers = enc.encode(&mut tape, e, &batch.mask, batch.seq_len)?;
            let r = enc.pool(&mut tape, &layers, &pool_mask, batch.seq_len, pooling)?;
            let value = tape.value(r);
            out.extend((0..chunk.len()).map(|i| value.row(i).to_vec()));
        }
        Ok(out)
    }
}

/// Attention mask minus excluded token ids, reverting to the attention mask
/// for any sentence left empty.
pub fn frequency_pool_mask(batch: &EncodedBatch, excluded: &HashSet<usize>) -> Vec<bool> {
    let l = batch.seq_len;
    let mut mask: Vec<bool> =
        batch.mask.iter().zip(&batch.token_ids).map(|(&m, id)| m && !excluded.contains(id)).collect();
    for b in 0..batch.batch_size {
        let row = b * l..(b + 1) * l;
        if !mask[row.clone()].iter().any(|&m| m) {
            mask[row.clone()].copy_from_slice(&batch.mask[row]);
        }
    }
    mask
}
