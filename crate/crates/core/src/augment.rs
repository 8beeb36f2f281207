//! View generation on the token-embedding layer.
//!
//! Every augmentation acts on the `[B*L, d]` sum of token and position
//! embeddings, except shuffle, which permutes the position ids of the real
//! tokens before the lookup. A [`ViewPair`] turns `M` sentences into a batch of
//! `2M` rows where rows `2k` and `2k+1` are two views of sentence `k`.

use crate::data::{EncodedBatch, EncodedSentence};
use crate::numerics::Tensor;
use crate::rng::Rng;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

const FGV_ZERO_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("cannot parse augmentation {0:?}")]
    Parse(String),
    #[error("invalid augmentation parameter: {0}")]
    Invalid(String),
    #[error("adversarial augmentation needs supervised gradients and is only available in the joint phase")]
    Regime,
    #[error("gradient shape {found:?} does not match embeddings {expected:?}")]
    GradShape { found: Vec<usize>, expected: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    None,
    Shuffle,
    TokenCutoff,
    FeatureCutoff,
    Dropout,
    Adversarial,
}

impl AugmentationKind {
    /// The five kinds usable without supervision, in grid order.
    pub const GRID: [AugmentationKind; 5] = [
        AugmentationKind::None,
        AugmentationKind::Shuffle,
        AugmentationKind::TokenCutoff,
        AugmentationKind::FeatureCutoff,
        AugmentationKind::Dropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationKind::None => "none",
            AugmentationKind::Shuffle => "shuffle",
            AugmentationKind::TokenCutoff => "token_cutoff",
            AugmentationKind::FeatureCutoff => "feature_cutoff",
            AugmentationKind::Dropout => "dropout",
            AugmentationKind::Adversarial => "adversarial",
        }
    }

    /// Default ratio, probability or step size; `None` for parameterless kinds.
    pub fn default_param(self) -> Option<f64> {
        match self {
            AugmentationKind::None | AugmentationKind::Shuffle => None,
            AugmentationKind::TokenCutoff => Some(0.15),
            AugmentationKind::FeatureCutoff => Some(0.2),
            AugmentationKind::Dropout => Some(0.2),
            AugmentationKind::Adversarial => Some(1.0),
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An augmentation kind with its parameter, written as `kind[:param]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub param: f64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, param: f64) -> Result<Self, AugmentError> {
        let spec = Self { kind, param };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_for(kind: AugmentationKind) -> Self {
        Self { kind, param: kind.default_param().unwrap_or(0.0) }
    }

    pub fn none() -> Self {
        Self::default_for(AugmentationKind::None)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let p = self.param;
        let ok = match self.kind {
            AugmentationKind::None | AugmentationKind::Shuffle => true,
            AugmentationKind::TokenCutoff | AugmentationKind::FeatureCutoff | AugmentationKind::Dropout => {
                (0.0..1.0).contains(&p)
            }
            AugmentationKind::Adversarial => p.is_finite() && p > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(AugmentError::Invalid(format!("{} does not accept {p}", self.kind)))
        }
    }

    pub fn is_adversarial(&self) -> bool {
        self.kind == AugmentationKind::Adversarial
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind.default_param() {
            None => write!(f, "{}", self.kind),
            Some(_) => write!(f, "{}:{}", self.kind, self.param),
        }
    }
}

impl FromStr for AugmentationSpec {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, AugmentError> {
        let (name, param) = match s.trim().split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s.trim(), None),
        };
        let kind = match name {
            "none" => AugmentationKind::None,
            "shuffle" => AugmentationKind::Shuffle,
            "token_cutoff" => AugmentationKind::TokenCutoff,
            "feature_cutoff" => AugmentationKind::FeatureCutoff,
            "dropout" => AugmentationKind::Dropout,
            "adversarial" => AugmentationKind::Adversarial,
            _ => return Err(AugmentError::Parse(s.to_string())),
        };
        let param = match (kind.default_param(), param) {
            (None, None) => 0.0,
            (None, Some(_)) => return Err(AugmentError::Parse(s.to_string())),
            (Some(d), None) => d,
            (Some(_), Some(p)) => p.trim().parse().map_err(|_| AugmentError::Parse(s.to_string()))?,
        };
        Self::new(kind, param)
    }
}

impl TryFrom<String> for AugmentationSpec {
    type Error = AugmentError;

    fn try_from(s: String) -> Result<Self, AugmentError> {
        s.parse()
    }
}

impl From<AugmentationSpec> for String {
    fn from(spec: AugmentationSpec) -> String {
        spec.to_string()
    }
}

/// Permutes the position ids of real positions in one row; padding keeps its ids.
pub fn shuffle_row(position_ids: &mut [usize], mask: &[bool], rng: &mut Rng) {
    let real: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut ids: Vec<usize> = real.iter().map(|&i| position_ids[i]).collect();
    ids.shuffle(rng);
    for (&i, id) in real.iter().zip(ids) {
        position_ids[i] = id;
    }
}

/// Indices of `floor(ratio * real)` distinct real positions to erase.
pub fn token_cutoff_rows(mask: &[bool], ratio: f64, rng: &mut Rng) -> Vec<usize> {
    let real: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let k = (ratio * real.len() as f64).floor() as usize;
    let mut picked: Vec<usize> = index::sample(rng, real.len(), k.min(real.len())).iter().map(|j| real[j]).collect();
    picked.sort_unstable();
    picked
}

/// `floor(ratio * d)` distinct feature columns to erase.
pub fn feature_cutoff_cols(d: usize, ratio: f64, rng: &mut Rng) -> Vec<usize> {
    let k = ((ratio * d as f64).floor() as usize).min(d);
    let mut cols = index::sample(rng, d, k).into_vec();
    cols.sort_unstable();
    cols
}

/// Independent keep decisions with drop probability `p` (no rescaling).
pub fn dropout_keep(n: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| !rng.random_bool(p)).collect()
}

/// `epsilon * g / ||g||_2` with the norm taken over the whole tensor.
/// A gradient with norm below `1e-12` yields a zero perturbation.
pub fn fgv_perturbation(grad: &Tensor, epsilon: f64) -> Tensor {
    let norm = grad.data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm < FGV_ZERO_GUARD {
        return Tensor::zeros(grad.shape().to_vec());
    }
    grad.map(|g| (epsilon * g as f64 / norm) as f32)
}

/// Two augmentations that produce the positive pair of each sentence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub first: AugmentationSpec,
    pub second: AugmentationSpec,
}

/// `2M` interleaved view rows ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    /// Token and (possibly shuffled) position ids.
    pub batch: EncodedBatch,
    /// Elementwise 0/1 multiplier on the embeddings, `[2M*L, d]`.
    pub keep: Option<Tensor>,
    /// Additive embedding perturbation, `[2M*L, d]`.
    pub additive: Option<Tensor>,
}

impl ViewPair {
    pub fn new(first: AugmentationSpec, second: AugmentationSpec) -> Self {
        Self { first, second }
    }

    pub fn uses_adversarial(&self) -> bool {
        self.first.is_adversarial() || self.second.is_adversarial()
    }

    /// Builds the view batch for `sentences`.
    ///
    /// `supervised_grad` is the gradient of the classification loss with
    /// respect to the `[M*L, d]` embeddings of `EncodedBatch::pad(sentences)`;
    /// it is required exactly when one of the views is adversarial.
    pub fn build(
        &self,
        sentences: &[EncodedSentence],
        d_model: usize,
        rng: &mut Rng,
        supervised_grad: Option<&Tensor>,
    ) -> Result<AugmentedBatch, AugmentError> {
        self.first.validate()?;
        self.second.validate()?;
        let seq_len = sentences.iter().map(EncodedSentence::len).max().unwrap_or(0);
        let m = sentences.len();
        let perturbation = if self.uses_adversarial() {
            let g = supervised_grad.ok_or(AugmentError::Regime)?;
            let expected = vec![m * seq_len, d_model];
            if g.shape() != expected.as_slice() {
                return Err(AugmentError::GradShape { found: g.shape().to_vec(), expected });
            }
            Some(g)
        } else {
            None
        };

        let doubled: Vec<EncodedSentence> = sentences.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let mut batch = EncodedBatch::pad_to(&doubled, seq_len);
        let row_elems = seq_len * d_model;
        let needs_keep = [self.first, self.second].iter().any(|s| {
            matches!(
                s.kind,
                AugmentationKind::TokenCutoff | AugmentationKind::FeatureCutoff | AugmentationKind::Dropout
            )
        });
        let mut keep = needs_keep.then(|| vec![1.0f32; 2 * m * row_elems]);
        let mut additive = perturbation.map(|_| vec![0.0f32; 2 * m * row_elems]);

        for i in 0..m {
            for (v, spec) in [self.first, self.second].into_iter().enumerate() {
                let r = 2 * i + v;
                let tokens = r * seq_len..(r + 1) * seq_len;
                let elems = r * row_elems..(r + 1) * row_elems;
                match spec.kind {
                    AugmentationKind::None => {}
                    AugmentationKind::Shuffle => {
                        shuffle_row(&mut batch.position_ids[tokens.clone()], &batch.mask[tokens], rng)
                    }
                    AugmentationKind::TokenCutoff => {
                        let row = &mut keep.as_mut().expect("keep allocated")[elems];
                        for t in token_cutoff_rows(&batch.mask[tokens], spec.param, rng) {
                            row[t * d_model..(t + 1) * d_model].fill(0.0);
                        }
                    }
                    AugmentationKind::FeatureCutoff => {
                        let row = &mut keep.as_mut().expect("keep allocated")[elems];
                        for c in feature_cutoff_cols(d_model, spec.param, rng) {
                            for t in 0..seq_len {
                                row[t * d_model + c] = 0.0;
                            }
                        }
                    }
                    AugmentationKind::Dropout => {
                        let row = &mut keep.as_mut().expect("keep allocated")[elems];
                        for (x, k) in row.iter_mut().zip(dropout_keep(row_elems, spec.param, rng)) {
                            if !k {
                                *x = 0.0;
                            }
                        }
                    }
                    AugmentationKind::Adversarial => {
                        let g = perturbation.expect("checked above");
                        let delta = fgv_perturbation(g, spec.param);
                        let src = &delta.data()[i * row_elems..(i + 1) * row_elems];
                        additive.as_mut().expect("additive allocated")[elems].copy_from_slice(src);
                    }
                }
            }
        }
        let shape = vec![2 * m * seq_len, d_model];
        Ok(AugmentedBatch {
            batch,
            keep: keep.map(|k| Tensor::new(shape.clone(), k).expect("sized")),
            additive: additive.map(|a| Tensor::new(shape, a).expect("sized")),
        })
    }
}

impl fmt::Display for ViewPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.first, self.second)
    }
}

impl FromStr for ViewPair {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, AugmentError> {
        let (a, b) = s.split_once('+').ok_or_else(|| AugmentError::Parse(s.to_string()))?;
        Ok(Self::new(a.parse()?, b.parse()?))
    }
}
