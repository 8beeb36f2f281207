//! Contrastive sentence-representation transfer at desk scale.
//!
//! The crate bundles everything needed to train and analyse a small
//! transformer sentence encoder with an NT-Xent objective:
//!
//! - [`numerics`]: dense tensors and a reverse-mode tape, plus a
//!   central-difference gradient checker.
//! - [`encoder`]: a pre-LN transformer encoder with learned positions,
//!   mask-aware pooling and a versioned checkpoint format.
//! - [`augment`]: embedding-level view generation (shuffle, cutoffs,
//!   dropout noise, adversarial FGV).
//! - [`objectives`]: NT-Xent, the NLI pair classifier and the joint loss.
//! - [`train`]: Adam with linear warmup and the four training regimes.
//! - [`eval`]: Spearman-based STS evaluation, collapse diagnostics and sweeps.
//! - [`data`]: tokenizer, vocabulary, file formats and a synthetic corpus.
//! - [`config`]: the declarative run configuration shared with the CLI.

pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod train;

pub use augment::{AugmentationKind, AugmentationSpec, ViewPair};
pub use config::RunConfig;
pub use data::{EncodedSentence, NliExample, NliLabel, SentencePairExample, Vocab};
pub use encoder::{EncoderConfig, EncoderParams, Pooling, SentenceModel};
pub use eval::{EvalReport, FrequencyTable, SentenceEncoder};
pub use numerics::{Tape, Tensor, Var};
pub use objectives::{ContrastiveBatch, PairClassifierParams};
pub use train::{Regime, TrainConfig, TrainOutcome};
