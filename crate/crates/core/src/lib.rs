//! Cascade speech translation at desk scale.
//!
//! The crate is organised along the stages of a cascade system:
//!
//! * [`signal`]: log-Mel filterbank features, utterance CMVN and SpecAugment.
//! * [`segment`]: energy VAD segmentation with a minimum-duration filter.
//! * [`subword`]: merge-based BPE vocabularies with reserved source tags.
//! * [`tensor`]: a small reverse-mode autodiff engine over dense tensors.
//! * [`model`]: ASR (convolutional front-end) and MT Transformers, checkpoints.
//! * [`train`]: tag-conditioned multi-source training, MT pretrain/fine-tune,
//!   Adam, inverse-sqrt scheduling, batching, averaging and back-translation.
//! * [`decode`]: beam search with a forced initial token and model ensembles.
//! * [`metrics`]: WER, BLEU, TER and CharacTER.
//! * [`pipeline`]: synthetic corpora, manifests, the end-to-end cascade and scoring.

pub mod config;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod segment;
pub mod signal;
pub mod subword;
pub mod tensor;
pub mod train;

pub use decode::{beam_search, ensemble_logprob, DecodeConfig, Hypothesis, StepScorer};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelKind, ModelParameters};
pub use segment::{detect_segments, Segment, VadConfig};
pub use signal::{cmvn, logmel, spec_augment, FeatureMatrix, MelConfig, SpecAugmentConfig, Waveform};
pub use subword::{TokenSequence, Vocabulary};
pub use tensor::{Graph, Real, Tensor, Var};
pub use train::{SourceTag, TaggedSample, TrainConfig};
