//! Multi-center medication recommendation: a shared set-encoder pretrained
//! on every center, adapted per center with prompts and a small head.

pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pretrain;
pub mod rng;
pub mod tune;

pub use data::{MultiCenterDataset, Record, VocabSizes, Vocabularies};
pub use encoder::{BackboneParams, EncoderConfig};
pub use error::{Error, Result};
pub use metrics::{EvalResult, GroupThresholds};
pub use numerics::{Checkpoint, ParamSet, Tensor};
pub use pretrain::{PretrainConfig, PretrainOutcome};
pub use tune::{CenterAdapter, CenterModelStore, Regime, TuneConfig};
