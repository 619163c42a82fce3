//! Hybrid distributed cross-modality cGAN for multimodal sentiment analysis.
//!
//! A server learns to generate audio and visual feature sequences from
//! shareable text features, trained against discriminators that live on
//! clients next to the private features. The generated sequences then
//! feed a gated-fusion sentiment head, so inference never touches a client.
//!
//! Layout:
//! - [`numkit`]: dense tensors, reverse-mode autodiff, Adam.
//! - [`blocks`]: attention, transformer layers, gated attention unit.
//! - [`genmodels`]: generators, discriminators, sentiment head, feature sequences.
//! - [`losses`]: adversarial, contrastive and task objectives.
//! - [`datagen`]: synthetic federations and the dataset file format.
//! - [`protocol`]: rounds, aggregation, comms ledger and privacy audit.
//! - [`config`], [`metrics`], [`costs`], [`experiment`]: orchestration used by the CLI.

pub mod blocks;
pub mod config;
pub mod costs;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod genmodels;
pub mod losses;
pub mod metrics;
pub mod numkit;
pub mod protocol;

pub use config::{Scenario, TaskMode, TrainConfig};
pub use datagen::{ClientDataset, Federation, FederationSpec, Polarity, Sample, Split};
pub use genmodels::{Modality, Provenance};
pub use error::{Error, Result};
pub use genmodels::{FeatureSequence, NoiseSeed};
pub use metrics::MetricsRecord;
pub use numkit::{AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};
