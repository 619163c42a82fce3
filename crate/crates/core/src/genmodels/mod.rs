//! Generators, discriminators and the sentiment head.

mod codec;
mod discriminator;
mod generator;
mod msa;
mod sequence;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{decode_params, encode_params};
pub use discriminator::{DiscOutput, DiscriminatorParams};
pub use generator::GeneratorParams;
pub use msa::{EncoderShape, MsaHeadParams, MsaOutput, Prediction, TaskMode, LABEL_BOUND};
pub use sequence::{init_cls, mix_seed, FeatureSequence, Modality, NoiseSeed, Provenance};

/// Width, depth and head count of a generator or discriminator stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackShape {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl StackShape {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "stack width {} with {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
