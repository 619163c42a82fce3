#![allow(dead_code)]

use hydisc_core::datagen::make_federation;
use hydisc_core::experiment::{prepare_with, Prepared};
use hydisc_core::genmodels::{EncoderShape, StackShape};
use hydisc_core::{FederationSpec, TrainConfig};

/// Small federation and narrow models for protocol tests.
pub fn small_spec() -> FederationSpec {
    FederationSpec {
        clients: [5, 1, 2],
        samples: [30, 4, 12],
        dims: [8, 4, 6],
        lengths: [4, 3, 3],
        ..FederationSpec::toy()
    }
}

pub fn small_config() -> TrainConfig {
    let stack = StackShape {
        width: 8,
        layers: 1,
        heads: 2,
    };
    TrainConfig {
        clients_per_round: 3,
        epochs: 3,
        stage2_epochs: 2,
        batch_size: 8,
        generator_audio: stack,
        generator_visual: stack,
        discriminator_audio: stack,
        discriminator_visual: stack,
        encoder_audio: EncoderShape { layers: 1, heads: 2 },
        encoder_visual: EncoderShape { layers: 1, heads: 2 },
        ..TrainConfig::default()
    }
}

pub fn small() -> Prepared {
    let fed = make_federation(&small_spec()).unwrap();
    prepare_with(&small_config(), fed)
}
