//! Run configuration: TOML schema, presets and validation.
//!
//! Resolution order is flag > file > preset default. The preset is chosen by
//! the `dataset` key, so defaults for model shapes and clients per round
//! follow the dataset.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::FederationSpec;
use crate::error::{Error, Result};
use crate::genmodels::{EncoderShape, Modality, StackShape};
use crate::losses::ContrastiveForm;

pub use crate::genmodels::TaskMode;

/// Which of audio and visual are private. Private modalities are replaced by
/// generated features; shareable ones are uploaded as real features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    AllShareable,
    AudioPrivacy,
    VisualPrivacy,
    #[default]
    AudioVisualPrivacy,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::AllShareable,
        Scenario::AudioPrivacy,
        Scenario::VisualPrivacy,
        Scenario::AudioVisualPrivacy,
    ];

    pub fn is_private(self, m: Modality) -> bool {
        match (self, m) {
            (_, Modality::Text) => false,
            (Scenario::AllShareable, _) => false,
            (Scenario::AudioPrivacy, Modality::Audio) => true,
            (Scenario::VisualPrivacy, Modality::Visual) => true,
            (Scenario::AudioVisualPrivacy, _) => true,
            _ => false,
        }
    }

    pub fn private_modalities(self) -> Vec<Modality> {
        Modality::PRIVATE.into_iter().filter(|&m| self.is_private(m)).collect()
    }

    /// True when at least one modality has to be generated.
    pub fn needs_generators(self) -> bool {
        self != Scenario::AllShareable
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::AllShareable => "all-shareable",
            Scenario::AudioPrivacy => "audio-privacy",
            Scenario::VisualPrivacy => "visual-privacy",
            Scenario::AudioVisualPrivacy => "audio-visual-privacy",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    MosiToy,
    MoseiToy,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::MosiToy => "mosi-toy",
            Preset::MoseiToy => "mosei-toy",
        }
    }

    pub fn federation(self, seed: u64) -> FederationSpec {
        let base = match self {
            Preset::MosiToy => FederationSpec::toy(),
            Preset::MoseiToy => FederationSpec::toy_iid(),
        };
        FederationSpec { seed, ..base }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Preset(Preset),
    File(PathBuf),
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("preset:") {
            return match name {
                "mosi-toy" => Ok(DatasetSource::Preset(Preset::MosiToy)),
                "mosei-toy" => Ok(DatasetSource::Preset(Preset::MoseiToy)),
                _ => Err(Error::config(format!("unknown dataset preset '{name}'"))),
            };
        }
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(Error::config("dataset file path is empty"));
            }
            return Ok(DatasetSource::File(PathBuf::from(path)));
        }
        Err(Error::config(format!(
            "dataset '{s}' must be preset:mosi-toy, preset:mosei-toy or file:PATH"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: String,
    pub scenario: Scenario,
    pub task: TaskMode,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub tau: f64,
    pub contrastive: ContrastiveForm,
    /// Stage-one rounds `T`.
    pub epochs: usize,
    /// Clients per round `S`.
    pub clients_per_round: usize,
    /// Stage-two minibatch size `N_B`.
    pub batch_size: usize,
    pub stage2_epochs: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_task: f64,
    pub generator_audio: StackShape,
    pub generator_visual: StackShape,
    pub discriminator_audio: StackShape,
    pub discriminator_visual: StackShape,
    pub encoder_audio: EncoderShape,
    pub encoder_visual: EncoderShape,
    /// Count the text re-sent with fake features in the ledger.
    pub count_text_down: bool,
    /// Route stage-two labels through client uploads instead of keeping
    /// them with the server-side text.
    pub labels_via_clients: bool,
    /// Keep full payload bytes for the auditor.
    pub audit_archive: bool,
}

const MOSI_SHAPES: [(usize, usize); 6] = [(1, 1), (2, 2), (1, 1), (2, 2), (1, 1), (2, 2)];
const MOSEI_SHAPES: [(usize, usize); 6] = [(5, 3), (4, 2), (5, 3), (4, 2), (2, 3), (2, 2)];

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let (shapes, width, s) = match preset {
            Preset::MosiToy => (MOSI_SHAPES, 16, 4),
            Preset::MoseiToy => (MOSEI_SHAPES, 18, 5),
        };
        let stack = |i: usize| StackShape {
            width,
            layers: shapes[i].0,
            heads: shapes[i].1,
        };
        let enc = |i: usize| EncoderShape {
            layers: shapes[i].0,
            heads: shapes[i].1,
        };
        TrainConfig {
            seed: 7,
            dataset: format!("preset:{}", preset.name()),
            scenario: Scenario::AudioVisualPrivacy,
            task: TaskMode::Regression,
            lambda_d: 0.1,
            lambda_g: 0.1,
            tau: 0.1,
            contrastive: ContrastiveForm::ContrastOnly,
            epochs: 100,
            clients_per_round: s,
            batch_size: 32,
            stage2_epochs: 20,
            lr_generator: 2e-4,
            lr_discriminator: 1e-4,
            lr_task: 1e-4,
            generator_audio: stack(0),
            generator_visual: stack(1),
            discriminator_audio: stack(2),
            discriminator_visual: stack(3),
            encoder_audio: enc(4),
            encoder_visual: enc(5),
            count_text_down: true,
            labels_via_clients: false,
            audit_archive: false,
        }
    }

    pub fn dataset_source(&self) -> Result<DatasetSource> {
        self.dataset.parse()
    }

    pub fn generator_shape(&self, m: Modality) -> StackShape {
        match m {
            Modality::Visual => self.generator_visual,
            _ => self.generator_audio,
        }
    }

    pub fn discriminator_shape(&self, m: Modality) -> StackShape {
        match m {
            Modality::Visual => self.discriminator_visual,
            _ => self.discriminator_audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_d", self.lambda_d), ("lambda_g", self.lambda_g)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau = {} must be positive", self.tau)));
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_task", self.lr_task),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} must be non-negative")));
            }
        }
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let TaskMode::Classification { classes } = self.task {
            if classes != 2 {
                return Err(Error::config(format!(
                    "classification uses the two polarity classes, got {classes}"
                )));
            }
        }
        for (name, s) in [
            ("generator_audio", self.generator_audio),
            ("generator_visual", self.generator_visual),
            ("discriminator_audio", self.discriminator_audio),
            ("discriminator_visual", self.discriminator_visual),
        ] {
            s.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
        }
        for (name, e) in [("encoder_audio", self.encoder_audio), ("encoder_visual", self.encoder_visual)] {
            if e.layers > 0 && e.heads == 0 {
                return Err(Error::config(format!("{name}.heads must be positive")));
            }
        }
        self.dataset_source()?;
        Ok(())
    }

    /// Resolves a config from an optional TOML document and flag overrides.
    pub fn resolve(file: Option<&str>, flags: &Overrides) -> Result<Self> {
        let table: toml::Table = match file {
            Some(text) => text.parse().map_err(|e| Error::config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        let dataset = match (&flags.dataset, table.get("dataset")) {
            (Some(d), _) => d.clone(),
            (None, Some(toml::Value::String(d))) => d.clone(),
            (None, Some(other)) => return Err(Error::config(format!("dataset must be a string, got {other}"))),
            (None, None) => "preset:mosi-toy".to_string(),
        };
        let preset = match dataset.parse::<DatasetSource>()? {
            DatasetSource::Preset(p) => p,
            DatasetSource::File(_) => Preset::MosiToy,
        };
        let base = TrainConfig::for_preset(preset);
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, table);
        let mut cfg: TrainConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config file: {}", e.message())))?;
        cfg.dataset = dataset;
        flags.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_preset(Preset::MosiToy)
    }
}

/// Values given on the command line; `None` leaves the file/default value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenario: Option<Scenario>,
    pub dataset: Option<String>,
    pub epochs: Option<usize>,
    pub clients_per_round: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub lambda_d: Option<f64>,
    pub lambda_g: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.scenario {
            cfg.scenario = v;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.clients_per_round {
            cfg.clients_per_round = v;
        }
        if let Some(v) = self.stage2_epochs {
            cfg.stage2_epochs = v;
        }
        if let Some(v) = self.lambda_d {
            cfg.lambda_d = v;
        }
        if let Some(v) = self.lambda_g {
            cfg.lambda_g = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_hyperparameter_table() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda_d, c.lambda_g), (0.1, 0.1));
        assert_eq!((c.lr_generator, c.lr_discriminator, c.lr_task), (2e-4, 1e-4, 1e-4));
        assert_eq!((c.epochs, c.batch_size), (100, 32));
        assert_eq!((c.generator_visual.layers, c.generator_visual.heads), (2, 2));
        assert_eq!((c.generator_audio.layers, c.generator_audio.heads), (1, 1));
        assert_eq!(TrainConfig::for_preset(Preset::MoseiToy).clients_per_round, 5);
        c.validate().unwrap();
        TrainConfig::for_preset(Preset::MoseiToy).validate().unwrap();
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = "seed = 11\nlambda_d = 0.4\nepochs = 3\n";
        let flags = Overrides {
            seed: Some(99),
            ..Overrides::default()
        };
        let c = TrainConfig::resolve(Some(file), &flags).unwrap();
        assert_eq!(c.seed, 99);
        assert_eq!(c.lambda_d, 0.4);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lambda_g, 0.1);
    }

    #[test]
    fn nested_tables_merge() {
        let file = "[generator_visual]\nlayers = 3\n";
        let c = TrainConfig::resolve(Some(file), &Overrides::default()).unwrap();
        assert_eq!(c.generator_visual.layers, 3);
        assert_eq!(c.generator_visual.heads, 2);
    }

    #[test]
    fn dataset_selects_preset_defaults() {
        let file = "dataset = \"preset:mosei-toy\"\n";
        let c = TrainConfig::resolve(Some(file), &Overrides::default()).unwrap();
        assert_eq!(c.generator_audio.layers, 5);
        assert_eq!(c.clients_per_round, 5);
    }

    #[test]
    fn range_errors_are_config_errors() {
        for file in ["lambda_d = 1.5", "tau = 0.0", "clients_per_round = 0", "bogus = 1", "lambda_g = \"x\""] {
            let e = TrainConfig::resolve(Some(file), &Overrides::default()).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{file}: {e}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let c = TrainConfig::default();
        let back = TrainConfig::resolve(Some(&c.to_toml()), &Overrides::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dataset_strings() {
        assert_eq!("preset:mosi-toy".parse::<DatasetSource>().unwrap(), DatasetSource::Preset(Preset::MosiToy));
        assert_eq!(
            "file:/tmp/x.jsonl".parse::<DatasetSource>().unwrap(),
            DatasetSource::File("/tmp/x.jsonl".into())
        );
        assert!("preset:nope".parse::<DatasetSource>().is_err());
        assert!("mosi".parse::<DatasetSource>().is_err());
    }

    #[test]
    fn scenario_privacy_matrix() {
        assert!(Scenario::AllShareable.private_modalities().is_empty());
        assert_eq!(Scenario::AudioPrivacy.private_modalities(), vec![Modality::Audio]);
        assert_eq!(Scenario::VisualPrivacy.private_modalities(), vec![Modality::Visual]);
        assert_eq!(Scenario::AudioVisualPrivacy.private_modalities().len(), 2);
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
    }
}
