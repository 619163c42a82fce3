use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::genmodels::{decode_params, encode_params, mix_seed, DiscriminatorParams, GeneratorParams, Modality, MsaHeadParams};
use crate::numkit::{AdamConfig, AdamState, ParamSet, Tensor};

pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_SELECT: u64 = 2;
pub(crate) const TAG_NOISE_PRETRAIN: u64 = 3;
pub(crate) const TAG_POSITIVE: u64 = 4;
pub(crate) const TAG_SHUFFLE: u64 = 5;
pub(crate) const TAG_NOISE_FINETUNE: u64 = 6;
pub(crate) const TAG_NOISE_INFER: u64 = 7;

/// Index of a private modality in the `[audio, visual]` pairs.
pub fn slot(m: Modality) -> usize {
    match m {
        Modality::Audio => 0,
        Modality::Visual => 1,
        Modality::Text => panic!("text has no generator slot"),
    }
}

pub(crate) fn modality_code(m: Modality) -> u64 {
    match m {
        Modality::Text => 0,
        Modality::Audio => 1,
        Modality::Visual => 2,
    }
}

/// Everything the server owns: generators, global discriminators, the
/// sentiment head and generator optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub generators: [GeneratorParams; 2],
    pub discriminators: [DiscriminatorParams; 2],
    pub head: MsaHeadParams,
    pub(crate) gen_opt: [AdamState; 2],
    /// Completed stage-one rounds.
    pub round: usize,
    /// Stage-two epochs completed.
    pub finetuned_epochs: usize,
    pub dims: [usize; 3],
    pub lengths: [usize; 3],
    pub seed: u64,
    /// Client ids selected in each completed round.
    pub selections: Vec<Vec<usize>>,
    /// Digest of the configuration fields that shape the models.
    pub fingerprint: String,
}

/// Digest of everything that determines parameter shapes and initial values.
pub fn config_fingerprint(cfg: &TrainConfig, dims: [usize; 3], lengths: [usize; 3]) -> String {
    let mut h = Sha256::new();
    let text = format!(
        "{}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
        cfg.seed,
        dims,
        lengths,
        cfg.task,
        cfg.generator_audio,
        cfg.generator_visual,
        cfg.discriminator_audio,
        cfg.discriminator_visual,
        cfg.encoder_audio,
        cfg.encoder_visual,
        cfg.lr_generator.to_bits(),
    );
    h.update(text.as_bytes());
    crate::numkit::hex_digest(h)
}

impl ServerState {
    pub fn new(cfg: &TrainConfig, dims: [usize; 3], lengths: [usize; 3]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_INIT]));
        let [dt, da, dv] = dims;
        let ga = GeneratorParams::new(Modality::Audio, da, dt, cfg.generator_audio, &mut rng)?;
        let gv = GeneratorParams::new(Modality::Visual, dv, dt, cfg.generator_visual, &mut rng)?;
        let dai = DiscriminatorParams::new(Modality::Audio, da, dt, cfg.discriminator_audio, &mut rng)?;
        let dvi = DiscriminatorParams::new(Modality::Visual, dv, dt, cfg.discriminator_visual, &mut rng)?;
        let mut head = MsaHeadParams::new(dims, cfg.encoder_audio, cfg.encoder_visual, cfg.task, &mut rng)?;
        head.set.freeze();
        let opt = AdamConfig::with_lr(cfg.lr_generator);
        let gen_opt = [
            AdamState::new(opt, ga.set.tensors()),
            AdamState::new(opt, gv.set.tensors()),
        ];
        Ok(ServerState {
            generators: [ga, gv],
            discriminators: [dai, dvi],
            head,
            gen_opt,
            round: 0,
            finetuned_epochs: 0,
            dims,
            lengths,
            seed: cfg.seed,
            selections: Vec::new(),
            fingerprint: config_fingerprint(cfg, dims, lengths),
        })
    }

    pub fn generator(&self, m: Modality) -> &GeneratorParams {
        &self.generators[slot(m)]
    }

    pub fn discriminator(&self, m: Modality) -> &DiscriminatorParams {
        &self.discriminators[slot(m)]
    }

    pub fn freeze_discriminators(&mut self) {
        for d in &mut self.discriminators {
            d.set.freeze();
        }
    }

    pub fn discriminators_frozen(&self) -> bool {
        self.discriminators.iter().all(|d| d.set.is_frozen())
    }

    /// Digest over both discriminators.
    pub fn discriminator_digest(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.discriminators {
            h.update(d.set.digest().as_bytes());
        }
        crate::numkit::hex_digest(h)
    }

    /// Digest of all server-held parameters and optimizer moments.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_checkpoint());
        crate::numkit::hex_digest(h)
    }

    /// Combined discriminator parameter count `|D_a| + |D_v|`.
    pub fn discriminator_params(&self) -> usize {
        self.discriminators.iter().map(|d| d.set.count()).sum()
    }

    /// Binary checkpoint: header, then every parameter bundle and the
    /// generator optimizer moments in the parameter-blob layout.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(self.fingerprint.as_bytes());
        for v in [
            self.round as u64,
            self.finetuned_epochs as u64,
            self.seed,
            self.selections.len() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for sel in &self.selections {
            out.extend_from_slice(&(sel.len() as u64).to_le_bytes());
            for &c in sel {
                out.extend_from_slice(&(c as u64).to_le_bytes());
            }
        }
        let frozen = [
            self.discriminators[0].set.is_frozen(),
            self.discriminators[1].set.is_frozen(),
            self.head.set.is_frozen(),
        ];
        out.extend(frozen.iter().map(|&f| u8::from(f)));
        for set in self.bundles() {
            out.extend(encode_params(set));
        }
        for opt in &self.gen_opt {
            out.extend_from_slice(&opt.step_count().to_le_bytes());
            let (m, v) = opt.moments();
            out.extend(encode_params(&moments_set(m)));
            out.extend(encode_params(&moments_set(v)));
        }
        out
    }

    fn bundles(&self) -> [&ParamSet; 5] {
        [
            &self.generators[0].set,
            &self.generators[1].set,
            &self.discriminators[0].set,
            &self.discriminators[1].set,
            &self.head.set,
        ]
    }

    /// Restores a checkpoint into a server built from the same config.
    pub fn load_checkpoint(cfg: &TrainConfig, dims: [usize; 3], lengths: [usize; 3], bytes: &[u8]) -> Result<Self> {
        let mut s = ServerState::new(cfg, dims, lengths)?;
        let mismatch = |e: Error| Error::config(format!("checkpoint does not match the configuration: {e}"));
        let mut pos = CHECKPOINT_MAGIC.len();
        if bytes.len() < pos + 64 || &bytes[..pos] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        if bytes[pos..pos + 64] != *s.fingerprint.as_bytes() {
            return Err(Error::config("checkpoint was written under a different model configuration"));
        }
        pos += 64;
        let word = |pos: &mut usize| -> Result<u64> {
            let b = bytes
                .get(*pos..*pos + 8)
                .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
            *pos += 8;
            Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
        };
        s.round = word(&mut pos)? as usize;
        s.finetuned_epochs = word(&mut pos)? as usize;
        let seed = word(&mut pos)?;
        if seed != cfg.seed {
            return Err(Error::config(format!("checkpoint seed {seed} differs from config seed {}", cfg.seed)));
        }
        let n_sel = word(&mut pos)? as usize;
        for _ in 0..n_sel {
            let k = word(&mut pos)? as usize;
            let mut sel = Vec::with_capacity(k);
            for _ in 0..k {
                sel.push(word(&mut pos)? as usize);
            }
            s.selections.push(sel);
        }
        let flags = bytes
            .get(pos..pos + 3)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?
            .to_vec();
        pos += 3;
        let next = |pos: &mut usize| -> Result<ParamSet> {
            let (set, used) = decode_params(&bytes[*pos..])?;
            *pos += used;
            Ok(set)
        };
        let mut sets = Vec::with_capacity(5);
        for _ in 0..5 {
            sets.push(next(&mut pos)?);
        }
        let [ga, gv] = &mut s.generators;
        let [da, dv] = &mut s.discriminators;
        let targets: [&mut ParamSet; 5] = [&mut ga.set, &mut gv.set, &mut da.set, &mut dv.set, &mut s.head.set];
        for (t, src) in targets.into_iter().zip(sets) {
            if t.names() != src.names() {
                return Err(mismatch(Error::Format("parameter names differ".into())));
            }
            t.assign(src.tensors().to_vec()).map_err(mismatch)?;
        }
        for i in 0..2 {
            let step = word(&mut pos)?;
            let m = next(&mut pos)?;
            let v = next(&mut pos)?;
            let cfg_opt = s.gen_opt[i].config;
            s.gen_opt[i] = AdamState::restore(cfg_opt, step, m.tensors().to_vec(), v.tensors().to_vec());
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        for (i, d) in s.discriminators.iter_mut().enumerate() {
            if flags[i] == 1 {
                d.set.freeze();
            } else {
                d.set.unfreeze();
            }
        }
        if flags[2] == 1 {
            s.head.set.freeze();
        } else {
            s.head.set.unfreeze();
        }
        Ok(s)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HYDCKPT1";

fn moments_set(ts: &[Tensor]) -> ParamSet {
    let mut s = ParamSet::new();
    for (i, t) in ts.iter().enumerate() {
        s.push(format!("m{i}"), t.clone());
    }
    s
}

/// A client: its private dataset plus an optional injected fault used to
/// exercise the abort path.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub data: ClientDataset,
    pub fault: Option<String>,
}

impl ClientState {
    pub fn new(data: ClientDataset) -> Self {
        ClientState { data, fault: None }
    }

    pub fn id(&self) -> usize {
        self.data.id()
    }
}
