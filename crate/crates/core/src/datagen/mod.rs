//! Synthetic federations and the dataset file format.
//!
//! The synthetic process has a known ground truth: audio and visual bodies
//! are linear maps of the text summary plus a sentiment term, a per-client
//! style offset and noise. Private modalities are therefore learnable from
//! text, which is the premise the generators rely on.

mod format;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodels::{FeatureSequence, Modality};
use crate::numkit::Tensor;

pub use format::{export_federation, ingest_features, read_federation, write_federation, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    Negative,
    NonNegative,
}

impl Polarity {
    pub fn class_index(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::NonNegative => 1,
        }
    }
}

/// Negative iff `y < 0`; zero counts as non-negative.
pub fn polarity(y: f64) -> Polarity {
    if y < 0.0 {
        Polarity::Negative
    } else {
        Polarity::NonNegative
    }
}

/// Text, audio and visual sequences with a sentiment score in `[-3, 3]`.
///
/// Audio and visual are only reachable through a [`ClientScope`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    text: FeatureSequence,
    audio: FeatureSequence,
    visual: FeatureSequence,
    y: f64,
}

impl Sample {
    pub fn new(text: FeatureSequence, audio: FeatureSequence, visual: FeatureSequence, y: f64) -> Result<Self> {
        if !(-3.0..=3.0).contains(&y) {
            return Err(Error::Format(format!("label {y} outside [-3, 3]")));
        }
        for (s, m) in [(&text, Modality::Text), (&audio, Modality::Audio), (&visual, Modality::Visual)] {
            if s.modality() != m {
                return Err(Error::contract(format!("{} sequence in the {m} slot", s.modality())));
            }
        }
        Ok(Sample { text, audio, visual, y })
    }

    pub fn text(&self) -> &FeatureSequence {
        &self.text
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn polarity(&self) -> Polarity {
        polarity(self.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    id: usize,
    split: Split,
    samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn new(id: usize, split: Split, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config(format!("client {id} has no samples")));
        }
        Ok(ClientDataset { id, split, samples })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn texts(&self) -> impl Iterator<Item = &FeatureSequence> {
        self.samples.iter().map(|s| &s.text)
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// Client-side view with access to private modalities. Only code that
    /// runs on the client (protocol client steps, local export) opens one.
    pub fn scope(&self) -> ClientScope<'_> {
        ClientScope { data: self }
    }
}

/// Client-side access to private audio and visual sequences.
#[derive(Clone, Copy)]
pub struct ClientScope<'a> {
    data: &'a ClientDataset,
}

impl<'a> ClientScope<'a> {
    pub fn client(&self) -> usize {
        self.data.id
    }

    pub fn private(&self, index: usize, modality: Modality) -> &'a FeatureSequence {
        let s = &self.data.samples[index];
        match modality {
            Modality::Text => &s.text,
            Modality::Audio => &s.audio,
            Modality::Visual => &s.visual,
        }
    }

    pub fn audio(&self, index: usize) -> &'a FeatureSequence {
        &self.data.samples[index].audio
    }

    pub fn visual(&self, index: usize) -> &'a FeatureSequence {
        &self.data.samples[index].visual
    }
}

/// All clients of one dataset, with shared dims `[text, audio, visual]`
/// and sequence lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Federation {
    pub dims: [usize; 3],
    pub lengths: [usize; 3],
    clients: Vec<ClientDataset>,
}

impl Federation {
    pub fn new(dims: [usize; 3], lengths: [usize; 3], clients: Vec<ClientDataset>) -> Result<Self> {
        let mut seen = std::collections::BTreeMap::new();
        for c in &clients {
            if let Some(prev) = seen.insert(c.id, c.split) {
                return Err(Error::Format(format!(
                    "client {} appears in {} and {}",
                    c.id,
                    prev.as_str(),
                    c.split.as_str()
                )));
            }
        }
        Ok(Federation { dims, lengths, clients })
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClientDataset> {
        self.clients.iter().filter(move |c| c.split == split)
    }

    pub fn split_clients(&self, split: Split) -> Vec<ClientDataset> {
        self.split(split).cloned().collect()
    }

    pub fn client_count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn sample_count(&self, split: Split) -> usize {
        self.split(split).map(ClientDataset::len).sum()
    }
}

/// How a split's sample total is divided among its clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Allocation {
    Equal,
    /// Random sizes (at least one sample per client).
    Uneven,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    /// Client counts for train, valid and test.
    pub clients: [usize; 3],
    /// Sample totals for train, valid and test.
    pub samples: [usize; 3],
    pub allocation: Allocation,
    /// `[d_t, d_a, d_v]`.
    pub dims: [usize; 3],
    /// `[L_t, L_a, L_v]`.
    pub lengths: [usize; 3],
    /// Dirichlet concentration of per-client polarity mixtures.
    pub alpha: f64,
    /// Standard deviation of per-entry feature noise.
    pub noise: f64,
    /// Scale of per-client style offsets on audio and visual.
    pub style: f64,
    pub seed: u64,
}

impl FederationSpec {
    /// Default desk-scale federation.
    pub fn toy() -> Self {
        FederationSpec {
            clients: [8, 2, 4],
            samples: [192, 48, 96],
            allocation: Allocation::Equal,
            dims: [16, 6, 8],
            lengths: [6, 6, 6],
            alpha: 1.0,
            noise: 0.3,
            style: 0.3,
            seed: 7,
        }
    }

    /// Toy dims with an equal-split, near-i.i.d. partition.
    pub fn toy_iid() -> Self {
        FederationSpec {
            clients: [6, 2, 4],
            samples: [144, 48, 96],
            dims: [16, 9, 8],
            alpha: 1e3,
            ..Self::toy()
        }
    }

    /// Client and sample counts of MOSI with its feature dims.
    pub fn mosi() -> Self {
        FederationSpec {
            clients: [52, 10, 31],
            samples: [1284, 229, 686],
            allocation: Allocation::Uneven,
            dims: [768, 5, 20],
            lengths: [8, 8, 8],
            ..Self::toy()
        }
    }

    /// Client and sample counts of MOSEI with its feature dims.
    pub fn mosei() -> Self {
        FederationSpec {
            clients: [150, 50, 100],
            samples: [16326, 1871, 4659],
            allocation: Allocation::Equal,
            dims: [768, 74, 35],
            lengths: [8, 8, 8],
            alpha: 1e3,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in Split::ALL.iter().enumerate() {
            if self.clients[i] == 0 {
                return Err(Error::config(format!("clients.{} must be positive", s.as_str())));
            }
            if self.samples[i] < self.clients[i] {
                return Err(Error::config(format!(
                    "samples.{} ({}) is below its client count ({})",
                    s.as_str(),
                    self.samples[i],
                    self.clients[i]
                )));
            }
        }
        for (i, m) in ["text", "audio", "visual"].iter().enumerate() {
            if self.dims[i] == 0 {
                return Err(Error::config(format!("dims.{m} must be positive")));
            }
            if self.lengths[i] == 0 {
                return Err(Error::config(format!("lengths.{m} must be positive")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if !(self.style >= 0.0 && self.style.is_finite()) {
            return Err(Error::config(format!("style must be non-negative, got {}", self.style)));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(rng, rows * cols, scale)).expect("sized")
}

/// Fixed maps shared by every client of a federation.
struct Process {
    text_dir: Vec<f64>,
    text_pos: Tensor,
    maps: [Tensor; 2],
    sent_dirs: [Vec<f64>; 2],
    pos: [Tensor; 2],
}

impl Process {
    fn new(spec: &FederationSpec, rng: &mut ChaCha8Rng) -> Self {
        let [dt, da, dv] = spec.dims;
        let [lt, la, lv] = spec.lengths;
        Process {
            text_dir: normal_vec(rng, dt, 1.0 / (dt as f64).sqrt() * 2.0),
            text_pos: normal_matrix(rng, lt, dt, 0.5),
            maps: [
                normal_matrix(rng, da, dt, 1.0 / (dt as f64).sqrt()),
                normal_matrix(rng, dv, dt, 1.0 / (dt as f64).sqrt()),
            ],
            sent_dirs: [normal_vec(rng, da, 1.0), normal_vec(rng, dv, 1.0)],
            pos: [normal_matrix(rng, la, da, 0.3), normal_matrix(rng, lv, dv, 0.3)],
        }
    }

    fn sample(&self, spec: &FederationSpec, style: &[Vec<f64>; 2], u: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let [dt, ..] = spec.dims;
        let lt = spec.lengths[0];
        let mut text = Vec::with_capacity(lt * dt);
        for j in 0..lt {
            for k in 0..dt {
                let e: f64 = StandardNormal.sample(rng);
                text.push(u * self.text_dir[k] + self.text_pos.get(j, k) + spec.noise * e);
            }
        }
        let text = Tensor::matrix(lt, dt, text)?;
        let summary = text.mean_rows()?;
        let mut private = Vec::with_capacity(2);
        for m in 0..2 {
            let d = spec.dims[m + 1];
            let l = spec.lengths[m + 1];
            let base = summary.matmul(&self.maps[m].transpose())?;
            let mut body = Vec::with_capacity(l * d);
            for j in 0..l {
                for k in 0..d {
                    let e: f64 = StandardNormal.sample(rng);
                    body.push(
                        base.data()[k]
                            + u.tanh() * self.sent_dirs[m][k]
                            + self.pos[m].get(j, k)
                            + style[m][k]
                            + spec.noise * e,
                    );
                }
            }
            private.push(Tensor::matrix(l, d, body)?);
        }
        let visual = private.pop().expect("two bodies");
        let audio = private.pop().expect("two bodies");
        Sample::new(
            FeatureSequence::real(Modality::Text, text)?,
            FeatureSequence::real(Modality::Audio, audio)?,
            FeatureSequence::real(Modality::Visual, visual)?,
            u,
        )
    }
}

fn allocate(total: usize, clients: usize, allocation: Allocation, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match allocation {
        Allocation::Equal => (0..clients)
            .map(|i| total / clients + usize::from(i < total % clients))
            .collect(),
        Allocation::Uneven => {
            let gamma = Gamma::new(1.0, 1.0).expect("valid");
            let w: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let sum: f64 = w.iter().sum();
            let spare = total - clients;
            let raw: Vec<f64> = w.iter().map(|x| x / sum * spare as f64).collect();
            let mut sizes: Vec<usize> = raw.iter().map(|r| 1 + r.floor() as usize).collect();
            let mut left = total - sizes.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..clients).collect();
            order.sort_by(|&a, &b| {
                let fa = raw[a] - raw[a].floor();
                let fb = raw[b] - raw[b].floor();
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                sizes[i] += 1;
                left -= 1;
            }
            sizes
        }
    }
}

/// Builds a federation; the same spec always yields the same federation.
pub fn make_federation(spec: &FederationSpec) -> Result<Federation> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let process = Process::new(spec, &mut rng);
    let beta = Beta::new(spec.alpha, spec.alpha).map_err(|e| Error::config(format!("alpha: {e}")))?;
    let mut clients = Vec::new();
    let mut next_id = 0;
    for split in Split::ALL {
        let sizes = allocate(spec.samples[split.index()], spec.clients[split.index()], spec.allocation, &mut rng);
        for n in sizes {
            let style = [
                normal_vec(&mut rng, spec.dims[1], spec.style),
                normal_vec(&mut rng, spec.dims[2], spec.style),
            ];
            let p_neg: f64 = beta.sample(&mut rng);
            let n_neg = (p_neg * n as f64).round() as usize;
            let mut negative: Vec<bool> = (0..n).map(|i| i < n_neg).collect();
            negative.shuffle(&mut rng);
            let mut samples = Vec::with_capacity(n);
            for neg in negative {
                let u = if neg {
                    -rng.random_range(f64::MIN_POSITIVE..=3.0)
                } else {
                    rng.random_range(0.0..=3.0)
                };
                samples.push(process.sample(spec, &style, u, &mut rng)?);
            }
            clients.push(ClientDataset::new(next_id, split, samples)?);
            next_id += 1;
        }
    }
    Federation::new(spec.dims, spec.lengths, clients)
}
