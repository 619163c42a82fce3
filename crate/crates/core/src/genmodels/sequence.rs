use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const PRIVATE: [Modality; 2] = [Modality::Audio, Modality::Visual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Fake,
}

/// One modality's `L x d` body plus its `<CLS>` summary vector.
///
/// Real sequences get `cls = mean(body rows)`; fake ones carry the vector
/// the generator emitted as its final step. Provenance is fixed at
/// construction and cannot be changed afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    body: Tensor,
    cls: Tensor,
    provenance: Provenance,
}

/// Column-wise mean of a non-empty body.
pub fn init_cls(body: &Tensor) -> Result<Tensor> {
    if body.rows() == 0 || body.numel() == 0 {
        return Err(Error::contract("<CLS> pooling of an empty body"));
    }
    body.mean_rows()
}

impl FeatureSequence {
    pub fn real(modality: Modality, body: Tensor) -> Result<Self> {
        check_body(&body)?;
        let cls = init_cls(&body)?;
        Ok(FeatureSequence {
            modality,
            body,
            cls,
            provenance: Provenance::Real,
        })
    }

    pub fn fake(modality: Modality, body: Tensor, cls: Tensor) -> Result<Self> {
        check_body(&body)?;
        if cls.numel() != body.cols() {
            return Err(Error::dim(format!(
                "<CLS> of {:?} for body {:?}",
                cls.shape(),
                body.shape()
            )));
        }
        Ok(FeatureSequence {
            modality,
            cls: cls.reshape(&[1, body.cols()])?,
            body,
            provenance: Provenance::Fake,
        })
    }

    /// Splits generator output `[z_1; ...; z_L; z_cls]` into a fake sequence.
    pub fn from_generated(modality: Modality, stacked: &Tensor) -> Result<Self> {
        let n = stacked.rows();
        if n < 2 {
            return Err(Error::contract("generated sequence needs a body and a <CLS> row"));
        }
        let body = stacked.slice_rows(0, n - 1)?;
        let cls = stacked.slice_rows(n - 1, n)?;
        Self::fake(modality, body, cls)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn body(&self) -> &Tensor {
        &self.body
    }

    pub fn cls(&self) -> &Tensor {
        &self.cls
    }

    /// Body length `L` (excluding `<CLS>`).
    pub fn len(&self) -> usize {
        self.body.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.body.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.body.cols()
    }

    /// `(L + 1) x d` rows: body followed by `<CLS>`.
    pub fn stacked(&self) -> Tensor {
        Tensor::concat_rows(&[&self.body, &self.cls]).expect("cls width matches body")
    }
}

fn check_body(body: &Tensor) -> Result<()> {
    if body.shape().len() != 2 || body.rows() == 0 || body.cols() == 0 {
        return Err(Error::contract(format!(
            "feature body must be a non-empty matrix, got {:?}",
            body.shape()
        )));
    }
    if !body.is_finite() {
        return Err(Error::NonFinite("feature body".into()));
    }
    Ok(())
}

/// Seed for the generator's starting vector `mu ~ N(0, I)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseSeed(pub u64);

impl NoiseSeed {
    /// Derives a seed from a base seed and a path of identifiers.
    pub fn derive(base: u64, path: &[u64]) -> NoiseSeed {
        NoiseSeed(mix_seed(base, path))
    }

    pub fn sample(&self, dim: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        let data: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::row(&data)
    }
}

/// SplitMix64-style mixing of a base seed with a path of integers.
pub fn mix_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        x = x.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn cls_of_constant_rows() {
        let body = Tensor::from_rows(&[[2.0, -1.0], [2.0, -1.0], [2.0, -1.0]]).unwrap();
        assert_eq!(init_cls(&body).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn cls_hand_case() {
        let body = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(init_cls(&body).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn cls_matches_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let body = Tensor::from_rows(&rows).unwrap();
        let cls = init_cls(&body).unwrap();
        for c in 0..5 {
            let mut s = 0.0;
            for r in &rows {
                s += r[c];
            }
            assert!((cls.data()[c] - s / 7.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cls_of_empty_is_contract_error() {
        assert!(matches!(init_cls(&Tensor::zeros(&[0, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn real_sequence_pools_cls() {
        let body = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = FeatureSequence::real(Modality::Audio, body).unwrap();
        assert_eq!(s.provenance(), Provenance::Real);
        assert_eq!(s.stacked().rows(), 3);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = NoiseSeed(17).sample(6);
        let b = NoiseSeed(17).sample(6);
        let c = NoiseSeed(18).sample(6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
