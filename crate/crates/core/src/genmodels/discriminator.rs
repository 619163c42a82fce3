use rand::Rng;

use crate::blocks::{positional_encoding, transformer_layer, LayerNormParams, Linear, TransformerLayerParams};
use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamSet, Var};

use super::sequence::{FeatureSequence, Modality};
use super::StackShape;

/// Same stack as the generator, run once over a whole sequence, with a
/// per-position realness classifier on top. Causal masking makes the score
/// at position `i` a judgement of the prefix ending at `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub modality: Modality,
    pub feature_dim: usize,
    pub cond_dim: usize,
    pub shape: StackShape,
    pub set: ParamSet,
    embed: Linear,
    layers: Vec<TransformerLayerParams>,
    final_norm: LayerNormParams,
    classifier: Linear,
}

/// Vars produced by one discriminator pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// `(L + 1) x 1` realness probabilities.
    pub scores: Var,
    /// `(L + 1) x width` final hidden states; the last row is the `<CLS>` embedding.
    pub hidden: Var,
}

impl DiscriminatorParams {
    pub fn new<R: Rng + ?Sized>(
        modality: Modality,
        feature_dim: usize,
        cond_dim: usize,
        shape: StackShape,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        let mut set = ParamSet::new();
        let embed = Linear::new(&mut set, "embed", feature_dim, shape.width, rng);
        let layers = (0..shape.layers)
            .map(|i| {
                TransformerLayerParams::new(
                    &mut set,
                    &format!("layer{i}"),
                    shape.width,
                    shape.heads,
                    Some(cond_dim),
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNormParams::new(&mut set, "final_norm", shape.width);
        let classifier = Linear::new(&mut set, "classifier", shape.width, 1, rng);
        Ok(DiscriminatorParams {
            modality,
            feature_dim,
            cond_dim,
            shape,
            set,
            embed,
            layers,
            final_norm,
            classifier,
        })
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], seq: Var, condition: Var) -> Result<DiscOutput> {
        let sv = g.value(seq);
        if sv.cols() != self.feature_dim || sv.rows() == 0 {
            return Err(Error::dim(format!(
                "{} discriminator expects width {}, got {:?}",
                self.modality,
                self.feature_dim,
                sv.shape()
            )));
        }
        if g.value(condition).cols() != self.cond_dim {
            return Err(Error::dim(format!(
                "{} discriminator conditioned on width {}, got {:?}",
                self.modality,
                self.cond_dim,
                g.value(condition).shape()
            )));
        }
        let n = sv.rows();
        let mut h = self.embed.forward(g, p, seq)?;
        let pe = g.constant(positional_encoding(n, self.shape.width));
        h = g.add(h, pe)?;
        for layer in &self.layers {
            h = transformer_layer(g, p, layer, h, Some(condition))?;
        }
        let hidden = self.final_norm.forward(g, p, h)?;
        let logits = self.classifier.forward(g, p, hidden)?;
        let scores = g.sigmoid(logits)?;
        Ok(DiscOutput { scores, hidden })
    }

    /// Per-position realness of `seq` (body then `<CLS>`), length `L + 1`.
    pub fn discriminate(&self, seq: &FeatureSequence, text: &FeatureSequence) -> Result<Vec<f64>> {
        if seq.dim() != self.feature_dim {
            return Err(Error::dim(format!(
                "{} discriminator expects width {}, got {}",
                self.modality,
                self.feature_dim,
                seq.dim()
            )));
        }
        let mut g = Graph::inference();
        let p = self.set.bind(&mut g, false)?;
        let s = g.constant(seq.stacked());
        let c = g.constant(text.body().clone());
        let out = self.forward(&mut g, &p, s, c)?;
        Ok(g.value(out.scores).data().to_vec())
    }
}
