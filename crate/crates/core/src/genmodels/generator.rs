use rand::Rng;

use crate::blocks::{positional_encoding, transformer_layer, LayerNormParams, Linear, TransformerLayerParams};
use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamSet, Tensor, Var};

use super::sequence::{FeatureSequence, Modality, NoiseSeed};
use super::StackShape;

/// Autoregressive cross-modality generator.
///
/// Each step embeds the prefix `z_0..z_{i-1}` (plus sinusoidal positions),
/// runs a stack of causal layers that cross-attend to the text condition,
/// and maps the last hidden row back to feature width to get `z_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub modality: Modality,
    pub feature_dim: usize,
    pub cond_dim: usize,
    pub shape: StackShape,
    pub set: ParamSet,
    embed: Linear,
    layers: Vec<TransformerLayerParams>,
    final_norm: LayerNormParams,
    out: Linear,
}

impl GeneratorParams {
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
        let out = Linear::new(&mut set, "out", shape.width, feature_dim, rng);
        Ok(GeneratorParams {
            modality,
            feature_dim,
            cond_dim,
            shape,
            set,
            embed,
            layers,
            final_norm,
            out,
        })
    }

    /// One autoregressive step: the next vector given the full prefix.
    pub fn step(&self, g: &mut Graph, p: &[Var], prefix: Var, condition: Var) -> Result<Var> {
        let n = g.value(prefix).rows();
        let mut h = self.embed.forward(g, p, prefix)?;
        let pe = g.constant(positional_encoding(n, self.shape.width));
        h = g.add(h, pe)?;
        for layer in &self.layers {
            h = transformer_layer(g, p, layer, h, Some(condition))?;
        }
        let h = self.final_norm.forward(g, p, h)?;
        let last = g.row(h, n - 1)?;
        self.out.forward(g, p, last)
    }

    /// Free-running generation of `len` body vectors and a final `<CLS>`,
    /// returned as a `(len + 1) x feature_dim` var.
    pub fn generate(&self, g: &mut Graph, p: &[Var], condition: Var, mu: Var, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::contract("generated length must be at least 1"));
        }
        if g.value(condition).cols() != self.cond_dim {
            return Err(Error::dim(format!(
                "{} generator conditioned on width {}, got {:?}",
                self.modality,
                self.cond_dim,
                g.value(condition).shape()
            )));
        }
        if g.value(mu).numel() != self.feature_dim {
            return Err(Error::dim(format!(
                "noise of {:?} for feature width {}",
                g.value(mu).shape(),
                self.feature_dim
            )));
        }
        let mut prefix = mu;
        let mut outputs = Vec::with_capacity(len + 1);
        for _ in 0..=len {
            let z = self.step(g, p, prefix, condition)?;
            outputs.push(z);
            prefix = g.concat_rows(&[prefix, z])?;
        }
        g.concat_rows(&outputs)
    }

    /// Inference-mode generation of a fake sequence from a text sequence.
    pub fn generate_sequence(&self, text: &FeatureSequence, noise: NoiseSeed, len: usize) -> Result<FeatureSequence> {
        if text.modality() != Modality::Text {
            return Err(Error::contract(format!(
                "generator condition must be text, got {}",
                text.modality()
            )));
        }
        let mut g = Graph::inference();
        let p = self.set.bind(&mut g, false)?;
        let cond = g.constant(text.body().clone());
        let mu = g.constant(noise.sample(self.feature_dim));
        let out = self.generate(&mut g, &p, cond, mu, len)?;
        FeatureSequence::from_generated(self.modality, g.value(out))
    }

    /// Replays one step on a given prefix, in inference mode.
    pub fn replay_step(&self, text: &FeatureSequence, prefix: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.set.bind(&mut g, false)?;
        let cond = g.constant(text.body().clone());
        let pre = g.constant(prefix.clone());
        let z = self.step(&mut g, &p, pre, cond)?;
        Ok(g.value(z).clone())
    }
}
