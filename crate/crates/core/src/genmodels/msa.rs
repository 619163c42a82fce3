use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{gated_attention, transformer_layer, GateParams, Linear, TransformerLayerParams};
use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamSet, Var};

use super::sequence::{FeatureSequence, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TaskMode {
    Regression,
    Classification { classes: usize },
}

impl TaskMode {
    pub fn output_dim(self) -> usize {
        match self {
            TaskMode::Regression => 1,
            TaskMode::Classification { classes } => classes,
        }
    }
}

/// Layer and head counts of one modality encoder in the sentiment head.
/// The encoder runs at the modality's feature width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub layers: usize,
    pub heads: usize,
}

/// Sentiment head: per-modality encoders for audio and visual, a gate per
/// modality over `<CLS>` vectors, and a linear predictor over
/// `[visual : text : audio]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaHeadParams {
    pub dims: [usize; 3],
    pub mode: TaskMode,
    pub set: ParamSet,
    audio_layers: Vec<TransformerLayerParams>,
    visual_layers: Vec<TransformerLayerParams>,
    gate_text: GateParams,
    gate_audio: GateParams,
    gate_visual: GateParams,
    predictor: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MsaOutput {
    /// `1 x 1` score (regression) or `1 x C` logits (classification).
    pub raw: Var,
    pub fused: Var,
    pub gate_text: Var,
    pub gate_audio: Var,
    pub gate_visual: Var,
}

/// Value-level prediction with gate activations for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Clamped score in `[-3, 3]` (regression) or class probabilities.
    pub output: Vec<f64>,
    pub gate_text: Vec<f64>,
    pub gate_audio: Vec<f64>,
    pub gate_visual: Vec<f64>,
}

impl Prediction {
    pub fn score(&self) -> f64 {
        self.output[0]
    }
}

pub const LABEL_BOUND: f64 = 3.0;

impl MsaHeadParams {
    /// `dims` is `[d_text, d_audio, d_visual]`.
    pub fn new<R: Rng + ?Sized>(
        dims: [usize; 3],
        audio: EncoderShape,
        visual: EncoderShape,
        mode: TaskMode,
        rng: &mut R,
    ) -> Result<Self> {
        let [dt, da, dv] = dims;
        let mut set = ParamSet::new();
        let mut encoder = |set: &mut ParamSet, name: &str, dim: usize, shape: EncoderShape| {
            (0..shape.layers)
                .map(|i| {
                    TransformerLayerParams::new(set, &format!("{name}{i}"), dim, shape.heads, None, false, rng)
                })
                .collect::<Result<Vec<_>>>()
        };
        let audio_layers = encoder(&mut set, "audio_layer", da, audio)?;
        let visual_layers = encoder(&mut set, "visual_layer", dv, visual)?;
        let gate_text = GateParams::new(&mut set, "gate_text", dt, rng);
        let gate_audio = GateParams::new(&mut set, "gate_audio", da, rng);
        let gate_visual = GateParams::new(&mut set, "gate_visual", dv, rng);
        let predictor = Linear::new(&mut set, "predictor", dv + dt + da, mode.output_dim(), rng);
        Ok(MsaHeadParams {
            dims,
            mode,
            set,
            audio_layers,
            visual_layers,
            gate_text,
            gate_audio,
            gate_visual,
            predictor,
        })
    }

    pub fn predictor(&self) -> &Linear {
        &self.predictor
    }

    pub fn gates(&self) -> [&GateParams; 3] {
        [&self.gate_text, &self.gate_audio, &self.gate_visual]
    }

    fn encode(&self, g: &mut Graph, p: &[Var], layers: &[TransformerLayerParams], seq: Var) -> Result<Var> {
        let mut h = seq;
        for layer in layers {
            h = transformer_layer(g, p, layer, h, None)?;
        }
        let n = g.value(h).rows();
        g.row(h, n - 1)
    }

    /// `text_cls` is `1 x d_t`; audio and visual are `(L + 1) x d` stacks
    /// ending in their `<CLS>` row. Both are required.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        text_cls: Var,
        audio: Option<Var>,
        visual: Option<Var>,
    ) -> Result<MsaOutput> {
        let (Some(audio), Some(visual)) = (audio, visual) else {
            return Err(Error::contract(
                "sentiment head needs audio and visual inputs (real or generated)",
            ));
        };
        let [dt, da, dv] = self.dims;
        for (v, d, m) in [(text_cls, dt, Modality::Text), (audio, da, Modality::Audio), (visual, dv, Modality::Visual)] {
            if g.value(v).cols() != d {
                return Err(Error::dim(format!(
                    "{m} input of {:?}, expected width {d}",
                    g.value(v).shape()
                )));
            }
        }
        let a_cls = self.encode(g, p, &self.audio_layers, audio)?;
        let v_cls = self.encode(g, p, &self.visual_layers, visual)?;
        let (t_out, gate_text) = gated_attention(g, p, &self.gate_text, text_cls)?;
        let (a_out, gate_audio) = gated_attention(g, p, &self.gate_audio, a_cls)?;
        let (v_out, gate_visual) = gated_attention(g, p, &self.gate_visual, v_cls)?;
        let fused = g.concat_cols(&[v_out, t_out, a_out])?;
        let raw = self.predictor.forward(g, p, fused)?;
        Ok(MsaOutput {
            raw,
            fused,
            gate_text,
            gate_audio,
            gate_visual,
        })
    }

    /// Inference-mode prediction from three sequences.
    pub fn predict(&self, text: &FeatureSequence, audio: &FeatureSequence, visual: &FeatureSequence) -> Result<Prediction> {
        let mut g = Graph::inference();
        let p = self.set.bind(&mut g, false)?;
        let t = g.constant(text.cls().clone());
        let a = g.constant(audio.stacked());
        let v = g.constant(visual.stacked());
        let out = self.forward(&mut g, &p, t, Some(a), Some(v))?;
        Ok(self.prediction_from(&g, &out))
    }

    pub fn prediction_from(&self, g: &Graph, out: &MsaOutput) -> Prediction {
        let raw = g.value(out.raw);
        let output = match self.mode {
            TaskMode::Regression => vec![raw.item().clamp(-LABEL_BOUND, LABEL_BOUND)],
            TaskMode::Classification { .. } => raw.softmax_rows(false).expect("non-empty logits").into_data(),
        };
        Prediction {
            output,
            gate_text: g.value(out.gate_text).data().to_vec(),
            gate_audio: g.value(out.gate_audio).data().to_vec(),
            gate_visual: g.value(out.gate_visual).data().to_vec(),
        }
    }
}
