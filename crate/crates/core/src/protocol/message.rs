use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::genmodels::{encode_params, FeatureSequence, Modality, Provenance};
use crate::numkit::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    /// Global discriminators, server to client.
    DiscDown,
    /// Text features (and stage-two labels), client to server.
    TextUp,
    /// Generated sequences plus the conditioning text, server to client.
    FakeDown,
    /// Generator losses, their gradients w.r.t. the fake sequences, and the
    /// locally updated discriminators, client to server.
    ClientReportUp,
    /// Real features of a modality the scenario marks shareable.
    SharedUp,
    /// Stage-two predictions sent for client-side labels.
    PredictionDown,
    /// Gradient of the client-side task loss w.r.t. those predictions.
    LabelGradUp,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::DiscDown,
        MessageKind::TextUp,
        MessageKind::FakeDown,
        MessageKind::ClientReportUp,
        MessageKind::SharedUp,
        MessageKind::PredictionDown,
        MessageKind::LabelGradUp,
    ];

    pub fn upstream(self) -> bool {
        matches!(
            self,
            MessageKind::TextUp | MessageKind::ClientReportUp | MessageKind::SharedUp | MessageKind::LabelGradUp
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Server,
    Client(usize),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Server => f.write_str("server"),
            Party::Client(c) => write!(f, "client {c}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    /// A feature body, or body plus `<CLS>` for generated sequences.
    Features,
    /// Gradient of a loss w.r.t. a feature tensor.
    Gradient,
    Params,
    Scalars,
}

/// Descriptor of one payload entry. `provenance` is the provenance of the
/// features carried, or for gradients of the tensor differentiated against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadItem {
    pub label: String,
    pub content: Content,
    pub modality: Option<Modality>,
    pub provenance: Option<Provenance>,
    pub elements: usize,
    pub bytes: usize,
    pub digest: String,
}

fn digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    crate::numkit::hex_digest(h)
}

/// A payload entry with its serialized bytes; the bytes go to the archive,
/// the descriptor to the ledger.
#[derive(Clone, Debug)]
pub struct Payload {
    pub item: PayloadItem,
    pub data: Vec<u8>,
}

impl Payload {
    fn new(label: String, content: Content, m: Option<Modality>, p: Option<Provenance>, elements: usize, data: Vec<u8>) -> Self {
        Payload {
            item: PayloadItem {
                label,
                content,
                modality: m,
                provenance: p,
                elements,
                bytes: data.len(),
                digest: digest(&data),
            },
            data,
        }
    }

    /// Body only (text uploads and shared real features).
    pub fn body(label: impl Into<String>, seq: &FeatureSequence) -> Self {
        let t = seq.body();
        Self::new(label.into(), Content::Features, Some(seq.modality()), Some(seq.provenance()), t.numel(), t.to_le_bytes())
    }

    /// Body followed by `<CLS>`.
    pub fn sequence(label: impl Into<String>, seq: &FeatureSequence) -> Self {
        let t = seq.stacked();
        Self::new(label.into(), Content::Features, Some(seq.modality()), Some(seq.provenance()), t.numel(), t.to_le_bytes())
    }

    pub fn gradient(label: impl Into<String>, modality: Modality, wrt: Provenance, grad: &Tensor) -> Self {
        Self::new(label.into(), Content::Gradient, Some(modality), Some(wrt), grad.numel(), grad.to_le_bytes())
    }

    pub fn params(label: impl Into<String>, modality: Option<Modality>, set: &ParamSet) -> Self {
        Self::new(label.into(), Content::Params, modality, None, set.count(), encode_params(set))
    }

    pub fn scalars(label: impl Into<String>, values: &[f64]) -> Self {
        let data: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(label.into(), Content::Scalars, None, None, values.len(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: Party,
    pub receiver: Party,
    pub stage: Stage,
    pub round: usize,
    pub items: Vec<PayloadItem>,
    /// Sum of serialized element counts over items.
    pub parameter_count: usize,
    pub byte_count: usize,
}

impl Message {
    pub fn new(kind: MessageKind, sender: Party, receiver: Party, stage: Stage, round: usize, items: Vec<PayloadItem>) -> Self {
        let parameter_count = items.iter().map(|i| i.elements).sum();
        let byte_count = items.iter().map(|i| i.bytes).sum();
        Message {
            kind,
            sender,
            receiver,
            stage,
            round,
            items,
            parameter_count,
            byte_count,
        }
    }

    pub fn upstream(&self) -> bool {
        self.receiver == Party::Server
    }
}
