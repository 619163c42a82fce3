use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Scenario;
use crate::genmodels::{Modality, Provenance};

use super::ledger::{CommsLedger, PayloadArchive};
use super::message::{Content, Message, MessageKind, Party, PayloadItem, Stage};

/// Modalities that must never reach the server as real features or as
/// gradients of real features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyPolicy {
    pub private: Vec<Modality>,
}

impl PrivacyPolicy {
    pub fn for_scenario(s: Scenario) -> Self {
        PrivacyPolicy {
            private: s.private_modalities(),
        }
    }

    /// Audio and visual both private.
    pub fn strict() -> Self {
        PrivacyPolicy {
            private: Modality::PRIVATE.to_vec(),
        }
    }

    fn is_private(&self, m: Option<Modality>) -> bool {
        match m {
            Some(m) => self.private.contains(&m),
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub stage: Stage,
    pub round: usize,
    pub sender: Party,
    pub kind: MessageKind,
    pub item: String,
    pub reason: String,
}

fn check_upstream(m: &Message, it: &PayloadItem, policy: &PrivacyPolicy) -> Option<String> {
    let private = policy.is_private(it.modality);
    match it.content {
        Content::Features if private && it.provenance != Some(Provenance::Fake) => {
            return Some(format!("real {} features sent to the server", it.modality.expect("private")));
        }
        Content::Gradient if it.provenance != Some(Provenance::Fake) && it.modality != Some(Modality::Text) => {
            return Some(format!(
                "gradient w.r.t. real {} features sent to the server",
                it.modality.map_or("unlabelled", Modality::as_str)
            ));
        }
        _ => {}
    }
    let legal = match m.kind {
        MessageKind::TextUp => matches!(
            (it.content, it.modality),
            (Content::Features, Some(Modality::Text)) | (Content::Scalars, None)
        ),
        MessageKind::ClientReportUp => match it.content {
            Content::Scalars | Content::Params => true,
            Content::Gradient => it.provenance == Some(Provenance::Fake),
            Content::Features => false,
        },
        MessageKind::SharedUp => it.content == Content::Features && !private,
        MessageKind::LabelGradUp => it.content == Content::Scalars,
        _ => false,
    };
    (!legal).then(|| format!("{:?} may not carry {:?} content", m.kind, it.content))
}

fn check_downstream(m: &Message, it: &PayloadItem) -> Option<String> {
    let legal = match m.kind {
        MessageKind::DiscDown => it.content == Content::Params,
        MessageKind::FakeDown => match (it.content, it.modality, it.provenance) {
            (Content::Features, Some(Modality::Text), _) => true,
            (Content::Features, Some(_), Some(Provenance::Fake)) => true,
            (Content::Scalars, _, _) => true,
            _ => false,
        },
        MessageKind::PredictionDown => it.content == Content::Scalars,
        _ => false,
    };
    (!legal).then(|| format!("{:?} may not carry {:?} content", m.kind, it.content))
}

fn check_archive(it: &PayloadItem, archive: &PayloadArchive) -> Option<String> {
    let Some(data) = archive.get(&it.digest) else {
        return Some("payload missing from archive".into());
    };
    let mut h = Sha256::new();
    h.update(data);
    if crate::numkit::hex_digest(h) != it.digest || data.len() != it.bytes {
        return Some("archived payload does not match its digest".into());
    }
    None
}

/// Lists every ledger entry that breaks the privacy boundary or the
/// payload rules of its message kind. One violation per offending item.
pub fn audit(ledger: &CommsLedger, archive: Option<&PayloadArchive>, policy: &PrivacyPolicy) -> Vec<Violation> {
    let mut out = Vec::new();
    for m in ledger.records() {
        if m.upstream() && m.sender == Party::Server {
            out.push(Violation {
                stage: m.stage,
                round: m.round,
                sender: m.sender,
                kind: m.kind,
                item: String::new(),
                reason: "server addressed a message to itself".into(),
            });
            continue;
        }
        for it in &m.items {
            let reason = if m.upstream() {
                check_upstream(m, it, policy)
            } else {
                check_downstream(m, it)
            }
            .or_else(|| archive.and_then(|a| check_archive(it, a)));
            if let Some(reason) = reason {
                out.push(Violation {
                    stage: m.stage,
                    round: m.round,
                    sender: m.sender,
                    kind: m.kind,
                    item: it.label.clone(),
                    reason,
                });
            }
        }
    }
    out
}
