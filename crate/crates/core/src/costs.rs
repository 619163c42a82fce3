//! Per-client parameter scale and per-round communication of the
//! distributed baselines next to the generator/discriminator split.

use serde::{Deserialize, Serialize};

use crate::protocol::ServerState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Fl,
    Sl,
    Sfl,
    Hydisc,
}

impl Framework {
    pub const ALL: [Framework; 4] = [Framework::Fl, Framework::Sl, Framework::Sfl, Framework::Hydisc];

    pub fn label(self) -> &'static str {
        match self {
            Framework::Fl => "FL",
            Framework::Sl => "SL",
            Framework::Sfl => "SFL",
            Framework::Hydisc => "HyDiscGAN",
        }
    }

    /// Published MOSI-scale figures, for side-by-side display only.
    pub fn reference(self) -> (&'static str, &'static str) {
        match self {
            Framework::Fl => ("109.5M", "109.5M x 2S"),
            Framework::Sl | Framework::Sfl => ("23.9M", "23.9M x 2S"),
            Framework::Hydisc => ("77.8K", "77.8K x 2S"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub framework: Framework,
    /// Parameters held (and exchanged) per client.
    pub per_client: usize,
    /// Parameters moved per round over all selected clients.
    pub per_round: usize,
    /// Of `per_round`, activations and gradients rather than weights.
    pub feature_traffic: usize,
    pub reference_per_client: String,
    pub reference_per_round: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub clients_per_round: usize,
    pub samples_per_client: usize,
    pub rows: Vec<CostRow>,
}

/// Model sizes that feed the cost table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCounts {
    /// Whole sentiment model trained by FL clients.
    pub full_model: usize,
    /// Client-side partition under split learning: the private-modality encoders.
    pub client_partition: usize,
    /// `|D_a| + |D_v|`.
    pub discriminators: usize,
    /// Per-sample parameter traffic of one round (see [`crate::protocol::closed_form_round`]).
    pub per_sample_traffic: usize,
}

/// Counts derived from a server. `text_encoder` is added to the full model
/// for FL; features here are precomputed, so it defaults to 0.
pub fn model_counts(server: &ServerState, text_encoder: usize, count_text_down: bool) -> ModelCounts {
    let head = &server.head.set;
    let client_partition = head
        .names()
        .iter()
        .zip(head.tensors())
        .filter(|(n, _)| n.starts_with("audio_layer") || n.starts_with("visual_layer"))
        .map(|(_, t)| t.numel())
        .sum();
    let [dt, da, dv] = server.dims;
    let [lt, la, lv] = server.lengths;
    let per_sample_traffic = lt * dt * (1 + usize::from(count_text_down)) + 2 * ((la + 1) * da + (lv + 1) * dv);
    ModelCounts {
        full_model: head.count() + text_encoder,
        client_partition,
        discriminators: server.discriminator_params(),
        per_sample_traffic,
    }
}

/// Cost table for `s` clients per round holding `samples_per_client` each.
pub fn cost_table(counts: ModelCounts, s: usize, samples_per_client: usize) -> CostTable {
    let rows = Framework::ALL
        .iter()
        .map(|&f| {
            let (per_client, feature_traffic) = match f {
                Framework::Fl => (counts.full_model, 0),
                Framework::Sl | Framework::Sfl => (counts.client_partition, 0),
                Framework::Hydisc => (
                    counts.discriminators,
                    s * (samples_per_client * counts.per_sample_traffic + 4),
                ),
            };
            let (rc, rr) = f.reference();
            CostRow {
                framework: f,
                per_client: if s == 0 { 0 } else { per_client },
                per_round: 2 * s * per_client + feature_traffic,
                feature_traffic,
                reference_per_client: rc.into(),
                reference_per_round: rr.into(),
            }
        })
        .collect();
    CostTable {
        clients_per_round: s,
        samples_per_client,
        rows,
    }
}

impl CostTable {
    pub fn row(&self, f: Framework) -> &CostRow {
        self.rows.iter().find(|r| r.framework == f).expect("every framework has a row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("framework,per_client,per_round,feature_traffic,reference_per_client,reference_per_round\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.framework.label(),
                r.per_client,
                r.per_round,
                r.feature_traffic,
                r.reference_per_client,
                r.reference_per_round
            ));
        }
        out
    }
}
