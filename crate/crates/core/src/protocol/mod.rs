//! Simulated federation: message ledger, privacy audit, the two training
//! stages and aggregation.

mod audit;
mod fedavg;
mod ledger;
mod message;
mod round;
mod server;
mod stage2;

pub use audit::{audit, PrivacyPolicy, Violation};
pub use fedavg::fedavg;
pub use ledger::{CommsLedger, LatencyModel, Network, PayloadArchive, RoundTotals};
pub use message::{Content, Message, MessageKind, Party, Payload, PayloadItem, Stage};
pub use round::{closed_form_round, comms_summary, run_cgan_round, select_clients, CommsSummary, ExecutionOrder, RoundOutcome};
pub use server::{config_fingerprint, slot, ClientState, ServerState};
pub use stage2::{evaluate, infer, inference_noise, score_of, train_stage2, EvalRow, Evaluation, Inference, Stage2Outcome};
