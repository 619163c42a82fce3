//! End-to-end pipelines and their on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, Scenario, TrainConfig};
use crate::costs::{cost_table, model_counts, CostTable};
use crate::datagen::{make_federation, read_federation, Federation, Split};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{majority_baseline, MetricsRecord};
use crate::protocol::{
    audit, closed_form_round, comms_summary, evaluate, run_cgan_round, train_stage2, ClientState, CommsSummary,
    Evaluation, ExecutionOrder, Network, PrivacyPolicy, RoundOutcome, ServerState, Stage, Stage2Outcome, Violation,
};

/// Loaded data for one run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cfg: TrainConfig,
    pub federation: Federation,
    pub train: Vec<ClientState>,
    pub test: Vec<ClientState>,
}

pub fn load_federation(cfg: &TrainConfig) -> Result<Federation> {
    match cfg.dataset_source()? {
        DatasetSource::Preset(p) => make_federation(&p.federation(cfg.seed)),
        DatasetSource::File(path) => {
            let f = fs::File::open(&path)
                .map_err(|e| Error::config(format!("cannot open dataset {}: {e}", path.display())))?;
            read_federation(BufReader::new(f))
        }
    }
}

pub fn prepare(cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    let federation = load_federation(cfg)?;
    Ok(prepare_with(cfg, federation))
}

pub fn prepare_with(cfg: &TrainConfig, federation: Federation) -> Prepared {
    let clients = |s| federation.split_clients(s).into_iter().map(ClientState::new).collect();
    Prepared {
        cfg: cfg.clone(),
        train: clients(Split::Train),
        test: clients(Split::Test),
        federation,
    }
}

impl Prepared {
    pub fn new_server(&self) -> Result<ServerState> {
        ServerState::new(&self.cfg, self.federation.dims, self.federation.lengths)
    }
}

/// Stage-one result; `net` holds the ledger so far.
#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub server: ServerState,
    pub net: Network,
    pub reports: Vec<LossReport>,
    pub head_unchanged: bool,
    pub seconds: f64,
}

/// Runs stage-one rounds until `cfg.epochs` have completed, starting from
/// `resume` when given. `on_round` sees the server after every round.
pub fn pretrain(
    p: &Prepared,
    resume: Option<ServerState>,
    mut on_round: impl FnMut(&ServerState, &RoundOutcome) -> Result<()>,
) -> Result<PretrainRun> {
    let start = std::time::Instant::now();
    let mut server = match resume {
        Some(s) => s,
        None => p.new_server()?,
    };
    let head_before = server.head.set.digest();
    let mut net = Network::new(p.cfg.audit_archive);
    let mut reports = Vec::new();
    while server.round < p.cfg.epochs {
        let out = run_cgan_round(&mut server, &p.train, &mut net, &p.cfg, ExecutionOrder::Parallel)?;
        on_round(&server, &out)?;
        reports.extend(out.reports);
    }
    Ok(PretrainRun {
        head_unchanged: server.head.set.digest() == head_before,
        server,
        net,
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Stage two plus evaluation for one scenario, continuing a stage-one run.
#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub scenario: Scenario,
    pub server: ServerState,
    pub net: Network,
    pub stage2: Stage2Outcome,
    pub evaluation: Evaluation,
    pub majority_baseline: f64,
    pub discriminators_unchanged: bool,
    pub violations: Vec<Violation>,
    /// Stage-one traffic check; `None` when the ledger does not hold the
    /// stage-one rounds (a run resumed from a checkpoint).
    pub comms: Option<CommsSummary>,
    pub seconds: f64,
}

pub fn finetune(p: &Prepared, pre: &PretrainRun, scenario: Scenario) -> Result<FinetuneRun> {
    let start = std::time::Instant::now();
    let cfg = TrainConfig {
        scenario,
        ..p.cfg.clone()
    };
    let mut server = pre.server.clone();
    let mut net = pre.net.clone();
    let covered = server.selections.is_empty() || net.ledger.records().iter().any(|m| m.stage == Stage::Pretrain);
    let comms = covered.then(|| comms_summary(&net, &server, &p.train, cfg.count_text_down));
    server.freeze_discriminators();
    let disc_before = server.discriminator_digest();
    let stage2 = train_stage2(&mut server, &p.train, &mut net, &cfg)?;
    let evaluation = evaluate(&server, &p.test, &mut net, scenario)?;
    let discriminators_unchanged = server.discriminator_digest() == disc_before;
    let violations = audit(&net.ledger, net.archive.as_ref(), &PrivacyPolicy::for_scenario(scenario));
    let train_y: Vec<f64> = p.train.iter().flat_map(|c| c.data.labels()).collect();
    let test_y: Vec<f64> = p.test.iter().flat_map(|c| c.data.labels()).collect();
    Ok(FinetuneRun {
        scenario,
        server,
        net,
        stage2,
        evaluation,
        majority_baseline: majority_baseline(&train_y, &test_y),
        discriminators_unchanged,
        violations,
        comms,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Full pipeline for the configured scenario. Scenarios with no private
/// modality skip stage one.
pub fn run_pipeline(p: &Prepared) -> Result<(PretrainRun, FinetuneRun)> {
    let pre = if p.cfg.scenario.needs_generators() {
        pretrain(p, None, |_, _| Ok(()))?
    } else {
        let cfg0 = TrainConfig { epochs: 0, ..p.cfg.clone() };
        pretrain(&Prepared { cfg: cfg0, ..p.clone() }, None, |_, _| Ok(()))?
    };
    let fin = finetune(p, &pre, p.cfg.scenario)?;
    Ok((pre, fin))
}

/// Run manifest: resolved config, seed and code version. Outputs quote its
/// hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub dataset: String,
    pub scenario: Scenario,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub config_toml: String,
    pub hash: String,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &TrainConfig) -> Self {
        let mut m = RunManifest {
            tool: "hydisc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            dataset: cfg.dataset.clone(),
            scenario: cfg.scenario,
            lambda_d: cfg.lambda_d,
            lambda_g: cfg.lambda_g,
            config_toml: cfg.to_toml(),
            hash: String::new(),
        };
        m.hash = m.compute_hash();
        m
    }

    pub fn compute_hash(&self) -> String {
        let mut body = self.clone();
        body.hash = String::new();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&body).expect("manifest serializes"));
        crate::numkit::hex_digest(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub manifest_hash: String,
    pub scenario: Scenario,
    pub rounds: usize,
    pub stage2_epochs: usize,
    pub metrics: MetricsRecord,
    pub majority_baseline: f64,
    pub beats_baseline: bool,
    pub stage2_epoch_loss: Vec<f64>,
    pub comms: Option<CommsSummary>,
    pub audit_violations: usize,
    pub head_unchanged_in_stage1: bool,
    pub discriminators_unchanged_in_stage2: bool,
    pub untrained: bool,
}

impl RunMetrics {
    pub fn new(manifest: &RunManifest, pre: &PretrainRun, fin: &FinetuneRun) -> Self {
        let acc = fin.evaluation.metrics.acc2_non_negative;
        RunMetrics {
            manifest_hash: manifest.hash.clone(),
            scenario: fin.scenario,
            rounds: pre.server.round,
            stage2_epochs: fin.stage2.epochs,
            metrics: fin.evaluation.metrics.clone(),
            majority_baseline: fin.majority_baseline,
            beats_baseline: acc > fin.majority_baseline,
            stage2_epoch_loss: fin.stage2.epoch_loss.clone(),
            comms: fin.comms.clone(),
            audit_violations: fin.violations.len(),
            head_unchanged_in_stage1: pre.head_unchanged,
            discriminators_unchanged_in_stage2: fin.discriminators_unchanged,
            untrained: fin.evaluation.untrained,
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "round,client,modality,L_G,L_D,L_real,L_fake";

pub fn losses_csv(reports: &[LossReport]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round, r.client, r.modality, r.l_g, r.l_d, r.l_real, r.l_fake
        ));
    }
    out
}

/// Output directory writer; every file name written is remembered.
pub struct OutDir {
    pub path: PathBuf,
}

impl OutDir {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        fs::create_dir_all(&path)?;
        Ok(OutDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partial file.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = self.file(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, self.file(name))?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_trace(&self, net: &Network) -> Result<()> {
        let f = fs::File::create(self.file("trace.jsonl"))?;
        net.ledger.write_trace(BufWriter::new(f))?;
        if let Some(a) = &net.archive {
            let f = fs::File::create(self.file("trace.archive"))?;
            a.write_to(BufWriter::new(f))?;
        }
        Ok(())
    }

    pub fn write_dumps(&self, ev: &Evaluation, embeddings: bool, gates: bool) -> Result<()> {
        #[derive(Serialize)]
        struct Embedding<'a> {
            client: usize,
            index: usize,
            y: f64,
            y_hat: f64,
            fused: &'a [f64],
        }
        #[derive(Serialize)]
        struct Gates<'a> {
            client: usize,
            index: usize,
            y: f64,
            text: &'a [f64],
            audio: &'a [f64],
            visual: &'a [f64],
        }
        if embeddings {
            let mut w = BufWriter::new(fs::File::create(self.file("embeddings.jsonl"))?);
            for r in &ev.rows {
                let e = Embedding {
                    client: r.client,
                    index: r.index,
                    y: r.y,
                    y_hat: r.y_hat,
                    fused: &r.fused,
                };
                serde_json::to_writer(&mut w, &e).map_err(|e| Error::Format(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        if gates {
            let mut w = BufWriter::new(fs::File::create(self.file("gates.jsonl"))?);
            for r in &ev.rows {
                let g = Gates {
                    client: r.client,
                    index: r.index,
                    y: r.y,
                    text: &r.gate_text,
                    audio: &r.gate_audio,
                    visual: &r.gate_visual,
                };
                serde_json::to_writer(&mut w, &g).map_err(|e| Error::Format(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub default_point: bool,
    pub metrics: Option<MetricsRecord>,
    pub error: Option<String>,
}

pub const DEFAULT_LAMBDA: (f64, f64) = (0.1, 0.1);

/// One full pipeline per grid point on the same federation. A failing point
/// is recorded and the rest still run.
pub fn sweep(p: &Prepared, grid_d: &[f64], grid_g: &[f64]) -> Result<Vec<SweepRow>> {
    for &v in grid_d.iter().chain(grid_g) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("sweep value {v} outside [0, 1]")));
        }
    }
    let mut rows = Vec::new();
    for &ld in grid_d {
        for &lg in grid_g {
            let cfg = TrainConfig {
                lambda_d: ld,
                lambda_g: lg,
                ..p.cfg.clone()
            };
            let point = Prepared { cfg, ..p.clone() };
            let (metrics, error) = match run_pipeline(&point) {
                Ok((_, fin)) => (Some(fin.evaluation.metrics), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(SweepRow {
                lambda_d: ld,
                lambda_g: lg,
                default_point: (ld, lg) == DEFAULT_LAMBDA,
                metrics,
                error,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "lambda_d,lambda_g,default_point,acc2,f1,acc7,mae,corr,error";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let cells = match &r.metrics {
            Some(m) => format!("{},{},{},{},{}", m.acc2_non_negative, m.f1_non_negative, m.acc7, m.mae, m.corr),
            None => ",,,,".into(),
        };
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        out.push_str(&format!("{},{},{},{},{}\n", r.lambda_d, r.lambda_g, r.default_point, cells, err));
    }
    out
}

/// Cost table for the configured model, with the generator/discriminator
/// row checked against a live one-round ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub table: CostTable,
    pub ledger_round: usize,
    pub closed_form_round: usize,
    pub ledger_matches: bool,
}

pub fn costs(p: &Prepared, text_encoder: usize) -> Result<CostReport> {
    let server = p.new_server()?;
    let s = p.cfg.clients_per_round;
    let sizes: BTreeMap<usize, usize> = p.train.iter().map(|c| (c.id(), c.data.len())).collect();
    let n_bar = if p.train.is_empty() {
        0
    } else {
        p.federation.sample_count(Split::Train) / p.train.len()
    };
    let counts = model_counts(&server, text_encoder, p.cfg.count_text_down);
    let table = cost_table(counts, s, n_bar);
    if s == 0 {
        return Ok(CostReport {
            table,
            ledger_round: 0,
            closed_form_round: 0,
            ledger_matches: true,
        });
    }
    let mut live = server.clone();
    let mut net = Network::new(false);
    let out = run_cgan_round(&mut live, &p.train, &mut net, &p.cfg, ExecutionOrder::Parallel)?;
    let counts_sel: Vec<usize> = out.selected.iter().map(|c| sizes[c]).collect();
    let closed = closed_form_round(&server, &counts_sel, p.cfg.count_text_down);
    let recorded = net.ledger.total_parameters();
    Ok(CostReport {
        table,
        ledger_round: recorded,
        closed_form_round: closed,
        ledger_matches: recorded == closed,
    })
}
