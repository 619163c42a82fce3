//! `hydisc` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hydisc_core::config::Overrides;
use hydisc_core::experiment::{
    costs, finetune, losses_csv, prepare, pretrain, sweep, sweep_csv, OutDir, Prepared, PretrainRun, RunManifest,
    RunMetrics, DEFAULT_LAMBDA,
};
use hydisc_core::metrics::compute_metrics;
use hydisc_core::protocol::{
    audit, comms_summary, infer, inference_noise, score_of, CommsLedger, Network, PayloadArchive, PrivacyPolicy,
    ServerState,
};
use hydisc_core::{Error, Modality, Scenario, TrainConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_AUDIT: u8 = 4;

#[derive(Parser)]
#[command(name = "hydisc", version, about = "Hybrid distributed cross-modality cGAN simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (HYDISC_OUT takes precedence).
    #[arg(long, global = true, default_value = "hydisc-out")]
    out: PathBuf,
    /// all-shareable | audio-privacy | visual-privacy | audio-visual-privacy
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// preset:mosi-toy | preset:mosei-toy | file:PATH
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Stage-one rounds.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    clients_per_round: Option<usize>,
    #[arg(long, global = true)]
    stage2_epochs: Option<usize>,
    #[arg(long, global = true)]
    lambda_d: Option<f64>,
    #[arg(long, global = true)]
    lambda_g: Option<f64>,
    /// Write fused embeddings of test samples to embeddings.jsonl.
    #[arg(long, global = true)]
    dump_embeddings: bool,
    /// Write gate activations of test samples to gates.jsonl.
    #[arg(long, global = true)]
    dump_gates: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage one: cGAN rounds. Writes checkpoint.bin after every round.
    Pretrain {
        /// Continue from checkpoint.bin in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Stage two and evaluation for one scenario.
    Train {
        /// Stage-one checkpoint; required unless the scenario is all-shareable.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Server-only predictions on the test clients.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Parameter and communication cost table.
    Costs {
        /// Parameters of a text encoder counted into the FL full model.
        #[arg(long, default_value_t = 0)]
        text_encoder: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline over a lambda_D x lambda_G grid.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.4])]
        grid_d: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.4])]
        grid_g: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Privacy audit of a recorded trace.
    Audit {
        /// Run directory holding trace.jsonl (and trace.archive when kept).
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Error(Error),
    Audit(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn resolve(c: &Common) -> Result<TrainConfig, Error> {
    let text = match &c.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let scenario = c.scenario.as_deref().map(str::parse::<Scenario>).transpose()?;
    let flags = Overrides {
        seed: c.seed,
        scenario,
        dataset: c.dataset.clone(),
        epochs: c.epochs,
        clients_per_round: c.clients_per_round,
        stage2_epochs: c.stage2_epochs,
        lambda_d: c.lambda_d,
        lambda_g: c.lambda_g,
    };
    TrainConfig::resolve(text.as_deref(), &flags)
}

fn out_dir(c: &Common) -> Result<OutDir, Error> {
    let path = match std::env::var_os("HYDISC_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => c.out.clone(),
    };
    OutDir::create(path)
}

fn load_server(p: &Prepared, path: &Path) -> Result<ServerState, Error> {
    let bytes =
        fs::read(path).map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    ServerState::load_checkpoint(&p.cfg, p.federation.dims, p.federation.lengths, &bytes)
}

fn check_audit(n: usize) -> Outcome {
    if n > 0 {
        return Err(Failure::Audit(n));
    }
    Ok(())
}

/// Keeps the CSV rows of rounds the checkpoint already covers.
fn truncate_losses(path: &Path, rounds: usize) -> Result<(), Error> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::from(hydisc_core::experiment::LOSS_CSV_HEADER);
    kept.push('\n');
    for line in text.lines().skip(1) {
        let round: Option<usize> = line.split(',').next().and_then(|r| r.parse().ok());
        if round.is_some_and(|r| r < rounds) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn cmd_pretrain(common: &Common, resume: bool) -> Outcome {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    let p = prepare(&cfg)?;
    let manifest = RunManifest::new("pretrain", &cfg);
    out.write_json("manifest.json", &manifest)?;

    let ckpt = out.file("checkpoint.bin");
    let start = if resume && ckpt.exists() {
        let s = load_server(&p, &ckpt)?;
        eprintln!("resuming at round {}", s.round);
        Some(s)
    } else {
        None
    };
    let resumed = start.is_some();
    let csv = out.file("losses.csv");
    match &start {
        Some(s) => truncate_losses(&csv, s.round)?,
        None => fs::write(&csv, format!("{}\n", hydisc_core::experiment::LOSS_CSV_HEADER))?,
    }
    let mut csv_file = fs::OpenOptions::new().append(true).open(&csv)?;
    let run = pretrain(&p, start, |server, outcome| {
        let rows = losses_csv(&outcome.reports);
        let body = rows.split_once('\n').map_or("", |(_, b)| b);
        csv_file.write_all(body.as_bytes())?;
        csv_file.flush()?;
        out.write("checkpoint.bin", &server.to_checkpoint())?;
        if let Some(r) = outcome.reports.first() {
            eprintln!("round {:>4}  L_G {:>9.5}  L_D {:>9.5}", outcome.round, r.l_g, r.l_d);
        }
        Ok(())
    })?;
    out.write("checkpoint.bin", &run.server.to_checkpoint())?;
    out.write_trace(&run.net)?;
    let violations = audit(&run.net.ledger, run.net.archive.as_ref(), &PrivacyPolicy::strict());
    let summary = serde_json::json!({
        "manifest_hash": manifest.hash,
        "rounds": run.server.round,
        "resumed": resumed,
        "head_unchanged": run.head_unchanged,
        "comms": (!resumed).then(|| comms_summary(&run.net, &run.server, &p.train, cfg.count_text_down)),
        "audit_violations": violations.len(),
        "seconds": run.seconds,
    });
    out.write_json("pretrain.json", &summary)?;
    println!("pretrained {} rounds -> {}", run.server.round, out.path.display());
    check_audit(violations.len())
}

fn cmd_train(common: &Common, checkpoint: Option<&Path>) -> Outcome {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    let p = prepare(&cfg)?;
    let server = match (cfg.scenario.needs_generators(), checkpoint) {
        (true, Some(path)) => load_server(&p, path)?,
        (true, None) => {
            return Err(Error::Config(format!(
                "scenario {} generates features; pass --checkpoint from `hydisc pretrain`",
                cfg.scenario
            ))
            .into())
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "scenario {} uses no generators; drop --checkpoint",
                cfg.scenario
            ))
            .into())
        }
        (false, None) => p.new_server()?,
    };
    let pre = PretrainRun {
        head_unchanged: true,
        net: Network::new(cfg.audit_archive),
        reports: Vec::new(),
        seconds: 0.0,
        server,
    };
    let fin = finetune(&p, &pre, cfg.scenario)?;
    let manifest = RunManifest::new("train", &cfg);
    let metrics = RunMetrics::new(&manifest, &pre, &fin);
    out.write_json("manifest.json", &manifest)?;
    out.write_json("metrics.json", &metrics)?;
    out.write("model.bin", &fin.server.to_checkpoint())?;
    out.write_trace(&fin.net)?;
    out.write_dumps(&fin.evaluation, common.dump_embeddings, common.dump_gates)?;
    let m = &fin.evaluation.metrics;
    println!(
        "{}: acc2 {:.4} f1 {:.4} mae {:.4} corr {:.4} (majority {:.4})",
        cfg.scenario, m.acc2_non_negative, m.f1_non_negative, m.mae, m.corr, fin.majority_baseline
    );
    for v in &fin.violations {
        eprintln!("audit: round {} {} {:?} {}: {}", v.round, v.sender, v.kind, v.item, v.reason);
    }
    check_audit(fin.violations.len())
}

fn cmd_infer(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    let p = prepare(&cfg)?;
    let server = load_server(&p, checkpoint)?;
    let mut csv = String::from("client,index,y,y_hat\n");
    let mut pairs = Vec::new();
    let mut untrained = false;
    for c in &p.test {
        let scope = c.data.scope();
        for (i, s) in c.data.samples().iter().enumerate() {
            let shared = Modality::PRIVATE.map(|m| (!cfg.scenario.is_private(m)).then(|| scope.private(i, m)));
            let r = infer(&server, s.text(), shared, inference_noise(server.seed, c.id(), i))?;
            untrained |= r.untrained;
            let y_hat = score_of(&r.prediction, server.head.mode);
            csv.push_str(&format!("{},{},{},{}\n", c.id(), i, s.y(), y_hat));
            pairs.push((s.y(), y_hat));
        }
    }
    out.write("predictions.csv", csv.as_bytes())?;
    let metrics = compute_metrics(&pairs)?;
    out.write_json("infer.json", &serde_json::json!({ "metrics": metrics, "untrained": untrained }))?;
    if untrained {
        eprintln!("warning: checkpoint has no stage-two training");
    }
    println!("{} predictions, acc2 {:.4}", pairs.len(), metrics.acc2_non_negative);
    Ok(())
}

fn cmd_costs(common: &Common, text_encoder: usize) -> Outcome {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    let p = prepare(&cfg)?;
    let report = costs(&p, text_encoder)?;
    let csv = report.table.to_csv();
    out.write("costs.csv", csv.as_bytes())?;
    out.write_json("costs.json", &report)?;
    print!("{csv}");
    println!(
        "ledger round {} vs closed form {}: {}",
        report.ledger_round,
        report.closed_form_round,
        if report.ledger_matches { "match" } else { "MISMATCH" }
    );
    if !report.ledger_matches {
        return Err(Error::Runtime("ledger disagrees with the closed-form count".into()).into());
    }
    Ok(())
}

fn cmd_sweep(common: &Common, grid_d: &[f64], grid_g: &[f64]) -> Outcome {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    let p = prepare(&cfg)?;
    let rows = sweep(&p, grid_d, grid_g)?;
    let csv = sweep_csv(&rows);
    out.write_json("manifest.json", &RunManifest::new("sweep", &cfg))?;
    out.write("sweep.csv", csv.as_bytes())?;
    out.write_json("sweep.json", &rows)?;
    print!("{csv}");
    println!("default point: lambda_d={} lambda_g={}", DEFAULT_LAMBDA.0, DEFAULT_LAMBDA.1);
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(Error::Runtime(format!("{failed} of {} grid points failed", rows.len())).into());
    }
    Ok(())
}

fn cmd_audit(common: &Common, trace: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let dir = if trace.is_dir() { trace.to_path_buf() } else { trace.parent().map(Path::to_path_buf).unwrap_or_default() };
    let file = if trace.is_dir() { dir.join("trace.jsonl") } else { trace.to_path_buf() };
    let text = fs::read_to_string(&file)
        .map_err(|e| Error::Config(format!("cannot read trace {}: {e}", file.display())))?;
    let ledger = CommsLedger::read_trace(&text)?;
    let archive = match fs::read(dir.join("trace.archive")) {
        Ok(bytes) => Some(PayloadArchive::read_from(&bytes)?),
        Err(_) => None,
    };
    let violations = audit(&ledger, archive.as_ref(), &PrivacyPolicy::for_scenario(cfg.scenario));
    for v in &violations {
        println!("round {} {} {:?} {}: {}", v.round, v.sender, v.kind, v.item, v.reason);
    }
    println!(
        "{} messages, archive {}, {} violations",
        ledger.len(),
        if archive.is_some() { "checked" } else { "absent" },
        violations.len()
    );
    check_audit(violations.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain { resume, common } => cmd_pretrain(common, *resume),
        Command::Train { checkpoint, common } => cmd_train(common, checkpoint.as_deref()),
        Command::Infer { checkpoint, common } => cmd_infer(common, checkpoint),
        Command::Costs { text_encoder, common } => cmd_costs(common, *text_encoder),
        Command::Sweep { grid_d, grid_g, common } => cmd_sweep(common, grid_d, grid_g),
        Command::Audit { trace, common } => cmd_audit(common, trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Audit(n)) => {
            eprintln!("error: {n} privacy violations");
            ExitCode::from(EXIT_AUDIT)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } | Error::Format(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
