use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Scenario, TrainConfig};
use crate::datagen::Polarity;
use crate::error::{Error, Result};
use crate::genmodels::{mix_seed, FeatureSequence, Modality, MsaOutput, NoiseSeed, Prediction, TaskMode};
use crate::losses::{loss_task, TaskTargets};
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::numkit::{AdamConfig, AdamState, Graph, Tensor, Var};

use super::ledger::Network;
use super::message::{MessageKind, Party, Payload, Stage};
use super::server::{modality_code, slot, ClientState, ServerState, TAG_NOISE_FINETUNE, TAG_NOISE_INFER, TAG_SHUFFLE};

/// What the server holds for one training sample after the stage-two
/// uploads. Private modalities are absent and get generated.
struct ServerSample {
    client: usize,
    index: usize,
    text: FeatureSequence,
    shared: [Option<FeatureSequence>; 2],
    label: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Outcome {
    pub epochs: usize,
    pub steps: usize,
    /// Mean task loss per epoch.
    pub epoch_loss: Vec<f64>,
}

fn upload_training_data(clients: &[ClientState], net: &mut Network, cfg: &TrainConfig) -> Vec<ServerSample> {
    let stage = Stage::Finetune;
    let mut out = Vec::new();
    for c in clients {
        let id = c.id();
        let mut payload: Vec<Payload> = c
            .data
            .texts()
            .enumerate()
            .map(|(i, t)| Payload::body(format!("text[{i}]"), t))
            .collect();
        if !cfg.labels_via_clients {
            payload.push(Payload::scalars("labels", &c.data.labels()));
        }
        net.send(MessageKind::TextUp, Party::Client(id), Party::Server, stage, 0, payload);
        send_shared(c, net, cfg.scenario, stage);
        let scope = c.data.scope();
        for (i, s) in c.data.samples().iter().enumerate() {
            let shared = Modality::PRIVATE.map(|m| (!cfg.scenario.is_private(m)).then(|| scope.private(i, m).clone()));
            out.push(ServerSample {
                client: id,
                index: i,
                text: s.text().clone(),
                shared,
                label: (!cfg.labels_via_clients).then(|| s.y()),
            });
        }
    }
    out
}

fn send_shared(c: &ClientState, net: &mut Network, scenario: Scenario, stage: Stage) {
    let scope = c.data.scope();
    let mut payload = Vec::new();
    for m in Modality::PRIVATE {
        if scenario.is_private(m) {
            continue;
        }
        for i in 0..c.data.len() {
            payload.push(Payload::body(format!("{m}[{i}]"), scope.private(i, m)));
        }
    }
    if !payload.is_empty() {
        net.send(MessageKind::SharedUp, Party::Client(c.id()), Party::Server, stage, 0, payload);
    }
}

/// Loss of one prediction and its gradient w.r.t. the raw head output.
fn task_loss_grad(raw: &Tensor, label: f64, mode: TaskMode, scale: f64) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let r = g.param(raw.clone());
    let loss = match mode {
        TaskMode::Regression => loss_task(&mut g, r, TaskTargets::Scores(&[label]))?,
        TaskMode::Classification { .. } => {
            let p = g.softmax_rows(r)?;
            let class = crate::datagen::polarity(label).class_index();
            loss_task(&mut g, p, TaskTargets::Classes(&[class]))?
        }
    };
    let loss = g.scale(loss, scale)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), g.grad_or_zeros(r)))
}

struct Forward {
    graph: Graph,
    raw: Var,
    out: MsaOutput,
    head_vars: Vec<Var>,
    gen_vars: [Option<Vec<Var>>; 2],
}

fn forward_sample(server: &ServerState, s: &ServerSample, noise: [NoiseSeed; 2], trainable: bool) -> Result<Forward> {
    let mut g = if trainable { Graph::new() } else { Graph::inference() };
    let head_vars = server.head.set.bind(&mut g, trainable)?;
    let mut gen_vars = [None, None];
    let mut inputs = [None, None];
    for m in Modality::PRIVATE {
        let k = slot(m);
        inputs[k] = Some(match &s.shared[k] {
            Some(seq) => g.constant(seq.stacked()),
            None => {
                let gen = &server.generators[k];
                let p = gen.set.bind(&mut g, trainable)?;
                let cond = g.constant(s.text.body().clone());
                let mu = g.constant(noise[k].sample(gen.feature_dim));
                let out = gen.generate(&mut g, &p, cond, mu, server.lengths[k + 1])?;
                gen_vars[k] = Some(p);
                out
            }
        });
    }
    let t = g.constant(s.text.cls().clone());
    let out = server.head.forward(&mut g, &head_vars, t, inputs[0], inputs[1])?;
    Ok(Forward {
        graph: g,
        raw: out.raw,
        out,
        head_vars,
        gen_vars,
    })
}

/// Stage two: with the discriminators frozen, trains the sentiment head
/// and the generators of private modalities on the task loss. Shareable
/// modalities are uploaded once and used as real inputs.
pub fn train_stage2(server: &mut ServerState, clients: &[ClientState], net: &mut Network, cfg: &TrainConfig) -> Result<Stage2Outcome> {
    if !server.discriminators_frozen() {
        return Err(Error::contract("stage two requires frozen discriminators"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    server.head.set.unfreeze();
    let samples = upload_training_data(clients, net, cfg);
    if samples.is_empty() {
        return Err(Error::config("stage two with no training samples"));
    }
    let private: Vec<Modality> = cfg.scenario.private_modalities();
    let mut head_opt = AdamState::new(AdamConfig::with_lr(cfg.lr_task), server.head.set.tensors());
    let mut gen_opt = [
        AdamState::new(AdamConfig::with_lr(cfg.lr_task), server.generators[0].set.tensors()),
        AdamState::new(AdamConfig::with_lr(cfg.lr_task), server.generators[1].set.tensors()),
    ];
    let mut epoch_loss = Vec::with_capacity(cfg.stage2_epochs);
    let mut steps = 0;
    for e in 0..cfg.stage2_epochs {
        let epoch = server.finetuned_epochs + e;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let server_ref = &*server;
            let mut fwd: Vec<Forward> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let noise = Modality::PRIVATE.map(|m| {
                        NoiseSeed::derive(
                            cfg.seed,
                            &[TAG_NOISE_FINETUNE, epoch as u64, s.client as u64, s.index as u64, modality_code(m)],
                        )
                    });
                    forward_sample(server_ref, s, noise, true)
                })
                .collect::<Result<_>>()?;

            let mut out_grads = Vec::with_capacity(batch.len());
            for (&i, f) in batch.iter().zip(&fwd) {
                let s = &samples[i];
                let raw = f.graph.value(f.raw).clone();
                let (loss, grad) = match s.label {
                    Some(y) => task_loss_grad(&raw, y, server.head.mode, scale)?,
                    None => {
                        let c = Party::Client(s.client);
                        net.send(MessageKind::PredictionDown, Party::Server, c, Stage::Finetune, epoch, vec![Payload::scalars(format!("prediction[{}]", s.index), raw.data())]);
                        let y = clients
                            .iter()
                            .find(|cl| cl.id() == s.client)
                            .map(|cl| cl.data.samples()[s.index].y())
                            .ok_or_else(|| Error::contract("label owner missing"))?;
                        let (loss, grad) = task_loss_grad(&raw, y, server.head.mode, scale)?;
                        let mut vals = vec![loss];
                        vals.extend_from_slice(grad.data());
                        net.send(MessageKind::LabelGradUp, c, Party::Server, Stage::Finetune, epoch, vec![Payload::scalars(format!("loss_grad[{}]", s.index), &vals)]);
                        (loss, grad)
                    }
                };
                total += loss;
                out_grads.push(grad);
            }

            let grads: Vec<(Vec<Tensor>, [Option<Vec<Tensor>>; 2])> = fwd
                .par_iter_mut()
                .zip(out_grads.par_iter())
                .map(|(f, og)| -> Result<_> {
                    let g = &mut f.graph;
                    let gc = g.constant(og.clone());
                    let prod = g.mul(f.raw, gc)?;
                    let surrogate = g.sum(prod)?;
                    g.backward(surrogate)?;
                    let head = server_ref.head.set.grads(g, &f.head_vars);
                    let gens = [0, 1].map(|k| f.gen_vars[k].as_ref().map(|v| server_ref.generators[k].set.grads(g, v)));
                    Ok((head, gens))
                })
                .collect::<Result<_>>()?;

            let mut head_sum: Vec<Tensor> = server.head.set.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut gen_sum: [Vec<Tensor>; 2] =
                [0, 1].map(|k| server.generators[k].set.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect());
            for (h, gens) in &grads {
                for (acc, t) in head_sum.iter_mut().zip(h) {
                    *acc = acc.zip_map(t, |a, b| a + b)?;
                }
                for k in 0..2 {
                    if let Some(gk) = &gens[k] {
                        for (acc, t) in gen_sum[k].iter_mut().zip(gk) {
                            *acc = acc.zip_map(t, |a, b| a + b)?;
                        }
                    }
                }
            }
            head_opt.step(server.head.set.tensors_mut(), &head_sum)?;
            for m in &private {
                let k = slot(*m);
                gen_opt[k].step(server.generators[k].set.tensors_mut(), &gen_sum[k])?;
            }
            steps += 1;
            batches += 1;
        }
        epoch_loss.push(total / batches as f64);
    }
    server.finetuned_epochs += cfg.stage2_epochs;
    Ok(Stage2Outcome {
        epochs: cfg.stage2_epochs,
        steps,
        epoch_loss,
    })
}

/// A prediction plus whether the head had been fine-tuned when it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    pub untrained: bool,
}

/// Noise used when predicting sample `index` of `client` at test time.
pub fn inference_noise(seed: u64, client: usize, index: usize) -> [NoiseSeed; 2] {
    Modality::PRIVATE.map(|m| NoiseSeed::derive(seed, &[TAG_NOISE_INFER, client as u64, index as u64, modality_code(m)]))
}

/// Predicts from text, using a real sequence where one is given and the
/// generator otherwise. No messages are recorded.
pub fn infer(server: &ServerState, text: &FeatureSequence, shared: [Option<&FeatureSequence>; 2], noise: [NoiseSeed; 2]) -> Result<Inference> {
    let s = ServerSample {
        client: 0,
        index: 0,
        text: text.clone(),
        shared: shared.map(|o| o.cloned()),
        label: None,
    };
    let f = forward_sample(server, &s, noise, false)?;
    Ok(Inference {
        prediction: server.head.prediction_from(&f.graph, &f.out),
        untrained: server.finetuned_epochs == 0,
    })
}

/// Score used for regression metrics: the clamped prediction, or for
/// classification `p(non-negative) - p(negative)`.
pub fn score_of(p: &Prediction, mode: TaskMode) -> f64 {
    match mode {
        TaskMode::Regression => p.score(),
        TaskMode::Classification { .. } => {
            p.output[Polarity::NonNegative.class_index()] - p.output[Polarity::Negative.class_index()]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub client: usize,
    pub index: usize,
    pub y: f64,
    pub y_hat: f64,
    pub gate_text: Vec<f64>,
    pub gate_audio: Vec<f64>,
    pub gate_visual: Vec<f64>,
    /// Fused `[v : t : a]` representation.
    pub fused: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsRecord,
    pub rows: Vec<EvalRow>,
    pub untrained: bool,
}

/// Evaluates on held-out clients. Each sends its text and any shareable
/// modality; private ones are generated from text.
pub fn evaluate(server: &ServerState, clients: &[ClientState], net: &mut Network, scenario: Scenario) -> Result<Evaluation> {
    let stage = Stage::Finetune;
    let mut jobs = Vec::new();
    for c in clients {
        let payload = c.data.texts().enumerate().map(|(i, t)| Payload::body(format!("text[{i}]"), t)).collect();
        net.send(MessageKind::TextUp, Party::Client(c.id()), Party::Server, stage, 0, payload);
        send_shared(c, net, scenario, stage);
        let scope = c.data.scope();
        for (i, s) in c.data.samples().iter().enumerate() {
            let shared = Modality::PRIVATE.map(|m| (!scenario.is_private(m)).then(|| scope.private(i, m).clone()));
            jobs.push((
                s.y(),
                ServerSample {
                    client: c.id(),
                    index: i,
                    text: s.text().clone(),
                    shared,
                    label: None,
                },
            ));
        }
    }
    let mode = server.head.mode;
    let rows: Vec<EvalRow> = jobs
        .par_iter()
        .map(|(y, s)| -> Result<EvalRow> {
            let noise = inference_noise(server.seed, s.client, s.index);
            let f = forward_sample(server, s, noise, false)?;
            let p = server.head.prediction_from(&f.graph, &f.out);
            Ok(EvalRow {
                client: s.client,
                index: s.index,
                y: *y,
                y_hat: score_of(&p, mode),
                gate_text: p.gate_text,
                gate_audio: p.gate_audio,
                gate_visual: p.gate_visual,
                fused: f.graph.value(f.out.fused).data().to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.y, r.y_hat)).collect();
    Ok(Evaluation {
        metrics: compute_metrics(&pairs)?,
        rows,
        untrained: server.finetuned_epochs == 0,
    })
}
