use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::datagen::Polarity;
use crate::error::{Error, Result};
use crate::genmodels::{mix_seed, DiscriminatorParams, FeatureSequence, GeneratorParams, Modality, NoiseSeed, Provenance};
use crate::losses::{
    combine_discriminator, combine_generator, loss_discriminator, loss_fake_contrastive, loss_generator,
    loss_real_contrastive, LossReport,
};
use crate::numkit::{AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};

use super::fedavg::fedavg;
use super::ledger::Network;
use super::message::{MessageKind, Party, Payload, Stage};
use super::server::{modality_code, ClientState, ServerState, TAG_NOISE_PRETRAIN, TAG_POSITIVE, TAG_SELECT};

/// Order in which selected clients run their local step. Aggregation is
/// always in ascending client id, so every order gives the same result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionOrder {
    Canonical,
    Reversed,
    Shuffled(u64),
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub selected: Vec<usize>,
    /// One row per selected client and private modality, in client order.
    pub reports: Vec<LossReport>,
}

/// Draws `s` distinct client ids for `round`, returned sorted.
pub fn select_clients(seed: u64, round: usize, available: &[usize], s: usize) -> Result<Vec<usize>> {
    if s == 0 {
        return Err(Error::config("clients_per_round must be positive"));
    }
    if s > available.len() {
        return Err(Error::config(format!(
            "clients_per_round {s} exceeds the {} available training clients",
            available.len()
        )));
    }
    let mut ids = available.to_vec();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[TAG_SELECT, round as u64]));
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, ids.len(), s)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Server-side generation for one client: the recorded graph, generator
/// leaves, and per-sample `[audio, visual]` outputs.
struct Generation {
    graph: Graph,
    gen_vars: [Vec<Var>; 2],
    outputs: Vec<[Var; 2]>,
}

fn generate_for_client(
    gens: &[GeneratorParams; 2],
    texts: &[FeatureSequence],
    lengths: [usize; 3],
    seed: u64,
    round: usize,
    client: usize,
) -> Result<Generation> {
    let mut g = Graph::new();
    let gen_vars = [gens[0].set.bind(&mut g, true)?, gens[1].set.bind(&mut g, true)?];
    let mut outputs = Vec::with_capacity(texts.len());
    for (i, text) in texts.iter().enumerate() {
        let cond = g.constant(text.body().clone());
        let mut pair = [cond; 2];
        for (k, gen) in gens.iter().enumerate() {
            let m = gen.modality;
            let noise = NoiseSeed::derive(
                seed,
                &[TAG_NOISE_PRETRAIN, round as u64, client as u64, i as u64, modality_code(m)],
            );
            let mu = g.constant(noise.sample(gen.feature_dim));
            pair[k] = gen.generate(&mut g, &gen_vars[k], cond, mu, lengths[k + 1])?;
        }
        outputs.push(pair);
    }
    Ok(Generation {
        graph: g,
        gen_vars,
        outputs,
    })
}

/// What a client returns after its local step.
struct ClientReport {
    /// Per sample, gradient of the generator objective w.r.t. each fake
    /// stacked sequence.
    grads: Vec<[Tensor; 2]>,
    discriminators: [ParamSet; 2],
    reports: [LossReport; 2],
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)?))
}

struct ModalityResult {
    grads: Vec<Tensor>,
    disc: ParamSet,
    report: LossReport,
}

fn client_modality(
    disc: &DiscriminatorParams,
    client: &ClientState,
    fakes: &[FeatureSequence],
    cfg: &TrainConfig,
    round: usize,
) -> Result<ModalityResult> {
    let m = disc.modality;
    let scope = client.data.scope();
    let samples = client.data.samples();
    let n = samples.len();
    let cls_row = |g: &Graph, h: Var| g.value(h).rows() - 1;

    // Discriminator step.
    let mut g = Graph::new();
    let pd = disc.set.bind(&mut g, true)?;
    let mut ld_terms = Vec::with_capacity(n);
    let mut real_cls = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let cond = g.constant(s.text().body().clone());
        let real = g.constant(scope.private(i, m).stacked());
        let fake = g.constant(fakes[i].stacked());
        let out_r = disc.forward(&mut g, &pd, real, cond)?;
        let out_f = disc.forward(&mut g, &pd, fake, cond)?;
        ld_terms.push(loss_discriminator(&mut g, out_r.scores, out_f.scores)?);
        let r = cls_row(&g, out_r.hidden);
        real_cls.push(g.row(out_r.hidden, r)?);
    }
    let l_d = mean_of(&mut g, &ld_terms)?.expect("non-empty client");

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        cfg.seed,
        &[TAG_POSITIVE, round as u64, client.id() as u64, modality_code(m)],
    ));
    let pol: Vec<Polarity> = samples.iter().map(|s| s.polarity()).collect();
    let mut real_terms = Vec::new();
    let mut real_skipped = 0;
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && pol[j] == pol[i]).collect();
        let negatives: Vec<Var> = (0..n).filter(|&j| pol[j] != pol[i]).map(|j| real_cls[j]).collect();
        if same.is_empty() || negatives.is_empty() {
            real_skipped += 1;
            continue;
        }
        let pos = same[rng.random_range(0..same.len())];
        if let Some(t) = loss_real_contrastive(&mut g, real_cls[i], real_cls[pos], &negatives, cfg.tau, cfg.contrastive)? {
            real_terms.push(t);
        }
    }
    let l_real = match mean_of(&mut g, &real_terms)? {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let total = combine_discriminator(&mut g, l_d, l_real, cfg.lambda_d)?;
    g.backward(total)?;
    let grads = disc.set.grads(&g, &pd);
    let mut local = disc.set.clone();
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr_discriminator), local.tensors());
    opt.step(local.tensors_mut(), &grads)?;
    let real_cls_values: Vec<Tensor> = real_cls.iter().map(|&v| g.value(v).clone()).collect();
    let l_d_value = g.value(l_d).item();
    let l_real_value = g.value(l_real).item();
    drop(g);

    // Generator objective, against the discriminator as received.
    let mut g = Graph::new();
    let pd = disc.set.bind(&mut g, false)?;
    let mut fake_vars = Vec::with_capacity(n);
    let mut lg_terms = Vec::with_capacity(n);
    let mut fake_cls = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let cond = g.constant(s.text().body().clone());
        let z = g.param(fakes[i].stacked());
        let out = disc.forward(&mut g, &pd, z, cond)?;
        lg_terms.push(loss_generator(&mut g, out.scores)?);
        let r = cls_row(&g, out.hidden);
        fake_cls.push(g.row(out.hidden, r)?);
        fake_vars.push(z);
    }
    let l_g = mean_of(&mut g, &lg_terms)?.expect("non-empty client");
    let real_consts: Vec<Var> = real_cls_values.into_iter().map(|t| g.constant(t)).collect();
    let mut fake_terms = Vec::new();
    let mut fake_skipped = 0;
    for i in 0..n {
        let others: Vec<Var> = (0..n).filter(|&j| j != i).map(|j| fake_cls[j]).collect();
        match loss_fake_contrastive(&mut g, fake_cls[i], real_consts[i], &others, cfg.tau, cfg.contrastive)? {
            Some(t) => fake_terms.push(t),
            None => fake_skipped += 1,
        }
    }
    let l_fake = match mean_of(&mut g, &fake_terms)? {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let total = combine_generator(&mut g, l_g, l_fake, cfg.lambda_g)?;
    g.backward(total)?;
    let grads: Vec<Tensor> = fake_vars.iter().map(|&z| g.grad_or_zeros(z)).collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("{m} generator gradient on client {}", client.id())));
    }
    Ok(ModalityResult {
        grads,
        disc: local,
        report: LossReport {
            round,
            client: client.id(),
            modality: m,
            l_g: g.value(l_g).item(),
            l_d: l_d_value,
            l_real: l_real_value,
            l_fake: g.value(l_fake).item(),
            real_skipped,
            fake_skipped,
        },
    })
}

fn client_step(
    discs: &[DiscriminatorParams; 2],
    client: &ClientState,
    fakes: &[[FeatureSequence; 2]],
    cfg: &TrainConfig,
    round: usize,
) -> Result<ClientReport> {
    if let Some(why) = &client.fault {
        return Err(Error::Runtime(format!("client {} failed: {why}", client.id())));
    }
    let mut results = Vec::with_capacity(2);
    for (k, disc) in discs.iter().enumerate() {
        let f: Vec<FeatureSequence> = fakes.iter().map(|p| p[k].clone()).collect();
        results.push(client_modality(disc, client, &f, cfg, round)?);
    }
    let v = results.pop().expect("visual");
    let a = results.pop().expect("audio");
    let grads = a.grads.into_iter().zip(v.grads).map(|(x, y)| [x, y]).collect();
    Ok(ClientReport {
        grads,
        discriminators: [a.disc, v.disc],
        reports: [a.report, v.report],
    })
}

fn run_clients(
    order: ExecutionOrder,
    selected: &[usize],
    work: impl Fn(usize) -> Result<ClientReport> + Sync,
) -> Result<BTreeMap<usize, ClientReport>> {
    let mut ids = selected.to_vec();
    let results: Vec<(usize, Result<ClientReport>)> = match order {
        ExecutionOrder::Parallel => ids.par_iter().map(|&c| (c, work(c))).collect(),
        _ => {
            match order {
                ExecutionOrder::Reversed => ids.reverse(),
                ExecutionOrder::Shuffled(s) => ids.shuffle(&mut ChaCha8Rng::seed_from_u64(s)),
                _ => {}
            }
            ids.iter().map(|&c| (c, work(c))).collect()
        }
    };
    let mut out = BTreeMap::new();
    let mut first_err: Option<(usize, Error)> = None;
    for (c, r) in results {
        match r {
            Ok(rep) => {
                out.insert(c, rep);
            }
            Err(e) => {
                if first_err.as_ref().is_none_or(|(fc, _)| c < *fc) {
                    first_err = Some((c, e));
                }
            }
        }
    }
    match first_err {
        Some((_, e)) => Err(e),
        None => Ok(out),
    }
}

/// One stage-one round: select clients, ship discriminators, generate fakes
/// from uploaded text, collect client reports, then update generators with
/// the averaged gradient and discriminators by FedAvg. A failing client
/// aborts the round before any server state changes.
pub fn run_cgan_round(
    server: &mut ServerState,
    clients: &[ClientState],
    net: &mut Network,
    cfg: &TrainConfig,
    order: ExecutionOrder,
) -> Result<RoundOutcome> {
    if server.discriminators_frozen() {
        return Err(Error::contract("stage-one round with frozen discriminators"));
    }
    let round = server.round;
    let by_id: BTreeMap<usize, &ClientState> = clients.iter().map(|c| (c.id(), c)).collect();
    if by_id.len() != clients.len() {
        return Err(Error::config("duplicate client ids in the training pool"));
    }
    let available: Vec<usize> = by_id.keys().copied().collect();
    let selected = select_clients(cfg.seed, round, &available, cfg.clients_per_round)?;
    let stage = Stage::Pretrain;

    for &c in &selected {
        let payload = vec![
            Payload::params("D_audio", Some(Modality::Audio), &server.discriminators[0].set),
            Payload::params("D_visual", Some(Modality::Visual), &server.discriminators[1].set),
        ];
        net.send(MessageKind::DiscDown, Party::Server, Party::Client(c), stage, round, payload);
    }
    let mut texts: BTreeMap<usize, Vec<FeatureSequence>> = BTreeMap::new();
    for &c in &selected {
        let t: Vec<FeatureSequence> = by_id[&c].data.texts().cloned().collect();
        let payload = t.iter().enumerate().map(|(i, s)| Payload::body(format!("text[{i}]"), s)).collect();
        net.send(MessageKind::TextUp, Party::Client(c), Party::Server, stage, round, payload);
        texts.insert(c, t);
    }

    let gens = &server.generators;
    let lengths = server.lengths;
    let seed = server.seed;
    let generations: Vec<Generation> = selected
        .par_iter()
        .map(|&c| generate_for_client(gens, &texts[&c], lengths, seed, round, c))
        .collect::<Result<_>>()?;

    let mut fakes: BTreeMap<usize, Vec<[FeatureSequence; 2]>> = BTreeMap::new();
    for (&c, gen) in selected.iter().zip(&generations) {
        let mut seqs = Vec::with_capacity(gen.outputs.len());
        for pair in &gen.outputs {
            seqs.push([
                FeatureSequence::from_generated(Modality::Audio, gen.graph.value(pair[0]))?,
                FeatureSequence::from_generated(Modality::Visual, gen.graph.value(pair[1]))?,
            ]);
        }
        let mut payload = Vec::new();
        if cfg.count_text_down {
            payload.extend(texts[&c].iter().enumerate().map(|(i, s)| Payload::body(format!("text[{i}]"), s)));
        }
        for (i, p) in seqs.iter().enumerate() {
            payload.push(Payload::sequence(format!("audio_fake[{i}]"), &p[0]));
            payload.push(Payload::sequence(format!("visual_fake[{i}]"), &p[1]));
        }
        net.send(MessageKind::FakeDown, Party::Server, Party::Client(c), stage, round, payload);
        fakes.insert(c, seqs);
    }

    let discs = &server.discriminators;
    let reports = run_clients(order, &selected, |c| client_step(discs, by_id[&c], &fakes[&c], cfg, round))?;

    for (&c, rep) in &reports {
        let [ra, rv] = &rep.reports;
        let mut payload = vec![Payload::scalars("losses", &[ra.l_g, ra.l_fake, rv.l_g, rv.l_fake])];
        for (i, gpair) in rep.grads.iter().enumerate() {
            payload.push(Payload::gradient(format!("grad_audio_fake[{i}]"), Modality::Audio, Provenance::Fake, &gpair[0]));
            payload.push(Payload::gradient(format!("grad_visual_fake[{i}]"), Modality::Visual, Provenance::Fake, &gpair[1]));
        }
        payload.push(Payload::params("D_audio", Some(Modality::Audio), &rep.discriminators[0]));
        payload.push(Payload::params("D_visual", Some(Modality::Visual), &rep.discriminators[1]));
        net.send(MessageKind::ClientReportUp, Party::Client(c), Party::Server, stage, round, payload);
    }

    // Generator update through the recorded generation graphs.
    let per_client: Vec<[Vec<Tensor>; 2]> = generations
        .into_par_iter()
        .zip(selected.par_iter())
        .map(|(mut gen, c)| -> Result<[Vec<Tensor>; 2]> {
            let g = &mut gen.graph;
            let mut terms = Vec::new();
            for (pair, gpair) in gen.outputs.iter().zip(&reports[c].grads) {
                for k in 0..2 {
                    let gc = g.constant(gpair[k].clone());
                    let prod = g.mul(pair[k], gc)?;
                    terms.push(g.sum(prod)?);
                }
            }
            let mut surrogate = terms[0];
            for &t in &terms[1..] {
                surrogate = g.add(surrogate, t)?;
            }
            g.backward(surrogate)?;
            Ok([
                gens[0].set.grads(g, &gen.gen_vars[0]),
                gens[1].set.grads(g, &gen.gen_vars[1]),
            ])
        })
        .collect::<Result<_>>()?;
    let s = selected.len() as f64;
    let mut avg: [Vec<Tensor>; 2] = [
        gens[0].set.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        gens[1].set.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
    ];
    for grads in &per_client {
        for k in 0..2 {
            for (acc, gt) in avg[k].iter_mut().zip(&grads[k]) {
                *acc = acc.zip_map(gt, |a, b| a + b)?;
            }
        }
    }
    for a in avg.iter_mut() {
        for t in a.iter_mut() {
            *t = t.map(|v| v / s);
        }
    }

    let d_a: Vec<&ParamSet> = reports.values().map(|r| &r.discriminators[0]).collect();
    let d_v: Vec<&ParamSet> = reports.values().map(|r| &r.discriminators[1]).collect();
    let new_da = fedavg(&d_a)?;
    let new_dv = fedavg(&d_v)?;

    for k in 0..2 {
        let gen = &mut server.generators[k];
        server.gen_opt[k].step(gen.set.tensors_mut(), &avg[k])?;
    }
    server.discriminators[0].set.assign(new_da.tensors().to_vec())?;
    server.discriminators[1].set.assign(new_dv.tensors().to_vec())?;
    server.round += 1;
    server.selections.push(selected.clone());

    let rows = reports.into_values().flat_map(|r| r.reports).collect();
    Ok(RoundOutcome {
        round,
        selected,
        reports: rows,
    })
}

/// Stage-one traffic check: the parameter total recorded in the ledger
/// against the closed form for the same selections.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommsSummary {
    pub rounds: usize,
    pub recorded: usize,
    pub closed_form: usize,
    pub consistent: bool,
    pub per_round: Vec<usize>,
}

/// Closed-form parameter count of one round for the given selection.
/// Per client: both discriminators down and back, text up (and down again
/// when counted), fake sequences down, their gradients up, four scalars.
pub fn closed_form_round(server: &ServerState, sample_counts: &[usize], count_text_down: bool) -> usize {
    let [dt, da, dv] = server.dims;
    let [lt, la, lv] = server.lengths;
    let disc = server.discriminator_params();
    let text = lt * dt * (1 + usize::from(count_text_down));
    let fake = (la + 1) * da + (lv + 1) * dv;
    sample_counts.iter().map(|&n| 2 * disc + n * (text + 2 * fake) + 4).sum()
}

pub fn comms_summary(net: &Network, server: &ServerState, clients: &[ClientState], count_text_down: bool) -> CommsSummary {
    let sizes: BTreeMap<usize, usize> = clients.iter().map(|c| (c.id(), c.data.len())).collect();
    let totals = net.ledger.round_totals();
    let per_round: Vec<usize> = totals.iter().map(|t| t.up + t.down).collect();
    let recorded = per_round.iter().sum();
    let closed_form = server
        .selections
        .iter()
        .map(|sel| {
            let counts: Vec<usize> = sel.iter().map(|c| sizes.get(c).copied().unwrap_or(0)).collect();
            closed_form_round(server, &counts, count_text_down)
        })
        .sum();
    CommsSummary {
        rounds: server.selections.len(),
        recorded,
        closed_form,
        consistent: recorded == closed_form,
        per_round,
    }
}
