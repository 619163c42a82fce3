use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numkit::gradcheck::check_gradients;
use crate::numkit::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

const SHAPE: StackShape = StackShape {
    width: 4,
    layers: 1,
    heads: 2,
};

fn text(r: &mut ChaCha8Rng) -> FeatureSequence {
    FeatureSequence::real(Modality::Text, random(r, 3, 5)).unwrap()
}

#[test]
fn four_steps_give_five_rows() {
    let mut r = rng(1);
    let g = GeneratorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    let z = g.generate_sequence(&text(&mut r), NoiseSeed(9), 4).unwrap();
    assert_eq!(z.len(), 4);
    assert_eq!(z.stacked().shape(), &[5, 3]);
    assert_eq!(z.provenance(), Provenance::Fake);
    assert_eq!(z.modality(), Modality::Audio);
}

#[test]
fn generation_is_deterministic() {
    let mut r = rng(2);
    let g = GeneratorParams::new(Modality::Visual, 3, 5, SHAPE, &mut r).unwrap();
    let t = text(&mut r);
    let a = g.generate_sequence(&t, NoiseSeed(4), 3).unwrap();
    let b = g.generate_sequence(&t, NoiseSeed(4), 3).unwrap();
    assert_eq!(a, b);
    let c = g.generate_sequence(&t, NoiseSeed(5), 3).unwrap();
    assert_ne!(a, c);
}

#[test]
fn each_step_replays_from_its_prefix() {
    let mut r = rng(3);
    let g = GeneratorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    let t = text(&mut r);
    let noise = NoiseSeed(11);
    let z = g.generate_sequence(&t, noise, 4).unwrap().stacked();
    let mut prefix = noise.sample(3);
    for i in 0..z.rows() {
        let step = g.replay_step(&t, &prefix).unwrap();
        assert_eq!(step.data(), z.row_slice(i));
        let next = z.slice_rows(i, i + 1).unwrap();
        prefix = Tensor::concat_rows(&[&prefix, &next]).unwrap();
    }
}

#[test]
fn zero_length_and_wrong_condition_rejected() {
    let mut r = rng(4);
    let g = GeneratorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    let t = text(&mut r);
    assert!(matches!(g.generate_sequence(&t, NoiseSeed(0), 0), Err(crate::Error::Contract(_))));
    let audio = FeatureSequence::real(Modality::Audio, random(&mut r, 3, 5)).unwrap();
    assert!(matches!(g.generate_sequence(&audio, NoiseSeed(0), 2), Err(crate::Error::Contract(_))));
    let narrow = FeatureSequence::real(Modality::Text, random(&mut r, 3, 4)).unwrap();
    assert!(matches!(g.generate_sequence(&narrow, NoiseSeed(0), 2), Err(crate::Error::Dimension(_))));
}

fn zero_classifier(d: &mut DiscriminatorParams) {
    let c = d.classifier().clone();
    let mut ts = d.set.tensors().to_vec();
    ts[c.w] = Tensor::zeros(ts[c.w].shape());
    ts[c.b] = Tensor::zeros(ts[c.b].shape());
    d.set.assign(ts).unwrap();
}

#[test]
fn discriminator_scores_every_position() {
    let mut r = rng(5);
    let d = DiscriminatorParams::new(Modality::Visual, 3, 5, SHAPE, &mut r).unwrap();
    let seq = FeatureSequence::real(Modality::Visual, random(&mut r, 6, 3)).unwrap();
    let s = d.discriminate(&seq, &text(&mut r)).unwrap();
    assert_eq!(s.len(), 7);
    assert!(s.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn zero_classifier_scores_one_half() {
    let mut r = rng(6);
    let mut d = DiscriminatorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    zero_classifier(&mut d);
    let seq = FeatureSequence::real(Modality::Audio, random(&mut r, 4, 3)).unwrap();
    for p in d.discriminate(&seq, &text(&mut r)).unwrap() {
        assert_eq!(p, 0.5);
    }
}

#[test]
fn later_positions_do_not_affect_earlier_scores() {
    let mut r = rng(7);
    let d = DiscriminatorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    let t = text(&mut r);
    let body = random(&mut r, 5, 3);
    let base = d.discriminate(&FeatureSequence::real(Modality::Audio, body.clone()).unwrap(), &t).unwrap();
    for k in 1..5 {
        let mut pert = body.clone();
        for c in 0..3 {
            pert.data_mut()[k * 3 + c] += 0.7;
        }
        let cls = base.len() - 1;
        let s = d.discriminate(&FeatureSequence::real(Modality::Audio, pert).unwrap(), &t).unwrap();
        for i in 0..k {
            assert_eq!(s[i], base[i], "position {i} moved when row {k} changed");
        }
        assert_ne!(s[k], base[k]);
        assert_ne!(s[cls], base[cls]);
    }
}

#[test]
fn discriminator_width_mismatch() {
    let mut r = rng(8);
    let d = DiscriminatorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    let seq = FeatureSequence::real(Modality::Audio, random(&mut r, 4, 2)).unwrap();
    assert!(matches!(d.discriminate(&seq, &text(&mut r)), Err(crate::Error::Dimension(_))));
}

#[test]
fn generator_into_discriminator_gradients() {
    let mut r = rng(9);
    let g = GeneratorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    let d = DiscriminatorParams::new(Modality::Audio, 3, 5, SHAPE, &mut r).unwrap();
    let cond = random(&mut r, 2, 5);
    let mu = random(&mut r, 1, 3);
    let err = check_gradients(&[cond, mu], 1e-5, |gr: &mut Graph, v| {
        let pg = g.set.bind(gr, false)?;
        let pd = d.set.bind(gr, false)?;
        let z = g.generate(gr, &pg, v[0], v[1], 3)?;
        let out = d.forward(gr, &pd, z, v[0])?;
        crate::losses::loss_generator(gr, out.scores)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn generator_parameter_gradients() {
    let mut r = rng(10);
    let g = GeneratorParams::new(Modality::Visual, 2, 4, SHAPE, &mut r).unwrap();
    let cond = random(&mut r, 2, 4);
    let mu = random(&mut r, 1, 2);
    let err = check_gradients(g.set.tensors(), 1e-5, |gr: &mut Graph, p| {
        let c = gr.constant(cond.clone());
        let m = gr.constant(mu.clone());
        let z = g.generate(gr, p, c, m, 2)?;
        let sq = gr.mul(z, z)?;
        gr.mean(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

fn head(mode: TaskMode, seed: u64) -> MsaHeadParams {
    let enc = EncoderShape { layers: 1, heads: 1 };
    MsaHeadParams::new([4, 3, 5], enc, enc, mode, &mut rng(seed)).unwrap()
}

fn inputs(seed: u64) -> (FeatureSequence, FeatureSequence, FeatureSequence) {
    let mut r = rng(seed);
    (
        FeatureSequence::real(Modality::Text, random(&mut r, 3, 4)).unwrap(),
        FeatureSequence::real(Modality::Audio, random(&mut r, 3, 3)).unwrap(),
        FeatureSequence::real(Modality::Visual, random(&mut r, 3, 5)).unwrap(),
    )
}

fn set_named(h: &mut MsaHeadParams, f: impl Fn(&str, &Tensor) -> Option<Tensor>) {
    let ts = h
        .set
        .names()
        .iter()
        .zip(h.set.tensors())
        .map(|(n, t)| f(n, t).unwrap_or_else(|| t.clone()))
        .collect();
    h.set.assign(ts).unwrap();
}

#[test]
fn saturated_gates_pass_text_through_fusion() {
    let mut h = head(TaskMode::Regression, 11);
    set_named(&mut h, |n, t| {
        if n.starts_with("gate_") && n.ends_with(".b") {
            Some(Tensor::filled(t.shape(), 60.0))
        } else if n.starts_with("gate_") && n.ends_with(".w") {
            Some(Tensor::zeros(t.shape()))
        } else {
            None
        }
    });
    let (t, a, v) = inputs(12);
    let mut g = Graph::inference();
    let p = h.set.bind(&mut g, false).unwrap();
    let tc = g.constant(t.cls().clone());
    let av = g.constant(a.stacked());
    let vv = g.constant(v.stacked());
    let out = h.forward(&mut g, &p, tc, Some(av), Some(vv)).unwrap();
    let fused = g.value(out.fused);
    assert_eq!(fused.shape(), &[1, 5 + 4 + 3]);
    assert_eq!(&fused.data()[5..9], t.cls().data());
    assert!(g.value(out.gate_audio).data().iter().all(|&x| x == 1.0));
}

#[test]
fn predictor_bias_hand_case_and_clamp() {
    let mut h = head(TaskMode::Regression, 13);
    let (t, a, v) = inputs(14);
    for (bias, want) in [(0.7, 0.7), (5.0, 3.0), (-4.0, -3.0)] {
        set_named(&mut h, |n, tn| match n {
            "predictor.w" => Some(Tensor::zeros(tn.shape())),
            "predictor.b" => Some(Tensor::filled(tn.shape(), bias)),
            _ => None,
        });
        assert_eq!(h.predict(&t, &a, &v).unwrap().score(), want);
    }
}

#[test]
fn class_probabilities_keep_logit_order() {
    let h = head(TaskMode::Classification { classes: 2 }, 15);
    for seed in 0..20 {
        let (t, a, v) = inputs(100 + seed);
        let mut g = Graph::inference();
        let p = h.set.bind(&mut g, false).unwrap();
        let tc = g.constant(t.cls().clone());
        let av = g.constant(a.stacked());
        let vv = g.constant(v.stacked());
        let out = h.forward(&mut g, &p, tc, Some(av), Some(vv)).unwrap();
        let logits = g.value(out.raw).data().to_vec();
        let pred = h.prediction_from(&g, &out);
        assert!((pred.output.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(logits[0] > logits[1], pred.output[0] > pred.output[1]);
    }
}

#[test]
fn head_requires_both_private_inputs() {
    let h = head(TaskMode::Regression, 16);
    let (t, a, _) = inputs(17);
    let mut g = Graph::inference();
    let p = h.set.bind(&mut g, false).unwrap();
    let tc = g.constant(t.cls().clone());
    let av = g.constant(a.stacked());
    assert!(matches!(h.forward(&mut g, &p, tc, Some(av), None), Err(crate::Error::Contract(_))));
}

#[test]
fn head_gradients_match_finite_differences() {
    let h = head(TaskMode::Regression, 18);
    let (t, a, v) = inputs(19);
    let err = check_gradients(h.set.tensors(), 1e-5, |g: &mut Graph, p| {
        let tc = g.constant(t.cls().clone());
        let av = g.constant(a.stacked());
        let vv = g.constant(v.stacked());
        let out = h.forward(g, p, tc, Some(av), Some(vv))?;
        let sq = g.mul(out.raw, out.raw)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn params_survive_the_codec() {
    let g = GeneratorParams::new(Modality::Audio, 3, 5, SHAPE, &mut rng(20)).unwrap();
    let bytes = encode_params(&g.set);
    let (back, used) = decode_params(&bytes).unwrap();
    assert_eq!(used, bytes.len());
    assert_eq!(back.names(), g.set.names());
    assert_eq!(back.tensors(), g.set.tensors());
}

