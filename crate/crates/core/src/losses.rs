//! Adversarial, contrastive and task objectives, built on the autodiff graph.
//!
//! Sign conventions follow the training recipe: the generator minimizes the
//! mean of `log(1 - D(fake))` and the discriminator minimizes the mean of
//! `log(1 - D(real)) + log(D(fake))`. Probabilities are floored at
//! [`PROB_FLOOR`] before every log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodels::Modality;
use crate::numkit::{Graph, Var};

pub const PROB_FLOOR: f64 = 1e-7;

fn log_floored(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.clamp(x, PROB_FLOOR, f64::MAX)?;
    g.log(c)
}

fn one_minus(g: &mut Graph, x: Var) -> Result<Var> {
    let neg = g.scale(x, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Mean over positions of `log(1 - score)`.
pub fn loss_generator(g: &mut Graph, fake_scores: Var) -> Result<Var> {
    if g.value(fake_scores).numel() == 0 {
        return Err(Error::contract("generator loss over zero positions"));
    }
    let om = one_minus(g, fake_scores)?;
    let l = log_floored(g, om)?;
    g.mean(l)
}

/// Mean over positions of `log(1 - real_i) + log(fake_i)`.
pub fn loss_discriminator(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let (nr, nf) = (g.value(real_scores).numel(), g.value(fake_scores).numel());
    if nr != nf || nr == 0 {
        return Err(Error::contract(format!(
            "discriminator loss over {nr} real and {nf} fake positions"
        )));
    }
    let om = one_minus(g, real_scores)?;
    let lr = log_floored(g, om)?;
    let lf = log_floored(g, fake_scores)?;
    let s = g.add(lr, lf)?;
    g.mean(s)
}

/// Denominator of the contrastive losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveForm {
    /// Sum over the contrast set only; the positive pair is not included.
    #[default]
    ContrastOnly,
    /// NT-Xent style: the positive pair is added to the denominator.
    WithPositive,
}

/// `-log( exp(sim(a, p)/tau) / sum_k exp(sim(a, c_k)/tau) )` with cosine
/// similarity. `None` signals an empty contrast set (the term is skipped).
fn info_nce(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    contrast: &[Var],
    tau: f64,
    form: ContrastiveForm,
) -> Result<Option<Var>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if contrast.is_empty() {
        return Ok(None);
    }
    let pos = g.cosine(anchor, positive)?;
    let pos = g.scale(pos, 1.0 / tau)?;
    let mut sims = Vec::with_capacity(contrast.len() + 1);
    if form == ContrastiveForm::WithPositive {
        sims.push(pos);
    }
    for &c in contrast {
        let s = g.cosine(anchor, c)?;
        sims.push(g.scale(s, 1.0 / tau)?);
    }
    let row = g.concat_cols(&sims)?;
    let lse = g.log_sum_exp(row)?;
    Ok(Some(g.sub(lse, pos)?))
}

/// Real-real term: pulls an anchor toward a same-polarity positive and away
/// from the opposite-polarity negatives held by the same client.
pub fn loss_real_contrastive(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    tau: f64,
    form: ContrastiveForm,
) -> Result<Option<Var>> {
    info_nce(g, anchor, positive, negatives, tau, form)
}

/// Real-fake term: pulls a fake `<CLS>` toward its matching real `<CLS>`
/// against the other fakes on the same client.
pub fn loss_fake_contrastive(
    g: &mut Graph,
    fake: Var,
    matching_real: Var,
    other_fakes: &[Var],
    tau: f64,
    form: ContrastiveForm,
) -> Result<Option<Var>> {
    info_nce(g, fake, matching_real, other_fakes, tau, form)
}

pub enum TaskTargets<'a> {
    /// Continuous labels, one per prediction row.
    Scores(&'a [f64]),
    /// Class indices, one per probability row.
    Classes(&'a [usize]),
}

/// Mean squared error for scores; mean negative log-likelihood for classes
/// (predictions must then be probability rows).
pub fn loss_task(g: &mut Graph, preds: Var, targets: TaskTargets<'_>) -> Result<Var> {
    let pv = g.value(preds);
    let n = pv.rows();
    if n == 0 || pv.numel() == 0 {
        return Err(Error::contract("task loss over an empty batch"));
    }
    match targets {
        TaskTargets::Scores(y) => {
            if y.len() != n || pv.cols() != 1 {
                return Err(Error::dim(format!(
                    "regression predictions {:?} for {} labels",
                    pv.shape(),
                    y.len()
                )));
            }
            let t = g.constant(crate::numkit::Tensor::matrix(n, 1, y.to_vec())?);
            let d = g.sub(preds, t)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        }
        TaskTargets::Classes(labels) => {
            if labels.len() != n {
                return Err(Error::dim(format!(
                    "{} probability rows for {} labels",
                    n,
                    labels.len()
                )));
            }
            for i in 0..n {
                let s: f64 = pv.row_slice(i).iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::contract(format!(
                        "probability row {i} sums to {s}"
                    )));
                }
            }
            let idx: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &c)| (i, c)).collect();
            let picked = g.gather(preds, &idx)?;
            let logp = log_floored(g, picked)?;
            let m = g.mean(logp)?;
            g.scale(m, -1.0)
        }
    }
}

/// `(1 - lambda) * main + lambda * aux`.
pub fn combine(g: &mut Graph, main: Var, aux: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    let a = g.scale(main, 1.0 - lambda)?;
    let b = g.scale(aux, lambda)?;
    g.add(a, b)
}

/// `(1 - lambda_D) * L_D + lambda_D * L_real`.
pub fn combine_discriminator(g: &mut Graph, l_d: Var, l_real: Var, lambda_d: f64) -> Result<Var> {
    combine(g, l_d, l_real, lambda_d)
}

/// `(1 - lambda_G) * L_G + lambda_G * L_fake`.
pub fn combine_generator(g: &mut Graph, l_g: Var, l_fake: Var, lambda_g: f64) -> Result<Var> {
    combine(g, l_g, l_fake, lambda_g)
}

/// Per-(round, client, modality) stage-one losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub round: usize,
    pub client: usize,
    pub modality: Modality,
    pub l_g: f64,
    pub l_d: f64,
    pub l_real: f64,
    pub l_fake: f64,
    /// Anchors whose real-real term was skipped for lack of negatives.
    pub real_skipped: usize,
    /// Samples whose real-fake term was skipped for lack of other fakes.
    pub fake_skipped: usize,
}
