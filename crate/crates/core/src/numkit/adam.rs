use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        AdamState { config, step, m, v }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam over {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.m[i]) {
                return Err(Error::dim(format!(
                    "adam slot {}: param {:?}, grad {:?}, moment {:?}",
                    i,
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![Tensor::row(&[1.0, -2.0])];
        let mut st = AdamState::new(AdamConfig::with_lr(0.0), &p);
        st.step(&mut p, &[Tensor::row(&[0.3, 0.7])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_grad_first_step_leaves_params() {
        let mut p = vec![Tensor::row(&[1.0, -2.0])];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p);
        st.step(&mut p, &[Tensor::row(&[0.0, 0.0])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_hand_value() {
        // m = 0.1, v = 0.001; bias correction gives mhat = vhat = 1.
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p);
        st.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = vec![Tensor::row(&[1.0, 2.0])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let err = st.step(&mut p, &[Tensor::row(&[1.0])]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn deterministic_bitwise() {
        let init = vec![Tensor::row(&[0.3, -0.1, 2.0])];
        let grads = [Tensor::row(&[0.01, -5.0, 1e-3])];
        let run = || {
            let mut p = init.clone();
            let mut st = AdamState::new(AdamConfig::with_lr(0.01), &p);
            for _ in 0..5 {
                st.step(&mut p, &grads).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
