use crate::error::{Error, Result};
use crate::numkit::{ParamSet, Tensor};

/// Elementwise arithmetic mean of congruent parameter sets, accumulated as
/// a running mean in the order given. Averaging copies of one set returns
/// it bit for bit.
pub fn fedavg(sets: &[&ParamSet]) -> Result<ParamSet> {
    let Some(first) = sets.first() else {
        return Err(Error::contract("fedavg over an empty list"));
    };
    for (k, s) in sets.iter().enumerate().skip(1) {
        if s.len() != first.len() {
            return Err(Error::Aggregation {
                index: s.len().min(first.len()),
                msg: format!("set {k} has {} tensors, set 0 has {}", s.len(), first.len()),
            });
        }
        for (i, (a, b)) in first.tensors().iter().zip(s.tensors()).enumerate() {
            if !a.same_shape(b) {
                return Err(Error::Aggregation {
                    index: i,
                    msg: format!("set {k}: {:?} vs {:?}", b.shape(), a.shape()),
                });
            }
        }
    }
    let mut out = (*first).clone();
    let mut means = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let mut acc = sets[0].get(i).data().to_vec();
        for (k, s) in sets.iter().enumerate().skip(1) {
            let w = 1.0 / (k + 1) as f64;
            for (a, v) in acc.iter_mut().zip(s.get(i).data()) {
                *a += (v - *a) * w;
            }
        }
        means.push(Tensor::new(first.get(i).shape().to_vec(), acc)?);
    }
    out.assign(means)?;
    Ok(out)
}
