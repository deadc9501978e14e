//! Gradient-mask-aware SGD and the finite-difference gradient oracle.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Per-parameter boolean masks, aligned with a parameter list. `None` for a
/// slot means "no mask": that parameter updates everywhere.
#[derive(Clone, Debug, Default)]
pub struct ParamMask {
    pub slots: Vec<Option<Vec<bool>>>,
}

impl ParamMask {
    pub fn none(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn all_false(params: &[Tensor]) -> Self {
        Self { slots: params.iter().map(|p| Some(vec![false; p.len()])).collect() }
    }

    pub fn all_true(params: &[Tensor]) -> Self {
        Self { slots: params.iter().map(|p| Some(vec![true; p.len()])).collect() }
    }

    fn check(&self, params: &[Tensor]) -> Result<()> {
        if self.slots.len() != params.len() {
            return Err(Error::shape("sgd_step", "mask slot count != parameter count"));
        }
        for (i, (m, p)) in self.slots.iter().zip(params).enumerate() {
            if let Some(m) = m {
                if m.len() != p.len() {
                    return Err(Error::shape(
                        "sgd_step",
                        format!("mask {} has {} entries, param has {}", i, m.len(), p.len()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Plain SGD; momentum is available behind a configuration knob and is off
/// by default. Masked-out entries stay bitwise untouched, including their
/// momentum state.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: None }
    }

    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        mask: Option<&ParamMask>,
    ) -> Result<()> {
        let (lr, momentum) = (self.lr, self.momentum);
        let vel = if momentum == 0.0 {
            None
        } else {
            if self.velocity.is_none() {
                self.velocity = Some(params.iter().map(|p| vec![0.0; p.len()]).collect());
            }
            self.velocity.as_mut()
        };
        sgd_step_impl(params, grads, lr, mask, vel, momentum)
    }
}

/// One masked SGD step: where the mask is true (or absent) `p -= lr * g`;
/// where it is false the entry is left bitwise unchanged.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    mask: Option<&ParamMask>,
) -> Result<()> {
    sgd_step_impl(params, grads, lr, mask, None, 0.0)
}

fn sgd_step_impl(
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    mask: Option<&ParamMask>,
    mut velocity: Option<&mut Vec<Vec<f64>>>,
    momentum: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("lr must be > 0, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", "parameter/gradient count mismatch"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    if let Some(m) = mask {
        m.check(params)?;
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let slot = mask.and_then(|m| m.slots[i].as_deref());
        // Skip the copy-on-write entirely when nothing in this slot updates.
        if let Some(s) = slot {
            if s.iter().all(|&b| !b) {
                continue;
            }
        }
        let data = p.data_mut();
        let vel = velocity.as_deref_mut().map(|v| &mut v[i]);
        match (slot, vel) {
            (None, None) => {
                for (pv, gv) in data.iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
            (None, Some(vel)) => {
                for ((pv, gv), vv) in data.iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                    *vv = momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
            (Some(s), None) => {
                for ((pv, gv), &keep) in data.iter_mut().zip(g.data()).zip(s) {
                    if keep {
                        *pv -= lr * gv;
                    }
                }
            }
            (Some(s), Some(vel)) => {
                for (((pv, gv), vv), &keep) in
                    data.iter_mut().zip(g.data()).zip(vel.iter_mut()).zip(s)
                {
                    if keep {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Maximum relative error between an analytic gradient and central finite
/// differences, over up to `samples` coordinates drawn without replacement
/// from the full parameter set.
///
/// Relative error per coordinate is
/// `|analytic - central| / max(1e-12, |central|)`.
pub fn finite_diff_check(
    params: &[Tensor],
    analytic: &[Tensor],
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("h must be > 0, got {h}")));
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if samples >= total {
        for (pi, p) in params.iter().enumerate() {
            coords.extend((0..p.len()).map(|j| (pi, j)));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        while coords.len() < samples {
            let mut flat = rng.random_range(0..total);
            let mut pi = 0;
            while flat >= params[pi].len() {
                flat -= params[pi].len();
                pi += 1;
            }
            if seen.insert((pi, flat)) {
                coords.push((pi, flat));
            }
        }
    }

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, j) in coords {
        let orig = work[pi].data()[j];
        work[pi].data_mut()[j] = orig + h;
        let f_plus = f(&work)?;
        work[pi].data_mut()[j] = orig - h;
        let f_minus = f(&work)?;
        work[pi].data_mut()[j] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        let central = (f_plus - f_minus) / (2.0 * h);
        let err = (analytic[pi].data()[j] - central).abs() / central.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
