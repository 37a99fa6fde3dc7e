//! Adam with bias correction and the warmup-plus-cosine learning rate.

use crate::error::{NdpError, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Step counter plus first/second moment accumulators, one per parameter
/// scalar, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub hyper: AdamHyper,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], hyper: AdamHyper) -> Self {
        AdamState {
            step: 0,
            hyper,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }
}

/// One bias-corrected Adam update; increments the step counter.
pub fn adam_update<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NdpError::ShapeMismatch {
            op: "adam_update",
            detail: format!(
                "{} params vs {} grads vs {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    if lr <= 0.0 {
        return Err(NdpError::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    state.step += 1;
    let t = state.step;
    let h = state.hyper;
    let b1 = T::from_f64(h.beta1);
    let b2 = T::from_f64(h.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - h.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - h.beta2.powi(t as i32));
    let eps = T::from_f64(h.epsilon);
    let lr_t = T::from_f64(lr);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(NdpError::ShapeMismatch {
                op: "adam_update",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let m_hat = md[i] / corr1;
            let v_hat = vd[i] / corr2;
            pd[i] = pd[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `lr_max` followed by cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_max: f64,
}

/// Learning rate at a given step; clamps to 0 beyond `total_steps`.
pub fn lr_at(step: u64, cfg: &LrSchedule) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
