//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments, one buffer per trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl OptimizerState {
    /// Zero state for tensors of the given lengths.
    pub fn new<I: IntoIterator<Item = usize>>(sizes: I) -> Self {
        let first_moment: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            second_moment: first_moment.clone(),
            first_moment,
            step: 0,
        }
    }
}

/// One AdamW update of every tensor in `params` at learning rate `lr`.
///
/// Weight decay is applied to the parameter directly
/// (`p <- p - lr * wd * p`), separately from the moment-based step.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape("adamw_step", "tensor counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(Error::shape("adamw_step", format!("tensor {i} length differs")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - lr * opt.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
