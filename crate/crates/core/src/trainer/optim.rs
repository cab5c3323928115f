use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `initial · decay^epoch`
pub fn lr_schedule(epoch: usize, initial: f64, decay: f64) -> f64 {
    initial * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Rescales the full gradient when its norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub settings: AdamSettings,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr: f64, settings: AdamSettings) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            settings,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Consistency {
            name: "<all>".into(),
            detail: format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Consistency {
                name: format!("parameter {i}"),
                detail: format!("parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            });
        }
    }
    let s = &state.settings;
    let scale = match s.grad_clip {
        Some(limit) => {
            let norm = grads
                .iter()
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - s.beta1.powi(t), 1.0 - s.beta2.powi(t));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi * scale;
            *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
            *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + s.eps);
            *x -= state.lr * (update + s.weight_decay * *x);
        }
    }
    Ok(())
}
