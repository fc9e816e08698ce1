use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One AdamW update of `param` in place; `step` counts from 1.
///
/// Decay is decoupled: `p -= lr * wd * p` before the moment update.
pub fn adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    step: u64,
    lr: f64,
    decay: bool,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let one = T::one();
    let c1 = f(1.0 - cfg.beta1.powi(step as i32));
    let c2 = f(1.0 - cfg.beta2.powi(step as i32));
    let lr_t = f(lr);
    let shrink = f(1.0 - lr * cfg.weight_decay);
    let eps = f(cfg.eps);
    for i in 0..param.len() {
        if decay {
            param[i] = param[i] * shrink;
        }
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] = param[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a whole store. Only [`ParamKind::Weight`] tensors decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    state: Vec<Moments<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            state: store.iter().map(|(_, p)| Moments::zeros(p.value.numel())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters absent from `grads` are updated with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let decay = store.get(id).kind == ParamKind::Weight;
            let n = store.value(id).numel();
            let zeros;
            let grad = match by_id[id.index()] {
                Some(g) => {
                    if g.shape() != store.value(id).shape() {
                        return Err(Error::ShapeMismatch {
                            op: "adamw",
                            lhs: store.value(id).shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    g.data()
                }
                None => {
                    zeros = vec![T::zero(); n];
                    &zeros
                }
            };
            let state = &mut self.state[id.index()];
            adamw_step(
                store.value_mut(id).data_mut(),
                grad,
                state,
                self.step,
                lr,
                decay,
                &self.config,
            )?;
        }
        Ok(())
    }
}

/// Cosine decay from `initial` at epoch 0 towards `min` at epoch `epochs`.
pub fn cosine_lr(initial: f64, min: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return initial;
    }
    let t = epoch as f64 / epochs as f64;
    min + 0.5 * (initial - min) * (1.0 + (std::f64::consts::PI * t).cos())
}
