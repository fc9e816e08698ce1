//! Central finite-difference checks of tape gradients (64-bit only).
//!
//! Relative error per entry is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::param::{Graph, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Entries sampled per parameter tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub path: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Checks every parameter of `store` that the loss depends on.
pub fn check_store<F>(store: &ParamStore<f64>, loss_fn: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<(ParamId, Tensor<f64>)> = {
        let mut g = Graph::new(store, true);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?;
        g.param_grads()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s, false);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scratch = store.clone();
    let mut params = Vec::new();
    let mut overall: f64 = 0.0;
    for (id, grad) in analytic {
        let n = grad.numel();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = (0.0f64, 0.0, 0.0);
        for &e in &entries {
            let orig = store.value(id).data()[e];
            scratch.value_mut(id).data_mut()[e] = orig + cfg.step;
            let plus = eval(&scratch)?;
            scratch.value_mut(id).data_mut()[e] = orig - cfg.step;
            let minus = eval(&scratch)?;
            scratch.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel >= worst.0 {
                worst = (rel, a, numeric);
            }
        }
        overall = overall.max(worst.0);
        params.push(ParamCheck {
            path: store.get(id).path.clone(),
            checked: entries.len(),
            max_rel_err: worst.0,
            worst_analytic: worst.1,
            worst_numeric: worst.2,
        });
    }
    Ok(GradcheckReport {
        params,
        max_rel_err: overall,
        tolerance: cfg.tolerance,
    })
}

/// Checks a function of plain input tensors.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut crate::tensor::Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), ParamKind::Weight, t.clone()))
        .collect::<Result<_>>()?;
    check_store(
        &store,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            f(&mut g.tape, &vars)
        },
        cfg,
    )
}
