//! Closed-form block costs and counters over built models.
//!
//! FLOPs are multiply-accumulates: a `[m, k] x [k, n]` product costs `m k n`
//! and a convolution costs `k^2 C_in/groups C_out H_out W_out`. Positional
//! generation is one op per generated matrix element per feature (GQPE: 5,
//! lookup tables: 1). Normalization, activation, softmax, bias and gating
//! products are tallied separately as `elementwise` and never enter `flops`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gating::{Combine, GatingKind, GatingUnit};
use crate::model::{Model, Variant};
use crate::tensor::Real;

/// Parameter and FLOP totals of one sub-cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.params += o.params;
        self.flops += o.flops;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BlockCost {
    pub params: u64,
    pub flops: u64,
    pub breakdown: BTreeMap<String, Cost>,
}

impl BlockCost {
    fn from_parts(parts: &[(&str, Cost)]) -> Self {
        let mut c = BlockCost::default();
        for (label, cost) in parts {
            c.add(label, *cost);
        }
        c
    }

    pub fn add(&mut self, label: &str, cost: Cost) {
        self.params += cost.params;
        self.flops += cost.flops;
        *self.breakdown.entry(label.to_string()).or_default() += cost;
    }
}

fn check_dims(d: u64, gamma: u64, n: u64, s: u64) -> Result<u64> {
    let root = (n as f64).sqrt().round() as u64;
    if d == 0 || gamma == 0 || n == 0 || s == 0 || root * root != n {
        return Err(Error::config(format!(
            "block dimensions must be positive with square N (d={d}, gamma={gamma}, N={n}, s={s})"
        )));
    }
    Ok(root)
}

fn fc_params(d: u64, gamma: u64) -> u64 {
    3 * gamma * d * d / 2 + (gamma + 1) * d
}

/// Block parameters excluding LayerNorm affines.
///
/// LRPE-M is the SGU count plus the single-table positional term of GLRPE;
/// LRPE is GLRPE with one group.
pub fn analytic_params(kind: GatingKind, d: usize, gamma: usize, n: usize, s: usize) -> Result<BlockCost> {
    let (d, g, n, s) = (d as u64, gamma as u64, n as u64, s as u64);
    let root = check_dims(d, g, n, s)?;
    let fc = Cost {
        params: fc_params(d, g),
        flops: 0,
    };
    let p = |params| Cost { params, flops: 0 };
    let table = |s: u64| 4 * s * n + 4 * s - 4 * s * root;
    Ok(match kind {
        GatingKind::Sgu => BlockCost::from_parts(&[("channel_fc", fc), ("token_mixing", p(n * n + n))]),
        GatingKind::LrpeM => BlockCost::from_parts(&[
            ("channel_fc", fc),
            ("token_mixing", p(n * n + n)),
            ("positional", p(table(1))),
        ]),
        GatingKind::Lrpe | GatingKind::Glrpe => {
            let s = if kind == GatingKind::Lrpe { 1 } else { s };
            BlockCost::from_parts(&[("channel_fc", fc), ("token_mixing", p(n)), ("positional", p(table(s)))])
        }
        GatingKind::Ggqpe => {
            BlockCost::from_parts(&[("channel_fc", fc), ("token_mixing", p(n)), ("positional", p(6 * s))])
        }
    })
}

/// Block MACs for one window of `N` tokens.
pub fn analytic_flops(kind: GatingKind, d: usize, gamma: usize, n: usize, s: usize) -> Result<BlockCost> {
    let (d, g, n, s) = (d as u64, gamma as u64, n as u64, s as u64);
    check_dims(d, g, n, s)?;
    let f = |flops| Cost { params: 0, flops };
    let fc = f(3 * g * d * d * n / 2);
    let mix = f(g * d * n * n / 2);
    let positional = match kind {
        GatingKind::Sgu => 0,
        GatingKind::LrpeM | GatingKind::Lrpe => n * n,
        GatingKind::Glrpe => s * n * n,
        GatingKind::Ggqpe => 5 * s * n * n,
    };
    Ok(BlockCost::from_parts(&[
        ("channel_fc", fc),
        ("token_mixing", mix),
        ("positional", f(positional)),
    ]))
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub total: u64,
    pub per_path: Vec<(String, u64)>,
    pub stem: u64,
    pub ape: u64,
    pub stages: Vec<u64>,
    pub merges: u64,
    pub head: u64,
}

pub fn count_params<T: Real>(model: &Model<T>) -> ParamReport {
    let store = model.store();
    let per_path: Vec<(String, u64)> = store
        .iter()
        .map(|(_, p)| (p.path.clone(), p.value.numel() as u64))
        .collect();
    let with = |prefix: &str| store.numel_with_prefix(prefix) as u64;
    ParamReport {
        total: store.total_numel() as u64,
        stem: with("stem."),
        ape: with("ape"),
        stages: (0..model.stages.len()).map(|i| with(&format!("stages.{i}."))).collect(),
        merges: with("merges."),
        head: with("head.") + with("norm."),
        per_path,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCost {
    pub stage: usize,
    pub params: u64,
    pub flops: u64,
    pub breakdown: BTreeMap<String, Cost>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub variant: Variant,
    pub gating: GatingKind,
    pub image_side: usize,
    pub batch: usize,
    pub params: u64,
    pub flops: u64,
    /// Per-element work excluded from `flops`.
    pub elementwise: u64,
    pub stem: Cost,
    pub stages: Vec<StageCost>,
    pub merges: Cost,
    pub head: Cost,
}

fn positional_ops<T: Real>(unit: &GatingUnit<T>) -> u64 {
    let n = unit.config().tokens() as u64;
    let s = unit.groups() as u64;
    match unit.config().kind {
        GatingKind::Sgu => 0,
        // lookup plus the add onto the free weight
        GatingKind::LrpeM => 2 * n * n,
        GatingKind::Lrpe | GatingKind::Glrpe => s * n * n,
        GatingKind::Ggqpe => 5 * s * n * n,
    }
}

/// Walks the built model for `batch` images at its configured resolution.
pub fn estimate_flops<T: Real>(model: &Model<T>, batch: usize) -> CostReport {
    let cfg = model.config();
    let store = model.store();
    let b = batch as u64;
    let numel = |id| store.value(id).numel() as u64;

    let mut elementwise = 0u64;
    let mut stem = Cost::default();
    let mut side = cfg.image_side;
    for (i, layer) in model.stem.iter().enumerate() {
        stem.flops += b * layer.spec.macs(side, side);
        side = layer.spec.output_side(side);
        let out = (side * side * layer.spec.out_channels) as u64;
        stem.params += layer.spec.param_count() as u64;
        if i < 2 {
            elementwise += b * out;
        }
    }
    if let Some(ape) = model.ape {
        stem.params += numel(ape);
        elementwise += b * numel(ape);
    }

    let mut stages = Vec::new();
    let mut merges = Cost::default();
    for (si, stage) in model.stages.iter().enumerate() {
        let st = stage.config;
        let tokens = (side * side) as u64;
        let windows = tokens / st.tokens() as u64;
        let n = st.tokens() as u64;
        let mut cost = BlockCost::default();
        for block in &stage.blocks {
            let fc = block.proj_in.param_count() + block.proj_out.param_count();
            let fc_macs = tokens
                * (block.proj_in.in_dim * block.proj_in.out_dim + block.proj_out.in_dim * block.proj_out.out_dim)
                    as u64;
            cost.add(
                "channel_fc",
                Cost {
                    params: fc as u64,
                    flops: b * fc_macs,
                },
            );
            let unit = &block.gating;
            let mixed = unit.config().mixed_width(unit.in_dim()) as u64;
            let tf = unit.token_fc_id().map(numel).unwrap_or(0) + unit.bias_id().map(numel).unwrap_or(0);
            cost.add(
                "token_mixing",
                Cost {
                    params: tf,
                    flops: b * windows * n * n * mixed,
                },
            );
            let pos_params = unit.mixing_param_count(store) as u64 - tf;
            cost.add(
                "positional",
                Cost {
                    params: pos_params,
                    flops: b * positional_ops(unit),
                },
            );
            cost.add(
                "norm",
                Cost {
                    params: 2 * st.dim as u64 + unit.norm_ids().map(|(g, _)| 2 * numel(g)).unwrap_or(0),
                    flops: 0,
                },
            );

            let hidden = st.hidden() as u64;
            let out_w = unit.output_width() as u64;
            // block norm, GELU, optional X1 norm, bias, combine, residual
            let mut ew = tokens * (st.dim as u64 + hidden + out_w + st.dim as u64);
            if unit.norm_ids().is_some() {
                ew += tokens * mixed;
            }
            if unit.bias_id().is_some() {
                ew += tokens * mixed;
            }
            if unit.config().kind == GatingKind::Ggqpe {
                ew += unit.groups() as u64 * n * n;
            }
            if unit.config().combine == Combine::Concat {
                ew -= tokens * out_w;
            }
            elementwise += b * ew;
        }
        stages.push(StageCost {
            stage: si,
            params: cost.params,
            flops: cost.flops,
            breakdown: cost.breakdown,
        });
        if si < model.merges.len() {
            let spec = model.merges[si].spec;
            merges.params += spec.param_count() as u64;
            merges.flops += b * spec.macs(side, side);
            side = spec.output_side(side);
        }
    }
    let last = cfg.stages[3].dim as u64;
    let head = Cost {
        params: 2 * last + model.head.param_count() as u64,
        flops: b * last * cfg.num_classes as u64,
    };
    elementwise += b * (side * side) as u64 * last * 2;

    let params = stem.params + stages.iter().map(|s| s.params).sum::<u64>() + merges.params + head.params;
    let flops = stem.flops + stages.iter().map(|s| s.flops).sum::<u64>() + merges.flops + head.flops;
    CostReport {
        variant: cfg.variant,
        gating: cfg.gating.kind,
        image_side: cfg.image_side,
        batch,
        params,
        flops,
        elementwise,
        stem,
        stages,
        merges,
        head,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReconciliation {
    pub stage: usize,
    pub block: usize,
    pub kind: GatingKind,
    pub counted: u64,
    pub analytic: u64,
    /// `analytic - counted`.
    pub residual: i64,
}

/// Counted channel-FC plus token-mixing parameters of every block against the closed form.
pub fn reconcile<T: Real>(model: &Model<T>) -> Result<Vec<BlockReconciliation>> {
    let store = model.store();
    let mut out = Vec::new();
    for (si, stage) in model.stages.iter().enumerate() {
        let st = stage.config;
        for (bi, block) in stage.blocks.iter().enumerate() {
            let kind = block.gating.config().kind;
            let analytic = analytic_params(kind, st.dim, st.expansion, st.tokens(), block.gating.groups())?.params;
            let counted = block.counted_params(store) as u64;
            out.push(BlockReconciliation {
                stage: si,
                block: bi,
                kind,
                counted,
                analytic,
                residual: analytic as i64 - counted as i64,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(analytic_params(GatingKind::Sgu, 96, 4, 196, 1).unwrap().params, 94388);
        assert_eq!(analytic_params(GatingKind::Ggqpe, 96, 4, 196, 8).unwrap().params, 56020);
        let base = analytic_flops(GatingKind::Sgu, 96, 4, 196, 8).unwrap();
        let g = analytic_flops(GatingKind::Ggqpe, 96, 4, 196, 8).unwrap();
        let l = analytic_flops(GatingKind::Glrpe, 96, 4, 196, 8).unwrap();
        assert_eq!(g.flops - base.flops, 1_536_640);
        assert_eq!(l.flops - base.flops, 307_328);
    }

    #[test]
    fn breakdown_sums_to_totals() {
        for kind in GatingKind::ALL {
            for c in [
                analytic_params(kind, 64, 2, 49, 4).unwrap(),
                analytic_flops(kind, 64, 2, 49, 4).unwrap(),
            ] {
                assert_eq!(c.params, c.breakdown.values().map(|v| v.params).sum::<u64>());
                assert_eq!(c.flops, c.breakdown.values().map(|v| v.flops).sum::<u64>());
            }
        }
    }

    #[test]
    fn non_square_tokens_rejected() {
        assert!(analytic_params(GatingKind::Sgu, 96, 4, 195, 1).is_err());
        assert!(analytic_flops(GatingKind::Ggqpe, 96, 4, 196, 0).is_err());
    }
}
