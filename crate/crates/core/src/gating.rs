//! Spatial gating units.
//!
//! Every unit splits its input channels into a mixed half `X1` and a gate
//! half `X2`, mixes `X1` over the token axis with an `N x N` matrix, adds
//! an optional per-token bias and combines the result with `X2`. The kinds
//! differ only in where the token matrix comes from:
//!
//! | kind     | token matrix                               | groups |
//! |----------|--------------------------------------------|--------|
//! | `Sgu`    | free `N x N` weight                        | 1      |
//! | `LrpeM`  | free weight + displacement lookup table    | 1      |
//! | `Lrpe`   | displacement lookup table                  | 1      |
//! | `Glrpe`  | one lookup table per channel group         | s      |
//! | `Ggqpe`  | softmax of a quadratic form per group      | s      |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{trunc_normal, Graph, ParamId, ParamKind, ParamStore};
use crate::positional::{
    gqpe_embedding, gqpe_matrix_var, gqpe_vector_var, gqpe_weight_matrix, lrpe_matrix_var, lrpe_weight_matrix,
    precision_var, CovarianceForm, DisplacementGrid, GqpeGroupParams, LrpeTable,
};
use crate::tensor::{Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GatingKind {
    #[serde(rename = "SGU", alias = "sgu")]
    Sgu,
    #[serde(rename = "LRPE_M", alias = "lrpe_m")]
    LrpeM,
    #[serde(rename = "LRPE", alias = "lrpe")]
    Lrpe,
    #[serde(rename = "GLRPE", alias = "glrpe")]
    Glrpe,
    #[serde(rename = "GGQPE", alias = "ggqpe")]
    Ggqpe,
}

impl GatingKind {
    pub const ALL: [GatingKind; 5] = [
        GatingKind::Sgu,
        GatingKind::LrpeM,
        GatingKind::Lrpe,
        GatingKind::Glrpe,
        GatingKind::Ggqpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GatingKind::Sgu => "SGU",
            GatingKind::LrpeM => "LRPE_M",
            GatingKind::Lrpe => "LRPE",
            GatingKind::Glrpe => "GLRPE",
            GatingKind::Ggqpe => "GGQPE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_uppercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Kinds that carry a single token matrix regardless of stage group count.
    pub fn is_single_group(self) -> bool {
        matches!(self, GatingKind::Sgu | GatingKind::LrpeM | GatingKind::Lrpe)
    }

    fn has_free_weight(self) -> bool {
        matches!(self, GatingKind::Sgu | GatingKind::LrpeM)
    }

    fn has_table(self) -> bool {
        matches!(self, GatingKind::LrpeM | GatingKind::Lrpe | GatingKind::Glrpe)
    }
}

impl std::fmt::Display for GatingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the mixed half is merged with the gate half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Gate,
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    pub kind: GatingKind,
    pub combine: Combine,
    pub pre_norm_on_x1: bool,
    pub split_channels: bool,
    pub use_bias: bool,
    pub groups: usize,
    pub window_side: usize,
    pub covariance: CovarianceForm,
    pub freeze_delta: bool,
}

impl GatingConfig {
    /// Defaults per kind: LayerNorm on `X1` except for GGQPE, bias for SGU
    /// and GGQPE only, Gramian precision, learnable center.
    pub fn new(kind: GatingKind, window_side: usize, groups: usize) -> Self {
        Self {
            kind,
            combine: Combine::Gate,
            pre_norm_on_x1: kind != GatingKind::Ggqpe,
            split_channels: true,
            use_bias: matches!(kind, GatingKind::Sgu | GatingKind::Ggqpe),
            groups: if kind.is_single_group() { 1 } else { groups },
            window_side,
            covariance: CovarianceForm::GammaGramian,
            freeze_delta: false,
        }
    }

    pub fn tokens(&self) -> usize {
        self.window_side * self.window_side
    }

    /// Channel width of `X1` (and `X2`) for an input of `in_dim` channels.
    pub fn mixed_width(&self, in_dim: usize) -> usize {
        if self.split_channels {
            in_dim / 2
        } else {
            in_dim
        }
    }

    pub fn output_width(&self, in_dim: usize) -> usize {
        match self.combine {
            Combine::Concat => 2 * self.mixed_width(in_dim),
            _ => self.mixed_width(in_dim),
        }
    }

    pub fn validate(&self, in_dim: usize) -> Result<()> {
        if self.window_side == 0 {
            return Err(Error::config("gating window side must be positive"));
        }
        if self.groups == 0 {
            return Err(Error::config("gating group count must be positive"));
        }
        if self.kind.is_single_group() && self.groups != 1 {
            return Err(Error::config(format!(
                "{} uses a single token matrix; got {} groups",
                self.kind, self.groups
            )));
        }
        if self.split_channels && !in_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "gating input width {in_dim} must be even to split channels"
            )));
        }
        let m = self.mixed_width(in_dim);
        if m == 0 || !m.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "mixed width {m} is not divisible by {} groups",
                self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct GqpeIds {
    delta: Option<ParamId>,
    factor: ParamId,
}

/// A gating unit whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GatingUnit<T> {
    config: GatingConfig,
    in_dim: usize,
    prefix: String,
    token_fc: Option<ParamId>,
    tables: Vec<ParamId>,
    gqpe: Vec<GqpeIds>,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    grid: DisplacementGrid,
    embedding: Option<Tensor<T>>,
}

impl<T: Real> GatingUnit<T> {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: GatingConfig,
        in_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(in_dim)?;
        let n = config.tokens();
        let m = config.mixed_width(in_dim);
        let grid = DisplacementGrid::new(config.window_side)?;
        let p = |name: &str| format!("{prefix}.{name}");

        let norm = if config.pre_norm_on_x1 {
            Some((
                store.add(p("norm.gain"), ParamKind::Norm, Tensor::full(&[m], T::one()))?,
                store.add(p("norm.shift"), ParamKind::Norm, Tensor::zeros(&[m]))?,
            ))
        } else {
            None
        };
        let token_fc = if config.kind.has_free_weight() {
            Some(store.add(
                p("token_fc.weight"),
                ParamKind::Weight,
                trunc_normal(&[n, n], 0.02, rng),
            )?)
        } else {
            None
        };
        let mut tables = Vec::new();
        if config.kind.has_table() {
            let lt = LrpeTable::<T>::init(config.window_side, config.groups, rng);
            for gi in 0..config.groups {
                tables.push(store.add(p(&format!("lrpe.{gi}")), ParamKind::Positional, lt.table(gi).clone())?);
            }
        }
        let mut gqpe = Vec::new();
        let mut embedding = None;
        if config.kind == GatingKind::Ggqpe {
            for gi in 0..config.groups {
                let gp = GqpeGroupParams::<T>::init(config.covariance, config.freeze_delta, rng);
                let delta = if config.freeze_delta {
                    None
                } else {
                    Some(store.add(
                        p(&format!("gqpe.{gi}.delta")),
                        ParamKind::Positional,
                        Tensor::from_parts(vec![2], gp.delta.to_vec()),
                    )?)
                };
                let factor = store.add(
                    p(&format!("gqpe.{gi}.factor")),
                    ParamKind::Positional,
                    Tensor::from_parts(config.covariance.factor_shape(), gp.factor),
                )?;
                gqpe.push(GqpeIds { delta, factor });
            }
            embedding = Some(gqpe_embedding::<T>(&grid).as_matrix());
        }
        let bias = if config.use_bias {
            Some(store.add(p("bias"), ParamKind::Bias, Tensor::zeros(&[n]))?)
        } else {
            None
        };
        Ok(Self {
            config,
            in_dim,
            prefix: prefix.to_string(),
            token_fc,
            tables,
            gqpe,
            bias,
            norm,
            grid,
            embedding,
        })
    }

    pub fn config(&self) -> &GatingConfig {
        &self.config
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn output_width(&self) -> usize {
        self.config.output_width(self.in_dim)
    }

    pub fn grid(&self) -> &DisplacementGrid {
        &self.grid
    }

    pub fn token_fc_id(&self) -> Option<ParamId> {
        self.token_fc
    }

    pub fn table_ids(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn norm_ids(&self) -> Option<(ParamId, ParamId)> {
        self.norm
    }

    /// `(delta, factor)` ids per GQPE group.
    pub fn gqpe_ids(&self) -> Vec<(Option<ParamId>, ParamId)> {
        self.gqpe.iter().map(|g| (g.delta, g.factor)).collect()
    }

    /// Every parameter id owned by this unit.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((a, b)) = self.norm {
            ids.extend([a, b]);
        }
        ids.extend(self.token_fc);
        ids.extend(&self.tables);
        for g in &self.gqpe {
            ids.extend(g.delta);
            ids.push(g.factor);
        }
        ids.extend(self.bias);
        ids
    }

    /// Token-mixing parameters: free weight, tables, GQPE groups and bias.
    pub fn mixing_param_count(&self, store: &ParamStore<T>) -> usize {
        let norm: usize = self
            .norm
            .map(|(a, b)| store.value(a).numel() + store.value(b).numel())
            .unwrap_or(0);
        self.param_ids()
            .into_iter()
            .map(|id| store.value(id).numel())
            .sum::<usize>()
            - norm
    }

    pub fn gqpe_params(&self, store: &ParamStore<T>) -> Vec<GqpeGroupParams<T>> {
        self.gqpe
            .iter()
            .map(|g| {
                let delta = g
                    .delta
                    .map(|d| {
                        let v = store.value(d).data();
                        [v[0], v[1]]
                    })
                    .unwrap_or([T::zero(); 2]);
                GqpeGroupParams {
                    delta,
                    factor: store.value(g.factor).data().to_vec(),
                    form: self.config.covariance,
                    delta_frozen: g.delta.is_none(),
                }
            })
            .collect()
    }

    pub fn lrpe_table(&self, store: &ParamStore<T>) -> Option<LrpeTable<T>> {
        if self.tables.is_empty() {
            return None;
        }
        let tables = self.tables.iter().map(|&id| store.value(id).clone()).collect();
        LrpeTable::from_tables(self.config.window_side, tables).ok()
    }

    pub fn groups(&self) -> usize {
        self.config.groups
    }

    /// The `[N, N]` token matrix of each group, evaluated outside a tape.
    pub fn weight_matrices(&self, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        match self.config.kind {
            GatingKind::Sgu => Ok(vec![store.value(self.token_fc.unwrap()).clone()]),
            GatingKind::LrpeM => {
                let t = self.lrpe_table(store).expect("LRPE-M owns a table");
                let w = store.value(self.token_fc.unwrap());
                Ok(vec![w.add(&lrpe_weight_matrix(&t, &self.grid, 0)?)?])
            }
            GatingKind::Lrpe | GatingKind::Glrpe => {
                let t = self.lrpe_table(store).expect("LRPE owns tables");
                (0..t.groups()).map(|g| lrpe_weight_matrix(&t, &self.grid, g)).collect()
            }
            GatingKind::Ggqpe => {
                let emb = gqpe_embedding::<T>(&self.grid);
                self.gqpe_params(store)
                    .iter()
                    .map(|p| gqpe_weight_matrix(p, &emb))
                    .collect()
            }
        }
    }

    fn token_matrices(&self, g: &mut Graph<'_, T>) -> Result<Vec<Var>> {
        let n = self.config.tokens();
        match self.config.kind {
            GatingKind::Sgu => Ok(vec![g.param(self.token_fc.unwrap())]),
            GatingKind::LrpeM => {
                let w = g.param(self.token_fc.unwrap());
                let t = g.param(self.tables[0]);
                let r = lrpe_matrix_var(&mut g.tape, t, &self.grid)?;
                Ok(vec![g.tape.add(w, r)?])
            }
            GatingKind::Lrpe | GatingKind::Glrpe => self
                .tables
                .iter()
                .map(|&id| {
                    let t = g.param(id);
                    lrpe_matrix_var(&mut g.tape, t, &self.grid)
                })
                .collect(),
            GatingKind::Ggqpe => {
                let emb = g.input(self.embedding.clone().expect("GGQPE owns an embedding"));
                self.gqpe
                    .iter()
                    .map(|ids| {
                        let delta = ids.delta.map(|d| g.param(d));
                        let factor = g.param(ids.factor);
                        let p = precision_var(&mut g.tape, factor, self.config.covariance)?;
                        let v = gqpe_vector_var(&mut g.tape, delta, p)?;
                        gqpe_matrix_var(&mut g.tape, emb, v, n)
                    })
                    .collect()
            }
        }
    }

    /// `x`: `[B, N, d]` with windows stacked on the batch axis.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        let n = self.config.tokens();
        match shape[..] {
            [_, tokens, d] if tokens == n && d == self.in_dim => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "gating",
                    lhs: shape,
                    rhs: vec![0, n, self.in_dim],
                })
            }
        }
        let m = self.config.mixed_width(self.in_dim);
        let (x1, x2) = if self.config.split_channels {
            (g.tape.slice_last(x, 0, m)?, g.tape.slice_last(x, m, m)?)
        } else {
            (x, x)
        };
        let x1 = match self.norm {
            Some((gain, shift)) => {
                let (gv, sv) = (g.param(gain), g.param(shift));
                g.tape.layer_norm(x1, gv, sv)?
            }
            None => x1,
        };
        let mats = self.token_matrices(g)?;
        let mixed = if mats.len() == 1 {
            g.tape.token_mix(mats[0], x1)?
        } else {
            let width = m / mats.len();
            let mut parts = Vec::with_capacity(mats.len());
            for (gi, &w) in mats.iter().enumerate() {
                let xs = g.tape.slice_last(x1, gi * width, width)?;
                parts.push(g.tape.token_mix(w, xs)?);
            }
            g.tape.concat_last(&parts)?
        };
        let mixed = match self.bias {
            Some(b) => {
                let bv = g.param(b);
                let col = g.tape.reshape(bv, &[n, 1])?;
                g.tape.add_broadcast(mixed, col)?
            }
            None => mixed,
        };
        match self.config.combine {
            Combine::Gate => g.tape.mul(mixed, x2),
            Combine::Add => g.tape.add(mixed, x2),
            Combine::Concat => g.tape.concat_last(&[mixed, x2]),
        }
    }
}

fn require_kind<T>(unit: &GatingUnit<T>, ok: &[GatingKind]) -> Result<()> {
    if ok.contains(&unit.config.kind) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "expected a {:?} unit, got {}",
            ok, unit.config.kind
        )))
    }
}

/// `(W Norm(X1) + b) * X2`.
pub fn sgu_forward<T: Real>(unit: &GatingUnit<T>, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    require_kind(unit, &[GatingKind::Sgu])?;
    unit.forward(g, x)
}

/// `((W + R) Norm(X1) [+ b]) * X2` with `R` the displacement lookup.
pub fn posgu_lrpe_m_forward<T: Real>(unit: &GatingUnit<T>, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    require_kind(unit, &[GatingKind::LrpeM])?;
    unit.forward(g, x)
}

/// `(R_s Norm(X1_s) [+ b]) * X2_s` per channel group.
pub fn posgu_lrpe_forward<T: Real>(unit: &GatingUnit<T>, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    require_kind(unit, &[GatingKind::Lrpe, GatingKind::Glrpe])?;
    unit.forward(g, x)
}

/// `(W^gqpe_s X1_s + b) * X2_s` per channel group.
pub fn posgu_ggqpe_forward<T: Real>(unit: &GatingUnit<T>, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    require_kind(unit, &[GatingKind::Ggqpe])?;
    unit.forward(g, x)
}

/// Adds a learnable `[N, C]` map to every batch element of `[B, N, C]`.
pub fn apply_ape<T: Real>(g: &mut Graph<'_, T>, x: Var, ape: Var) -> Result<Var> {
    let xs = g.tape.shape(x);
    let ps = g.tape.shape(ape);
    if xs.len() != 3 || ps != &xs[1..] {
        return Err(Error::ShapeMismatch {
            op: "apply_ape",
            lhs: xs.to_vec(),
            rhs: ps.to_vec(),
        });
    }
    g.tape.add_broadcast(x, ape)
}
