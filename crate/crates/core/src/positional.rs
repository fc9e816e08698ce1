//! Relative-displacement tables and the positional token-mixing matrices
//! generated from them.
//!
//! Two generators are provided:
//!
//! * a learnable lookup table indexed by displacement (one scalar per
//!   distinct displacement of a `k x k` window), and
//! * a quadratic (Gaussian) form over displacements with a learnable
//!   attention center and precision matrix, normalized row-wise by softmax.
//!
//! Tokens of a window are raster ordered: token `i` sits at column
//! `i % k`, row `i / k`, and `x` is the column axis.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::trunc_normal;
use crate::tensor::{kernels, CustomOp, Real, Tape, Tensor, Var};

/// Regularizer added to Gramian and isotropic precisions.
pub const PRECISION_EPS: f64 = 1e-6;

pub type Displacement = (i32, i32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisplacementGrid {
    window_side: usize,
    displacements: Vec<Displacement>,
}

impl DisplacementGrid {
    pub fn new(window_side: usize) -> Result<Self> {
        if window_side == 0 {
            return Err(Error::config("window side must be at least 1"));
        }
        let n = window_side * window_side;
        let pos = |i: usize| ((i % window_side) as i32, (i / window_side) as i32);
        let mut displacements = Vec::with_capacity(n * n);
        for i in 0..n {
            let (xi, yi) = pos(i);
            for j in 0..n {
                let (xj, yj) = pos(j);
                displacements.push((xj - xi, yj - yi));
            }
        }
        Ok(Self {
            window_side,
            displacements,
        })
    }

    pub fn window_side(&self) -> usize {
        self.window_side
    }

    pub fn tokens(&self) -> usize {
        self.window_side * self.window_side
    }

    /// `p_j - p_i`.
    pub fn get(&self, i: usize, j: usize) -> Displacement {
        self.displacements[i * self.tokens() + j]
    }

    pub fn displacements(&self) -> &[Displacement] {
        &self.displacements
    }

    /// Number of distinct displacements, `(2k - 1)^2`.
    pub fn table_len(&self) -> usize {
        let s = 2 * self.window_side - 1;
        s * s
    }

    /// `(dx + k - 1) * (2k - 1) + (dy + k - 1)`.
    pub fn table_index(&self, d: Displacement) -> usize {
        let k = self.window_side as i32;
        ((d.0 + k - 1) * (2 * k - 1) + (d.1 + k - 1)) as usize
    }

    /// Table index of every `(i, j)` pair, row-major.
    pub fn lookup_indices(&self) -> Vec<usize> {
        self.displacements.iter().map(|&d| self.table_index(d)).collect()
    }
}

pub fn displacement_grid(k: usize) -> Result<DisplacementGrid> {
    DisplacementGrid::new(k)
}

/// One displacement-indexed dictionary per channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct LrpeTable<T> {
    window_side: usize,
    tables: Vec<Tensor<T>>,
}

impl<T: Real> LrpeTable<T> {
    pub fn zeros(window_side: usize, groups: usize) -> Self {
        let len = (2 * window_side - 1).pow(2);
        Self {
            window_side,
            tables: vec![Tensor::zeros(&[len]); groups.max(1)],
        }
    }

    pub fn init<R: Rng + ?Sized>(window_side: usize, groups: usize, rng: &mut R) -> Self {
        let len = (2 * window_side - 1).pow(2);
        Self {
            window_side,
            tables: (0..groups.max(1)).map(|_| trunc_normal(&[len], 0.02, rng)).collect(),
        }
    }

    pub fn from_tables(window_side: usize, tables: Vec<Tensor<T>>) -> Result<Self> {
        let len = (2 * window_side - 1).pow(2);
        if tables.is_empty() || tables.iter().any(|t| t.shape() != [len]) {
            return Err(Error::config(format!(
                "LRPE tables for window {window_side} must be non-empty vectors of length {len}"
            )));
        }
        Ok(Self { window_side, tables })
    }

    pub fn window_side(&self) -> usize {
        self.window_side
    }

    pub fn groups(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, group: usize) -> &Tensor<T> {
        &self.tables[group]
    }

    pub fn table_mut(&mut self, group: usize) -> &mut Tensor<T> {
        &mut self.tables[group]
    }
}

/// `W[i][j] = table[group][index(delta_ij)]`. No softmax is applied.
pub fn lrpe_weight_matrix<T: Real>(table: &LrpeTable<T>, grid: &DisplacementGrid, group: usize) -> Result<Tensor<T>> {
    if table.window_side != grid.window_side {
        return Err(Error::config(format!(
            "table window {} does not match grid window {}",
            table.window_side, grid.window_side
        )));
    }
    if group >= table.groups() {
        return Err(Error::OutOfRange {
            what: "LRPE group",
            index: group,
            len: table.groups(),
        });
    }
    let values = table.tables[group].data();
    let n = grid.tokens();
    let data = grid.lookup_indices().into_iter().map(|i| values[i]).collect();
    Ok(Tensor::from_parts(vec![n, n], data))
}

/// Records the LRPE lookup of `table` (a `[(2k-1)^2]` var) on the tape.
pub fn lrpe_matrix_var<T: Real>(tape: &mut Tape<T>, table: Var, grid: &DisplacementGrid) -> Result<Var> {
    let n = grid.tokens();
    tape.gather(table, Arc::new(grid.lookup_indices()), &[n, n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceForm {
    /// `P = alpha I`, `alpha = softplus(raw) + eps`.
    AlphaI,
    /// `P = Gamma`, possibly indefinite or asymmetric.
    GammaRaw,
    /// `P = Gamma Gamma^T + eps I`.
    GammaGramian,
}

impl CovarianceForm {
    pub fn factor_len(self) -> usize {
        match self {
            CovarianceForm::AlphaI => 1,
            _ => 4,
        }
    }

    pub fn factor_shape(self) -> Vec<usize> {
        match self {
            CovarianceForm::AlphaI => vec![1],
            _ => vec![2, 2],
        }
    }

    /// Learnable scalars per group.
    pub fn group_param_count(self, delta_frozen: bool) -> usize {
        self.factor_len() + if delta_frozen { 0 } else { 2 }
    }
}

/// Raw value whose soft-plus is one.
pub(crate) fn alpha_raw_for_unit() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Attention center and precision factor of one GQPE group.
#[derive(Debug, Clone, PartialEq)]
pub struct GqpeGroupParams<T> {
    pub delta: [T; 2],
    /// One raw scalar for [`CovarianceForm::AlphaI`], else `Gamma` row-major.
    pub factor: Vec<T>,
    pub form: CovarianceForm,
    pub delta_frozen: bool,
}

impl<T: Real> GqpeGroupParams<T> {
    pub fn new(delta: [T; 2], factor: Vec<T>, form: CovarianceForm, delta_frozen: bool) -> Result<Self> {
        if factor.len() != form.factor_len() {
            return Err(Error::config(format!(
                "{form:?} expects {} factor values, got {}",
                form.factor_len(),
                factor.len()
            )));
        }
        let delta = if delta_frozen { [T::zero(); 2] } else { delta };
        Ok(Self {
            delta,
            factor,
            form,
            delta_frozen,
        })
    }

    /// Gramian params with `Gamma` chosen so that `P = Gamma Gamma^T + eps I`.
    pub fn gramian(delta: [T; 2], gamma: [T; 4]) -> Self {
        Self::new(delta, gamma.to_vec(), CovarianceForm::GammaGramian, false).expect("four factors")
    }

    /// Isotropic params with precision `alpha` (>= eps).
    pub fn isotropic(delta: [T; 2], alpha: f64) -> Self {
        let target = (alpha - PRECISION_EPS).max(1e-300);
        // inverse softplus
        let raw = if target > 30.0 { target } else { target.exp_m1().ln() };
        Self::new(delta, vec![T::from_f64_lossy(raw)], CovarianceForm::AlphaI, false).expect("one factor")
    }

    pub fn init<R: Rng + ?Sized>(form: CovarianceForm, delta_frozen: bool, rng: &mut R) -> Self {
        let delta = if delta_frozen {
            [T::zero(); 2]
        } else {
            [
                T::from_f64_lossy(rng.gen_range(-0.5..=0.5)),
                T::from_f64_lossy(rng.gen_range(-0.5..=0.5)),
            ]
        };
        let factor = match form {
            CovarianceForm::AlphaI => vec![T::from_f64_lossy(alpha_raw_for_unit())],
            _ => {
                let noise = Normal::new(0.0, 0.1).expect("valid std");
                [1.0, 0.0, 0.0, 1.0]
                    .iter()
                    .map(|&v| T::from_f64_lossy(v + noise.sample(rng)))
                    .collect()
            }
        };
        Self {
            delta,
            factor,
            form,
            delta_frozen,
        }
    }

    /// Effective precision `P`, row-major 2x2.
    pub fn precision(&self) -> [T; 4] {
        precision_from_factor(&self.factor, self.form)
    }
}

pub(crate) fn precision_from_factor<T: Real>(f: &[T], form: CovarianceForm) -> [T; 4] {
    let eps = T::from_f64_lossy(PRECISION_EPS);
    match form {
        CovarianceForm::AlphaI => {
            let a = kernels::softplus(f[0]) + eps;
            [a, T::zero(), T::zero(), a]
        }
        CovarianceForm::GammaRaw => [f[0], f[1], f[2], f[3]],
        CovarianceForm::GammaGramian => [
            f[0] * f[0] + f[1] * f[1] + eps,
            f[0] * f[2] + f[1] * f[3],
            f[2] * f[0] + f[3] * f[1],
            f[2] * f[2] + f[3] * f[3] + eps,
        ],
    }
}

/// `[PD_1, PD_2, -P11/2, -P22/2, -P12]` for center `D` and precision `P`.
pub(crate) fn vector_from_precision<T: Real>(delta: [T; 2], p: [T; 4]) -> [T; 5] {
    let half = T::from_f64_lossy(0.5);
    [
        p[0] * delta[0] + p[1] * delta[1],
        p[2] * delta[0] + p[3] * delta[1],
        -half * p[0],
        -half * p[3],
        -p[1],
    ]
}

pub fn gqpe_vector<T: Real>(params: &GqpeGroupParams<T>) -> [T; 5] {
    vector_from_precision(params.delta, params.precision())
}

/// Per-pair polynomial features `[dx, dy, dx^2, dy^2, dx*dy]`, shape `[N, N, 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GqpeEmbedding<T> {
    tokens: usize,
    features: Tensor<T>,
}

impl<T: Real> GqpeEmbedding<T> {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn row(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.tokens + j) * 5;
        &self.features.data()[o..o + 5]
    }

    /// `[N*N, 5]` view suitable for a matrix product with the group vector.
    pub fn as_matrix(&self) -> Tensor<T> {
        self.features
            .reshape(&[self.tokens * self.tokens, 5])
            .expect("same element count")
    }
}

pub fn gqpe_features<T: Real>(d: Displacement) -> [T; 5] {
    let (x, y) = (d.0 as f64, d.1 as f64);
    [x, y, x * x, y * y, x * y].map(T::from_f64_lossy)
}

pub fn gqpe_embedding<T: Real>(grid: &DisplacementGrid) -> GqpeEmbedding<T> {
    let n = grid.tokens();
    let data = grid
        .displacements()
        .iter()
        .flat_map(|&d| gqpe_features::<T>(d))
        .collect();
    GqpeEmbedding {
        tokens: n,
        features: Tensor::from_parts(vec![n, n, 5], data),
    }
}

/// Pre-softmax logits `v . r_{delta_ij}`, shape `[N, N]`.
pub fn gqpe_logits<T: Real>(params: &GqpeGroupParams<T>, emb: &GqpeEmbedding<T>) -> Tensor<T> {
    let v = gqpe_vector(params);
    let n = emb.tokens;
    let data = emb
        .features
        .data()
        .chunks(5)
        .map(|r| r.iter().zip(&v).map(|(&a, &b)| a * b).sum())
        .collect();
    Tensor::from_parts(vec![n, n], data)
}

/// Row-stochastic `Softmax_j(v . r_{delta_ij})`.
pub fn gqpe_weight_matrix<T: Real>(params: &GqpeGroupParams<T>, emb: &GqpeEmbedding<T>) -> Result<Tensor<T>> {
    gqpe_logits(params, emb).softmax_rows()
}

/// One weight matrix per group; all groups share `emb`.
pub fn group_weight_stack<T: Real>(params: &[GqpeGroupParams<T>], emb: &GqpeEmbedding<T>) -> Result<Vec<Tensor<T>>> {
    if params.is_empty() {
        return Err(Error::config("group_weight_stack needs at least one group"));
    }
    params.iter().map(|p| gqpe_weight_matrix(p, emb)).collect()
}

#[derive(Debug)]
struct PrecisionOp {
    form: CovarianceForm,
}

impl<T: Real> CustomOp<T> for PrecisionOp {
    fn name(&self) -> &'static str {
        "gqpe_precision"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let f = inputs[0].data();
        let g = grad.data();
        let d = match self.form {
            CovarianceForm::AlphaI => vec![(g[0] + g[3]) * kernels::sigmoid(f[0])],
            CovarianceForm::GammaRaw => g.to_vec(),
            CovarianceForm::GammaGramian => {
                // d Gamma = (G + G^T) Gamma
                let s = [g[0] + g[0], g[1] + g[2], g[2] + g[1], g[3] + g[3]];
                vec![
                    s[0] * f[0] + s[1] * f[2],
                    s[0] * f[1] + s[1] * f[3],
                    s[2] * f[0] + s[3] * f[2],
                    s[2] * f[1] + s[3] * f[3],
                ]
            }
        };
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))]
    }
}

#[derive(Debug)]
struct VectorOp {
    has_delta: bool,
}

impl<T: Real> CustomOp<T> for VectorOp {
    fn name(&self) -> &'static str {
        "gqpe_vector"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad.data();
        let half = T::from_f64_lossy(0.5);
        let (delta, p) = if self.has_delta {
            let d = inputs[0].data();
            ([d[0], d[1]], inputs[1].data())
        } else {
            ([T::zero(); 2], inputs[0].data())
        };
        let dp = vec![
            g[0] * delta[0] - half * g[2],
            g[0] * delta[1] - g[4],
            g[1] * delta[0],
            g[1] * delta[1] - half * g[3],
        ];
        let dp = Some(Tensor::from_parts(vec![2, 2], dp));
        if self.has_delta {
            // P^T [g0, g1]
            let dd = vec![p[0] * g[0] + p[2] * g[1], p[1] * g[0] + p[3] * g[1]];
            vec![Some(Tensor::from_parts(vec![2], dd)), dp]
        } else {
            vec![dp]
        }
    }
}

/// Effective precision `[2, 2]` from a factor var on the tape.
pub fn precision_var<T: Real>(tape: &mut Tape<T>, factor: Var, form: CovarianceForm) -> Result<Var> {
    let f = tape.value(factor);
    if f.numel() != form.factor_len() {
        return Err(Error::ShapeMismatch {
            op: "gqpe_precision",
            lhs: f.shape().to_vec(),
            rhs: form.factor_shape(),
        });
    }
    let p = precision_from_factor(f.data(), form);
    let value = Tensor::from_parts(vec![2, 2], p.to_vec());
    tape.custom(&[factor], value, Box::new(PrecisionOp { form }))
}

/// Group vector `[5]` from an optional center var (absent = frozen at zero)
/// and a precision var.
pub fn gqpe_vector_var<T: Real>(tape: &mut Tape<T>, delta: Option<Var>, precision: Var) -> Result<Var> {
    let p = tape.value(precision).data();
    let p = [p[0], p[1], p[2], p[3]];
    let d = match delta {
        Some(dv) => {
            let d = tape.value(dv);
            if d.shape() != [2] {
                return Err(Error::ShapeMismatch {
                    op: "gqpe_vector",
                    lhs: d.shape().to_vec(),
                    rhs: vec![2],
                });
            }
            [d.data()[0], d.data()[1]]
        }
        None => [T::zero(); 2],
    };
    let value = Tensor::from_parts(vec![5], vector_from_precision(d, p).to_vec());
    match delta {
        Some(dv) => tape.custom(&[dv, precision], value, Box::new(VectorOp { has_delta: true })),
        None => tape.custom(&[precision], value, Box::new(VectorOp { has_delta: false })),
    }
}

/// Softmax-normalized GQPE matrix `[N, N]` from the group vector var.
/// `emb_matrix` is the `[N*N, 5]` embedding recorded as a constant.
pub fn gqpe_matrix_var<T: Real>(tape: &mut Tape<T>, emb_matrix: Var, vector: Var, tokens: usize) -> Result<Var> {
    let v = tape.reshape(vector, &[5, 1])?;
    let logits = tape.matmul(emb_matrix, v)?;
    let logits = tape.reshape(logits, &[tokens, tokens])?;
    tape.softmax_rows(logits)
}
