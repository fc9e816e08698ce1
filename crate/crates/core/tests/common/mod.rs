//! Shared loop-level reference implementations for integration tests.
#![allow(dead_code)]

use posmlp::gating::{Combine, GatingConfig, GatingUnit};
use posmlp::param::{Graph, ParamStore};
use posmlp::positional::CovarianceForm;
use posmlp::tensor::{Tensor, Var};
use posmlp::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn build(cfg: GatingConfig, d: usize, seed: u64) -> (ParamStore<f64>, GatingUnit<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let unit = GatingUnit::build(&mut store, "g", cfg, d, &mut rng).unwrap();
    (store, unit)
}

/// Fills every parameter with random values so no test relies on init.
pub fn randomize(store: &mut ParamStore<f64>, unit: &GatingUnit<f64>, rng: &mut ChaCha8Rng) {
    for id in unit.param_ids() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = rand_t(&shape, rng);
    }
}

pub fn run(
    store: &ParamStore<f64>,
    unit: &GatingUnit<f64>,
    x: &Tensor<f64>,
    f: fn(&GatingUnit<f64>, &mut Graph<'_, f64>, Var) -> Result<Var>,
) -> Tensor<f64> {
    let mut g = Graph::new(store, false);
    let xv = g.input(x.clone());
    let y = f(unit, &mut g, xv).unwrap();
    g.value(y).clone()
}

pub fn forward(store: &ParamStore<f64>, unit: &GatingUnit<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    run(store, unit, x, |u, g, x| u.forward(g, x))
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

pub fn pos(i: usize, k: usize) -> (i64, i64) {
    ((i % k) as i64, (i / k) as i64)
}

pub fn table_matrix(table: &[f64], k: usize) -> Vec<Vec<f64>> {
    let n = k * k;
    let span = 2 * k as i64 - 1;
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (pi, pj) = (pos(i, k), pos(j, k));
            let dx = pj.0 - pi.0 + k as i64 - 1;
            let dy = pj.1 - pi.1 + k as i64 - 1;
            *v = table[(dx * span + dy) as usize];
        }
    }
    m
}

/// Explicit Gaussian logits `-1/2 (delta - D)^T P (delta - D)` over window displacements.
pub fn gaussian_logits(delta: [f64; 2], p: [f64; 4], k: usize) -> Vec<Vec<f64>> {
    let n = k * k;
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (pi, pj) = (pos(i, k), pos(j, k));
            let ex = (pj.0 - pi.0) as f64 - delta[0];
            let ey = (pj.1 - pi.1) as f64 - delta[1];
            *v = -0.5 * (ex * (p[0] * ex + p[1] * ey) + ey * (p[2] * ex + p[3] * ey));
        }
    }
    m
}

pub fn softmax_rows(mut m: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for row in m.iter_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - mx).exp() / z;
        }
    }
    m
}

pub fn gaussian_matrix(delta: [f64; 2], p: [f64; 4], k: usize) -> Vec<Vec<f64>> {
    softmax_rows(gaussian_logits(delta, p, k))
}

/// Precision of a raw factor under each parameterization.
pub fn precision_of(form: CovarianceForm, f: &[f64]) -> [f64; 4] {
    match form {
        CovarianceForm::AlphaI => {
            let a = (1.0 + f[0].exp()).ln() + 1e-6;
            [a, 0.0, 0.0, a]
        }
        CovarianceForm::GammaRaw => [f[0], f[1], f[2], f[3]],
        CovarianceForm::GammaGramian => gramian(f),
    }
}

pub fn gramian(f: &[f64]) -> [f64; 4] {
    let (a, b, c, d) = (f[0], f[1], f[2], f[3]);
    [a * a + b * b + 1e-6, a * c + b * d, a * c + b * d, c * c + d * d + 1e-6]
}

pub fn ln_rows(x: &[f64], gain: &[f64], shift: &[f64]) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gain.iter().zip(shift))
        .map(|(v, (g, s))| (v - mean) * r * g + s)
        .collect()
}

/// Direct evaluation of the gated output with per-group token matrices.
pub fn oracle(
    x: &Tensor<f64>,
    mats: &[Vec<Vec<f64>>],
    bias: Option<&[f64]>,
    norm: Option<(&[f64], &[f64])>,
    combine: Combine,
) -> Tensor<f64> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = d / 2;
    let w = m / mats.len();
    let xd = x.data();
    let x1 = |bi: usize, t: usize| -> Vec<f64> {
        let row = &xd[(bi * n + t) * d..(bi * n + t) * d + m];
        match norm {
            Some((g, s)) => ln_rows(row, g, s),
            None => row.to_vec(),
        }
    };
    let out_w = if combine == Combine::Concat { d } else { m };
    let mut out = vec![0.0; b * n * out_w];
    for bi in 0..b {
        let normed: Vec<Vec<f64>> = (0..n).map(|t| x1(bi, t)).collect();
        for i in 0..n {
            for c in 0..m {
                let grp = c / w;
                let mut z = 0.0;
                for (j, row) in normed.iter().enumerate() {
                    z += mats[grp][i][j] * row[c];
                }
                if let Some(bv) = bias {
                    z += bv[i];
                }
                let x2 = xd[(bi * n + i) * d + m + c];
                let base = (bi * n + i) * out_w;
                match combine {
                    Combine::Gate => out[base + c] = z * x2,
                    Combine::Add => out[base + c] = z + x2,
                    Combine::Concat => {
                        out[base + c] = z;
                        out[base + m + c] = x2;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, n, out_w], out).unwrap()
}

pub fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    t.data().chunks(n).map(|r| r.to_vec()).collect()
}

pub fn norm_of<'a>(store: &'a ParamStore<f64>, unit: &GatingUnit<f64>) -> Option<(&'a [f64], &'a [f64])> {
    unit.norm_ids()
        .map(|(g, s)| (store.value(g).data(), store.value(s).data()))
}

pub fn bias_of<'a>(store: &'a ParamStore<f64>, unit: &GatingUnit<f64>) -> Option<&'a [f64]> {
    unit.bias_id().map(|b| store.value(b).data())
}
