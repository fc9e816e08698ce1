//! Non-locality of learned GQPE precisions and map exports.
//!
//! Exports are `k x k` maps written twice: a CSV with header `x,y,value`
//! in row-major order (9 significant digits) and an 8-bit binary PGM
//! normalized per map (constant maps become mid-gray).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gating::{GatingKind, GatingUnit};
use crate::model::Model;
use crate::positional::GqpeGroupParams;
use crate::tensor::Real;

pub const DEFAULT_EXCLUSION_THRESHOLD: f64 = 1e-3;

/// Eigenvalues `(min, max)` of the symmetric part of a row-major 2x2 matrix.
pub fn symmetric_eigenvalues(p: [f64; 4]) -> (f64, f64) {
    let a = p[0];
    let d = p[3];
    let b = 0.5 * (p[1] + p[2]);
    let mean = 0.5 * (a + d);
    let half = 0.5 * (a - d);
    let r = (half * half + b * b).sqrt();
    (mean - r, mean + r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerNonLocality {
    pub layer: String,
    /// Absent when every group was excluded.
    pub value: Option<f64>,
    pub included_groups: usize,
    pub excluded_groups: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonLocalityReport {
    pub threshold: f64,
    pub layers: Vec<LayerNonLocality>,
}

/// Mean over groups of `sqrt(l1 l2)`, skipping groups whose smallest
/// eigenvalue is below `threshold`.
pub fn non_locality<T: Real>(layer: &str, groups: &[GqpeGroupParams<T>], threshold: f64) -> LayerNonLocality {
    let mut sum = 0.0;
    let mut included = 0;
    for g in groups {
        let p = g.precision().map(|v| v.to_f64().unwrap_or(f64::NAN));
        let (lo, hi) = symmetric_eigenvalues(p);
        if lo.is_nan() || lo < threshold {
            continue;
        }
        sum += (lo * hi).sqrt();
        included += 1;
    }
    LayerNonLocality {
        layer: layer.to_string(),
        value: (included > 0).then(|| sum / included as f64),
        included_groups: included,
        excluded_groups: groups.len() - included,
    }
}

pub fn layer_name(stage: usize, block: usize) -> String {
    format!("s{stage}b{block}")
}

pub fn model_non_locality<T: Real>(model: &Model<T>, threshold: f64) -> Result<NonLocalityReport> {
    if model.config().gating.kind != GatingKind::Ggqpe {
        return Err(Error::config(format!(
            "non-locality needs GGQPE layers; model uses {}",
            model.config().gating.kind
        )));
    }
    let mut layers = Vec::new();
    for (si, stage) in model.stages.iter().enumerate() {
        for (bi, block) in stage.blocks.iter().enumerate() {
            let groups = block.gating.gqpe_params(model.store());
            layers.push(non_locality(&layer_name(si, bi), &groups, threshold));
        }
    }
    Ok(NonLocalityReport { threshold, layers })
}

/// Row `query` of the group's token matrix.
pub fn attention_row<T: Real>(
    unit: &GatingUnit<T>,
    store: &crate::param::ParamStore<T>,
    group: usize,
    query: usize,
) -> Result<Vec<f64>> {
    let n = unit.config().tokens();
    if query >= n {
        return Err(Error::OutOfRange {
            what: "query token",
            index: query,
            len: n,
        });
    }
    let mats = unit.weight_matrices(store)?;
    let m = mats.get(group).ok_or(Error::OutOfRange {
        what: "group",
        index: group,
        len: mats.len(),
    })?;
    Ok(m.data()[query * n..(query + 1) * n]
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect())
}

fn side_of(values: &[f64]) -> Result<usize> {
    let k = (values.len() as f64).sqrt().round() as usize;
    if k == 0 || k * k != values.len() {
        return Err(Error::InvalidShape {
            op: "map export",
            shape: vec![values.len()],
            reason: "map length must be a positive square".into(),
        });
    }
    Ok(k)
}

pub fn map_csv(values: &[f64]) -> Result<String> {
    let k = side_of(values)?;
    let mut s = String::from("x,y,value\n");
    for y in 0..k {
        for x in 0..k {
            writeln!(s, "{x},{y},{:.8e}", values[y * k + x]).expect("write to string");
        }
    }
    Ok(s)
}

/// Parses a map CSV back into row-major values.
pub fn parse_map_csv(text: &str) -> Result<Vec<f64>> {
    let bad = |line: usize, why: &str| Error::Dataset(format!("map csv line {line}: {why}"));
    let mut lines = text.lines();
    if lines.next() != Some("x,y,value") {
        return Err(bad(1, "expected header `x,y,value`"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut it = line.split(',');
        let mut field = || it.next().ok_or_else(|| bad(i + 2, "missing field"));
        let x: usize = field()?.parse().map_err(|_| bad(i + 2, "bad x"))?;
        let y: usize = field()?.parse().map_err(|_| bad(i + 2, "bad y"))?;
        let v: f64 = field()?.parse().map_err(|_| bad(i + 2, "bad value"))?;
        rows.push((x, y, v));
    }
    let k = (rows.len() as f64).sqrt().round() as usize;
    if k * k != rows.len() {
        return Err(bad(0, "row count is not a square"));
    }
    let mut out = vec![f64::NAN; rows.len()];
    for (x, y, v) in rows {
        if x >= k || y >= k {
            return Err(bad(0, "coordinate out of range"));
        }
        out[y * k + x] = v;
    }
    Ok(out)
}

pub fn map_pgm(values: &[f64]) -> Result<Vec<u8>> {
    let k = side_of(values)?;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{k} {k}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    Ok(out)
}

/// `(width, height, pixels)` of a binary PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |why: &str| Error::Dataset(format!("pgm: {why}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixels"))?;
    Ok((w, h, pixels.to_vec()))
}

fn write_map(dir: &Path, stem: &str, values: &[f64]) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let pgm = dir.join(format!("{stem}.pgm"));
    std::fs::write(&csv, map_csv(values)?).map_err(|e| Error::io(&csv, e))?;
    std::fs::write(&pgm, map_pgm(values)?).map_err(|e| Error::io(&pgm, e))?;
    Ok([csv, pgm])
}

/// Which layers and groups to export; `None` selects all.
#[derive(Debug, Clone, Default)]
pub struct MapSelection {
    pub layers: Option<Vec<(usize, usize)>>,
    pub groups: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportReport {
    pub written: Vec<PathBuf>,
    /// Layers skipped because they have nothing to export.
    pub skipped_layers: Vec<String>,
}

fn selected_blocks<T: Real>(model: &Model<T>, sel: &MapSelection) -> Result<Vec<(usize, usize)>> {
    match &sel.layers {
        None => Ok(model
            .stages
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.blocks.len()).map(move |bi| (si, bi)))
            .collect()),
        Some(list) => {
            for &(si, bi) in list {
                let depth = model.stages.get(si).map(|s| s.blocks.len()).ok_or(Error::OutOfRange {
                    what: "stage",
                    index: si,
                    len: model.stages.len(),
                })?;
                if bi >= depth {
                    return Err(Error::OutOfRange {
                        what: "block",
                        index: bi,
                        len: depth,
                    });
                }
            }
            Ok(list.clone())
        }
    }
}

/// Writes `{layer}_{group}_{query}.{csv,pgm}` for every selected layer and group.
pub fn export_attention_maps<T: Real>(
    model: &Model<T>,
    sel: &MapSelection,
    query: usize,
    out_dir: &Path,
) -> Result<ExportReport> {
    let mut written = Vec::new();
    let mut skipped_layers = Vec::new();
    for (si, bi) in selected_blocks(model, sel)? {
        let unit = &model.stages[si].blocks[bi].gating;
        let name = layer_name(si, bi);
        if query >= unit.config().tokens() {
            if sel.layers.is_some() {
                return Err(Error::OutOfRange {
                    what: "query token",
                    index: query,
                    len: unit.config().tokens(),
                });
            }
            skipped_layers.push(name);
            continue;
        }
        let groups: Vec<usize> = match &sel.groups {
            Some(g) => g.clone(),
            None => (0..unit.weight_matrices(model.store())?.len()).collect(),
        };
        for g in groups {
            let row = attention_row(unit, model.store(), g, query)?;
            written.extend(write_map(out_dir, &format!("{name}_{g}_{query}"), &row)?);
        }
    }
    Ok(ExportReport {
        written,
        skipped_layers,
    })
}

/// Writes `{layer}_bias.{csv,pgm}` for every layer that carries a bias.
pub fn export_bias_maps<T: Real>(model: &Model<T>, out_dir: &Path) -> Result<ExportReport> {
    let mut written = Vec::new();
    let mut skipped_layers = Vec::new();
    for (si, stage) in model.stages.iter().enumerate() {
        for (bi, block) in stage.blocks.iter().enumerate() {
            let name = layer_name(si, bi);
            match block.gating.bias_id() {
                Some(id) => {
                    let values: Vec<f64> = model
                        .store()
                        .value(id)
                        .data()
                        .iter()
                        .map(|v| v.to_f64().unwrap_or(f64::NAN))
                        .collect();
                    written.extend(write_map(out_dir, &format!("{name}_bias"), &values)?);
                }
                None => skipped_layers.push(name),
            }
        }
    }
    Ok(ExportReport {
        written,
        skipped_layers,
    })
}
