use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use posmlp::analysis::{export_attention_maps, export_bias_maps, model_non_locality, ExportReport, MapSelection};
use posmlp::complexity::{count_params, estimate_flops};
use posmlp::model::{checkpoint_bytes, gradcheck_model, load_checkpoint, save_checkpoint, Model, ModelConfig, Variant};
use posmlp::tensor::gradcheck::GradcheckConfig;
use posmlp::training::{evaluate, train_loop};
use serde::Serialize;

use crate::config::CliConfig;
use crate::exit::Failure;

pub type Outcome = Result<String, Failure>;

fn json<T: Serialize>(v: &T) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

/// Creates the output directory, if any, and records the resolved config in it.
pub fn echo_config(cfg: &CliConfig) -> Result<(), Failure> {
    let Some(dir) = &cfg.out_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    write_file(&dir.join("resolved_config.json"), json(cfg)?.as_bytes())
}

fn build(cfg: &CliConfig) -> Result<Model<f32>, Failure> {
    Ok(Model::build(cfg.model_config()?, cfg.seed)?)
}

fn model_or_checkpoint(cfg: &CliConfig, checkpoint: Option<&Path>) -> Result<Model<f32>, Failure> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint(p)?),
        None => build(cfg),
    }
}

/// Parameters outside the X1 layer norms of the gating units.
fn params_without_gate_norms(model: &Model<f32>) -> usize {
    let norms: usize = model
        .blocks()
        .filter_map(|(_, b)| b.gating.norm_ids())
        .map(|(g, s)| model.store().value(g).numel() + model.store().value(s).numel())
        .sum();
    model.param_count() - norms
}

pub fn summary(model: &Model<f32>) -> String {
    let c = model.config();
    let report = count_params(model);
    let sides = c.stage_sides();
    let join = |v: Vec<usize>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        "PosMLP-{}  gating {}  image {}x{}x{}  classes {}",
        c.variant.name(),
        c.gating.kind,
        c.image_side,
        c.image_side,
        c.in_channels,
        c.num_classes
    );
    let _ = writeln!(w, "dims: {}", join(c.stages.iter().map(|st| st.dim).collect()));
    let _ = writeln!(w, "depths: {}", join(c.stages.iter().map(|st| st.depth).collect()));
    let _ = writeln!(
        w,
        "stem: {} -> {} channels, output {}x{}, params {}",
        c.in_channels, c.base_dim, sides[0], sides[0], report.stem
    );
    if c.use_ape {
        let _ = writeln!(w, "ape: params {}", report.ape);
    }
    let _ = writeln!(
        w,
        "{:<6}{:>6}{:>6}{:>8}{:>8}{:>8}{:>8}  {:<14}{:>12}",
        "stage", "depth", "dim", "window", "tokens", "groups", "hidden", "output", "params"
    );
    for (i, st) in c.stages.iter().enumerate() {
        let _ = writeln!(
            w,
            "{:<6}{:>6}{:>6}{:>8}{:>8}{:>8}{:>8}  {:<14}{:>12}",
            i + 1,
            st.depth,
            st.dim,
            st.window_side,
            st.tokens(),
            model.stages[i].blocks[0].gating.groups(),
            st.hidden(),
            format!("{}x{}x{}", sides[i], sides[i], st.dim),
            report.stages[i]
        );
    }
    let _ = writeln!(w, "merges: params {}", report.merges);
    let _ = writeln!(w, "head: params {}", report.head);
    let _ = writeln!(w, "total params: {}", report.total);
    let _ = writeln!(w, "params excluding gate norms: {}", params_without_gate_norms(model));
    s
}

pub fn describe(cfg: &CliConfig) -> Outcome {
    Ok(summary(&build(cfg)?))
}

pub fn cost(cfg: &CliConfig, batch: usize) -> Outcome {
    if batch == 0 {
        return Err(Failure::config("batch must be positive"));
    }
    let report = estimate_flops(&build(cfg)?, batch);
    let text = json(&report)?;
    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("cost.json"), text.as_bytes())?;
    }
    Ok(text)
}

#[derive(Serialize)]
struct GradcheckSummary<'a> {
    passed: bool,
    gating: &'a str,
    covariance: posmlp::positional::CovarianceForm,
    freeze_delta: bool,
    report: posmlp::tensor::gradcheck::GradcheckReport,
}

/// Always runs in 64-bit on the MICRO model, whatever variant was requested.
pub fn gradcheck(cfg: &CliConfig, max_entries: usize) -> Outcome {
    let mut model_cfg = ModelConfig::variant(Variant::Micro).with_gating(cfg.gating.clone());
    model_cfg.use_ape = cfg.use_ape;
    let gc = GradcheckConfig {
        max_entries: Some(max_entries.max(1)),
        seed: cfg.seed,
        ..GradcheckConfig::default()
    };
    let report = gradcheck_model(model_cfg, cfg.seed, &gc)?;
    let summary = GradcheckSummary {
        passed: report.passed(),
        gating: cfg.gating.kind.name(),
        covariance: cfg.gating.covariance,
        freeze_delta: cfg.gating.freeze_delta,
        report,
    };
    let text = json(&summary)?;
    if summary.passed {
        Ok(text)
    } else {
        Err(Failure::check(format!(
            "{text}gradient check failed: max relative error {:.3e} >= {:.0e}",
            summary.report.max_rel_err, summary.report.tolerance
        )))
    }
}

fn parse_layer(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.strip_prefix('s')?.split_once('b')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

pub fn selection(layers: &[String], groups: &[usize]) -> Result<MapSelection, Failure> {
    let layers = if layers.is_empty() {
        None
    } else {
        Some(
            layers
                .iter()
                .map(|l| {
                    parse_layer(l)
                        .ok_or_else(|| Failure::config(format!("layer {l:?} is not of the form s<stage>b<block>")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        )
    };
    Ok(MapSelection {
        layers,
        groups: (!groups.is_empty()).then(|| groups.to_vec()),
    })
}

fn export_summary(report: &ExportReport) -> Outcome {
    json(report)
}

pub fn attn(cfg: &CliConfig, checkpoint: Option<&Path>, sel: &MapSelection, query: usize) -> Outcome {
    let dir = cfg.require_out_dir()?;
    let model = model_or_checkpoint(cfg, checkpoint)?;
    export_summary(&export_attention_maps(&model, sel, query, dir)?)
}

pub fn bias(cfg: &CliConfig, checkpoint: Option<&Path>) -> Outcome {
    let dir = cfg.require_out_dir()?;
    let model = model_or_checkpoint(cfg, checkpoint)?;
    export_summary(&export_bias_maps(&model, dir)?)
}

pub fn nonlocality(cfg: &CliConfig, checkpoint: Option<&Path>, threshold: f64) -> Outcome {
    let model = model_or_checkpoint(cfg, checkpoint)?;
    let text = json(&model_non_locality(&model, threshold)?)?;
    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("nonlocality.json"), text.as_bytes())?;
    }
    Ok(text)
}

pub fn train(cfg: &CliConfig, save: Option<&Path>) -> Outcome {
    let dir = cfg.require_out_dir()?;
    let mut model = build(cfg)?;
    let data = cfg.train.dataset.load()?;
    let eval = cfg.eval_dataset.as_ref().map(|d| d.load()).transpose()?;
    let history = train_loop(&mut model, &data, eval.as_ref(), &cfg.train)?;
    let csv = history.to_csv();
    write_file(&dir.join("metrics.csv"), csv.as_bytes())?;
    let target: PathBuf = save.map(Path::to_path_buf).unwrap_or_else(|| dir.join("model.ckpt"));
    save_checkpoint(&model, &target)?;
    Ok(csv)
}

#[derive(Serialize)]
struct EvalSummary {
    samples: usize,
    loss: f64,
    top1: f64,
}

pub fn eval(cfg: &CliConfig, checkpoint: &Path) -> Outcome {
    let model: Model<f32> = load_checkpoint(checkpoint)?;
    let data = cfg.eval_dataset.as_ref().unwrap_or(&cfg.train.dataset).load()?;
    let (loss, top1) = evaluate(&model, &data, cfg.train.batch_size)?;
    let text = json(&EvalSummary {
        samples: data.len(),
        loss,
        top1,
    })?;
    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("eval.json"), text.as_bytes())?;
    }
    Ok(text)
}

pub fn save(cfg: &CliConfig, path: &Path) -> Outcome {
    let model = build(cfg)?;
    save_checkpoint(&model, path)?;
    Ok(format!("wrote {} ({} params)\n", path.display(), model.param_count()))
}

/// Loads a checkpoint, summarizes it and confirms it re-serializes to the same bytes.
pub fn load(path: &Path) -> Outcome {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
    let model: Model<f32> = load_checkpoint(path)?;
    let again = checkpoint_bytes(&model)?;
    let mut text = summary(&model);
    if again != bytes {
        // f64 checkpoints are loaded as f32, so compare at the stored precision
        let exact: Model<f64> = load_checkpoint(path)?;
        if checkpoint_bytes(&exact)? != bytes {
            return Err(Failure::check(format!(
                "{text}re-serialized checkpoint differs from {}",
                path.display()
            )));
        }
    }
    text.push_str("checkpoint re-serializes byte-identically\n");
    Ok(text)
}
