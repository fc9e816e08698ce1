use std::path::{Path, PathBuf};

use clap::Args;
use posmlp::gating::{Combine, GatingKind};
use posmlp::model::{GatingTemplate, ModelConfig, Variant};
use posmlp::positional::CovarianceForm;
use posmlp::training::{DatasetSpec, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

/// Everything a command needs, as read from `--config` and then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub variant: Variant,
    pub image_side: Option<usize>,
    pub num_classes: Option<usize>,
    pub use_ape: bool,
    pub seed: u64,
    pub gating: GatingTemplate,
    pub train: TrainConfig,
    pub eval_dataset: Option<DatasetSpec>,
    pub out_dir: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            variant: Variant::T,
            image_side: None,
            num_classes: None,
            use_ape: false,
            seed: 0,
            gating: GatingTemplate::default(),
            train: TrainConfig::default(),
            eval_dataset: None,
            out_dir: None,
        }
    }
}

impl CliConfig {
    pub fn model_config(&self) -> Result<ModelConfig, Failure> {
        let mut m = ModelConfig::variant(self.variant).with_gating(self.gating.clone());
        if let Some(side) = self.image_side {
            m = m.with_image_side(side)?;
        }
        if let Some(c) = self.num_classes {
            m.num_classes = c;
        }
        m.use_ape = self.use_ape;
        m.validate()?;
        Ok(m)
    }

    pub fn require_out_dir(&self) -> Result<&Path, Failure> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Failure::config("this command writes files; pass --out <DIR> or set out_dir"))
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}; valid variants are {}", Variant::NAMES))
}

fn parse_kind(s: &str) -> Result<GatingKind, String> {
    GatingKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = GatingKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown gating kind {s:?}; valid kinds are {}", names.join(", "))
    })
}

fn parse_form(s: &str) -> Result<CovarianceForm, String> {
    match s.to_ascii_lowercase().as_str() {
        "alpha" | "alpha_i" => Ok(CovarianceForm::AlphaI),
        "raw" | "gamma_raw" => Ok(CovarianceForm::GammaRaw),
        "gramian" | "gamma_gramian" => Ok(CovarianceForm::GammaGramian),
        _ => Err(format!(
            "unknown covariance form {s:?}; valid forms are alpha, raw, gramian"
        )),
    }
}

fn parse_combine(s: &str) -> Result<Combine, String> {
    match s.to_ascii_lowercase().as_str() {
        "gate" => Ok(Combine::Gate),
        "add" => Ok(Combine::Add),
        "concat" => Ok(Combine::Concat),
        _ => Err(format!("unknown combine mode {s:?}; valid modes are gate, add, concat")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DatasetKind {
    Synthetic,
    Cifar,
}

/// Flags shared by every subcommand. Each one mirrors a config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file; flags given here take precedence over its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Model size: T, S, B or MICRO
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Input resolution (multiple of 32)
    #[arg(long)]
    pub image_side: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Gating kind: SGU, LRPE_M, LRPE, GLRPE or GGQPE
    #[arg(long, value_parser = parse_kind)]
    pub gating: Option<GatingKind>,
    /// Precision parameterization for GGQPE: alpha, raw or gramian
    #[arg(long, value_parser = parse_form)]
    pub form: Option<CovarianceForm>,
    /// How the mixed half meets the gate half: gate, add or concat
    #[arg(long, value_parser = parse_combine)]
    pub combine: Option<Combine>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub freeze_delta: Option<bool>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub use_bias: Option<bool>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub pre_norm: Option<bool>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub split_channels: Option<bool>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub use_ape: Option<bool>,
    /// Seed for parameter initialization
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate of the cosine schedule
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seed for batch shuffling
    #[arg(long)]
    pub train_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// CIFAR-10 binary batch file or directory of them
    #[arg(long, value_name = "PATH")]
    pub data_path: Option<PathBuf>,
    /// Synthetic dataset size per class
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    /// Output directory; the resolved config is written there
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<CliConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
            }
            None => CliConfig::default(),
        };
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if self.image_side.is_some() {
            c.image_side = self.image_side;
        }
        if self.num_classes.is_some() {
            c.num_classes = self.num_classes;
        }
        if let Some(k) = self.gating {
            c.gating.kind = k;
        }
        if let Some(f) = self.form {
            c.gating.covariance = f;
        }
        if let Some(m) = self.combine {
            c.gating.combine = m;
        }
        if let Some(b) = self.freeze_delta {
            c.gating.freeze_delta = b;
        }
        if self.use_bias.is_some() {
            c.gating.use_bias = self.use_bias;
        }
        if self.pre_norm.is_some() {
            c.gating.pre_norm_on_x1 = self.pre_norm;
        }
        if let Some(b) = self.split_channels {
            c.gating.split_channels = b;
        }
        if let Some(b) = self.use_ape {
            c.use_ape = b;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        let t = &mut c.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr_initial = v;
        }
        if let Some(v) = self.lr_min {
            t.lr_min = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.train_seed {
            t.seed = v;
        }
        match self.dataset {
            Some(DatasetKind::Cifar) => {
                let path = self
                    .data_path
                    .clone()
                    .or_else(|| match &t.dataset {
                        DatasetSpec::Cifar { path } => Some(path.clone()),
                        _ => None,
                    })
                    .ok_or_else(|| Failure::config("--dataset cifar needs --data-path"))?;
                t.dataset = DatasetSpec::Cifar { path };
            }
            Some(DatasetKind::Synthetic) if !matches!(t.dataset, DatasetSpec::Synthetic(_)) => {
                t.dataset = DatasetSpec::Synthetic(SyntheticSpec::default());
            }
            _ => {}
        }
        if let Some(p) = &self.data_path {
            match &mut t.dataset {
                DatasetSpec::Cifar { path } => *path = p.clone(),
                DatasetSpec::Synthetic(_) => t.dataset = DatasetSpec::Cifar { path: p.clone() },
            }
        }
        if let Some(n) = self.samples_per_class {
            match &mut t.dataset {
                DatasetSpec::Synthetic(s) => s.samples_per_class = n,
                DatasetSpec::Cifar { .. } => {
                    return Err(Failure::config(
                        "--samples-per-class applies to the synthetic dataset only",
                    ))
                }
            }
        }
        t.validate()?;
        if self.out.is_some() {
            c.out_dir = self.out.clone();
        }
        Ok(c)
    }
}
