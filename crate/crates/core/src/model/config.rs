use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{Combine, GatingConfig, GatingKind};
use crate::positional::CovarianceForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    T,
    S,
    B,
    #[serde(rename = "MICRO", alias = "micro", alias = "Micro")]
    Micro,
}

impl Variant {
    pub const NAMES: &'static str = "T, S, B, MICRO";

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T" => Some(Variant::T),
            "S" => Some(Variant::S),
            "B" => Some(Variant::B),
            "MICRO" => Some(Variant::Micro),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::T => "T",
            Variant::S => "S",
            Variant::B => "B",
            Variant::Micro => "MICRO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub window_side: usize,
    pub groups: usize,
    pub expansion: usize,
}

impl StageConfig {
    pub fn hidden(&self) -> usize {
        self.dim * self.expansion
    }

    pub fn tokens(&self) -> usize {
        self.window_side * self.window_side
    }
}

/// Gating settings shared by every block; window side and group count come
/// from the stage. `None` fields take the per-kind default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingTemplate {
    pub kind: GatingKind,
    pub combine: Combine,
    pub pre_norm_on_x1: Option<bool>,
    pub split_channels: bool,
    pub use_bias: Option<bool>,
    pub covariance: CovarianceForm,
    pub freeze_delta: bool,
}

impl Default for GatingTemplate {
    fn default() -> Self {
        Self::new(GatingKind::Ggqpe)
    }
}

impl GatingTemplate {
    pub fn new(kind: GatingKind) -> Self {
        Self {
            kind,
            combine: Combine::Gate,
            pre_norm_on_x1: None,
            split_channels: true,
            use_bias: None,
            covariance: CovarianceForm::GammaGramian,
            freeze_delta: false,
        }
    }

    pub fn for_stage(&self, stage: &StageConfig) -> GatingConfig {
        let mut c = GatingConfig::new(self.kind, stage.window_side, stage.groups);
        c.combine = self.combine;
        c.split_channels = self.split_channels;
        c.covariance = self.covariance;
        c.freeze_delta = self.freeze_delta;
        if let Some(p) = self.pre_norm_on_x1 {
            c.pre_norm_on_x1 = p;
        }
        if let Some(b) = self.use_bias {
            c.use_bias = b;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_dim: usize,
    pub image_side: usize,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub use_ape: bool,
    pub gating: GatingTemplate,
}

const TABLE_DEPTHS: [usize; 4] = [2, 2, 18, 2];
const TABLE_WINDOWS: [usize; 4] = [14, 14, 14, 7];
const TABLE_GROUPS: [usize; 4] = [8, 16, 32, 64];
const TABLE_EXPANSION: [usize; 4] = [4, 4, 4, 2];

const MICRO_BASE_DIM: usize = 16;
const MICRO_DEPTHS: [usize; 4] = [1, 1, 2, 1];
const MICRO_IMAGE_SIDE: usize = 32;
const MICRO_GROUPS: [usize; 4] = [2, 4, 8, 16];
const MICRO_CLASSES: usize = 4;

impl ModelConfig {
    /// T/S/B at 224x224 with 1000 classes, or MICRO at 32x32 with 4 classes.
    pub fn variant(variant: Variant) -> Self {
        let (base, depths, groups, side, classes) = match variant {
            Variant::T => (96, TABLE_DEPTHS, TABLE_GROUPS, 224, 1000),
            Variant::S => (128, TABLE_DEPTHS, TABLE_GROUPS, 224, 1000),
            Variant::B => (192, TABLE_DEPTHS, TABLE_GROUPS, 224, 1000),
            Variant::Micro => (
                MICRO_BASE_DIM,
                MICRO_DEPTHS,
                MICRO_GROUPS,
                MICRO_IMAGE_SIDE,
                MICRO_CLASSES,
            ),
        };
        let sides = feature_sides(side);
        let stages = (0..4)
            .map(|i| StageConfig {
                depth: depths[i],
                dim: base << i,
                window_side: match variant {
                    Variant::Micro => sides[i],
                    _ => TABLE_WINDOWS[i],
                },
                groups: groups[i],
                expansion: TABLE_EXPANSION[i],
            })
            .collect();
        Self {
            variant,
            base_dim: base,
            image_side: side,
            in_channels: 3,
            stages,
            num_classes: classes,
            use_ape: false,
            gating: GatingTemplate::default(),
        }
    }

    pub fn with_gating(mut self, gating: GatingTemplate) -> Self {
        self.gating = gating;
        self
    }

    /// Changes the input resolution and picks window sides for it.
    ///
    /// Windows from the 224 layout are kept where they divide the new feature
    /// maps. At 384 the maps are 96/48/24/12 and the layout is (24, 24, 12, 12).
    /// Any other side must set windows explicitly through [`Self::with_windows`].
    pub fn with_image_side(mut self, side: usize) -> Result<Self> {
        let sides = feature_sides(side);
        let current: Vec<usize> = self.stages.iter().map(|s| s.window_side).collect();
        let windows: Vec<usize> = if side == 384 && self.variant != Variant::Micro {
            vec![24, 24, 12, 12]
        } else if self.variant == Variant::Micro {
            sides.to_vec()
        } else if current.iter().zip(&sides).all(|(&k, &s)| s > 0 && s % k == 0) {
            current
        } else {
            return Err(Error::config(format!(
                "no default window layout for image side {side}; set windows explicitly"
            )));
        };
        self.image_side = side;
        for (st, k) in self.stages.iter_mut().zip(windows) {
            st.window_side = k;
        }
        Ok(self)
    }

    pub fn with_windows(mut self, windows: [usize; 4]) -> Self {
        for (st, k) in self.stages.iter_mut().zip(windows) {
            st.window_side = k;
        }
        self
    }

    pub fn stage_gating(&self, stage: usize) -> GatingConfig {
        self.gating.for_stage(&self.stages[stage])
    }

    /// Feature-map side at the entry of each stage.
    pub fn stage_sides(&self) -> [usize; 4] {
        feature_sides(self.image_side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("class and input channel counts must be positive"));
        }
        if self.base_dim < 2 || !self.base_dim.is_multiple_of(2) {
            return Err(Error::config(format!("base dim {} must be even", self.base_dim)));
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(32) {
            return Err(Error::config(format!(
                "image side {} must be divisible by 32 (stem /4 then three /2 merges)",
                self.image_side
            )));
        }
        let sides = self.stage_sides();
        for (i, st) in self.stages.iter().enumerate() {
            if st.depth == 0 || st.expansion == 0 {
                return Err(Error::config(format!(
                    "stage {i}: depth and expansion must be positive"
                )));
            }
            if st.dim != self.base_dim << i {
                return Err(Error::config(format!(
                    "stage {i}: dim {} must equal {}",
                    st.dim,
                    self.base_dim << i
                )));
            }
            if st.window_side == 0 || !sides[i].is_multiple_of(st.window_side) {
                return Err(Error::config(format!(
                    "stage {i}: window side {} does not divide feature side {}",
                    st.window_side, sides[i]
                )));
            }
            self.stage_gating(i)
                .validate(st.hidden())
                .map_err(|e| Error::config(format!("stage {i}: {e}")))?;
        }
        Ok(())
    }
}

fn feature_sides(image_side: usize) -> [usize; 4] {
    let s = image_side / 4;
    [s, s / 2, s / 4, s / 8]
}
