//! The four-stage windowed backbone and its classification head.

mod checkpoint;
mod config;
mod verify;
pub mod window;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{GatingTemplate, ModelConfig, StageConfig, Variant};
pub use verify::gradcheck_model;
pub use window::{window_partition, window_reverse, WindowMaps};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gating::GatingUnit;
use crate::param::{trunc_normal, Graph, ParamId, ParamKind, ParamStore};
use crate::tensor::{Conv2dSpec, Real, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{prefix}.weight"),
                ParamKind::Weight,
                trunc_normal(&[in_dim, out_dim], INIT_STD, rng),
            )?,
            bias: store.add(format!("{prefix}.bias"), ParamKind::Bias, Tensor::zeros(&[out_dim]))?,
            in_dim,
            out_dim,
        })
    }

    /// Applies `x W + b` over the last axis of any-rank `x`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        let rows = shape.iter().rev().skip(1).product::<usize>();
        let flat = g.tape.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.matmul(flat, w)?;
        let y = g.tape.add_broadcast(y, b)?;
        let mut out = shape;
        *out.last_mut().unwrap() = self.out_dim;
        g.tape.reshape(y, &out)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    fn build<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(
                format!("{prefix}.gain"),
                ParamKind::Norm,
                Tensor::full(&[dim], T::one()),
            )?,
            shift: store.add(format!("{prefix}.shift"), ParamKind::Norm, Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        g.tape.layer_norm(x, gain, shift)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            weight: store.add(
                format!("{prefix}.weight"),
                ParamKind::Weight,
                trunc_normal(&spec.weight_shape(), INIT_STD, rng),
            )?,
            bias: store.add(
                format!("{prefix}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[spec.out_channels]),
            )?,
            spec,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.conv2d(x, w, b, self.spec)
    }
}

/// `x + proj_out(gating(gelu(proj_in(norm(x)))))` over `[B_w, N, d]`.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub prefix: String,
    pub norm: Norm,
    pub proj_in: Linear,
    pub gating: GatingUnit<T>,
    pub proj_out: Linear,
}

impl<T: Real> Block<T> {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        stage: &StageConfig,
        gating: crate::gating::GatingConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = stage.hidden();
        let norm = Norm::build(store, &format!("{prefix}.norm"), stage.dim)?;
        let proj_in = Linear::build(store, &format!("{prefix}.proj_in"), stage.dim, hidden, rng)?;
        let gating = GatingUnit::build(store, &format!("{prefix}.gating"), gating, hidden, rng)?;
        let proj_out = Linear::build(
            store,
            &format!("{prefix}.proj_out"),
            gating.output_width(),
            stage.dim,
            rng,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            norm,
            proj_in,
            gating,
            proj_out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.proj_in.forward(g, h)?;
        let h = g.tape.gelu(h)?;
        let h = self.gating.forward(g, h)?;
        let h = self.proj_out.forward(g, h)?;
        g.tape.add(x, h)
    }

    /// Channel projections plus token-mixing parameters; LayerNorm affines excluded.
    pub fn counted_params(&self, store: &ParamStore<T>) -> usize {
        self.proj_in.param_count() + self.proj_out.param_count() + self.gating.mixing_param_count(store)
    }
}

pub fn posmlp_block_forward<T: Real>(block: &Block<T>, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    block.forward(g, x)
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub config: StageConfig,
    pub blocks: Vec<Block<T>>,
}

/// Built model: structure plus the parameter store it reads from.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    pub stem: [ConvLayer; 3],
    pub ape: Option<ParamId>,
    pub stages: Vec<Stage<T>>,
    pub merges: Vec<ConvLayer>,
    pub norm: Norm,
    pub head: Linear,
}

/// Logits together with each stage's NHWC output map.
pub struct ForwardTrace {
    pub logits: Var,
    pub stages: Vec<Var>,
}

pub fn build_model<T: Real>(config: ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::build(config, seed)
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(config, &mut rng)
    }

    pub fn build_with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config.base_dim;
        let half = c / 2;
        let stem = [
            ConvLayer::build(
                &mut store,
                "stem.0",
                Conv2dSpec::new(config.in_channels, half, 3, 2),
                rng,
            )?,
            ConvLayer::build(&mut store, "stem.1", Conv2dSpec::new(half, half, 3, 1), rng)?,
            ConvLayer::build(&mut store, "stem.2", Conv2dSpec::new(half, c, 3, 2), rng)?,
        ];
        let side = config.stage_sides()[0];
        let ape = if config.use_ape {
            Some(store.add(
                "ape",
                ParamKind::Positional,
                trunc_normal(&[side * side, c], INIT_STD, rng),
            )?)
        } else {
            None
        };
        let mut stages = Vec::with_capacity(4);
        let mut merges = Vec::with_capacity(3);
        for (si, st) in config.stages.iter().enumerate() {
            let gating = config.stage_gating(si);
            let blocks = (0..st.depth)
                .map(|bi| Block::build(&mut store, &format!("stages.{si}.blocks.{bi}"), st, gating.clone(), rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { config: *st, blocks });
            if si < 3 {
                let spec = Conv2dSpec::new(st.dim, 2 * st.dim, 3, 2).grouped(st.dim);
                merges.push(ConvLayer::build(&mut store, &format!("merges.{si}"), spec, rng)?);
            }
        }
        let last = config.stages[3].dim;
        let norm = Norm::build(&mut store, "norm", last)?;
        let head = Linear::build(&mut store, "head", last, config.num_classes, rng)?;
        Ok(Self {
            config,
            store,
            stem,
            ape,
            stages,
            merges,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.total_numel()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, &Block<T>)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(si, s)| s.blocks.iter().map(move |b| (si, b)))
    }

    /// Three 3x3 convolutions with strides 2, 1, 2 and GELU between them.
    pub fn patch_embed(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        let shape = g.tape.shape(images).to_vec();
        match shape[..] {
            [_, h, w, ch] if h % 4 == 0 && w % 4 == 0 && ch == self.config.in_channels => {}
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv_patch_embed",
                    shape,
                    reason: format!(
                        "expected [B, H, W, {}] with H and W divisible by 4",
                        self.config.in_channels
                    ),
                })
            }
        }
        let x = self.stem[0].forward(g, images)?;
        let x = g.tape.gelu(x)?;
        let x = self.stem[1].forward(g, x)?;
        let x = g.tape.gelu(x)?;
        self.stem[2].forward(g, x)
    }

    /// Depthwise 3x3 stride-2 convolution with two filters per channel.
    pub fn patch_merge(&self, g: &mut Graph<'_, T>, stage: usize, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        match shape[..] {
            [_, h, w, _] if h % 2 == 0 && w % 2 == 0 => {}
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv_patch_merge",
                    shape,
                    reason: "expected [B, h, w, d] with even h and w".into(),
                })
            }
        }
        self.merges[stage].forward(g, x)
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        let s = self.config.image_side;
        match *shape {
            [b, h, w, c] if h == s && w == s && c == self.config.in_channels && b > 0 => Ok(b),
            _ => Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![0, s, s, self.config.in_channels],
            }),
        }
    }

    pub fn forward_traced(&self, g: &mut Graph<'_, T>, images: Var) -> Result<ForwardTrace> {
        let b = self.check_images(g.tape.shape(images))?;
        let mut x = self.patch_embed(g, images)?;
        if let Some(ape) = self.ape {
            let [_, h, w, c] = <[usize; 4]>::try_from(g.tape.shape(x)).expect("rank 4");
            let tokens = g.tape.reshape(x, &[b, h * w, c])?;
            let a = g.param(ape);
            let tokens = crate::gating::apply_ape(g, tokens, a)?;
            x = g.tape.reshape(tokens, &[b, h, w, c])?;
        }
        let sides = self.config.stage_sides();
        let mut outputs = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter().enumerate() {
            let side = sides[si];
            let maps = WindowMaps::new(b, side, side, stage.config.dim, stage.config.window_side)?;
            let mut t = g.tape.gather(x, maps.partition.clone(), &maps.windows_shape)?;
            for block in &stage.blocks {
                t = block.forward(g, t)?;
            }
            x = g.tape.gather(t, maps.reverse.clone(), &maps.map_shape)?;
            outputs.push(x);
            if si < 3 {
                x = self.patch_merge(g, si, x)?;
            }
        }
        let [_, h, w, c] = <[usize; 4]>::try_from(g.tape.shape(x)).expect("rank 4");
        let tokens = g.tape.reshape(x, &[b, h * w, c])?;
        let tokens = self.norm.forward(g, tokens)?;
        let pooled = g.tape.mean_tokens(tokens)?;
        let logits = self.head.forward(g, pooled)?;
        Ok(ForwardTrace {
            logits,
            stages: outputs,
        })
    }

    /// `images`: `[B, H, W, C_in]`. Returns `[B, num_classes]` logits.
    pub fn forward(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        Ok(self.forward_traced(g, images)?.logits)
    }

    /// Inference without gradient bookkeeping on parameters.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(images.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn stage_outputs(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(images.clone());
        let trace = self.forward_traced(&mut g, x)?;
        Ok(trace.stages.iter().map(|&v| g.value(v).clone()).collect())
    }
}
