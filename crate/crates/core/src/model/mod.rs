//! The assembled model: encoder (or ingested cubes) → pooling → per-view
//! self-attention stacks → cross-view stack → per-view token means.

pub mod extractor;
pub mod loss;
pub mod optim;
pub mod train;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamTape, Var};
use crate::crossview::{self, CrossViewBlockParams, VIEW_NAMES};
use crate::error::{Error, Result};
use crate::pooling::{self, FeatureCube, PoolingParams, ViewFeatureSet};
use crate::selfview::{self, BlockOptions, HeadConfig, PositionalEncoding, SelfViewBlockParams};
use crate::tensor::Tensor;

use extractor::StubExtractorParams;
use loss::OimState;

/// What the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputGeometry {
    /// RGB frames `[T, 3, height, width]` fed through the stub encoder.
    Images { height: usize, width: usize },
    /// Three precomputed `[T, height·width, C]` branch cubes.
    Cubes { height: usize, width: usize },
}

impl InputGeometry {
    /// Default image input (32×16), or the 64×32 variant that keeps twice
    /// the spatial resolution after the encoder.
    pub fn images(hi_res: bool) -> Self {
        if hi_res {
            Self::Images { height: 64, width: 32 }
        } else {
            Self::Images { height: 32, width: 16 }
        }
    }

    /// Spatial grid of the feature cubes.
    pub fn feature_grid(&self) -> (usize, usize) {
        match *self {
            Self::Images { height, width } => extractor::output_geometry(height, width),
            Self::Cubes { height, width } => (height, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip.
    pub frames: usize,
    pub channels: usize,
    pub num_heads: usize,
    pub depth_self: usize,
    pub depth_cross: usize,
    pub input: InputGeometry,
    pub use_pe: bool,
    /// Self-attention pooling of the spatial and temporal branches; when
    /// disabled both are plainly averaged over the collapsed axis.
    pub attention_pooling: bool,
    /// Disable to drop the self-view stacks entirely.
    pub use_selfview: bool,
    /// Disable to drop the cross-view stack entirely.
    pub use_crossview: bool,
    pub share_kv_across_targets: bool,
    /// Pool the raw rather than the attention-weighted features.
    pub literal_pool_sum: bool,
    /// Self-view FFN without its residual connection and norm.
    pub literal_self_ffn: bool,
    /// Cross-view FFN without its residual connection and norm.
    pub literal_cross_ffn: bool,
    pub oim_temperature: f64,
    pub oim_momentum: f64,
    /// Extra identity loss on every temporal-view token before fusion.
    pub frame_oim: bool,
    /// Initial slope and offset of the verification logit.
    pub verify_scale_init: f64,
    pub verify_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 64,
            num_heads: 2,
            depth_self: 2,
            depth_cross: 2,
            input: InputGeometry::images(false),
            use_pe: true,
            attention_pooling: true,
            use_selfview: true,
            use_crossview: true,
            share_kv_across_targets: false,
            literal_pool_sum: false,
            literal_self_ffn: false,
            literal_cross_ffn: false,
            oim_temperature: loss::DEFAULT_OIM_TEMPERATURE,
            oim_momentum: loss::DEFAULT_OIM_MOMENTUM,
            frame_oim: false,
            verify_scale_init: 10.0,
            verify_bias_init: -5.0,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<alloc::string::String> {
        let mut out = Vec::new();
        if self.frames == 0 {
            out.push("model.frames must be ≥ 1".into());
        }
        if self.channels == 0 {
            out.push("model.channels must be ≥ 1".into());
        }
        if self.num_heads == 0 || (self.channels > 0 && self.channels % self.num_heads != 0) {
            out.push(format!(
                "model.num_heads = {} must divide model.channels = {}",
                self.num_heads, self.channels
            ));
        }
        if self.use_selfview && self.depth_self == 0 {
            out.push("model.depth_self must be ≥ 1 when the self-view stacks are enabled".into());
        }
        if self.use_crossview && self.depth_cross == 0 {
            out.push("model.depth_cross must be ≥ 1 when the cross-view stack is enabled".into());
        }
        if self.literal_pool_sum && !self.attention_pooling {
            out.push("model.literal_pool_sum has no effect without attention pooling".into());
        }
        let (h, w) = match self.input {
            InputGeometry::Images { height, width } | InputGeometry::Cubes { height, width } => (height, width),
        };
        if h == 0 || w == 0 {
            out.push(format!("model.input must have positive extents, got {h}×{w}"));
        }
        if !(self.oim_temperature > 0.0 && self.oim_temperature.is_finite()) {
            out.push(format!("model.oim_temperature must be > 0, got {}", self.oim_temperature));
        }
        if !(self.oim_momentum > 0.0 && self.oim_momentum < 1.0) {
            out.push(format!("model.oim_momentum must lie in (0, 1), got {}", self.oim_momentum));
        }
        if !self.verify_scale_init.is_finite() || !self.verify_bias_init.is_finite() {
            out.push("model.verify_scale_init and verify_bias_init must be finite".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        HeadConfig::new(self.num_heads, self.channels)
    }

    /// Token counts of the (spatial, temporal, spatiotemporal) views.
    pub fn token_counts(&self) -> [usize; 3] {
        let (h, w) = self.input.feature_grid();
        [h * w, self.frames, self.frames * h * w]
    }
}

/// One clip presented to the model.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipInput {
    /// `[T, 3, H, W]` frames in `[0, 1]`.
    Frames(Tensor),
    /// Spatial-, temporal- and spatial-temporal-branch cubes.
    Cubes([FeatureCube; 3]),
}

impl ClipInput {
    pub fn frames(&self) -> usize {
        match self {
            Self::Frames(t) => t.shape()[0],
            Self::Cubes(c) => c[0].frames(),
        }
    }
}

/// Identity tables for every supervised head.
#[derive(Debug, Clone, PartialEq)]
pub struct OimHeads {
    /// Spatial, temporal, spatiotemporal descriptors.
    pub views: [OimState; 3],
    /// Concatenated descriptor.
    pub concat: OimState,
    /// Pooled encoder branches (image input only).
    pub branches: Option<[OimState; 3]>,
    /// Temporal-view tokens before fusion (when enabled).
    pub frame: Option<OimState>,
}

impl OimHeads {
    /// `(name, table)` for every table, in a fixed order.
    pub fn named(&self) -> Vec<(alloc::string::String, &OimState)> {
        let mut out = Vec::new();
        for (n, s) in VIEW_NAMES.iter().zip(&self.views) {
            out.push((format!("oim.{n}"), s));
        }
        out.push(("oim.concat".into(), &self.concat));
        if let Some(b) = &self.branches {
            for (n, s) in VIEW_NAMES.iter().zip(b) {
                out.push((format!("oim.branch_{n}"), s));
            }
        }
        if let Some(f) = &self.frame {
            out.push(("oim.frame".into(), f));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(alloc::string::String, &mut OimState)> {
        let mut out = Vec::new();
        for (n, s) in VIEW_NAMES.iter().zip(&mut self.views) {
            out.push((format!("oim.{n}"), s));
        }
        out.push(("oim.concat".into(), &mut self.concat));
        if let Some(b) = &mut self.branches {
            for (n, s) in VIEW_NAMES.iter().zip(b) {
                out.push((format!("oim.branch_{n}"), s));
            }
        }
        if let Some(f) = &mut self.frame {
            out.push(("oim.frame".into(), f));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmtModel {
    config: ModelConfig,
    heads: HeadConfig,
    pub tape: ParamTape,
    pub extractor: Option<StubExtractorParams>,
    /// Absent when attention pooling is disabled.
    pub pool_spatial: Option<PoolingParams>,
    pub pool_temporal: Option<PoolingParams>,
    /// Per view; empty when the self-view stacks are disabled.
    pub self_stacks: [Vec<SelfViewBlockParams>; 3],
    pub positional: [Option<PositionalEncoding>; 3],
    /// Empty when the cross-view stack is disabled.
    pub cross_stack: Vec<CrossViewBlockParams>,
    pub verify_scale: ParamId,
    pub verify_bias: ParamId,
    pub oim: OimHeads,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    /// Encoder branch cubes `[T, HW, C]` (image input only).
    pub branch_cubes: Option<[Var; 3]>,
    /// View tokens straight after pooling.
    pub pooled: [Var; 3],
    /// View tokens after the self-view stacks.
    pub refined: [Var; 3],
    /// View tokens after the cross-view stack.
    pub fused: [Var; 3],
    /// Per-view token means, each `[C]`.
    pub means: [Var; 3],
    /// `[3C]` concatenation of `means`.
    pub descriptor: Var,
}

/// Retrieval descriptor of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub spatial: Tensor,
    pub temporal: Tensor,
    pub spatiotemporal: Tensor,
    /// `[spatial | temporal | spatiotemporal]`.
    pub concatenated: Tensor,
}

impl TmtModel {
    /// Fresh model with all parameters and identity tables drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, num_identities: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let heads = config.head_config()?;
        let c = config.channels;
        let mut tape = ParamTape::new();
        let extractor = match config.input {
            InputGeometry::Images { .. } => Some(StubExtractorParams::init(&mut tape, "extractor", c, rng)?),
            InputGeometry::Cubes { .. } => None,
        };
        let (pool_spatial, pool_temporal) = if config.attention_pooling {
            (
                Some(PoolingParams::init(&mut tape, "pool_spatial", c, rng)?),
                Some(PoolingParams::init(&mut tape, "pool_temporal", c, rng)?),
            )
        } else {
            (None, None)
        };
        let counts = config.token_counts();
        let mut self_stacks: [Vec<SelfViewBlockParams>; 3] = Default::default();
        let mut positional = [None; 3];
        if config.use_selfview {
            for v in 0..3 {
                let name = format!("self_{}", VIEW_NAMES[v]);
                if config.use_pe {
                    positional[v] = Some(PositionalEncoding::init(&mut tape, &name, counts[v], c)?);
                }
                for d in 0..config.depth_self {
                    self_stacks[v].push(SelfViewBlockParams::init(&mut tape, &format!("{name}.b{d}"), heads, rng)?);
                }
            }
        }
        let mut cross_stack = Vec::new();
        if config.use_crossview {
            for d in 0..config.depth_cross {
                cross_stack.push(CrossViewBlockParams::init(
                    &mut tape,
                    &format!("cross.b{d}"),
                    heads,
                    config.share_kv_across_targets,
                    rng,
                )?);
            }
        }
        let verify_scale = tape.add("verify.scale", Tensor::scalar(config.verify_scale_init))?;
        let verify_bias = tape.add("verify.bias", Tensor::scalar(config.verify_bias_init))?;

        let (tau, gamma) = (config.oim_temperature, config.oim_momentum);
        let mut table = |dim: usize| OimState::new(num_identities, dim, gamma, tau, rng);
        let views = [table(c)?, table(c)?, table(c)?];
        let concat = table(3 * c)?;
        let branches = match extractor {
            Some(_) => Some([table(c)?, table(c)?, table(c)?]),
            None => None,
        };
        let frame = if config.frame_oim { Some(table(c)?) } else { None };
        Ok(Self {
            config,
            heads,
            tape,
            extractor,
            pool_spatial,
            pool_temporal,
            self_stacks,
            positional,
            cross_stack,
            verify_scale,
            verify_bias,
            oim: OimHeads {
                views,
                concat,
                branches,
                frame,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_config(&self) -> HeadConfig {
        self.heads
    }

    pub fn num_identities(&self) -> usize {
        self.oim.concat.num_identities()
    }

    /// Checks that `input` matches the configured path and geometry.
    pub fn check_input(&self, input: &ClipInput) -> Result<()> {
        let finite = match input {
            ClipInput::Frames(x) => x.all_finite(),
            ClipInput::Cubes(c) => c.iter().all(|c| c.values().all_finite()),
        };
        if !finite {
            return Err(Error::Contract("clip contains non-finite values".into()));
        }
        let t = input.frames();
        if self.config.use_pe && self.config.use_selfview && t != self.config.frames {
            return Err(Error::Contract(format!(
                "clip has {t} frames but the positional tables expect {}",
                self.config.frames
            )));
        }
        match (&self.config.input, input) {
            (InputGeometry::Images { height, width }, ClipInput::Frames(x)) => {
                let want = [t, extractor::IMAGE_CHANNELS, *height, *width];
                if x.shape() != want {
                    return Err(crate::error::dim_err("clip frames", x.shape(), &want));
                }
            }
            (InputGeometry::Cubes { height, width }, ClipInput::Cubes(cubes)) => {
                for cube in cubes {
                    let got = [cube.frames(), cube.height(), cube.width(), cube.channels()];
                    let want = [t, *height, *width, self.config.channels];
                    if got != want {
                        return Err(crate::error::dim_err("feature cube", &got, &want));
                    }
                }
            }
            (InputGeometry::Images { .. }, ClipInput::Cubes(_)) => {
                return Err(Error::Contract("model expects image frames but received feature cubes".into()));
            }
            (InputGeometry::Cubes { .. }, ClipInput::Frames(_)) => {
                return Err(Error::Contract("model expects feature cubes but received image frames".into()));
            }
        }
        Ok(())
    }

    /// Records the forward pass, reading parameter values from `tape`
    /// (which must share this model's layout).
    pub fn record_forward(&self, g: &mut Graph, tape: &ParamTape, input: &ClipInput) -> Result<ForwardNodes> {
        self.check_input(input)?;
        let (cubes, branch_cubes) = match (input, &self.extractor) {
            (ClipInput::Frames(x), Some(ex)) => {
                let x = g.input(x.clone());
                let c = extractor::record_extractor(g, tape, x, ex)?;
                (c, Some(c))
            }
            (ClipInput::Cubes(c), _) => {
                let [a, b, s] = c;
                (
                    [
                        g.input(a.values().clone()),
                        g.input(b.values().clone()),
                        g.input(s.values().clone()),
                    ],
                    None,
                )
            }
            (ClipInput::Frames(_), None) => unreachable!("check_input rejects frames without an encoder"),
        };
        let pooled = match (&self.pool_spatial, &self.pool_temporal) {
            (Some(ps), Some(pt)) => {
                let ws = g.param(tape, ps.projection);
                let wt = g.param(tape, pt.projection);
                pooling::view_tokens(g, cubes, ws, wt, self.config.literal_pool_sum)?.views
            }
            _ => pooling::average_view_tokens(g, cubes)?.views,
        };

        let mut refined = pooled;
        if self.config.use_selfview {
            let opts = BlockOptions {
                literal_ffn: self.config.literal_self_ffn,
            };
            for v in 0..3 {
                refined[v] = selfview::record_stack(
                    g,
                    tape,
                    pooled[v],
                    &self.self_stacks[v],
                    self.positional[v].as_ref(),
                    self.heads,
                    opts,
                )?;
            }
        }
        let fused = if self.config.use_crossview {
            crossview::record_stack(g, tape, refined, &self.cross_stack, self.heads, self.config.literal_cross_ffn)?
        } else {
            refined
        };
        let means = [
            g.mean_axis(fused[0], 0)?,
            g.mean_axis(fused[1], 0)?,
            g.mean_axis(fused[2], 0)?,
        ];
        let descriptor = g.concat_last(&means)?;
        Ok(ForwardNodes {
            branch_cubes,
            pooled,
            refined,
            fused,
            means,
            descriptor,
        })
    }

    /// Fused view tokens and the descriptor of one clip.
    pub fn forward(&self, input: &ClipInput) -> Result<(ViewFeatureSet, Descriptor)> {
        let mut g = Graph::new();
        let n = self.record_forward(&mut g, &self.tape, input)?;
        let views = ViewFeatureSet {
            spatial: g.value(n.fused[0]).clone(),
            temporal: g.value(n.fused[1]).clone(),
            spatiotemporal: g.value(n.fused[2]).clone(),
        };
        let desc = Descriptor {
            spatial: g.value(n.means[0]).clone(),
            temporal: g.value(n.means[1]).clone(),
            spatiotemporal: g.value(n.means[2]).clone(),
            concatenated: g.value(n.descriptor).clone(),
        };
        Ok((views, desc))
    }
}

/// Full pipeline for one clip: views after fusion and the descriptor.
pub fn trigeminal_forward(input: &ClipInput, model: &TmtModel) -> Result<(ViewFeatureSet, Descriptor)> {
    model.forward(input)
}
