//! Small convolutional encoder standing in for a pretrained backbone.
//!
//! Two shared stride-2 convolutions reduce each frame by 4× in both spatial
//! axes; three non-shared 3×3 heads then produce the spatial, temporal and
//! spatial-temporal branch cubes.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamTape, Var};
use crate::error::{dim_err, Result};
use crate::math;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const STEM_CHANNELS: [usize; 2] = [8, 16];
/// Total spatial reduction of the stem.
pub const DOWNSAMPLE: usize = 4;
/// Fixed input standardisation applied before the first convolution.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    fn init<R: Rng + ?Sized>(tape: &mut ParamTape, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / math::sqrt((cin * KERNEL * KERNEL) as f64);
        Ok(Self {
            weight: tape.add(
                alloc::format!("{name}.weight"),
                Tensor::uniform(&[cout, cin, KERNEL, KERNEL], bound, rng),
            )?,
            bias: tape.add(alloc::format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    fn record(&self, g: &mut Graph, tape: &ParamTape, x: Var, stride: usize) -> Result<Var> {
        let w = g.param(tape, self.weight);
        let b = g.param(tape, self.bias);
        g.conv2d(x, w, b, stride, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubExtractorParams {
    pub stem: [ConvParams; 2],
    /// Spatial, temporal and spatial-temporal branch heads.
    pub branches: [ConvParams; 3],
}

impl StubExtractorParams {
    pub fn init<R: Rng + ?Sized>(tape: &mut ParamTape, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let stem = [
            ConvParams::init(tape, &alloc::format!("{name}.stem1"), IMAGE_CHANNELS, STEM_CHANNELS[0], rng)?,
            ConvParams::init(tape, &alloc::format!("{name}.stem2"), STEM_CHANNELS[0], STEM_CHANNELS[1], rng)?,
        ];
        let mut branch = |b: &str| {
            ConvParams::init(tape, &alloc::format!("{name}.branch_{b}"), STEM_CHANNELS[1], channels, rng)
        };
        let branches = [branch("spatial")?, branch("temporal")?, branch("spatiotemporal")?];
        Ok(Self { stem, branches })
    }
}

/// Output grid for an `height×width` input.
pub fn output_geometry(height: usize, width: usize) -> (usize, usize) {
    (height.div_ceil(DOWNSAMPLE), width.div_ceil(DOWNSAMPLE))
}

/// Records the encoder on a clip `[T, 3, H, W]` of values in `[0, 1]`;
/// returns the three branch cubes as `[T, H'·W', C]` nodes. The clip is
/// treated as data: no gradient flows back into it.
pub fn record_extractor(g: &mut Graph, tape: &ParamTape, clip: Var, p: &StubExtractorParams) -> Result<[Var; 3]> {
    let s = g.shape(clip).to_vec();
    if s.len() != 4 || s[1] != IMAGE_CHANNELS {
        return Err(dim_err("stub extractor", &s, &[0, IMAGE_CHANNELS, 0, 0]));
    }
    let centred = g.value(clip).map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
    let clip = g.input(centred);
    let h = p.stem[0].record(g, tape, clip, 2)?;
    let h = g.relu(h);
    let h = p.stem[1].record(g, tape, h, 2)?;
    let h = g.relu(h);
    let mut out = [h; 3];
    for (slot, branch) in out.iter_mut().zip(&p.branches) {
        let y = branch.record(g, tape, h, 1)?;
        let ys = g.shape(y).to_vec();
        let y = g.reshape(y, &[ys[0], ys[1], ys[2] * ys[3]])?;
        *slot = g.swap_axes(y, 1, 2)?;
    }
    Ok(out)
}
