//! Synthetic tracklets: a random appearance template per identity, a
//! per-tracklet brightness shift and per-frame Gaussian noise.
//!
//! A template is a stack of horizontal colour bands (a crude stand-in for
//! clothing regions) overlaid with fixed per-pixel texture, so identities
//! differ both in colour statistics and in fine structure.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Frames, Tracklet};
use crate::error::{Error, Result};
use crate::model::extractor::IMAGE_CHANNELS;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub tracklets_per_id: usize,
    pub frames_per_tracklet: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Standard deviation of the per-pixel noise. The per-tracklet
    /// brightness shift is drawn uniformly from `±noise_std / 2`.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_identities: 16,
            tracklets_per_id: 4,
            frames_per_tracklet: 16,
            image_height: 32,
            image_width: 16,
            noise_std: 0.5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("synth.num_identities", self.num_identities),
            ("synth.tracklets_per_id", self.tracklets_per_id),
            ("synth.frames_per_tracklet", self.frames_per_tracklet),
            ("synth.image_height", self.image_height),
            ("synth.image_width", self.image_width),
        ] {
            if v == 0 {
                out.push(alloc::format!("{name} must be ≥ 1"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            out.push(alloc::format!("synth.noise_std must be ≥ 0, got {}", self.noise_std));
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
}

/// Tracklets ordered by identity, then camera; camera `k` is the `k`-th
/// tracklet of its identity. Pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Tracklet>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pixels = IMAGE_CHANNELS * spec.image_height * spec.image_width;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(alloc::format!("{e}")))?;
    let half = spec.noise_std / 2.0;
    let mut out = Vec::with_capacity(spec.num_identities * spec.tracklets_per_id);
    for identity in 0..spec.num_identities {
        let template = make_template(spec, &mut rng);
        for camera in 0..spec.tracklets_per_id {
            let shift = if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
            let mut data = Vec::with_capacity(pixels * spec.frames_per_tracklet);
            for _ in 0..spec.frames_per_tracklet {
                data.extend(template.iter().map(|&p| {
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (p + shift + n).clamp(0.0, 1.0)
                }));
            }
            let shape = [spec.frames_per_tracklet, IMAGE_CHANNELS, spec.image_height, spec.image_width];
            out.push(Tracklet {
                identity,
                camera,
                frames: Frames::Images(Tensor::new(&shape, data)?),
            });
        }
    }
    Ok(out)
}

pub const TEMPLATE_BANDS: usize = 4;
pub const TEXTURE_AMPLITUDE: f64 = 0.15;

/// `[3, H, W]` template: per-band colour plus uniform texture, clamped.
fn make_template<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Vec<f64> {
    let (h, w) = (spec.image_height, spec.image_width);
    let colours: Vec<[f64; IMAGE_CHANNELS]> = (0..TEMPLATE_BANDS)
        .map(|_| core::array::from_fn(|_| rng.random::<f64>()))
        .collect();
    let mut out = Vec::with_capacity(IMAGE_CHANNELS * h * w);
    for ch in 0..IMAGE_CHANNELS {
        for y in 0..h {
            let band = y * TEMPLATE_BANDS / h;
            for _ in 0..w {
                let texture = rng.random_range(-TEXTURE_AMPLITUDE..TEXTURE_AMPLITUDE);
                out.push((colours[band][ch] + texture).clamp(0.0, 1.0));
            }
        }
    }
    out
}
