//! Self-attention pooling of feature cubes into view token sets.
//!
//! Temporal pooling collapses the frame axis of a `T×HW×C` cube. For each
//! spatial location `i`, with `X_i` the `T×C` slice at that location:
//!
//! ```text
//! F_i = X_i · W                    projection
//! M_i = F_i · F_iᵀ                 T×T self-attention matrix
//! a_i = softmax_t(Σ_j M_i[t, j])   attention over frames
//! X̂_i = X_i ⊙ a_i                  each frame scaled by its weight
//! g_i = Σ_t X̂_i[t]                 pooled C-vector
//! ```
//!
//! Spatial pooling is the mirror image: per frame, attention runs over the
//! `HW` locations and the output is one token per frame.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamTape, Var};
use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// A `T×HW×C` feature volume with its spatial grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    values: Tensor,
    height: usize,
    width: usize,
}

impl FeatureCube {
    /// `values` must be `[T, height·width, C]`.
    pub fn new(values: Tensor, height: usize, width: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || height == 0 || width == 0 || s[1] != height * width {
            return Err(dim_err("FeatureCube", s, &[height, width]));
        }
        Ok(Self {
            values,
            height,
            width,
        })
    }

    /// A cube whose spatial grid is a single column of `HW` locations.
    pub fn from_flat(values: Tensor) -> Result<Self> {
        let hw = values.shape().get(1).copied().unwrap_or(0);
        Self::new(values, hw.max(1), 1)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn locations(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Frames `indices` in order, as a new cube.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let (t, hw, c) = (self.frames(), self.locations(), self.channels());
        if indices.is_empty() || indices.iter().any(|&i| i >= t) {
            return Err(Error::Contract(alloc::format!(
                "frame indices {indices:?} invalid for {t} frames"
            )));
        }
        let plane = hw * c;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.values.data()[i * plane..(i + 1) * plane]);
        }
        Self::new(Tensor::new(&[indices.len(), hw, c], data)?, self.height, self.width)
    }
}

/// Handle to the square projection `W` of one pooling branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolingParams {
    pub projection: ParamId,
}

impl PoolingParams {
    /// Registers a `C×C` projection drawn from `U[-1/√C, 1/√C]`.
    pub fn init<R: Rng + ?Sized>(tape: &mut ParamTape, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / math::sqrt(channels as f64);
        let w = Tensor::uniform(&[channels, channels], bound, rng);
        Ok(Self {
            projection: tape.add(alloc::format!("{name}.projection"), w)?,
        })
    }
}

/// Which cube axis the pooling collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    /// Attention over frames; one token per spatial location.
    Temporal,
    /// Attention over locations; one token per frame.
    Spatial,
}

/// Graph nodes produced by one pooling application. The leading axis of
/// every intermediate indexes the kept axis (locations for temporal
/// pooling, frames for spatial pooling).
#[derive(Debug, Clone, Copy)]
pub struct PoolNodes {
    pub tokens: Var,
    pub projected: Var,
    pub attention_matrix: Var,
    pub attention_vector: Var,
    pub attentive_feature: Var,
}

/// Materialised intermediates of a pooling pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingIntermediates {
    pub projected: Tensor,
    pub attention_matrix: Tensor,
    pub attention_vector: Tensor,
    pub attentive_feature: Tensor,
}

/// Records self-attention pooling of `cube` (`[T, HW, C]`) with projection
/// `w` (`[C, C]`). With `literal_sum` the pooled vector sums the
/// un-attended features, leaving the attention weights unused.
pub fn sa_pool(g: &mut Graph, cube: Var, w: Var, axis: PoolAxis, literal_sum: bool) -> Result<PoolNodes> {
    let s = g.shape(cube).to_vec();
    let c = *s.last().unwrap();
    if s.len() != 3 || g.shape(w) != [c, c] {
        return Err(dim_err("sa_pool", &s, g.shape(w)));
    }
    // Rows of `x` are the independent groups; axis 1 is attended over.
    let x = match axis {
        PoolAxis::Temporal => g.swap_axes(cube, 0, 1)?,
        PoolAxis::Spatial => cube,
    };
    let projected = g.matmul(x, w)?;
    let attention_matrix = g.matmul_nt(projected, projected)?;
    let row_sums = g.sum_axis(attention_matrix, 2)?;
    let attention_vector = g.softmax(row_sums);
    let attentive_feature = g.mul_expand_last(x, attention_vector)?;
    let summand = if literal_sum { x } else { attentive_feature };
    let tokens = g.sum_axis(summand, 1)?;
    Ok(PoolNodes {
        tokens,
        projected,
        attention_matrix,
        attention_vector,
        attentive_feature,
    })
}

fn pool_pure(cube: &FeatureCube, weight: &Tensor, axis: PoolAxis, literal_sum: bool) -> Result<(Tensor, PoolingIntermediates)> {
    let mut g = Graph::new();
    let x = g.input(cube.values().clone());
    let w = g.input(weight.clone());
    let n = sa_pool(&mut g, x, w, axis, literal_sum)?;
    Ok((
        g.value(n.tokens).clone(),
        PoolingIntermediates {
            projected: g.value(n.projected).clone(),
            attention_matrix: g.value(n.attention_matrix).clone(),
            attention_vector: g.value(n.attention_vector).clone(),
            attentive_feature: g.value(n.attentive_feature).clone(),
        },
    ))
}

/// Pools frames away: returns the `HW×C` spatial-view tokens.
pub fn temporal_sa_pool(cube: &FeatureCube, weight: &Tensor, literal_sum: bool) -> Result<(Tensor, PoolingIntermediates)> {
    pool_pure(cube, weight, PoolAxis::Temporal, literal_sum)
}

/// Pools locations away: returns the `T×C` temporal-view tokens.
pub fn spatial_sa_pool(cube: &FeatureCube, weight: &Tensor, literal_sum: bool) -> Result<(Tensor, PoolingIntermediates)> {
    pool_pure(cube, weight, PoolAxis::Spatial, literal_sum)
}

/// Token matrices of the three views. All share the channel extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatureSet {
    /// `HW×C`, one token per spatial location.
    pub spatial: Tensor,
    /// `T×C`, one token per frame.
    pub temporal: Tensor,
    /// `THW×C`, one token per (frame, location).
    pub spatiotemporal: Tensor,
}

impl ViewFeatureSet {
    pub fn channels(&self) -> usize {
        self.spatial.last_dim()
    }

    pub fn token_counts(&self) -> [usize; 3] {
        [self.spatial.rows(), self.temporal.rows(), self.spatiotemporal.rows()]
    }
}

/// The three view token sets as graph nodes, in (spatial, temporal,
/// spatiotemporal) order.
#[derive(Debug, Clone, Copy)]
pub struct ViewVars {
    pub views: [Var; 3],
}

/// Records the view construction: temporal pooling of the spatial-branch
/// cube, spatial pooling of the temporal-branch cube, and a flattening of
/// the spatial-temporal cube.
pub fn view_tokens(
    g: &mut Graph,
    cubes: [Var; 3],
    w_spatial: Var,
    w_temporal: Var,
    literal_sum: bool,
) -> Result<ViewVars> {
    let s0 = g.shape(cubes[0]).to_vec();
    for &c in &cubes[1..] {
        if g.shape(c) != s0.as_slice() {
            return Err(dim_err("make_view_features", &s0, g.shape(c)));
        }
    }
    if s0.len() != 3 {
        return Err(dim_err("make_view_features", &s0, &[]));
    }
    let spatial = sa_pool(g, cubes[0], w_spatial, PoolAxis::Temporal, literal_sum)?.tokens;
    let temporal = sa_pool(g, cubes[1], w_temporal, PoolAxis::Spatial, literal_sum)?.tokens;
    let st = g.reshape(cubes[2], &[s0[0] * s0[1], s0[2]])?;
    Ok(ViewVars {
        views: [spatial, temporal, st],
    })
}

/// View construction with plain averages in place of attention pooling:
/// the spatial view is the frame mean of the spatial-branch cube, the
/// temporal view the location mean of the temporal-branch cube.
pub fn average_view_tokens(g: &mut Graph, cubes: [Var; 3]) -> Result<ViewVars> {
    let s0 = g.shape(cubes[0]).to_vec();
    if s0.len() != 3 || cubes[1..].iter().any(|&c| g.shape(c) != s0.as_slice()) {
        return Err(dim_err("average_view_tokens", &s0, g.shape(cubes[1])));
    }
    let spatial = g.mean_axis(cubes[0], 0)?;
    let temporal = g.mean_axis(cubes[1], 1)?;
    let st = g.reshape(cubes[2], &[s0[0] * s0[1], s0[2]])?;
    Ok(ViewVars {
        views: [spatial, temporal, st],
    })
}

pub fn make_view_features(
    cubes: [&FeatureCube; 3],
    w_spatial: &Tensor,
    w_temporal: &Tensor,
    literal_sum: bool,
) -> Result<ViewFeatureSet> {
    let mut g = Graph::new();
    let vars = cubes.map(|c| g.input(c.values().clone()));
    let ws = g.input(w_spatial.clone());
    let wt = g.input(w_temporal.clone());
    let v = view_tokens(&mut g, vars, ws, wt, literal_sum)?;
    Ok(ViewFeatureSet {
        spatial: g.value(v.views[0]).clone(),
        temporal: g.value(v.views[1]).clone(),
        spatiotemporal: g.value(v.views[2]).clone(),
    })
}
