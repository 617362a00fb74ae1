//! Tracklets, restricted random sampling, identity-disjoint splits, the
//! synthetic generator and the feature-cube codec.

pub mod codec;
pub mod synth;

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ClipInput;
use crate::pooling::FeatureCube;
use crate::tensor::Tensor;

/// Frame storage of one tracklet.
#[derive(Debug, Clone, PartialEq)]
pub enum Frames {
    /// `[T_total, channels, H, W]` with values in `[0, 1]`.
    Images(Tensor),
    /// Precomputed branch cubes sharing `T_total`.
    Cubes([FeatureCube; 3]),
}

impl Frames {
    pub fn len(&self) -> usize {
        match self {
            Self::Images(t) => t.shape()[0],
            Self::Cubes(c) => c[0].frames(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub identity: usize,
    pub camera: usize,
    pub frames: Frames,
}

impl Tracklet {
    /// The clip made of the frames at `indices`, in that order.
    pub fn clip(&self, indices: &[usize]) -> Result<ClipInput> {
        let n = self.frames.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(alloc::format!("frame {bad} out of range for {n} frames")));
        }
        match &self.frames {
            Frames::Images(t) => {
                let per = t.numel() / n;
                let mut data = Vec::with_capacity(per * indices.len());
                for &i in indices {
                    data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = indices.len();
                Ok(ClipInput::Frames(Tensor::new(&shape, data)?))
            }
            Frames::Cubes(c) => Ok(ClipInput::Cubes([
                c[0].select_frames(indices)?,
                c[1].select_frames(indices)?,
                c[2].select_frames(indices)?,
            ])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// One uniformly drawn frame per chunk.
    Train,
    /// The first frame of every chunk.
    Test,
}

/// Frame indices chosen by restricted random sampling.
///
/// Tracklets shorter than `t` are first extended cyclically to `t` frames.
/// The (extended) frame list is cut into `t` chunks of `⌊n/t⌋` frames, the
/// last chunk absorbing the remainder, and one frame is taken per chunk.
pub fn rrs_indices<R: Rng + ?Sized>(total: usize, t: usize, mode: SampleMode, rng: &mut R) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::Contract("cannot sample from an empty tracklet".into()));
    }
    if t == 0 {
        return Err(Error::Config("clip length must be ≥ 1".into()));
    }
    let n = total.max(t);
    let chunk = n / t;
    Ok((0..t)
        .map(|k| {
            let start = k * chunk;
            let len = if k + 1 == t { n - start } else { chunk };
            let pos = match mode {
                SampleMode::Test => start,
                SampleMode::Train => start + rng.random_range(0..len),
            };
            pos % total
        })
        .collect())
}

pub fn rrs_sample<R: Rng + ?Sized>(tracklet: &Tracklet, t: usize, mode: SampleMode, rng: &mut R) -> Result<ClipInput> {
    let idx = rrs_indices(tracklet.frames.len(), t, mode, rng)?;
    tracklet.clip(&idx)
}

/// Identity-disjoint train/test partition with a query/gallery division of
/// the test half.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Training tracklets with identities relabelled to `0..num_train_ids`.
    pub train: Vec<Tracklet>,
    pub num_train_ids: usize,
    /// One tracklet per test identity (its lowest camera).
    pub query: Vec<Tracklet>,
    /// Remaining test tracklets.
    pub gallery: Vec<Tracklet>,
}

/// Sorts the distinct identities; the first half (rounded up) trains, the
/// rest are held out. For each held-out identity the tracklet with the
/// lowest camera (first in input order on ties) becomes the query.
pub fn holdout_split(tracklets: &[Tracklet]) -> Result<Split> {
    let mut by_id: BTreeMap<usize, Vec<&Tracklet>> = BTreeMap::new();
    for t in tracklets {
        by_id.entry(t.identity).or_default().push(t);
    }
    if by_id.len() < 2 {
        return Err(Error::Contract(alloc::format!(
            "a held-out split needs at least two identities, found {}",
            by_id.len()
        )));
    }
    let n_train = by_id.len().div_ceil(2);
    let mut split = Split {
        train: Vec::new(),
        num_train_ids: n_train,
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for (rank, (_, group)) in by_id.into_iter().enumerate() {
        if rank < n_train {
            for t in group {
                split.train.push(Tracklet {
                    identity: rank,
                    ..t.clone()
                });
            }
        } else {
            let q = (0..group.len()).min_by_key(|&i| (group[i].camera, i)).unwrap();
            for (i, t) in group.into_iter().enumerate() {
                if i == q {
                    split.query.push(t.clone());
                } else {
                    split.gallery.push(t.clone());
                }
            }
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn rrs_examples() {
        let mut r = rng();
        assert_eq!(rrs_indices(8, 8, SampleMode::Test, &mut r).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(
            rrs_indices(16, 8, SampleMode::Test, &mut r).unwrap(),
            alloc::vec![0, 2, 4, 6, 8, 10, 12, 14]
        );
        assert_eq!(
            rrs_indices(3, 8, SampleMode::Test, &mut r).unwrap(),
            alloc::vec![0, 1, 2, 0, 1, 2, 0, 1]
        );
        assert!(matches!(rrs_indices(0, 4, SampleMode::Test, &mut r), Err(Error::Contract(_))));
    }

    #[test]
    fn rrs_train_mode_one_frame_per_chunk() {
        let mut r = rng();
        for total in [5usize, 8, 11, 17, 40] {
            for t in [1usize, 3, 4, 8] {
                if total < t {
                    continue;
                }
                let chunk = total / t;
                for _ in 0..50 {
                    let idx = rrs_indices(total, t, SampleMode::Train, &mut r).unwrap();
                    assert_eq!(idx.len(), t);
                    for (k, &i) in idx.iter().enumerate() {
                        let hi = if k + 1 == t { total } else { (k + 1) * chunk };
                        assert!(i >= k * chunk && i < hi);
                    }
                    assert!(idx.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    fn dummy(identity: usize, camera: usize) -> Tracklet {
        Tracklet {
            identity,
            camera,
            frames: Frames::Images(Tensor::full(&[2, 1, 1, 1], identity as f64)),
        }
    }

    #[test]
    fn split_is_identity_disjoint() {
        let ts: Vec<Tracklet> = (0..5).flat_map(|id| (0..3).map(move |c| dummy(10 + id, 2 - c))).collect();
        let s = holdout_split(&ts).unwrap();
        assert_eq!(s.num_train_ids, 3);
        assert_eq!(s.train.len(), 9);
        assert!(s.train.iter().all(|t| t.identity < 3));
        assert_eq!(s.query.len(), 2);
        assert!(s.query.iter().all(|t| t.camera == 0));
        assert_eq!(s.gallery.len(), 4);
        assert!(s.gallery.iter().all(|t| t.identity >= 13 && t.camera > 0));
    }

    #[test]
    fn clip_selects_frames() {
        let t = Tracklet {
            identity: 0,
            camera: 0,
            frames: Frames::Images(Tensor::new(&[3, 1, 1, 2], alloc::vec![0., 1., 2., 3., 4., 5.]).unwrap()),
        };
        match t.clip(&[2, 0]).unwrap() {
            ClipInput::Frames(x) => assert_eq!(x.data(), &[4., 5., 0., 1.]),
            _ => unreachable!(),
        }
        assert!(t.clip(&[3]).is_err());
    }
}
