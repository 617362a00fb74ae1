//! Structural properties, each checked on one randomly drawn instance.
//!
//! Every check returns `Err` with a description instead of panicking, so
//! the same bodies serve the property-based suite and the acceptance run.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmt_core::autodiff::Graph;
use tmt_core::crossview::{self, CrossViewBlockParams};
use tmt_core::eval::{self, Labels, Protocol};
use tmt_core::kernels::{self, LAYER_NORM_EPS};
use tmt_core::model::loss::OimState;
use tmt_core::pooling::{temporal_sa_pool, FeatureCube, ViewFeatureSet};
use tmt_core::selfview::{self, feed_forward, BlockOptions, HeadConfig, SelfViewBlockParams};
use tmt_core::{ParamTape, Tensor};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const TOL: f64 = 1e-12;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let c = x.last_dim();
    let data: Vec<f64> = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    Tensor::new(&[perm.len(), c], data).unwrap()
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

/// Random labelled retrieval instance: `(distances, q ids, q cams, g ids, g cams)`.
fn instance(seed: u64, nq: usize, ng: usize) -> (Tensor, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let d = Tensor::uniform(&[nq, ng], 1.0, &mut r).map(|v| v + 1.0);
    let qi = (0..nq).map(|_| r.random_range(0..4)).collect();
    let qc = (0..nq).map(|_| r.random_range(0..3)).collect();
    let gi = (0..ng).map(|_| r.random_range(0..4)).collect();
    let gc = (0..ng).map(|_| r.random_range(0..3)).collect();
    (d, qi, qc, gi, gc)
}

pub fn softmax_rows_are_distributions(seed: u64, rows: usize, cols: usize, scale: f64) -> Check {
    let x = Tensor::uniform(&[rows, cols], scale, &mut rng(seed));
    let s = kernels::softmax(&x, 1).map_err(|e| e.to_string())?;
    for r in 0..rows {
        let row = s.row(r);
        ensure!(row.iter().all(|&v| (0.0..=1.0).contains(&v)), "row {r} leaves [0, 1]: {row:?}");
        let sum: f64 = row.iter().sum();
        ensure!((sum - 1.0).abs() < TOL, "row {r} sums to {sum}");
    }
    Ok(())
}

pub fn attention_rows_sum_to_one(seed: u64, tokens: usize, heads: usize) -> Check {
    let mut r = rng(seed);
    let cfg = HeadConfig::new(heads, 2 * heads).unwrap();
    let mut tape = ParamTape::new();
    let p = SelfViewBlockParams::init(&mut tape, "b", cfg, &mut r).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::uniform(&[tokens, cfg.channels()], 3.0, &mut r));
    let nodes = selfview::record_mhsa(&mut g, &tape, x, &p, cfg).map_err(|e| e.to_string())?;
    ensure!(nodes.weights.len() == heads, "{} weight matrices for {heads} heads", nodes.weights.len());
    for (h, w) in nodes.weights.into_iter().enumerate() {
        let a = g.value(w);
        ensure!(a.shape() == [tokens, tokens], "head {h} weights have shape {:?}", a.shape());
        for i in 0..tokens {
            let sum: f64 = a.row(i).iter().sum();
            ensure!((sum - 1.0).abs() < TOL, "head {h} row {i} sums to {sum}");
        }
    }
    Ok(())
}

pub fn cmc_is_monotone_and_bounded(seed: u64, nq: usize, ng: usize) -> Check {
    let (d, qi, qc, gi, gc) = instance(seed, nq, ng);
    let q = Labels { identities: &qi, cameras: &qc };
    let g = Labels { identities: &gi, cameras: &gc };
    for protocol in [Protocol::CrossCamera, Protocol::SingleGallery] {
        let (cmc, _) = eval::cmc_curve(&d, q, g, protocol, ng).map_err(|e| e.to_string())?;
        ensure!(cmc.windows(2).all(|w| w[0] <= w[1]), "{protocol:?} CMC decreases: {cmc:?}");
        ensure!(cmc.iter().all(|v| (0.0..=1.0).contains(v)), "{protocol:?} CMC leaves [0, 1]: {cmc:?}");
    }
    Ok(())
}

pub fn metrics_ignore_monotone_distance_transforms(seed: u64, nq: usize, ng: usize) -> Check {
    let (d, qi, qc, gi, gc) = instance(seed, nq, ng);
    let q = Labels { identities: &qi, cameras: &qc };
    let g = Labels { identities: &gi, cameras: &gc };
    let warped = d.map(|v| 3.0 * v.powi(3) + 0.25);
    let a = eval::evaluate(&d, q, g, Protocol::CrossCamera, ng).map_err(|e| e.to_string())?;
    let b = eval::evaluate(&warped, q, g, Protocol::CrossCamera, ng).map_err(|e| e.to_string())?;
    ensure!(a == b, "reports differ: {a:?} vs {b:?}");
    Ok(())
}

pub fn oim_rows_stay_unit_norm(seed: u64, ids: usize, dim: usize, steps: usize) -> Check {
    let mut r = rng(seed);
    let mut state = OimState::new(ids, dim, 0.5, 1.0 / 30.0, &mut r).unwrap();
    for _ in 0..steps {
        let label = r.random_range(0..ids);
        let mut f = Tensor::uniform(&[dim], 5.0, &mut r).into_data();
        f[0] += 1e-3;
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = f.iter().map(|v| v / n).collect();
        state.update(label, &unit).map_err(|e| e.to_string())?;
    }
    for (i, row) in state.lookup().data().chunks(dim).enumerate() {
        let sq: f64 = row.iter().map(|v| v * v).sum();
        ensure!((sq - 1.0).abs() < TOL, "row {i} has squared norm {sq}");
    }
    Ok(())
}

pub fn selfview_without_pe_is_permutation_equivariant(seed: u64, tokens: usize, depth: usize) -> Check {
    let mut r = rng(seed);
    let cfg = HeadConfig::new(2, 4).unwrap();
    let mut tape = ParamTape::new();
    let blocks: Vec<_> = (0..depth)
        .map(|i| SelfViewBlockParams::init(&mut tape, &format!("b{i}"), cfg, &mut r).unwrap())
        .collect();
    let x = Tensor::uniform(&[tokens, 4], 2.0, &mut r);
    let perm = permutation(tokens, seed ^ 1);
    let opts = BlockOptions::default();
    let y = selfview::selfview_stack(&x, &tape, &blocks, None, cfg, opts).map_err(|e| e.to_string())?;
    let yp = selfview::selfview_stack(&permute_rows(&x, &perm), &tape, &blocks, None, cfg, opts)
        .map_err(|e| e.to_string())?;
    let err = permute_rows(&y, &perm).max_abs_diff(&yp);
    ensure!(err < TOL, "permuted output differs by {err}");
    Ok(())
}

pub fn temporal_pooling_ignores_frame_order(seed: u64, frames: usize, locations: usize) -> Check {
    let mut r = rng(seed);
    let values = Tensor::uniform(&[frames, locations, 3], 1.0, &mut r);
    let w = Tensor::uniform(&[3, 3], 1.0, &mut r);
    let cube = FeatureCube::from_flat(values).unwrap();
    let shuffled = cube.select_frames(&permutation(frames, seed ^ 2)).unwrap();
    let (a, _) = temporal_sa_pool(&cube, &w, false).map_err(|e| e.to_string())?;
    let (b, _) = temporal_sa_pool(&shuffled, &w, false).map_err(|e| e.to_string())?;
    let err = a.max_abs_diff(&b);
    ensure!(err < TOL, "shuffled frames change the pooled tokens by {err}");
    Ok(())
}

pub fn cross_attention_ignores_source_order(seed: u64, lt: usize, ls: usize) -> Check {
    let mut r = rng(seed);
    let cfg = HeadConfig::new(2, 4).unwrap();
    let mut tape = ParamTape::new();
    let block = CrossViewBlockParams::init(&mut tape, "x", cfg, false, &mut r).unwrap();
    let pair = &block.targets[0].pairs[0];
    let target = Tensor::uniform(&[lt, 4], 2.0, &mut r);
    let source = Tensor::uniform(&[ls, 4], 2.0, &mut r);
    let shuffled = permute_rows(&source, &permutation(ls, seed ^ 3));
    let a = crossview::cross_attention(&target, &source, &tape, pair, cfg).map_err(|e| e.to_string())?;
    let b = crossview::cross_attention(&target, &shuffled, &tape, pair, cfg).map_err(|e| e.to_string())?;
    let err = a.max_abs_diff(&b);
    ensure!(err < TOL, "shuffled source changes the output by {err}");
    Ok(())
}

/// Every target of a cross-view block, recomputed in isolation from the
/// untouched inputs, equals the block output exactly.
pub fn crossview_updates_read_one_snapshot(seed: u64, share: bool) -> Check {
    let mut r = rng(seed);
    let cfg = HeadConfig::new(2, 4).unwrap();
    let mut tape = ParamTape::new();
    let block = CrossViewBlockParams::init(&mut tape, "x", cfg, share, &mut r).unwrap();
    let views = ViewFeatureSet {
        spatial: Tensor::uniform(&[3, 4], 1.0, &mut r),
        temporal: Tensor::uniform(&[2, 4], 1.0, &mut r),
        spatiotemporal: Tensor::uniform(&[6, 4], 1.0, &mut r),
    };
    let out = crossview::crossview_block(&views, &tape, &block, cfg, false).map_err(|e| e.to_string())?;
    let inputs = [&views.spatial, &views.temporal, &views.spatiotemporal];
    let got = [&out.spatial, &out.temporal, &out.spatiotemporal];
    for (v, target) in block.targets.iter().enumerate() {
        let mut g = Graph::new();
        let own = g.input(inputs[v].clone());
        let mut acc = own;
        for pair in &target.pairs {
            let src = g.input(inputs[pair.source].clone());
            let ca = crossview::record_cross_attention(&mut g, &tape, own, src, pair, cfg).unwrap().output;
            acc = g.add(acc, ca).unwrap();
        }
        let gain = g.param(&tape, target.norm1_gain);
        let bias = g.param(&tape, target.norm1_bias);
        let x = g.layer_norm(acc, gain, bias, LAYER_NORM_EPS).unwrap();
        let y = feed_forward(&mut g, &tape, x, &target.ffn, false).unwrap();
        ensure!(g.value(y) == got[v], "view {v} was not computed from the input snapshot");
    }
    Ok(())
}
