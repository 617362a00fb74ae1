//! Cross-view transformer.
//!
//! Each view `v` queries the other two views `u1`, `u2`:
//!
//! ```text
//! F_v ← LN(F_v + CA(v←u1) + CA(v←u2))
//! F_v ← LN(F_v + W4·relu(W3·F_v))
//! ```
//!
//! All three updates read the same input snapshot. Every (target, source)
//! pair has its own query projection; key/value projections are per pair
//! too unless shared across targets.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamTape, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::LAYER_NORM_EPS;
use crate::pooling::ViewFeatureSet;
use crate::selfview::{add_head_stack, feed_forward, multi_head_attention, FfnParams, HeadConfig};
use crate::tensor::Tensor;

pub const VIEW_NAMES: [&str; 3] = ["spatial", "temporal", "spatiotemporal"];

/// The two views other than `v`, in index order.
pub fn other_views(v: usize) -> [usize; 2] {
    match v {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

/// Projections for one (target, source) attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossPair {
    pub source: usize,
    pub q_weight: ParamId,
    pub k_weight: ParamId,
    pub v_weight: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossTarget {
    pub pairs: [CrossPair; 2],
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossViewBlockParams {
    pub targets: [CrossTarget; 3],
}

impl CrossViewBlockParams {
    pub fn init<R: Rng + ?Sized>(
        tape: &mut ParamTape,
        name: &str,
        cfg: HeadConfig,
        share_kv_across_targets: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels();
        let mut shared: [Option<(ParamId, ParamId)>; 3] = [None; 3];
        let mut build = |tape: &mut ParamTape, v: usize, rng: &mut R| -> Result<CrossTarget> {
            let tv = VIEW_NAMES[v];
            let mut pairs = [None, None];
            for (slot, u) in other_views(v).into_iter().enumerate() {
                let su = VIEW_NAMES[u];
                let q = add_head_stack(tape, alloc::format!("{name}.{tv}.q_from_{su}"), cfg, rng)?;
                let (k, val) = match (share_kv_across_targets, shared[u]) {
                    (true, Some(kv)) => kv,
                    (true, None) => {
                        let k = add_head_stack(tape, alloc::format!("{name}.k_{su}"), cfg, rng)?;
                        let val = add_head_stack(tape, alloc::format!("{name}.v_{su}"), cfg, rng)?;
                        shared[u] = Some((k, val));
                        (k, val)
                    }
                    (false, _) => (
                        add_head_stack(tape, alloc::format!("{name}.{tv}.k_{su}"), cfg, rng)?,
                        add_head_stack(tape, alloc::format!("{name}.{tv}.v_{su}"), cfg, rng)?,
                    ),
                };
                pairs[slot] = Some(CrossPair {
                    source: u,
                    q_weight: q,
                    k_weight: k,
                    v_weight: val,
                });
            }
            Ok(CrossTarget {
                pairs: pairs.map(Option::unwrap),
                norm1_gain: tape.add(alloc::format!("{name}.{tv}.norm1_gain"), Tensor::ones(&[c]))?,
                norm1_bias: tape.add(alloc::format!("{name}.{tv}.norm1_bias"), Tensor::zeros(&[c]))?,
                ffn: FfnParams::init(tape, &alloc::format!("{name}.{tv}"), c, rng)?,
            })
        };
        let t0 = build(tape, 0, rng)?;
        let t1 = build(tape, 1, rng)?;
        let t2 = build(tape, 2, rng)?;
        Ok(Self { targets: [t0, t1, t2] })
    }
}

/// Records `CA(target ← source)` with one pair's projections.
pub fn record_cross_attention(
    g: &mut Graph,
    tape: &ParamTape,
    target: Var,
    source: Var,
    pair: &CrossPair,
    cfg: HeadConfig,
) -> Result<crate::selfview::AttentionNodes> {
    if g.shape(target).last() != g.shape(source).last() {
        return Err(dim_err("cross_attention", g.shape(target), g.shape(source)));
    }
    let q = g.param(tape, pair.q_weight);
    let k = g.param(tape, pair.k_weight);
    let v = g.param(tape, pair.v_weight);
    multi_head_attention(g, target, source, q, k, v, cfg)
}

/// One cross-view block over the three view token sets.
pub fn record_block(
    g: &mut Graph,
    tape: &ParamTape,
    views: [Var; 3],
    params: &CrossViewBlockParams,
    cfg: HeadConfig,
    literal_ffn: bool,
) -> Result<[Var; 3]> {
    let c = g.shape(views[0]).last().copied();
    for &v in &views[1..] {
        if g.shape(v).last().copied() != c {
            return Err(dim_err("crossview_block", g.shape(views[0]), g.shape(v)));
        }
    }
    let mut out = views;
    for (v, target) in params.targets.iter().enumerate() {
        let mut acc = views[v];
        for pair in &target.pairs {
            let ca = record_cross_attention(g, tape, views[v], views[pair.source], pair, cfg)?.output;
            acc = g.add(acc, ca)?;
        }
        let gain = g.param(tape, target.norm1_gain);
        let bias = g.param(tape, target.norm1_bias);
        let x = g.layer_norm(acc, gain, bias, LAYER_NORM_EPS)?;
        out[v] = feed_forward(g, tape, x, &target.ffn, literal_ffn)?;
    }
    Ok(out)
}

pub fn record_stack(
    g: &mut Graph,
    tape: &ParamTape,
    views: [Var; 3],
    blocks: &[CrossViewBlockParams],
    cfg: HeadConfig,
    literal_ffn: bool,
) -> Result<[Var; 3]> {
    if blocks.is_empty() {
        return Err(Error::Config("cross-view stack needs at least one block".into()));
    }
    let mut views = views;
    for b in blocks {
        views = record_block(g, tape, views, b, cfg, literal_ffn)?;
    }
    Ok(views)
}

pub fn cross_attention(
    target: &Tensor,
    source: &Tensor,
    tape: &ParamTape,
    pair: &CrossPair,
    cfg: HeadConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.input(target.clone());
    let s = g.input(source.clone());
    let out = record_cross_attention(&mut g, tape, t, s, pair, cfg)?.output;
    Ok(g.value(out).clone())
}

fn run_stack(
    views: &ViewFeatureSet,
    tape: &ParamTape,
    blocks: &[CrossViewBlockParams],
    cfg: HeadConfig,
    literal_ffn: bool,
) -> Result<ViewFeatureSet> {
    let mut g = Graph::new();
    let vars = [
        g.input(views.spatial.clone()),
        g.input(views.temporal.clone()),
        g.input(views.spatiotemporal.clone()),
    ];
    let out = record_stack(&mut g, tape, vars, blocks, cfg, literal_ffn)?;
    Ok(ViewFeatureSet {
        spatial: g.value(out[0]).clone(),
        temporal: g.value(out[1]).clone(),
        spatiotemporal: g.value(out[2]).clone(),
    })
}

pub fn crossview_block(
    views: &ViewFeatureSet,
    tape: &ParamTape,
    params: &CrossViewBlockParams,
    cfg: HeadConfig,
    literal_ffn: bool,
) -> Result<ViewFeatureSet> {
    run_stack(views, tape, core::slice::from_ref(params), cfg, literal_ffn)
}

pub fn crossview_stack(
    views: &ViewFeatureSet,
    tape: &ParamTape,
    blocks: &[CrossViewBlockParams],
    cfg: HeadConfig,
    literal_ffn: bool,
) -> Result<ViewFeatureSet> {
    run_stack(views, tape, blocks, cfg, literal_ffn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::layer_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn views(counts: [usize; 3], c: usize, rng: &mut ChaCha8Rng) -> ViewFeatureSet {
        ViewFeatureSet {
            spatial: Tensor::uniform(&[counts[0], c], 1.0, rng),
            temporal: Tensor::uniform(&[counts[1], c], 1.0, rng),
            spatiotemporal: Tensor::uniform(&[counts[2], c], 1.0, rng),
        }
    }

    #[test]
    fn six_projection_families_per_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = ParamTape::new();
        let cfg = HeadConfig::new(2, 8).unwrap();
        let p = CrossViewBlockParams::init(&mut tape, "x", cfg, false, &mut rng).unwrap();
        for (v, t) in p.targets.iter().enumerate() {
            let mut ids = alloc::vec::Vec::new();
            for pair in &t.pairs {
                assert_ne!(pair.source, v);
                ids.extend([pair.q_weight, pair.k_weight, pair.v_weight]);
                assert_eq!(tape.get(pair.q_weight).shape(), &[2, 8, 4]);
            }
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 6);
        }
        // Shared K/V: the spatial source projections are reused by both targets.
        let mut tape2 = ParamTape::new();
        let s = CrossViewBlockParams::init(&mut tape2, "x", cfg, true, &mut rng).unwrap();
        assert_eq!(s.targets[1].pairs[0].k_weight, s.targets[2].pairs[0].k_weight);
        assert!(tape2.len() < tape.len());
    }

    #[test]
    fn single_source_token_broadcasts_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = ParamTape::new();
        let cfg = HeadConfig::new(2, 8).unwrap();
        let p = CrossViewBlockParams::init(&mut tape, "x", cfg, false, &mut rng).unwrap();
        let target = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        let source = Tensor::uniform(&[1, 8], 1.0, &mut rng);
        let out = cross_attention(&target, &source, &tape, &p.targets[0].pairs[0], cfg).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        for r in 1..3 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn zero_weights_reduce_to_double_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = ParamTape::new();
        let cfg = HeadConfig::new(2, 8).unwrap();
        let p = CrossViewBlockParams::init(&mut tape, "x", cfg, false, &mut rng).unwrap();
        for id in tape.ids().collect::<alloc::vec::Vec<_>>() {
            if !tape.name(id).contains("norm") {
                tape.get_mut(id).data_mut().fill(0.0);
            }
        }
        let v = views([6, 2, 12], 8, &mut rng);
        let out = crossview_block(&v, &tape, &p, cfg, false).unwrap();
        assert_eq!(out.token_counts(), [6, 2, 12]);
        let (g1, b0) = (Tensor::ones(&[8]), Tensor::zeros(&[8]));
        for (o, i) in [(&out.spatial, &v.spatial), (&out.temporal, &v.temporal), (&out.spatiotemporal, &v.spatiotemporal)] {
            let want = layer_norm(&layer_norm(i, &g1, &b0, LAYER_NORM_EPS).unwrap(), &g1, &b0, LAYER_NORM_EPS).unwrap();
            assert!(o.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = ParamTape::new();
        let cfg = HeadConfig::new(2, 8).unwrap();
        let p = CrossViewBlockParams::init(&mut tape, "x", cfg, false, &mut rng).unwrap();
        let mut v = views([2, 2, 4], 8, &mut rng);
        v.temporal = Tensor::zeros(&[2, 6]);
        assert!(matches!(crossview_block(&v, &tape, &p, cfg, false), Err(Error::Dimension { .. })));
        assert!(matches!(crossview_stack(&v, &tape, &[], cfg, false), Err(Error::Config(_))));
    }

    #[test]
    fn stack_is_repeated_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = ParamTape::new();
        let cfg = HeadConfig::new(2, 8).unwrap();
        let blocks: alloc::vec::Vec<_> = (0..3)
            .map(|i| CrossViewBlockParams::init(&mut tape, &alloc::format!("b{i}"), cfg, false, &mut rng).unwrap())
            .collect();
        let v = views([4, 3, 12], 8, &mut rng);
        let stacked = crossview_stack(&v, &tape, &blocks, cfg, false).unwrap();
        let mut step = v.clone();
        for b in &blocks {
            step = crossview_block(&step, &tape, b, cfg, false).unwrap();
        }
        assert_eq!(stacked, step);
        assert_eq!(
            crossview_stack(&v, &tape, &blocks[..1], cfg, false).unwrap(),
            crossview_block(&v, &tape, &blocks[0], cfg, false).unwrap()
        );
    }
}
