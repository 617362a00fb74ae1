//! Straight-line scalar references for the attention and pooling kernels.
//!
//! Nothing here touches `Graph`; everything is nested loops over plain
//! slices so it can serve as an independent oracle.

#![allow(dead_code)]

use tmt_core::crossview::CrossViewBlockParams;
use tmt_core::selfview::{FfnParams, SelfViewBlockParams};
use tmt_core::{ParamTape, Tensor};

pub mod properties;
pub mod retrieval;

pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-5;

pub fn to_mat(t: &Tensor) -> Mat {
    let c = t.last_dim();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + EPS).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(p, v)| v * b[p][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Head `h` of a `[N_h, C, d]` stack as a `C×d` matrix.
pub fn head(stack: &Tensor, h: usize) -> Mat {
    let (c, d) = (stack.shape()[1], stack.shape()[2]);
    (0..c)
        .map(|i| (0..d).map(|j| stack.data()[(h * c + i) * d + j]).collect())
        .collect()
}

/// Pooling intermediates for one group (location or frame).
pub struct PoolRef {
    pub projected: Mat,
    pub attention_matrix: Mat,
    pub attention_vector: Vec<f64>,
    pub attentive: Mat,
    pub pooled: Vec<f64>,
}

/// Pooling over the rows of one `n×C` group with projection `w` (`C×C`).
pub fn pool_group(x: &Mat, w: &Mat, literal_sum: bool) -> PoolRef {
    let n = x.len();
    let c = x[0].len();
    let mut f = vec![vec![0.0; c]; n];
    for t in 0..n {
        for j in 0..c {
            for k in 0..c {
                f[t][j] += x[t][k] * w[k][j];
            }
        }
    }
    let mut m = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            for j in 0..c {
                m[a][b] += f[a][j] * f[b][j];
            }
        }
    }
    let sums: Vec<f64> = (0..n).map(|a| (0..n).map(|b| m[a][b]).sum()).collect();
    let att = softmax(&sums);
    let xhat: Mat = (0..n).map(|t| x[t].iter().map(|v| v * att[t]).collect()).collect();
    let src = if literal_sum { x } else { &xhat };
    let pooled = (0..c).map(|j| (0..n).map(|t| src[t][j]).sum()).collect();
    PoolRef {
        projected: f,
        attention_matrix: m,
        attention_vector: att,
        attentive: xhat,
        pooled,
    }
}

/// Element `[t][i][c]` of a `T×HW×C` cube.
pub fn cube_at(cube: &Tensor, t: usize, i: usize, c: usize) -> f64 {
    let s = cube.shape();
    cube.data()[(t * s[1] + i) * s[2] + c]
}

/// Temporal pooling: one group per location, rows are frames.
pub fn temporal_pool(cube: &Tensor, w: &Tensor, literal_sum: bool) -> Vec<PoolRef> {
    let s = cube.shape();
    let wm = to_mat(w);
    (0..s[1])
        .map(|i| {
            let x: Mat = (0..s[0]).map(|t| (0..s[2]).map(|c| cube_at(cube, t, i, c)).collect()).collect();
            pool_group(&x, &wm, literal_sum)
        })
        .collect()
}

/// Spatial pooling: one group per frame, rows are locations.
pub fn spatial_pool(cube: &Tensor, w: &Tensor, literal_sum: bool) -> Vec<PoolRef> {
    let s = cube.shape();
    let wm = to_mat(w);
    (0..s[0])
        .map(|t| {
            let x: Mat = (0..s[1]).map(|i| (0..s[2]).map(|c| cube_at(cube, t, i, c)).collect()).collect();
            pool_group(&x, &wm, literal_sum)
        })
        .collect()
}

/// Multi-head scaled dot-product attention, heads concatenated.
pub fn attention(queries_from: &Mat, keys_from: &Mat, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Mat {
    let heads = wq.shape()[0];
    let d = wq.shape()[2];
    let lq = queries_from.len();
    let lk = keys_from.len();
    let mut out = vec![Vec::new(); lq];
    for h in 0..heads {
        let q = matmul(queries_from, &head(wq, h));
        let k = matmul(keys_from, &head(wk, h));
        let v = matmul(keys_from, &head(wv, h));
        for a in 0..lq {
            let mut scores = vec![0.0; lk];
            for b in 0..lk {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += q[a][j] * k[b][j];
                }
                scores[b] = dot / (d as f64).sqrt();
            }
            let p = softmax(&scores);
            for j in 0..d {
                let mut acc = 0.0;
                for b in 0..lk {
                    acc += p[b] * v[b][j];
                }
                out[a].push(acc);
            }
        }
    }
    out
}

pub fn ffn(tape: &ParamTape, x: &Mat, p: &FfnParams, literal: bool) -> Mat {
    let h: Mat = matmul(x, &to_mat(tape.get(p.w1)))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let o = matmul(&h, &to_mat(tape.get(p.w2)));
    if literal {
        return o;
    }
    layer_norm(&add(x, &o), tape.get(p.norm_gain).data(), tape.get(p.norm_bias).data())
}

pub fn selfview_block(tape: &ParamTape, x: &Mat, p: &SelfViewBlockParams, literal: bool) -> Mat {
    let a = attention(x, x, tape.get(p.q_weight), tape.get(p.k_weight), tape.get(p.v_weight));
    let y = layer_norm(&add(x, &a), tape.get(p.norm1_gain).data(), tape.get(p.norm1_bias).data());
    ffn(tape, &y, &p.ffn, literal)
}

pub fn crossview_block(tape: &ParamTape, views: &[Mat; 3], p: &CrossViewBlockParams, literal: bool) -> [Mat; 3] {
    let update = |v: usize| {
        let t = &p.targets[v];
        let mut acc = views[v].clone();
        for pair in &t.pairs {
            let ca = attention(
                &views[v],
                &views[pair.source],
                tape.get(pair.q_weight),
                tape.get(pair.k_weight),
                tape.get(pair.v_weight),
            );
            acc = add(&acc, &ca);
        }
        let y = layer_norm(&acc, tape.get(t.norm1_gain).data(), tape.get(t.norm1_bias).data());
        ffn(tape, &y, &t.ffn, literal)
    };
    [update(0), update(1), update(2)]
}

/// Randomises every parameter (including norm gains/biases) so that the
/// oracle comparisons do not rely on identity initialisations.
pub fn scramble(tape: &mut ParamTape, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = tape.ids().collect();
    for id in ids {
        for v in tape.get_mut(id).data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
}
