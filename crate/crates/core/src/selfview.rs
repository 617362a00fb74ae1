//! Per-view transformer: positional encoding, multi-head self-attention and
//! a position-wise feed-forward network, each wrapped in a residual
//! connection and post layer normalisation.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamTape, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::LAYER_NORM_EPS;
use crate::math;
use crate::tensor::Tensor;

/// Head layout: `channels = num_heads · head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    num_heads: usize,
    channels: usize,
}

impl HeadConfig {
    pub fn new(num_heads: usize, channels: usize) -> Result<Self> {
        if num_heads == 0 || channels == 0 || channels % num_heads != 0 {
            return Err(Error::Config(alloc::format!(
                "{channels} channels cannot be split across {num_heads} heads"
            )));
        }
        Ok(Self { num_heads, channels })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.num_heads
    }
}

pub(crate) fn init_bound(channels: usize) -> f64 {
    1.0 / math::sqrt(channels as f64)
}

/// Registers a `[N_h, C, d]` per-head projection stack.
pub(crate) fn add_head_stack<R: Rng + ?Sized>(
    tape: &mut ParamTape,
    name: alloc::string::String,
    cfg: HeadConfig,
    rng: &mut R,
) -> Result<ParamId> {
    let shape = [cfg.num_heads(), cfg.channels(), cfg.head_dim()];
    tape.add(name, Tensor::uniform(&shape, init_bound(cfg.channels()), rng))
}

/// Residual FFN parameters shared in shape by self- and cross-view blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl FfnParams {
    pub(crate) fn init<R: Rng + ?Sized>(tape: &mut ParamTape, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        let b = init_bound(c);
        Ok(Self {
            w1: tape.add(alloc::format!("{name}.ffn_w1"), Tensor::uniform(&[c, c], b, rng))?,
            w2: tape.add(alloc::format!("{name}.ffn_w2"), Tensor::uniform(&[c, c], b, rng))?,
            norm_gain: tape.add(alloc::format!("{name}.norm2_gain"), Tensor::ones(&[c]))?,
            norm_bias: tape.add(alloc::format!("{name}.norm2_bias"), Tensor::zeros(&[c]))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfViewBlockParams {
    pub q_weight: ParamId,
    pub k_weight: ParamId,
    pub v_weight: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ffn: FfnParams,
}

impl SelfViewBlockParams {
    pub fn init<R: Rng + ?Sized>(tape: &mut ParamTape, name: &str, cfg: HeadConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels();
        let q_weight = add_head_stack(tape, alloc::format!("{name}.q"), cfg, rng)?;
        let k_weight = add_head_stack(tape, alloc::format!("{name}.k"), cfg, rng)?;
        let v_weight = add_head_stack(tape, alloc::format!("{name}.v"), cfg, rng)?;
        let norm1_gain = tape.add(alloc::format!("{name}.norm1_gain"), Tensor::ones(&[c]))?;
        let norm1_bias = tape.add(alloc::format!("{name}.norm1_bias"), Tensor::zeros(&[c]))?;
        let ffn = FfnParams::init(tape, name, c, rng)?;
        Ok(Self {
            q_weight,
            k_weight,
            v_weight,
            norm1_gain,
            norm1_bias,
            ffn,
        })
    }
}

/// Trainable `L×C` table added to a view's tokens before its first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub table: ParamId,
}

impl PositionalEncoding {
    /// Zero-initialised table.
    pub fn init(tape: &mut ParamTape, name: &str, tokens: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            table: tape.add(alloc::format!("{name}.pe"), Tensor::zeros(&[tokens, channels]))?,
        })
    }
}

/// Output and per-head attention weights of a multi-head attention pass.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    pub output: Var,
    /// One `Lq×Lk` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention of `queries_from` over `keys_from`, per
/// head, with heads concatenated along channels. Projection stacks are
/// `[N_h, C, d]`.
pub fn multi_head_attention(
    g: &mut Graph,
    queries_from: Var,
    keys_from: Var,
    q_w: Var,
    k_w: Var,
    v_w: Var,
    cfg: HeadConfig,
) -> Result<AttentionNodes> {
    let (c, d) = (cfg.channels(), cfg.head_dim());
    let stack = [cfg.num_heads(), c, d];
    for w in [q_w, k_w, v_w] {
        if g.shape(w) != stack {
            return Err(dim_err("multi_head_attention", g.shape(w), &stack));
        }
    }
    for x in [queries_from, keys_from] {
        if g.shape(x).len() != 2 || g.shape(x)[1] != c {
            return Err(dim_err("multi_head_attention", g.shape(queries_from), g.shape(keys_from)));
        }
    }
    let scale = 1.0 / math::sqrt(d as f64);
    let mut heads = Vec::with_capacity(cfg.num_heads());
    let mut weights = Vec::with_capacity(cfg.num_heads());
    for h in 0..cfg.num_heads() {
        let wq = g.select0(q_w, h)?;
        let wk = g.select0(k_w, h)?;
        let wv = g.select0(v_w, h)?;
        let q = g.matmul(queries_from, wq)?;
        let k = g.matmul(keys_from, wk)?;
        let v = g.matmul(keys_from, wv)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        heads.push(g.matmul(attn, v)?);
        weights.push(attn);
    }
    let output = if heads.len() == 1 { heads[0] } else { g.concat_last(&heads)? };
    Ok(AttentionNodes { output, weights })
}

/// `LN(x + W2·relu(W1·x))`, or the bare `W2·relu(W1·x)` when `literal`.
pub fn feed_forward(g: &mut Graph, tape: &ParamTape, x: Var, p: &FfnParams, literal: bool) -> Result<Var> {
    let w1 = g.param(tape, p.w1);
    let w2 = g.param(tape, p.w2);
    let hidden = g.matmul(x, w1)?;
    let hidden = g.relu(hidden);
    let out = g.matmul(hidden, w2)?;
    if literal {
        return Ok(out);
    }
    let res = g.add(x, out)?;
    let gain = g.param(tape, p.norm_gain);
    let bias = g.param(tape, p.norm_bias);
    g.layer_norm(res, gain, bias, LAYER_NORM_EPS)
}

/// Block switches with non-standard readings of the FFN step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockOptions {
    /// Drop the residual connection and norm around the FFN.
    pub literal_ffn: bool,
}

pub fn record_mhsa(g: &mut Graph, tape: &ParamTape, x: Var, p: &SelfViewBlockParams, cfg: HeadConfig) -> Result<AttentionNodes> {
    let q = g.param(tape, p.q_weight);
    let k = g.param(tape, p.k_weight);
    let v = g.param(tape, p.v_weight);
    multi_head_attention(g, x, x, q, k, v, cfg)
}

/// One block on already position-encoded tokens.
pub fn record_block(
    g: &mut Graph,
    tape: &ParamTape,
    x: Var,
    p: &SelfViewBlockParams,
    cfg: HeadConfig,
    opts: BlockOptions,
) -> Result<Var> {
    let attn = record_mhsa(g, tape, x, p, cfg)?.output;
    let res = g.add(x, attn)?;
    let gain = g.param(tape, p.norm1_gain);
    let bias = g.param(tape, p.norm1_bias);
    let x = g.layer_norm(res, gain, bias, LAYER_NORM_EPS)?;
    feed_forward(g, tape, x, &p.ffn, opts.literal_ffn)
}

fn add_pe(g: &mut Graph, tape: &ParamTape, x: Var, pe: &PositionalEncoding) -> Result<Var> {
    let table = g.param(tape, pe.table);
    if g.shape(table) != g.shape(x) {
        return Err(dim_err("positional encoding", g.shape(table), g.shape(x)));
    }
    g.add(x, table)
}

/// A stack of blocks; the positional table, when given, is added once
/// before the first block.
pub fn record_stack(
    g: &mut Graph,
    tape: &ParamTape,
    x: Var,
    blocks: &[SelfViewBlockParams],
    pe: Option<&PositionalEncoding>,
    cfg: HeadConfig,
    opts: BlockOptions,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::Config("self-view stack needs at least one block".into()));
    }
    let mut x = match pe {
        Some(pe) => add_pe(g, tape, x, pe)?,
        None => x,
    };
    for b in blocks {
        x = record_block(g, tape, x, b, cfg, opts)?;
    }
    Ok(x)
}

pub fn multi_head_self_attention(
    tokens: &Tensor,
    tape: &ParamTape,
    params: &SelfViewBlockParams,
    cfg: HeadConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(tokens.clone());
    let out = record_mhsa(&mut g, tape, x, params, cfg)?.output;
    Ok(g.value(out).clone())
}

pub fn selfview_block(
    tokens: &Tensor,
    tape: &ParamTape,
    params: &SelfViewBlockParams,
    pe: Option<&PositionalEncoding>,
    cfg: HeadConfig,
    opts: BlockOptions,
) -> Result<Tensor> {
    selfview_stack(tokens, tape, core::slice::from_ref(params), pe, cfg, opts)
}

pub fn selfview_stack(
    tokens: &Tensor,
    tape: &ParamTape,
    blocks: &[SelfViewBlockParams],
    pe: Option<&PositionalEncoding>,
    cfg: HeadConfig,
    opts: BlockOptions,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(tokens.clone());
    let out = record_stack(&mut g, tape, x, blocks, pe, cfg, opts)?;
    Ok(g.value(out).clone())
}
