//! Reverse-mode differentiation over a recorded graph.
//!
//! A [`Graph`] is a Wengert list: every kernel application appends a node
//! holding its forward value and enough saved state to compute its
//! vector-Jacobian product. Nodes are appended in evaluation order, so a
//! reverse sweep over the node list is a valid topological order.
//!
//! Learnable tensors live in a [`ParamTape`]. Binding a parameter into a
//! graph copies its current value into a leaf node; [`Graph::backward`]
//! accumulates `∂loss/∂param` into the tape's gradient slots.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, gemm};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameters with same-shaped gradient slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTape {
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(alloc::format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.names.push(name);
        self.params.push(value);
        self.grads.push(grad);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].shape() {
            return Err(dim_err("ParamTape::set", self.params[id.0].shape(), value.shape()));
        }
        self.params[id.0] = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulExpandLast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAxis { x: Var, axis: usize },
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    Select0 { x: Var, index: usize },
    Stack(Vec<Var>),
    Reshape(Var),
    SwapAxes { x: Var, a0: usize, a1: usize },
    SumAll(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    L2Normalize { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    BceWithLogits { z: Var, target: bool },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a tape parameter. Binding the same id twice returns the same
    /// node so gradients from every use are summed.
    pub fn param(&mut self, tape: &ParamTape, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(tape.get(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// `a · b` (or `a · bᵀ` with `trans_b`). `a` may carry leading batch
    /// axes; a rank-2 `b` is shared across them, a rank-3 `b` is batched
    /// alongside a rank-3 `a`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || dim_err("matmul", &sa, &sb);
        let k = *sa.last().unwrap();
        let value = match sb.len() {
            2 => {
                let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if bk != k || sa.len() < 2 {
                    return Err(bad());
                }
                let rows = self.value(a).rows();
                let mut out = vec![0.0; rows * n];
                gemm(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n, false, trans_b);
                let mut shape = sa.clone();
                *shape.last_mut().unwrap() = n;
                Tensor::from_parts(shape, out)
            }
            3 => {
                let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa.len() != 3 || sa[0] != sb[0] || bk != k {
                    return Err(bad());
                }
                let (batch, m) = (sa[0], sa[1]);
                let mut out = vec![0.0; batch * m * n];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                for bi in 0..batch {
                    gemm(
                        &ad[bi * m * k..(bi + 1) * m * k],
                        &bd[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                        false,
                        trans_b,
                    );
                }
                Tensor::from_parts(vec![batch, m, n], out)
            }
            _ => return Err(bad()),
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product of same-shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Adds a `[C]` vector to every token of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut v = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bd) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(v, Op::AddBias(x, bias), ng))
    }

    /// Scales every token `x[r, :]` by the scalar `w[r]`, where `w` has the
    /// shape of `x` without its last axis.
    pub fn mul_expand_last(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x);
        let lead = if sx.len() == 1 { &[1usize][..] } else { &sx[..sx.len() - 1] };
        if self.value(w).numel() != lead.iter().product::<usize>()
            || (self.shape(w) != lead && !(sx.len() == 1 && self.shape(w) == [1]))
        {
            return Err(dim_err("mul_expand_last", sx, self.shape(w)));
        }
        let c = self.value(x).last_dim();
        let mut v = self.value(x).clone();
        let wd = self.value(w).data().to_vec();
        for (row, s) in v.data_mut().chunks_mut(c).zip(&wd) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(v, Op::MulExpandLast(x, w), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = kernels::relu(self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let n = v.last_dim();
        kernels::softmax_rows(v.data_mut(), n);
        let ng = self.needs(x);
        self.push(v, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Config(alloc::format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (xhat, inv_std) = kernels::standardize_rows(self.value(x).data(), c, eps);
        let mut y = xhat.clone();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        for row in y.chunks_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(gd).zip(bd) {
                *v = *v * g + b;
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), y);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Sums out one axis. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("sum_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x, axis }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).last_dim();
        if len == 0 || start + len > c {
            return Err(dim_err("slice_last", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = src
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceLast { x, start }, ng))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_last of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat_last", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(parts.to_vec()), ng))
    }

    /// `x[index]` along the leading axis.
    pub fn select0(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(dim_err("select0", &shape, &[index]));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape[1..].to_vec(), out), Op::Select0 { x, index }, ng))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let s0 = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(first).numel());
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(dim_err("stack", &s0, self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s0);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Stack(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn swap_axes(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let shape = self.shape(x);
        if a0 >= shape.len() || a1 >= shape.len() {
            return Err(dim_err("swap_axes", shape, &[a0, a1]));
        }
        let v = swap_axes_value(self.value(x), a0, a1);
        let ng = self.needs(x);
        Ok(self.push(v, Op::SwapAxes { x, a0, a1 }, ng))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(dim_err("transpose", self.shape(x), &[]));
        }
        self.swap_axes(x, 0, 1)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::SumAll(x), ng)
    }

    /// 2-D convolution with square kernels, symmetric zero padding and a
    /// per-output-channel bias. `x` is `[Cin, H, W]` or `[N, Cin, H, W]`;
    /// `w` is `[Cout, Cin, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, cin, h, wd) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(dim_err("conv2d", &sx, &sw)),
        };
        if sw.len() != 4 || sw[1] != cin || sw[2] != sw[3] || stride == 0 {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let (cout, k) = (sw[0], sw[2]);
        if self.shape(b) != [cout] || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(dim_err("conv2d", &sw, self.shape(b)));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let out = conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let shape = if sx.len() == 3 {
            vec![cout, geom.ho, geom.wo]
        } else {
            vec![n, cout, geom.ho, geom.wo]
        };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Scales every row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for row in v.data_mut().chunks_mut(c) {
            let nrm = math::sqrt(row.iter().map(|a| a * a).sum());
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::Contract(alloc::format!(
                    "cannot normalise a vector with norm {nrm}"
                )));
            }
            for a in row.iter_mut() {
                *a /= nrm;
            }
            norms.push(nrm);
        }
        let ng = self.needs(x);
        Ok(self.push(v, Op::L2Normalize { x, norms }, ng))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        if self.value(logits).rows() != 1 {
            return Err(dim_err("cross_entropy", self.shape(logits), &[1, n]));
        }
        if label >= n {
            return Err(Error::Contract(alloc::format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_rows(&mut probs, n);
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(z.iter().map(|v| math::exp(v - max)).sum());
        let loss = lse - z[label];
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, ng))
    }

    /// Binary cross-entropy on a scalar logit: `-log σ(z)` when `target`,
    /// else `-log(1-σ(z))`.
    pub fn bce_with_logits(&mut self, z: Var, target: bool) -> Result<Var> {
        if !self.value(z).is_scalar() {
            return Err(dim_err("bce_with_logits", self.shape(z), &[1]));
        }
        let zv = self.value(z).item();
        let loss = if target { math::softplus(-zv) } else { math::softplus(zv) };
        let ng = self.needs(z);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { z, target }, ng))
    }

    /// Accumulates `∂loss/∂param` for every bound parameter into `tape`.
    pub fn backward(&self, loss: Var, tape: &mut ParamTape) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, tape);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], tape: &mut ParamTape) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = tape.grad_mut(*id);
                debug_assert_eq!(slot.shape(), g.shape());
                slot.add_assign(g);
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = va.last_dim();
                if vb.rank() == 2 {
                    let rows = va.rows();
                    let n = g.last_dim();
                    if self.needs(*a) {
                        let mut da = vec![0.0; va.numel()];
                        gemm(gd, vb.data(), &mut da, rows, n, k, false, !trans_b);
                        acc(*a, Tensor::from_parts(va.shape().to_vec(), da));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; vb.numel()];
                        if *trans_b {
                            gemm(gd, va.data(), &mut db, n, rows, k, true, false);
                        } else {
                            gemm(va.data(), gd, &mut db, k, rows, n, true, false);
                        }
                        acc(*b, Tensor::from_parts(vb.shape().to_vec(), db));
                    }
                } else {
                    let (batch, m) = (va.shape()[0], va.shape()[1]);
                    let n = g.last_dim();
                    let (sa, sb, sc) = (m * k, k * n, m * n);
                    if self.needs(*a) {
                        let mut da = vec![0.0; va.numel()];
                        for bi in 0..batch {
                            gemm(
                                &gd[bi * sc..(bi + 1) * sc],
                                &vb.data()[bi * sb..(bi + 1) * sb],
                                &mut da[bi * sa..(bi + 1) * sa],
                                m,
                                n,
                                k,
                                false,
                                !trans_b,
                            );
                        }
                        acc(*a, Tensor::from_parts(va.shape().to_vec(), da));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; vb.numel()];
                        for bi in 0..batch {
                            let gs = &gd[bi * sc..(bi + 1) * sc];
                            let as_ = &va.data()[bi * sa..(bi + 1) * sa];
                            let out = &mut db[bi * sb..(bi + 1) * sb];
                            if *trans_b {
                                gemm(gs, as_, out, n, m, k, true, false);
                            } else {
                                gemm(as_, gs, out, k, m, n, true, false);
                            }
                        }
                        acc(*b, Tensor::from_parts(vb.shape().to_vec(), db));
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), "mul", |x, y| x * y).unwrap());
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), "mul", |x, y| x * y).unwrap());
                }
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                if self.needs(*bias) {
                    let c = g.last_dim();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::MulExpandLast(x, w) => {
                let c = g.last_dim();
                let (vx, vw) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (row, s) in dx.data_mut().chunks_mut(c).zip(vw.data()) {
                        for o in row.iter_mut() {
                            *o *= s;
                        }
                    }
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let dw: Vec<f64> = gd
                        .chunks(c)
                        .zip(vx.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*w, Tensor::from_parts(vw.shape().to_vec(), dw));
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                acc(*x, dx.unwrap());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut dx = vec![0.0; y.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.last_dim();
                let gain_v = self.value(*gain).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.numel()];
                    for r in 0..g.rows() {
                        let gr = &gd[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gain_v[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        let cf = c as f64;
                        for j in 0..c {
                            let d = gr[j] * gain_v[j];
                            dx[r * c + j] = inv_std[r] / cf * (cf * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                    acc(*x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gr, xr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    acc(*gain, Tensor::from_parts(vec![c], dg));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    acc(*bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        dx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::SliceLast { x, start } => {
                let vx = self.value(*x);
                let (c, len) = (vx.last_dim(), g.last_dim());
                let mut dx = vec![0.0; vx.numel()];
                for (dr, gr) in dx.chunks_mut(c).zip(gd.chunks(len)) {
                    dr[*start..start + len].copy_from_slice(gr);
                }
                acc(*x, Tensor::from_parts(vx.shape().to_vec(), dx));
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.last_dim();
                    if self.needs(p) {
                        let dp: Vec<f64> = gd
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        acc(p, Tensor::from_parts(vp.shape().to_vec(), dp));
                    }
                    offset += w;
                }
            }
            Op::Select0 { x, index } => {
                let vx = self.value(*x);
                let inner = g.numel();
                let mut dx = vec![0.0; vx.numel()];
                dx[index * inner..(index + 1) * inner].copy_from_slice(gd);
                acc(*x, Tensor::from_parts(vx.shape().to_vec(), dx));
            }
            Op::Stack(parts) => {
                let inner = g.numel() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let dp = gd[i * inner..(i + 1) * inner].to_vec();
                        acc(p, Tensor::from_parts(self.shape(p).to_vec(), dp));
                    }
                }
            }
            Op::Reshape(x) => {
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec()));
            }
            Op::SwapAxes { x, a0, a1 } => acc(*x, swap_axes_value(g, *a0, *a1)),
            Op::SumAll(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (dx, dw, db) = conv_backward(vx.data(), vw.data(), gd, geom, self.needs(*x));
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_parts(vx.shape().to_vec(), dx));
                }
                acc(*w, Tensor::from_parts(vw.shape().to_vec(), dw));
                acc(*b, Tensor::from_parts(vec![geom.cout], db));
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let c = y.last_dim();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::CrossEntropy { logits, label, probs } => {
                let gv = g.item();
                let mut dz: Vec<f64> = probs.iter().map(|p| p * gv).collect();
                dz[*label] -= gv;
                acc(*logits, Tensor::from_parts(self.shape(*logits).to_vec(), dz));
            }
            Op::BceWithLogits { z, target } => {
                let zv = self.value(*z).item();
                let y = if *target { 1.0 } else { 0.0 };
                acc(*z, Tensor::scalar((math::sigmoid(zv) - y) * g.item()));
            }
        }
    }
}

/// Free-function form of [`Graph::backward`].
pub fn backward(graph: &Graph, loss: Var, tape: &mut ParamTape) -> Result<()> {
    graph.backward(loss, tape)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn swap_axes_value(x: &Tensor, a0: usize, a1: usize) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut oshape = shape.to_vec();
    oshape.swap(a0, a1);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Output axis i reads input axis perm[i].
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(a0, a1);
    let mut out = vec![0.0; x.numel()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let src: usize = (0..rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
        *o = x.data()[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < oshape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::from_parts(oshape, out)
}

/// Unfolds one `[Cin, H, W]` image into `[Cin·K·K, Ho·Wo]` patch columns
/// (zeros where the window overhangs the padding).
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let orow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        orow.fill(0.0);
                        continue;
                    }
                    let xrow = &xp[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix >= 0 && ix < g.w as isize { xrow[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xp = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xp[iy as usize * g.w + ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let kk = g.cin * g.k * g.k;
    let xsz = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * plane];
    let mut cols = vec![0.0; kk * plane];
    for ni in 0..g.n {
        im2col(&x[ni * xsz..(ni + 1) * xsz], g, &mut cols);
        let os = &mut out[ni * g.cout * plane..(ni + 1) * g.cout * plane];
        for (co, orow) in os.chunks_mut(plane).enumerate() {
            orow.fill(b[co]);
        }
        kernels::gemm(w, &cols, os, g.cout, kk, plane, false, false);
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Vec<f64>, Vec<f64>);

fn conv_backward(x: &[f64], w: &[f64], gy: &[f64], g: &ConvGeom, want_dx: bool) -> ConvGrads {
    let plane = g.ho * g.wo;
    let kk = g.cin * g.k * g.k;
    let xsz = g.cin * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    let mut cols = vec![0.0; kk * plane];
    let mut dcols = vec![0.0; kk * plane];
    for ni in 0..g.n {
        let gs = &gy[ni * g.cout * plane..(ni + 1) * g.cout * plane];
        for (co, grow) in gs.chunks(plane).enumerate() {
            db[co] += grow.iter().sum::<f64>();
        }
        im2col(&x[ni * xsz..(ni + 1) * xsz], g, &mut cols);
        // dW += gy · colsᵀ
        kernels::gemm(gs, &cols, &mut dw, g.cout, plane, kk, false, true);
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · gy
            dcols.fill(0.0);
            kernels::gemm(w, gs, &mut dcols, kk, g.cout, plane, true, false);
            col2im(&dcols, g, &mut dx[ni * xsz..(ni + 1) * xsz]);
        }
    }
    (dx, dw, db)
}
