//! Identity classification against a momentum-updated prototype table, and
//! pairwise verification on descriptor cosine similarity.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_OIM_TEMPERATURE: f64 = 1.0 / 30.0;
pub const DEFAULT_OIM_MOMENTUM: f64 = 0.5;

/// Lookup table of unit-norm identity prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct OimState {
    lookup: Tensor,
    momentum: f64,
    temperature: f64,
}

impl OimState {
    /// Table rows start as random unit vectors.
    pub fn new<R: Rng + ?Sized>(
        num_identities: usize,
        dim: usize,
        momentum: f64,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_identities == 0 || dim == 0 {
            return Err(Error::Config("OIM table needs at least one identity and one channel".into()));
        }
        let mut rows = Vec::with_capacity(num_identities * dim);
        for _ in 0..num_identities {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            rows.extend(unit(&row));
        }
        Self::from_lookup(Tensor::new(&[num_identities, dim], rows)?, momentum, temperature)
    }

    /// Wraps an existing table; rows are renormalised.
    pub fn from_lookup(lookup: Tensor, momentum: f64, temperature: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(alloc::format!("OIM momentum must lie in (0, 1), got {momentum}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(alloc::format!("OIM temperature must be > 0, got {temperature}")));
        }
        if lookup.rank() != 2 {
            return Err(crate::error::dim_err("OimState", lookup.shape(), &[]));
        }
        let d = lookup.last_dim();
        let mut data = lookup.into_data();
        for row in data.chunks_mut(d) {
            let u = unit(row);
            row.copy_from_slice(&u);
        }
        let n = data.len() / d;
        Ok(Self {
            lookup: Tensor::new(&[n, d], data)?,
            momentum,
            temperature,
        })
    }

    pub fn lookup(&self) -> &Tensor {
        &self.lookup
    }

    pub fn num_identities(&self) -> usize {
        self.lookup.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.lookup.shape()[1]
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `lookup[label] ← normalize(γ·lookup[label] + (1-γ)·f̂)`.
    pub fn update(&mut self, label: usize, normalized: &[f64]) -> Result<()> {
        self.check_label(label)?;
        let d = self.dim();
        if normalized.len() != d {
            return Err(crate::error::dim_err("OimState::update", &[d], &[normalized.len()]));
        }
        let g = self.momentum;
        let row = &mut self.lookup.data_mut()[label * d..(label + 1) * d];
        for (r, f) in row.iter_mut().zip(normalized) {
            *r = g * *r + (1.0 - g) * f;
        }
        let u = unit(row);
        row.copy_from_slice(&u);
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_identities() {
            return Err(Error::Contract(alloc::format!(
                "identity label {label} out of range for {} identities",
                self.num_identities()
            )));
        }
        Ok(())
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    if n == 0.0 {
        // A zero row carries no direction; fall back to the first axis.
        let mut e = alloc::vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.iter().map(|x| x / n).collect()
}

/// Recorded OIM loss. Returns the loss node and the normalised feature node
/// (whose value is what [`OimState::update`] should receive). The table is
/// a constant: no gradient reaches it.
pub fn record_oim(g: &mut Graph, feature: Var, label: usize, state: &OimState) -> Result<(Var, Var)> {
    state.check_label(label)?;
    let d = state.dim();
    if g.value(feature).numel() != d {
        return Err(crate::error::dim_err("oim_loss", g.shape(feature), &[d]));
    }
    let row = g.reshape(feature, &[1, d])?;
    let normalized = g.l2_normalize(row)?;
    let table = g.input(state.lookup.clone());
    let logits = g.matmul_nt(normalized, table)?;
    let logits = g.scale(logits, 1.0 / state.temperature);
    let loss = g.cross_entropy(logits, label)?;
    Ok((loss, normalized))
}

/// Evaluates the OIM loss for one feature and applies the table update.
pub fn oim_loss(feature: &Tensor, label: usize, state: &OimState) -> Result<(f64, OimState)> {
    if !feature.all_finite() {
        return Err(Error::Contract("OIM feature has non-finite entries".into()));
    }
    let mut g = Graph::new();
    let f = g.input(feature.clone());
    let (loss, normalized) = record_oim(&mut g, f, label, state)?;
    let mut next = state.clone();
    next.update(label, g.value(normalized).data())?;
    Ok((g.value(loss).item(), next))
}

/// Recorded verification loss on two descriptor vectors:
/// `BCE(σ(w·cos(a, b) + bias), same)`.
pub fn record_verification(g: &mut Graph, a: Var, b: Var, same: bool, scale: Var, bias: Var) -> Result<Var> {
    if g.value(a).numel() != g.value(b).numel() {
        return Err(crate::error::dim_err("verification_loss", g.shape(a), g.shape(b)));
    }
    let n = g.value(a).numel();
    let a = g.reshape(a, &[1, n])?;
    let b = g.reshape(b, &[1, n])?;
    let an = g.l2_normalize(a)?;
    let bn = g.l2_normalize(b)?;
    let prod = g.mul(an, bn)?;
    let cos = g.sum_all(prod);
    let z = g.mul(scale, cos)?;
    let z = g.add(z, bias)?;
    g.bce_with_logits(z, same)
}

pub fn verification_loss(a: &Tensor, b: &Tensor, same: bool, scale: f64, bias: f64) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.input(a.clone());
    let bv = g.input(b.clone());
    let w = g.input(Tensor::scalar(scale));
    let c = g.input(Tensor::scalar(bias));
    let loss = record_verification(&mut g, av, bv, same, w, c)?;
    Ok(g.value(loss).item())
}
