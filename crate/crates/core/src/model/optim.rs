//! Stochastic gradient descent with Nesterov momentum and L2 weight decay,
//! and the step-wise learning-rate schedule.

use alloc::vec::Vec;

use crate::autodiff::ParamTape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `lr0 / factor^⌊epoch / period⌋` with zero-based epochs.
pub fn scheduled_lr(base_lr: f64, decay_factor: f64, decay_period: usize, epoch: usize) -> f64 {
    let steps = if decay_period == 0 { 0 } else { epoch / decay_period };
    let mut lr = base_lr;
    for _ in 0..steps {
        lr /= decay_factor;
    }
    lr
}

/// Update rule per coordinate, with `g = ∇ + λ·θ`:
///
/// ```text
/// b ← g                (first step)
/// b ← μ·b + g          (afterwards)
/// θ ← θ − lr·(g + μ·b)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(alloc::format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::Config(alloc::format!("weight decay must be ≥ 0, got {weight_decay}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    /// Momentum buffer of parameter `index`, if it has been stepped.
    pub fn buffer(&self, index: usize) -> Option<&Tensor> {
        self.buffers.get(index).and_then(Option::as_ref)
    }

    /// Applies one update from the gradients currently held by `tape`.
    pub fn step(&mut self, tape: &mut ParamTape, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(alloc::format!("learning rate must be finite and ≥ 0, got {lr}")));
        }
        if self.buffers.len() < tape.len() {
            self.buffers.resize(tape.len(), None);
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        let ids: Vec<_> = tape.ids().collect();
        for id in ids {
            let grad: Vec<f64> = tape
                .grad(id)
                .data()
                .iter()
                .zip(tape.get(id).data())
                .map(|(g, p)| g + wd * p)
                .collect();
            let buf = match &mut self.buffers[id.index()] {
                Some(b) => {
                    for (bi, gi) in b.data_mut().iter_mut().zip(&grad) {
                        *bi = mu * *bi + gi;
                    }
                    b
                }
                slot @ None => slot.insert(Tensor::new(tape.get(id).shape(), grad.clone())?),
            };
            let buf = buf.data().to_vec();
            for ((p, g), b) in tape.get_mut(id).data_mut().iter_mut().zip(&grad).zip(&buf) {
                *p -= lr * (g + mu * b);
            }
        }
        Ok(())
    }
}
