//! Fixed battery of gradient checks over every trainable component, at
//! small shapes `(T, HW, C, N_h) = (3, 4, 8, 2)`.
//!
//! Each component is wrapped into a scalar objective by a fixed random
//! weighting of its outputs, so every output coordinate receives a distinct
//! cotangent. Norm gains/biases and positional tables are randomised away
//! from their initial values so their gradients are exercised too.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamTape, Var};
use crate::crossview::{self, CrossViewBlockParams};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_with, CheckScope, GradCheckReport, DEFAULT_STEP};
use crate::model::loss::{record_oim, record_verification, OimState, DEFAULT_OIM_MOMENTUM, DEFAULT_OIM_TEMPERATURE};
use crate::pooling::{sa_pool, PoolAxis};
use crate::selfview::{self, BlockOptions, HeadConfig, PositionalEncoding, SelfViewBlockParams};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

pub const FRAMES: usize = 3;
pub const LOCATIONS: usize = 4;
pub const CHANNELS: usize = 8;
pub const HEADS: usize = 2;
/// Identities in the frozen OIM table.
pub const OIM_IDENTITIES: usize = 5;

pub const COMPONENTS: [&str; 8] = [
    "pooling_temporal",
    "pooling_spatial",
    "pooling_temporal_literal",
    "pooling_spatial_literal",
    "selfview",
    "crossview",
    "verification",
    "oim",
];

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub step: f64,
    pub seed: u64,
    /// Perturb the analytic gradient of this component before comparing;
    /// the check must then fail.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub component: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < SUITE_TOLERANCE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ x ⊙ W` with `W` fixed by `seed`.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = g.input(Tensor::uniform(g.shape(x), 1.0, &mut rng(seed)));
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

fn param(g: &mut Graph, tape: &ParamTape, name: &str) -> Result<Var> {
    let id = tape
        .find(name)
        .ok_or_else(|| Error::Contract(alloc::format!("missing parameter {name}")))?;
    Ok(g.param(tape, id))
}

/// Replaces every norm gain/bias and positional table by uniform noise.
fn randomise_affine(tape: &mut ParamTape, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = tape.ids().collect();
    for id in ids {
        let name = tape.name(id);
        if name.contains("norm") || name.ends_with(".pe") {
            let shape = tape.get(id).shape().to_vec();
            *tape.get_mut(id) = Tensor::uniform(&shape, 1.0, r);
        }
    }
}

type Objective = alloc::boxed::Box<dyn Fn(&mut Graph, &ParamTape) -> Result<Var>>;

fn build(component: &str, seed: u64) -> Result<(ParamTape, Objective)> {
    let mut r = rng(seed);
    let mut tape = ParamTape::new();
    let cfg = HeadConfig::new(HEADS, CHANNELS)?;
    let objective: Objective = match component {
        "pooling_temporal" | "pooling_spatial" | "pooling_temporal_literal" | "pooling_spatial_literal" => {
            tape.add("cube", Tensor::uniform(&[FRAMES, LOCATIONS, CHANNELS], 1.0, &mut r))?;
            tape.add("w", Tensor::uniform(&[CHANNELS, CHANNELS], 1.0, &mut r))?;
            let axis = if component.starts_with("pooling_temporal") {
                PoolAxis::Temporal
            } else {
                PoolAxis::Spatial
            };
            let literal = component.ends_with("literal");
            alloc::boxed::Box::new(move |g, t| {
                let c = param(g, t, "cube")?;
                let w = param(g, t, "w")?;
                let n = sa_pool(g, c, w, axis, literal)?;
                probe(g, n.tokens, seed + 1)
            })
        }
        "selfview" => {
            let block = SelfViewBlockParams::init(&mut tape, "block", cfg, &mut r)?;
            let pe = PositionalEncoding::init(&mut tape, "view", FRAMES, CHANNELS)?;
            tape.add("tokens", Tensor::uniform(&[FRAMES, CHANNELS], 1.0, &mut r))?;
            randomise_affine(&mut tape, &mut r);
            alloc::boxed::Box::new(move |g, t| {
                let x = param(g, t, "tokens")?;
                let y = selfview::record_stack(g, t, x, &[block], Some(&pe), cfg, BlockOptions::default())?;
                probe(g, y, seed + 1)
            })
        }
        "crossview" => {
            let block = CrossViewBlockParams::init(&mut tape, "block", cfg, false, &mut r)?;
            tape.add("spatial", Tensor::uniform(&[LOCATIONS, CHANNELS], 1.0, &mut r))?;
            tape.add("temporal", Tensor::uniform(&[FRAMES, CHANNELS], 1.0, &mut r))?;
            tape.add("spatiotemporal", Tensor::uniform(&[FRAMES * LOCATIONS, CHANNELS], 1.0, &mut r))?;
            randomise_affine(&mut tape, &mut r);
            alloc::boxed::Box::new(move |g, t| {
                let views = [param(g, t, "spatial")?, param(g, t, "temporal")?, param(g, t, "spatiotemporal")?];
                let out = crossview::record_stack(g, t, views, &[block], cfg, false)?;
                let mut total = probe(g, out[0], seed + 1)?;
                for (i, v) in out[1..].iter().enumerate() {
                    let s = probe(g, *v, seed + 2 + i as u64)?;
                    total = g.add(total, s)?;
                }
                Ok(total)
            })
        }
        "verification" => {
            tape.add("a", Tensor::uniform(&[3 * CHANNELS], 1.0, &mut r))?;
            tape.add("b", Tensor::uniform(&[3 * CHANNELS], 1.0, &mut r))?;
            tape.add("scale", Tensor::scalar(3.0))?;
            tape.add("bias", Tensor::scalar(-0.5))?;
            alloc::boxed::Box::new(move |g, t| {
                let (a, b) = (param(g, t, "a")?, param(g, t, "b")?);
                let (s, bias) = (param(g, t, "scale")?, param(g, t, "bias")?);
                let same = record_verification(g, a, b, true, s, bias)?;
                let diff = record_verification(g, a, b, false, s, bias)?;
                let diff = g.scale(diff, 0.5);
                g.add(same, diff)
            })
        }
        "oim" => {
            let state = OimState::new(OIM_IDENTITIES, CHANNELS, DEFAULT_OIM_MOMENTUM, DEFAULT_OIM_TEMPERATURE, &mut r)?;
            tape.add("feature", Tensor::uniform(&[CHANNELS], 1.0, &mut r))?;
            // The temperature amplifies curvature; the default still keeps
            // the central difference well inside tolerance at this scale.
            alloc::boxed::Box::new(move |g, t| {
                let f = param(g, t, "feature")?;
                let (l0, _) = record_oim(g, f, 0, &state)?;
                let (l1, _) = record_oim(g, f, 3, &state)?;
                g.add(l0, l1)
            })
        }
        other => {
            return Err(Error::Config(alloc::format!(
                "unknown gradient-check component {other:?}; expected one of {}",
                COMPONENTS.join(", ")
            )))
        }
    };
    Ok((tape, objective))
}

/// Checks one named component.
pub fn check_component(component: &str, opts: &SuiteOptions) -> Result<SuiteEntry> {
    let (tape, f) = build(component, opts.seed)?;
    let corrupt = opts.corrupt.as_deref() == Some(component);
    let report = finite_diff_check_with(
        |g: &mut Graph, t: &ParamTape| f(g, t),
        &tape,
        opts.step,
        &CheckScope::default(),
        |t| {
            if corrupt {
                if let Some(id) = t.ids().next() {
                    let v = &mut t.grad_mut(id).data_mut()[0];
                    *v += 1.0 + v.abs();
                }
            }
        },
    )?;
    Ok(SuiteEntry {
        component: component.to_string(),
        report,
    })
}

/// Runs every component, in [`COMPONENTS`] order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    if let Some(c) = &opts.corrupt {
        if !COMPONENTS.contains(&c.as_str()) {
            return Err(Error::Config(alloc::format!(
                "cannot corrupt unknown component {c:?}; expected one of {}",
                COMPONENTS.join(", ")
            )));
        }
    }
    COMPONENTS.iter().map(|c| check_component(c, opts)).collect()
}
