//! Training objective, the optimisation step, batch sampling and
//! descriptor-based evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{record_oim, record_verification};
use super::optim::{scheduled_lr, Sgd};
use super::{ClipInput, Descriptor, TmtModel};
use crate::autodiff::{Graph, ParamTape, Var};
use crate::data::{rrs_indices, SampleMode, Tracklet};
use crate::error::{Error, Result};
use crate::eval::{self, Labels, Metric, Protocol, RankingReport};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Clips per step: `batch_size / 2` identities with two tracklets each.
    pub batch_size: usize,
    pub seed: u64,
    /// Supervise the pooled encoder branches (image input only).
    pub branch_oim: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            lr_decay_factor: 10.0,
            lr_decay_period_epochs: 15,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 16,
            seed: 7,
            branch_oim: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("train.lr must be finite and ≥ 0, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 1.0 && self.lr_decay_factor.is_finite()) {
            out.push(format!("train.lr_decay_factor must be > 1, got {}", self.lr_decay_factor));
        }
        if self.lr_decay_period_epochs == 0 {
            out.push("train.lr_decay_period_epochs must be ≥ 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("train.weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            out.push(format!("train.batch_size must be an even number ≥ 2, got {}", self.batch_size));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        scheduled_lr(self.lr, self.lr_decay_factor, self.lr_decay_period_epochs, epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: ClipInput,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub samples: Vec<Sample>,
    pub pairs: Vec<Pair>,
}

/// Which identity table an OIM term reads and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableRef {
    View(usize),
    Concat,
    Branch(usize),
    Frame,
}

/// Scalar loss nodes of one batch.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: Var,
    /// Batch mean of the summed descriptor-head OIM losses.
    pub oim: Var,
    /// Mean over pairs; absent when the batch has no pairs.
    pub verification: Option<Var>,
    pub branch: Option<Var>,
    pub frame: Option<Var>,
    /// Normalised features to fold into the tables after the step.
    pub updates: Vec<(TableRef, usize, Var)>,
}

/// Per-term values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub oim: f64,
    pub verification: f64,
    pub branch: f64,
    pub frame: f64,
}

fn sum_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let s = sum_of(g, terms)?;
    Ok(g.scale(s, 1.0 / terms.len() as f64))
}

/// Records the full objective for `batch`:
///
/// ```text
/// mean_i Σ_h OIM_h(x_i)            h ∈ {spatial, temporal, spatiotemporal, concat}
/// + mean_pairs BCE(σ(w·cos + b))
/// + mean_i Σ_b OIM_b(branch_b(x_i))   (image input, when enabled)
/// + mean_i mean_t OIM_frame(token_t)  (when enabled)
/// ```
///
/// Identity tables enter as constants.
pub fn record_losses(
    g: &mut Graph,
    tape: &ParamTape,
    model: &TmtModel,
    batch: &Batch,
    branch_oim: bool,
) -> Result<LossNodes> {
    if batch.samples.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    let mut updates = Vec::new();
    let mut head_terms = Vec::new();
    let mut branch_terms = Vec::new();
    let mut frame_terms = Vec::new();
    let mut descriptors = Vec::new();
    for s in &batch.samples {
        let f = model.record_forward(g, tape, &s.input)?;
        let mut per_clip = Vec::with_capacity(4);
        for v in 0..3 {
            let (l, n) = record_oim(g, f.means[v], s.label, &model.oim.views[v])?;
            per_clip.push(l);
            updates.push((TableRef::View(v), s.label, n));
        }
        let (l, n) = record_oim(g, f.descriptor, s.label, &model.oim.concat)?;
        per_clip.push(l);
        updates.push((TableRef::Concat, s.label, n));
        head_terms.push(sum_of(g, &per_clip)?);

        if let (true, Some(cubes), Some(tables)) = (branch_oim, f.branch_cubes, &model.oim.branches) {
            let mut per = Vec::with_capacity(3);
            for b in 0..3 {
                let m = g.mean_axis(cubes[b], 0)?;
                let m = g.mean_axis(m, 0)?;
                let (l, n) = record_oim(g, m, s.label, &tables[b])?;
                per.push(l);
                updates.push((TableRef::Branch(b), s.label, n));
            }
            branch_terms.push(sum_of(g, &per)?);
        }
        if let Some(table) = &model.oim.frame {
            let tokens = f.refined[1];
            let mut per = Vec::new();
            for t in 0..g.shape(tokens)[0] {
                let row = g.select0(tokens, t)?;
                let (l, n) = record_oim(g, row, s.label, table)?;
                per.push(l);
                updates.push((TableRef::Frame, s.label, n));
            }
            frame_terms.push(mean_of(g, &per)?);
        }
        descriptors.push(f.descriptor);
    }
    let oim = mean_of(g, &head_terms)?;
    let mut total = oim;
    let verification = if batch.pairs.is_empty() {
        None
    } else {
        let w = g.param(tape, model.verify_scale);
        let b = g.param(tape, model.verify_bias);
        let mut terms = Vec::with_capacity(batch.pairs.len());
        for p in &batch.pairs {
            let (Some(&da), Some(&db)) = (descriptors.get(p.a), descriptors.get(p.b)) else {
                return Err(Error::Contract(format!("pair ({}, {}) indexes outside the batch", p.a, p.b)));
            };
            terms.push(record_verification(g, da, db, p.same, w, b)?);
        }
        let v = mean_of(g, &terms)?;
        total = g.add(total, v)?;
        Some(v)
    };
    let branch = if branch_terms.is_empty() {
        None
    } else {
        let v = mean_of(g, &branch_terms)?;
        total = g.add(total, v)?;
        Some(v)
    };
    let frame = if frame_terms.is_empty() {
        None
    } else {
        let v = mean_of(g, &frame_terms)?;
        total = g.add(total, v)?;
        Some(v)
    };
    Ok(LossNodes {
        total,
        oim,
        verification,
        branch,
        frame,
        updates,
    })
}

/// One optimisation step: objective, backward pass, SGD update, then the
/// identity-table updates with the pre-step features. A non-finite loss
/// aborts before anything is modified.
pub fn train_step(model: &mut TmtModel, opt: &mut Sgd, batch: &Batch, lr: f64, branch_oim: bool) -> Result<StepStats> {
    let mut g = Graph::new();
    let nodes = record_losses(&mut g, &model.tape, model, batch, branch_oim)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let stats = StepStats {
        total: g.value(nodes.total).item(),
        oim: g.value(nodes.oim).item(),
        verification: val(nodes.verification),
        branch: val(nodes.branch),
        frame: val(nodes.frame),
    };
    if !stats.total.is_finite() {
        return Err(Error::NonFinite {
            what: format!(
                "training loss (oim {}, verification {}, branch {}, frame {})",
                stats.oim, stats.verification, stats.branch, stats.frame
            ),
            value: stats.total,
        });
    }
    model.tape.zero_grads();
    g.backward(nodes.total, &mut model.tape)?;
    opt.step(&mut model.tape, lr)?;
    for (table, label, n) in &nodes.updates {
        let feat = g.value(*n).data();
        let state = match table {
            TableRef::View(v) => &mut model.oim.views[*v],
            TableRef::Concat => &mut model.oim.concat,
            TableRef::Branch(b) => match &mut model.oim.branches {
                Some(t) => &mut t[*b],
                None => continue,
            },
            TableRef::Frame => match &mut model.oim.frame {
                Some(t) => t,
                None => continue,
            },
        };
        state.update(*label, feat)?;
    }
    Ok(stats)
}

/// Draws `batch_size / 2` distinct identities with two tracklets each
/// (the same tracklet twice when an identity has only one), samples a
/// training-mode clip from each, and pairs the two clips of every identity
/// as positives and consecutive identities as negatives.
pub fn sample_batch<R: Rng + ?Sized>(
    train: &[Tracklet],
    batch_size: usize,
    frames: usize,
    rng: &mut R,
) -> Result<Batch> {
    let mut ids: Vec<usize> = train.iter().map(|t| t.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Contract("no training tracklets".into()));
    }
    ids.shuffle(rng);
    let p = (batch_size / 2).clamp(1, ids.len());
    let mut batch = Batch::default();
    for (k, &id) in ids[..p].iter().enumerate() {
        let mut own: Vec<&Tracklet> = train.iter().filter(|t| t.identity == id).collect();
        own.shuffle(rng);
        let second = if own.len() > 1 { own[1] } else { own[0] };
        for t in [own[0], second] {
            let idx = rrs_indices(t.frames.len(), frames, SampleMode::Train, rng)?;
            batch.samples.push(Sample {
                input: t.clip(&idx)?,
                label: id,
            });
        }
        batch.pairs.push(Pair {
            a: 2 * k,
            b: 2 * k + 1,
            same: true,
        });
    }
    for k in 0..p {
        let next = (k + 1) % p;
        if next == k || (p == 2 && k == 1) {
            continue;
        }
        batch.pairs.push(Pair {
            a: 2 * k,
            b: 2 * next,
            same: false,
        });
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: Vec<StepStats>,
}

impl EpochStats {
    pub fn mean_loss(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.total).sum::<f64>() / self.steps.len() as f64
    }
}

/// Epoch loop state: model, optimiser and the sampling stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TmtModel,
    pub optimizer: Sgd,
    config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
    steps_taken: usize,
}

impl Trainer {
    pub fn new(model: TmtModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.momentum, config.weight_decay)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer,
            config,
            rng,
            epoch: 0,
            steps_taken: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.config.batch_size).max(1)
    }

    /// One pass of `⌈|train| / batch_size⌉` steps at the scheduled rate.
    pub fn run_epoch(&mut self, train: &[Tracklet]) -> Result<EpochStats> {
        if let Some(t) = train.iter().find(|t| t.identity >= self.model.num_identities()) {
            return Err(Error::Contract(format!(
                "training identity {} exceeds the {} identity tables",
                t.identity,
                self.model.num_identities()
            )));
        }
        let lr = self.config.lr_at(self.epoch);
        let mut steps = Vec::new();
        for _ in 0..self.steps_per_epoch(train.len()) {
            let batch = sample_batch(train, self.config.batch_size, self.model.config().frames, &mut self.rng)?;
            steps.push(train_step(&mut self.model, &mut self.optimizer, &batch, lr, self.config.branch_oim)?);
            self.steps_taken += 1;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            steps,
        };
        self.epoch += 1;
        Ok(stats)
    }
}

/// Which descriptor parts enter retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSelection {
    Spatial,
    Temporal,
    Spatiotemporal,
    #[default]
    All,
}

impl ViewSelection {
    pub fn pick(&self, d: &Descriptor) -> Tensor {
        match self {
            Self::Spatial => d.spatial.clone(),
            Self::Temporal => d.temporal.clone(),
            Self::Spatiotemporal => d.spatiotemporal.clone(),
            Self::All => d.concatenated.clone(),
        }
    }
}

/// Descriptors of every tracklet from its test-mode clip.
pub fn describe(model: &TmtModel, tracklets: &[Tracklet]) -> Result<Vec<Descriptor>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    tracklets
        .iter()
        .map(|t| {
            let idx = rrs_indices(t.frames.len(), model.config().frames, SampleMode::Test, &mut unused)?;
            Ok(model.forward(&t.clip(&idx)?)?.1)
        })
        .collect()
}

pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let Some(first) = rows.first() else {
        return Err(Error::Contract("no descriptors to stack".into()));
    };
    let d = first.numel();
    let mut data = Vec::with_capacity(d * rows.len());
    for r in rows {
        if r.numel() != d {
            return Err(crate::error::dim_err("stack_rows", first.shape(), r.shape()));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(&[rows.len(), d], data)
}

/// Retrieval settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    pub protocol: Protocol,
    pub views: ViewSelection,
    pub max_rank: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            protocol: Protocol::CrossCamera,
            views: ViewSelection::All,
            max_rank: 20,
        }
    }
}

/// Ranks `gallery` for every `query` tracklet.
pub fn evaluate_tracklets(
    model: &TmtModel,
    query: &[Tracklet],
    gallery: &[Tracklet],
    cfg: &EvalConfig,
) -> Result<RankingReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Contract("query and gallery sets must both be non-empty".into()));
    }
    let pick = |ts: &[Tracklet]| -> Result<Tensor> {
        let d = describe(model, ts)?;
        stack_rows(&d.iter().map(|d| cfg.views.pick(d)).collect::<Vec<_>>())
    };
    let (q, g) = (pick(query)?, pick(gallery)?);
    let dist = eval::pairwise_distance(&q, &g, cfg.metric)?;
    let ids = |ts: &[Tracklet]| ts.iter().map(|t| t.identity).collect::<Vec<_>>();
    let cams = |ts: &[Tracklet]| ts.iter().map(|t| t.camera).collect::<Vec<_>>();
    let (qi, qc, gi, gc) = (ids(query), cams(query), ids(gallery), cams(gallery));
    eval::evaluate(
        &dist,
        Labels {
            identities: &qi,
            cameras: &qc,
        },
        Labels {
            identities: &gi,
            cameras: &gc,
        },
        cfg.protocol,
        cfg.max_rank.min(gallery.len()),
    )
}
