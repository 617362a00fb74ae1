//! End-to-end runs: split, train, evaluate on the held-out identities.
//!
//! [`ExperimentConfig::benchmark`] pins the synthetic benchmark: 16
//! identities × 4 tracklets × 16 frames, `T = 4`, `C = 32`, two heads, one
//! self-view and one cross-view block, 100 epochs of 2 steps.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::{synth_generate, SynthSpec};
use crate::data::{holdout_split, Split, Tracklet};
use crate::error::{Error, Result};
use crate::eval::RankingReport;
use crate::model::train::{evaluate_tracklets, EvalConfig, TrainConfig, Trainer};
use crate::model::{InputGeometry, ModelConfig, TmtModel};

pub const BENCHMARK_EPOCHS: usize = 100;
pub const BENCHMARK_LR: f64 = 5e-4;

/// Architecture rows of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Self-attention pooling, self-view stacks and cross-view fusion.
    Full,
    /// Self-attention pooling and self-view stacks, no cross-view fusion.
    SelfViewOnly,
    /// Encoder branches averaged over frames and locations; no attention.
    AvgPoolBaseline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::SelfViewOnly, Variant::AvgPoolBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::SelfViewOnly => "self_view_only",
            Self::AvgPoolBaseline => "avg_pool_baseline",
        }
    }

    /// `base` with this variant's switches applied.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Self::Full => {
                cfg.attention_pooling = true;
                cfg.use_selfview = true;
                cfg.use_crossview = true;
            }
            Self::SelfViewOnly => {
                cfg.attention_pooling = true;
                cfg.use_selfview = true;
                cfg.use_crossview = false;
            }
            Self::AvgPoolBaseline => {
                cfg.attention_pooling = false;
                cfg.literal_pool_sum = false;
                cfg.use_selfview = false;
                cfg.use_crossview = false;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Evaluate on the held-out split after every `eval_every`-th epoch
    /// (0 = only after the last).
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::benchmark(7)
    }
}

impl ExperimentConfig {
    /// The synthetic benchmark with every seed set to `seed`.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            synth: SynthSpec { seed, ..SynthSpec::default() },
            model: ModelConfig {
                frames: 4,
                channels: 32,
                num_heads: 2,
                depth_self: 1,
                depth_cross: 1,
                input: InputGeometry::images(false),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: BENCHMARK_EPOCHS,
                lr: BENCHMARK_LR,
                // One decay step would land past the end of the run: the
                // rate stays constant for all 200 steps.
                lr_decay_period_epochs: BENCHMARK_EPOCHS,
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            eval_every: 0,
        }
    }

    pub fn problems(&self) -> Vec<alloc::string::String> {
        let mut out = self.synth.problems();
        out.extend(self.model.problems());
        out.extend(self.train.problems());
        if self.eval.max_rank == 0 {
            out.push("eval.max_rank must be ≥ 1".into());
        }
        if let InputGeometry::Images { height, width } = self.model.input {
            if (height, width) != (self.synth.image_height, self.synth.image_width) {
                out.push(alloc::format!(
                    "model.input {height}×{width} does not match synth image {}×{}",
                    self.synth.image_height, self.synth.image_width
                ));
            }
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

    /// Number of optimisation steps the run will take on `split`.
    pub fn total_steps(&self, split: &Split) -> usize {
        self.train.epochs * split.train.len().div_ceil(self.train.batch_size).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Present on evaluated epochs.
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: TmtModel,
    pub records: Vec<EpochRecord>,
    /// Held-out evaluation after the last epoch.
    pub report: RankingReport,
    pub steps: usize,
}

/// A run in progress: the split, the trainer and the records so far.
///
/// A failed epoch leaves the trainer at its last good state (a step with a
/// non-finite loss modifies nothing), so callers can snapshot it.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: ExperimentConfig,
    split: Split,
    trainer: Trainer,
    records: Vec<EpochRecord>,
    report: Option<RankingReport>,
}

impl Experiment {
    /// Splits `tracklets` by identity and initialises the model.
    pub fn new(cfg: &ExperimentConfig, tracklets: &[Tracklet]) -> Result<Self> {
        cfg.model.validate()?;
        cfg.train.validate()?;
        let split = holdout_split(tracklets)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = TmtModel::new(cfg.model.clone(), split.num_train_ids, &mut init_rng)?;
        let trainer = Trainer::new(model, cfg.train.clone())?;
        Ok(Self {
            cfg: cfg.clone(),
            split,
            trainer,
            records: Vec::with_capacity(cfg.train.epochs),
            report: None,
        })
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.trainer.epoch() >= self.cfg.train.epochs
    }

    /// Trains one epoch, evaluating when due.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(Error::Contract("all configured epochs have already run".into()));
        }
        let stats = self.trainer.run_epoch(&self.split.train)?;
        let done = stats.epoch + 1;
        let last = done == self.cfg.train.epochs;
        let due = last || (self.cfg.eval_every > 0 && done % self.cfg.eval_every == 0);
        let (rank1, map) = if due {
            let r = self.evaluate()?;
            let out = (Some(r.rank1()), r.map);
            if last {
                self.report = Some(r);
            }
            out
        } else {
            (None, None)
        };
        self.records.push(EpochRecord {
            epoch: stats.epoch,
            lr: stats.lr,
            mean_loss: stats.mean_loss(),
            rank1,
            map,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Held-out evaluation of the current model.
    pub fn evaluate(&self) -> Result<RankingReport> {
        evaluate_tracklets(&self.trainer.model, &self.split.query, &self.split.gallery, &self.cfg.eval)
    }

    /// Runs the remaining epochs and the final evaluation.
    pub fn finish(mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<ExperimentOutcome> {
        while !self.is_finished() {
            on_epoch(self.run_epoch()?);
        }
        let report = match self.report.take() {
            Some(r) => r,
            None => self.evaluate()?,
        };
        Ok(ExperimentOutcome {
            steps: self.trainer.steps_taken(),
            model: self.trainer.model,
            records: self.records,
            report,
        })
    }
}

/// Trains on the training identities of `tracklets` and evaluates on the
/// rest. `on_epoch` sees every record as soon as it exists.
pub fn run_on(
    cfg: &ExperimentConfig,
    tracklets: &[Tracklet],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<ExperimentOutcome> {
    Experiment::new(cfg, tracklets)?.finish(on_epoch)
}

/// Generates the synthetic data of `cfg.synth` and runs on it.
pub fn run(cfg: &ExperimentConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = synth_generate(&cfg.synth)?;
    run_on(cfg, &data, on_epoch)
}
