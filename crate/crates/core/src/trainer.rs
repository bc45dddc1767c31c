//! Training loop: Adam on the single-time CT-ELBO loss, with periodic
//! variance-reduction updates of the time proposal.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
use crate::divergence::DivergenceMethod;
use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::network::{NetworkConfig, ScoreNetwork};
use crate::objective::{batch_loss_and_gradient, ctelbo_integrand, sample_inference_point, AmbientField, IntegrandDraw, ObjectiveConfig};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::proposal::{TimeProposal, WeightedDraw};
use crate::rng::RngStream;
use crate::stats::{mean_se, variance};
use crate::targets::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    None,
    /// `lr·½(1 + cos(π t / steps))`
    Cosine,
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_batch() -> usize {
    256
}
fn d_period() -> u64 {
    500
}
fn d_iters() -> usize {
    50
}
fn d_draws() -> usize {
    512
}
fn d_plr() -> f64 {
    0.01
}
fn d_players() -> usize {
    2
}
fn d_punits() -> usize {
    8
}
fn d_clip() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    pub steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub scheduler: Scheduler,
    /// Network steps between proposal updates; 0 disables them.
    #[serde(default = "d_period")]
    pub proposal_update_period: u64,
    /// Adam iterations per proposal update, all on one set of draws.
    #[serde(default = "d_iters")]
    pub proposal_iterations: usize,
    #[serde(default = "d_draws")]
    pub proposal_draws: usize,
    #[serde(default = "d_plr")]
    pub proposal_learning_rate: f64,
    #[serde(default = "d_players")]
    pub proposal_layers: usize,
    #[serde(default = "d_punits")]
    pub proposal_units: usize,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    pub seed: u64,
    /// Defaults to QR, or Hutchinson on SO(n).
    #[serde(default)]
    pub divergence: Option<DivergenceMethod>,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: u64, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            beta1: d_beta1(),
            beta2: d_beta2(),
            steps,
            batch_size: d_batch(),
            scheduler: Scheduler::None,
            proposal_update_period: d_period(),
            proposal_iterations: d_iters(),
            proposal_draws: d_draws(),
            proposal_learning_rate: d_plr(),
            proposal_layers: d_players(),
            proposal_units: d_punits(),
            clip_norm: d_clip(),
            seed,
            divergence: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.proposal_update_period > 0 && (self.proposal_draws < 2 || self.proposal_iterations == 0) {
            return bad("proposal updates need at least 2 draws and 1 iteration");
        }
        if !(self.proposal_learning_rate > 0.0) || self.proposal_layers == 0 || self.proposal_units == 0 {
            return bad("proposal learning rate, layers and units must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.scheduler {
            Scheduler::None => self.learning_rate,
            Scheduler::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub loss_std: f64,
    pub lr: f64,
    /// Variance of `ℐ` under the current proposal, from the latest update.
    pub proposal_variance: f64,
}

pub const METRICS_HEADER: &str = "step\tloss\tloss_std\tlr\tproposal_variance";

impl MetricsRow {
    pub fn tsv(&self) -> String {
        format!("{}\t{:e}\t{:e}\t{:e}\t{:e}", self.step, self.loss, self.loss_std, self.lr, self.proposal_variance)
    }
}

pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.tsv())?;
    }
    Ok(())
}

// Substream keys of the per-step randomness.
const KEY_INIT: u64 = 0;
const KEY_BATCH: u64 = 1;
const KEY_LOSS: u64 = 2;
const KEY_PROPOSAL: u64 = 3;

pub struct Trainer {
    pub manifold: Manifold,
    pub network: ScoreNetwork,
    pub optimizer: AdamState,
    pub proposal: TimeProposal,
    pub objective: ObjectiveConfig,
    pub config: TrainConfig,
    pub step: u64,
    pub metrics: Vec<MetricsRow>,
    pub config_hash: String,
    /// Where to write the state when training aborts on a non-finite loss.
    pub dump_path: Option<PathBuf>,
    last_proposal_variance: f64,
}

impl Trainer {
    /// Fresh network and uniform proposal. An actnorm layer is calibrated on
    /// inference states `(Y_s, s)` built from target draws.
    pub fn new(manifold: Manifold, net_config: NetworkConfig, mut objective: ObjectiveConfig, config: TrainConfig, target: &Target) -> Result<Self> {
        config.validate()?;
        if let Some(d) = config.divergence {
            objective.divergence = d;
        }
        objective.validate(&manifold)?;
        if net_config.ambient_dim != manifold.ambient_dim() {
            return Err(Error::Config(format!("network ambient_dim {} but {} needs {}", net_config.ambient_dim, manifold.name(), manifold.ambient_dim())));
        }
        let base = RngStream::new(config.seed, 0).substream(KEY_INIT);
        let mut g = base.generator();
        let calibration = if net_config.actnorm_first {
            let horizon = objective.path.horizon;
            let mut batch = Vec::with_capacity(config.batch_size);
            for x in target.sample(&mut g, config.batch_size) {
                let s = rand::Rng::gen_range(&mut g, 0.0..horizon);
                batch.push((sample_inference_point(&manifold, &objective, &x, s, &mut g)?, s));
            }
            Some(batch)
        } else {
            None
        };
        let network = ScoreNetwork::init(net_config, &mut g, calibration.as_deref())?;
        let proposal = TimeProposal::uniform(objective.path.horizon, config.proposal_layers, config.proposal_units, &mut g)?;
        Ok(Trainer {
            manifold,
            optimizer: AdamState::new(&network.params),
            network,
            proposal,
            objective,
            config,
            step: 0,
            metrics: Vec::new(),
            config_hash: String::new(),
            dump_path: None,
            last_proposal_variance: f64::NAN,
        })
    }

    /// Resumes from a checkpoint with a (possibly different) schedule.
    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ck.validate()?;
        let objective = ObjectiveConfig {
            path: ck.path,
            divergence: config.divergence.unwrap_or(ck.divergence),
            sampler: crate::objective::InferenceSampler::Heun,
        };
        Ok(Trainer {
            manifold: ck.manifold,
            network: ck.network,
            optimizer: ck.optimizer,
            proposal: ck.proposal,
            objective,
            config,
            step: ck.step,
            metrics: Vec::new(),
            config_hash: ck.config_hash,
            dump_path: None,
            last_proposal_variance: f64::NAN,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            manifold: self.manifold,
            path: self.objective.path,
            divergence: self.objective.divergence,
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
            proposal: self.proposal.clone(),
            step: self.step,
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
        }
    }

    fn stream(&self, key: u64) -> RngStream {
        RngStream::new(self.config.seed, 0).substream2(key, self.step)
    }

    fn abort(&self, loss: f64, draws: &[IntegrandDraw]) -> Error {
        let worst = draws.iter().filter(|d| !d.estimate().is_finite()).take(3).collect::<Vec<_>>();
        let mut msg = format!("non-finite loss {loss} at step {}; offending draws {worst:?}", self.step);
        if let Some(p) = &self.dump_path {
            match self.checkpoint().save(p) {
                Ok(()) => msg.push_str(&format!("; state written to {}", p.display())),
                Err(e) => msg.push_str(&format!("; state dump failed: {e}")),
            }
        }
        log::error!("{msg}");
        Error::Numeric(msg)
    }

    /// One network update, followed by a proposal update when due.
    pub fn train_step(&mut self, target: &Target) -> Result<MetricsRow> {
        let lr = self.config.learning_rate_at(self.step);
        let batch = target.sample(&mut self.stream(KEY_BATCH).generator(), self.config.batch_size);
        let mut lg = batch_loss_and_gradient(&self.network, &self.proposal, &self.manifold, &batch, &self.objective, self.stream(KEY_LOSS))?;
        let loss = lg.loss();
        if !loss.is_finite() {
            return Err(self.abort(loss, &lg.draws));
        }
        let estimates: Vec<f64> = lg.draws.iter().map(IntegrandDraw::estimate).collect();
        let loss_std = if estimates.len() > 1 { variance(&estimates).sqrt() } else { 0.0 };
        let norm = clip_global_norm(&mut lg.grads, self.config.clip_norm);
        if norm > self.config.clip_norm {
            log::warn!("step {}: gradient norm {norm:.3e} clipped to {}", self.step, self.config.clip_norm);
        }
        adam_step(&mut self.network.params, &lg.grads, &mut self.optimizer, lr, &self.config.adam())?;
        self.step += 1;
        let period = self.config.proposal_update_period;
        if period > 0 && self.step % period == 0 {
            self.update_proposal(target)?;
        }
        let row = MetricsRow { step: self.step, loss, loss_std, lr, proposal_variance: self.last_proposal_variance };
        self.metrics.push(row);
        Ok(row)
    }

    /// Draws under the current proposal, then several Adam steps on the
    /// estimator's second moment, reusing those draws.
    pub fn update_proposal(&mut self, target: &Target) -> Result<()> {
        let stream = self.stream(KEY_PROPOSAL);
        let xs = target.sample(&mut stream.substream(0).generator(), self.config.proposal_draws);
        let draws = collect_draws(&self.network, &self.proposal, &self.manifold, &xs, &self.objective, stream.substream(1))?;
        let weighted: Vec<WeightedDraw> = draws.iter().map(IntegrandDraw::weighted).collect();
        for _ in 0..self.config.proposal_iterations {
            self.proposal.variance_step(&weighted, self.config.proposal_learning_rate)?;
        }
        let mean = weighted.iter().map(WeightedDraw::estimate).sum::<f64>() / weighted.len() as f64;
        self.last_proposal_variance = self.proposal.second_moment(&weighted) - mean * mean;
        log::info!("step {}: proposal update, estimator variance {:.4e}", self.step, self.last_proposal_variance);
        Ok(())
    }

    /// Runs the remaining steps, handing each metrics row to `on_row`.
    pub fn run(&mut self, target: &Target, mut on_row: impl FnMut(&MetricsRow)) -> Result<()> {
        while self.step < self.config.steps {
            let row = self.train_step(target)?;
            on_row(&row);
        }
        Ok(())
    }
}

/// One estimator draw per point; draw `i` uses `rng.substream(i)`.
pub fn collect_draws<F: AmbientField + ?Sized>(
    field: &F,
    proposal: &TimeProposal,
    m: &Manifold,
    xs: &[Vec<f64>],
    cfg: &ObjectiveConfig,
    rng: RngStream,
) -> Result<Vec<IntegrandDraw>> {
    use rayon::prelude::*;
    xs.par_iter().enumerate().map(|(i, x)| ctelbo_integrand(field, proposal, m, x, cfg, rng.substream(i as u64), None)).collect()
}

/// Mean, standard error and variance of `ℐ` over `xs`, one draw each.
pub fn estimator_statistics<F: AmbientField + ?Sized>(
    field: &F,
    proposal: &TimeProposal,
    m: &Manifold,
    xs: &[Vec<f64>],
    cfg: &ObjectiveConfig,
    rng: RngStream,
) -> Result<(f64, f64, f64)> {
    let est: Vec<f64> = collect_draws(field, proposal, m, xs, cfg, rng)?.iter().map(IntegrandDraw::estimate).collect();
    let (mean, se) = mean_se(&est);
    Ok((mean, se, variance(&est)))
}
