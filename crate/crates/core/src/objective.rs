//! Likelihood bounds and the training loss.
//!
//! Under the fixed inference process `dY = U₀ ds + P ∘ dB`, the ELBO is
//!
//! ```text
//! E[log p₀(Y_T)] − ∫₀ᵀ E[½‖P a(Y_s, s)‖² + ∇_g·(P a − U₀)(Y_s, s)] ds
//! ```
//!
//! and the time integral is estimated with a single `s ~ q` per sample,
//! `ℐ = g(s)/q(s)`. The path to `Y_s` is simulated outside the tape, so no
//! gradient flows through the solver.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::divergence::{contract_on_tape, hutchinson_directions, tangent_basis, DivergenceMethod, ProbeDistribution};
use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::network::ScoreNetwork;
use crate::proposal::{TimeProposal, WeightedDraw};
use crate::rng::{gaussian_vec, RngStream};
use crate::sde::{direct_torus_brownian, heun_step, inference_endpoint, integrate_ode_adaptive, OdeTolerances, PathConfig};
use crate::stats::{log_mean_exp, mean_se};

/// A time-dependent ambient field `a(x, s)` that can be recorded on a tape.
pub trait AmbientField: Sync {
    /// Parameters read by [`AmbientField::record`].
    fn params(&self) -> &[Vec<f64>];
    fn record(&self, tape: &mut Tape<'_>, x: Var, s: f64) -> Result<Var>;
    fn eval(&self, x: &[f64], s: f64) -> Result<Vec<f64>>;
}

impl AmbientField for ScoreNetwork {
    fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    fn record(&self, tape: &mut Tape<'_>, x: Var, s: f64) -> Result<Var> {
        self.forward_on_tape(tape, x, s)
    }

    fn eval(&self, x: &[f64], s: f64) -> Result<Vec<f64>> {
        self.forward(x, s)
    }
}

/// `a(x, s) = c`, a parameter-free test field.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Vec<f64>);

impl AmbientField for ConstantField {
    fn params(&self) -> &[Vec<f64>] {
        &[]
    }

    fn record(&self, tape: &mut Tape<'_>, _x: Var, _s: f64) -> Result<Var> {
        Ok(tape.constant(self.0.clone()))
    }

    fn eval(&self, _x: &[f64], _s: f64) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// How `Y_s` is drawn given `Y_0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceSampler {
    /// Stratonovich–Heun with `n_steps` equal steps on `[0, s]`.
    Heun,
    /// Exact angular Brownian motion (tori only).
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub path: PathConfig,
    pub divergence: DivergenceMethod,
    pub sampler: InferenceSampler,
}

impl ObjectiveConfig {
    pub fn new(m: &Manifold, path: PathConfig) -> Self {
        ObjectiveConfig { path, divergence: DivergenceMethod::default_for(m), sampler: InferenceSampler::Heun }
    }

    pub fn validate(&self, m: &Manifold) -> Result<()> {
        self.path.validate()?;
        if self.sampler == InferenceSampler::Direct && !matches!(m, Manifold::Torus { .. }) {
            return Err(Error::Config("direct inference sampling is only available on tori".into()));
        }
        Ok(())
    }
}

/// One draw of the single-time estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrandDraw {
    pub s: f64,
    pub q: f64,
    /// `½‖P a‖²` at `(Y_s, s)`, unweighted.
    pub half_norm: f64,
    /// `∇_g·(P a − U₀)` at `(Y_s, s)`, unweighted.
    pub divergence: f64,
}

impl IntegrandDraw {
    /// `g(s) = ½‖Pa‖² + ∇_g·(Pa − U₀)`
    pub fn integrand(&self) -> f64 {
        self.half_norm + self.divergence
    }

    /// `ℐ = g(s)/q(s)`
    pub fn estimate(&self) -> f64 {
        self.integrand() / self.q
    }

    pub fn weighted(&self) -> WeightedDraw {
        WeightedDraw { s: self.s, integrand: self.integrand(), q: self.q }
    }
}

/// Probe directions for the divergence at `y`.
pub fn divergence_directions<R: Rng + ?Sized>(m: &Manifold, y: &[f64], method: DivergenceMethod, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    match method {
        DivergenceMethod::Qr => tangent_basis(m, y, rng),
        DivergenceMethod::Hutchinson => Ok(hutchinson_directions(m, y, 1, ProbeDistribution::Rademacher, rng)),
    }
}

/// Records `½‖P a‖²` and `∇_g·(P a − U₀)` at `(y, s)`.
pub fn record_integrand_terms<F: AmbientField + ?Sized>(
    tape: &mut Tape<'_>,
    field: &F,
    m: &Manifold,
    y: &[f64],
    s: f64,
    directions: &[Vec<f64>],
) -> Result<(Var, Var)> {
    let x = tape.input(y.to_vec());
    let a = field.record(tape, x, s)?;
    let pa = m.project_on_tape(tape, x, a);
    let v = match m.prior_drift_on_tape(tape, x) {
        Some(u0) => tape.sub(pa, u0),
        None => pa,
    };
    let div = contract_on_tape(tape, x, v, directions)?;
    let sq = tape.dot(pa, pa);
    let half = tape.scale(sq, 0.5);
    Ok((half, div))
}

/// `Y_s` given `Y_0 = x` under the configured sampler.
pub fn sample_inference_point<R: Rng>(m: &Manifold, cfg: &ObjectiveConfig, x: &[f64], s: f64, rng: &mut R) -> Result<Vec<f64>> {
    match cfg.sampler {
        InferenceSampler::Heun => inference_endpoint(m, cfg.path.n_steps, cfg.path.project, x, s, rng),
        InferenceSampler::Direct => match m {
            Manifold::Torus { dim } => Ok(direct_torus_brownian(*dim, s, x, rng)),
            _ => Err(Error::Config("direct inference sampling is only available on tori".into())),
        },
    }
}

/// One single-time draw: `s ~ q`, `Y_s` from the inference SDE, then the
/// integrand terms. When `grads` is given, `weight · ∂ℐ/∂θ` is added to it.
pub fn ctelbo_integrand<F: AmbientField + ?Sized>(
    field: &F,
    proposal: &TimeProposal,
    m: &Manifold,
    x: &[f64],
    cfg: &ObjectiveConfig,
    rng: RngStream,
    grads: Option<(&mut [Vec<f64>], f64)>,
) -> Result<IntegrandDraw> {
    let mut g = rng.generator();
    let (s, q) = proposal.sample(&mut g);
    integrand_at_time(field, m, x, s, q, cfg, &mut g, grads)
}

/// As [`ctelbo_integrand`] with the time `s` and its density `q` fixed.
#[allow(clippy::too_many_arguments)]
pub fn integrand_at_time<F: AmbientField + ?Sized, R: Rng>(
    field: &F,
    m: &Manifold,
    x: &[f64],
    s: f64,
    q: f64,
    cfg: &ObjectiveConfig,
    rng: &mut R,
    grads: Option<(&mut [Vec<f64>], f64)>,
) -> Result<IntegrandDraw> {
    let y = sample_inference_point(m, cfg, x, s, rng)?;
    integrand_at_point(field, m, &y, s, q, cfg.divergence, rng, grads)
}

/// Integrand terms at a given inference state `y = Y_s`.
#[allow(clippy::too_many_arguments)]
pub fn integrand_at_point<F: AmbientField + ?Sized, R: Rng>(
    field: &F,
    m: &Manifold,
    y: &[f64],
    s: f64,
    q: f64,
    method: DivergenceMethod,
    rng: &mut R,
    grads: Option<(&mut [Vec<f64>], f64)>,
) -> Result<IntegrandDraw> {
    let dirs = divergence_directions(m, y, method, rng)?;
    let mut tape = Tape::new(field.params());
    let (half, div) = record_integrand_terms(&mut tape, field, m, y, s, &dirs)?;
    let draw = IntegrandDraw { s, q, half_norm: tape.scalar(half), divergence: tape.scalar(div) };
    if let Some((buf, weight)) = grads {
        let g = tape.add(half, div);
        let loss = tape.scale(g, weight / q);
        tape.backward(loss, buf)?;
    }
    Ok(draw)
}

/// Batch loss `mean ℐ` with its parameter gradient.
pub struct LossAndGradient {
    pub draws: Vec<IntegrandDraw>,
    pub grads: Vec<Vec<f64>>,
}

impl LossAndGradient {
    pub fn loss(&self) -> f64 {
        self.draws.iter().map(IntegrandDraw::estimate).sum::<f64>() / self.draws.len() as f64
    }
}

/// Points per parallel work unit; fixed so the reduction order never depends
/// on the thread count.
const CHUNK: usize = 16;

/// `mean_i ℐ_i` over the batch and its gradient. Draw `i` uses `rng.substream(i)`.
pub fn batch_loss_and_gradient<F: AmbientField + ?Sized>(
    field: &F,
    proposal: &TimeProposal,
    m: &Manifold,
    batch: &[Vec<f64>],
    cfg: &ObjectiveConfig,
    rng: RngStream,
) -> Result<LossAndGradient> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let partials: Vec<Result<(Vec<IntegrandDraw>, Vec<Vec<f64>>)>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = autodiff::zeros_like(field.params());
            let mut draws = Vec::with_capacity(chunk.len());
            for (k, x) in chunk.iter().enumerate() {
                let i = (c * CHUNK + k) as u64;
                draws.push(ctelbo_integrand(field, proposal, m, x, cfg, rng.substream(i), Some((&mut grads, weight)))?);
            }
            Ok((draws, grads))
        })
        .collect();
    let mut grads = autodiff::zeros_like(field.params());
    let mut draws = Vec::with_capacity(batch.len());
    for p in partials {
        let (d, g) = p?;
        draws.extend(d);
        for (acc, part) in grads.iter_mut().zip(&g) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }
    Ok(LossAndGradient { draws, grads })
}

/// Monte Carlo ELBO estimate with its decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// `E[log p₀(Y_T)]`
    pub prior_term: f64,
    /// `∫ E[½‖Pa‖²] ds`
    pub a_norm_term: f64,
    /// `∫ E[∇_g·(Pa − U₀)] ds`
    pub divergence_term: f64,
}

/// Per-sample ELBO values `log p₀(Y_T) − ℐ` and the estimate built from them.
pub fn ctelbo_samples<F: AmbientField + ?Sized>(
    field: &F,
    proposal: &TimeProposal,
    m: &Manifold,
    x: &[f64],
    n_mc: usize,
    cfg: &ObjectiveConfig,
    rng: RngStream,
) -> Result<Vec<(f64, IntegrandDraw)>> {
    (0..n_mc as u64)
        .map(|j| {
            let stream = rng.substream(j);
            let draw = ctelbo_integrand(field, proposal, m, x, cfg, stream.substream(0), None)?;
            let prior = prior_term_sample(m, cfg, x, stream.substream(1))?;
            Ok((prior, draw))
        })
        .collect()
}

fn prior_term_sample(m: &Manifold, cfg: &ObjectiveConfig, x: &[f64], rng: RngStream) -> Result<f64> {
    if !m.has_prior_drift() && m.is_compact() {
        // Uniform prior: the terminal point does not matter.
        return Ok(m.prior_log_density_unchecked(x));
    }
    let y = sample_inference_point(m, cfg, x, cfg.path.horizon, &mut rng.generator())?;
    m.prior_log_density(&y)
}

pub fn ctelbo_estimate<F: AmbientField + ?Sized>(
    field: &F,
    proposal: &TimeProposal,
    m: &Manifold,
    batch: &[Vec<f64>],
    n_mc: usize,
    cfg: &ObjectiveConfig,
    rng: RngStream,
) -> Result<ElboEstimate> {
    if batch.is_empty() || n_mc == 0 {
        return Err(Error::Contract("ELBO estimate needs a nonempty batch and n_mc ≥ 1".into()));
    }
    let per_point: Vec<Result<Vec<(f64, IntegrandDraw)>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| ctelbo_samples(field, proposal, m, x, n_mc, cfg, rng.substream(i as u64)))
        .collect();
    let mut values = Vec::with_capacity(batch.len() * n_mc);
    let (mut prior, mut anorm, mut div) = (0.0, 0.0, 0.0);
    for r in per_point {
        for (p, d) in r? {
            values.push(p - d.estimate());
            prior += p;
            anorm += d.half_norm / d.q;
            div += d.divergence / d.q;
        }
    }
    let n = values.len() as f64;
    let (value, std_error) = mean_se(&values);
    Ok(ElboEstimate {
        value,
        std_error,
        n_samples: values.len(),
        prior_term: prior / n,
        a_norm_term: anorm / n,
        divergence_term: div / n,
    })
}

/// Per-path log-weights `log L(Y)` of the importance-weighted bound.
///
/// The path-wise bound is written in Stratonovich form,
/// `log L = log p₀(Y_T) − ∫ Pa∘dY − ∫ (∇_g·(½Pa − U₀) − U₀·Pa + ½‖Pa‖²) ds`,
/// and both integrals use the trapezoidal rule on the node values. When `Pa`
/// is the true score every term telescopes, so the weights stay nearly
/// constant under discretization.
pub fn kelbo_log_weights<F: AmbientField + ?Sized>(
    field: &F,
    m: &Manifold,
    x: &[f64],
    k: usize,
    cfg: &ObjectiveConfig,
    rng: RngStream,
) -> Result<Vec<f64>> {
    m.check_point(x)?;
    if k == 0 {
        return Err(Error::Contract("KELBO needs K ≥ 1".into()));
    }
    let path = cfg.path;
    let dt = path.horizon / path.n_steps as f64;
    let drift = |y: &[f64], _s: f64| Ok(m.prior_drift(y));
    (0..k as u64)
        .into_par_iter()
        .map(|j| {
            let mut g = rng.substream(j).generator();
            let node = |y: &[f64], s: f64, g: &mut _| -> Result<(Vec<f64>, f64)> {
                let dirs = divergence_directions(m, y, cfg.divergence, g)?;
                let mut tape = Tape::new(field.params());
                let xv = tape.input(y.to_vec());
                let a = field.record(&mut tape, xv, s)?;
                let pa = m.project_on_tape(&mut tape, xv, a);
                let half = tape.scale(pa, 0.5);
                let (v, cross) = match m.prior_drift_on_tape(&mut tape, xv) {
                    Some(u0) => {
                        let c = tape.dot(u0, pa);
                        (tape.sub(half, u0), tape.scalar(c))
                    }
                    None => (half, 0.0),
                };
                let div = contract_on_tape(&mut tape, xv, v, &dirs)?;
                let pav = tape.value(pa).to_vec();
                let rate = tape.scalar(div) - cross + 0.5 * pav.iter().map(|p| p * p).sum::<f64>();
                Ok((pav, rate))
            };
            let mut y = x.to_vec();
            let (mut pa, mut rate) = node(&y, 0.0, &mut g)?;
            let mut log_w = 0.0;
            for step in 0..path.n_steps {
                let s = step as f64 * dt;
                let db: Vec<f64> = gaussian_vec(&mut g, m.ambient_dim()).into_iter().map(|v| v * dt.sqrt()).collect();
                let next = heun_step(m, &drift, &y, s, dt, &db, 1.0, path.project)?;
                let (pa1, rate1) = node(&next, s + dt, &mut g)?;
                let strat: f64 = (0..y.len()).map(|i| 0.5 * (pa[i] + pa1[i]) * (next[i] - y[i])).sum();
                log_w -= strat + 0.5 * (rate + rate1) * dt;
                (y, pa, rate) = (next, pa1, rate1);
            }
            Ok(log_w + m.prior_log_density(&y)?)
        })
        .collect()
}

/// Importance-weighted bound `log mean_k L(Y_k)` with `K` paths.
pub fn kelbo<F: AmbientField + ?Sized>(field: &F, m: &Manifold, x: &[f64], k: usize, cfg: &ObjectiveConfig, rng: RngStream) -> Result<f64> {
    Ok(log_mean_exp(&kelbo_log_weights(field, m, x, k, cfg, rng)?))
}

/// Fixed stream for the divergence basis inside the ODE; the value does not
/// depend on the basis, this only makes the solve deterministic.
const ODE_BASIS_SEED: u64 = 0x0de_ba515;

/// Exact model log-density at `x` from the probability-flow ODE
/// `dY = (U₀ − ½ P a) ds` on `[0, T]`:
/// `log p(x) = log p₀(Y_T) + ∫ ∇_g·(U₀ − ½ P a) ds`.
pub fn ode_log_likelihood<F: AmbientField + ?Sized>(field: &F, m: &Manifold, x: &[f64], horizon: f64, tol: OdeTolerances) -> Result<f64> {
    m.check_point(x)?;
    let rate = |y: &[f64], s: f64| -> Result<(Vec<f64>, f64)> {
        let mut g = RngStream::new(ODE_BASIS_SEED, 0).generator();
        let basis = tangent_basis(m, y, &mut g)?;
        let mut tape = Tape::new(field.params());
        let xv = tape.input(y.to_vec());
        let a = field.record(&mut tape, xv, s)?;
        let pa = m.project_on_tape(&mut tape, xv, a);
        let half = tape.scale(pa, -0.5);
        let v = match m.prior_drift_on_tape(&mut tape, xv) {
            Some(u0) => tape.add(u0, half),
            None => half,
        };
        let div = contract_on_tape(&mut tape, xv, v, &basis)?;
        Ok((tape.value(v).to_vec(), tape.scalar(div)))
    };
    let sol = integrate_ode_adaptive(m, rate, x, 0.0, horizon, tol)?;
    Ok(m.prior_log_density(&sol.terminal)? + sol.integral)
}
