//! Stratonovich–Heun integration of manifold SDEs and ODEs.
//!
//! Brownian increments are drawn in the ambient space and projected inside
//! the integrator, so the diffusion matrix is the tangential projection.
//!
//! Time conventions: the inference process runs in `s` from data (`s = 0`)
//! to the prior (`s = T`); the generative process runs in `t = T − s`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::network::ScoreNetwork;
use crate::rng::{gaussian_vec, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    /// Terminal time `T`.
    pub horizon: f64,
    pub n_steps: usize,
    /// Closest-point projection after every step.
    #[serde(default = "yes")]
    pub project: bool,
}

fn yes() -> bool {
    true
}

impl PathConfig {
    pub fn new(horizon: f64, n_steps: usize) -> Self {
        PathConfig { horizon, n_steps, project: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// A simulated inference path together with the running integrals used by
/// the likelihood bounds.
#[derive(Debug, Clone, Default)]
pub struct PathRealization {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub increments: Vec<Vec<f64>>,
    /// `∫ a·dB`, left-endpoint (Itô) sums.
    pub ito_integral: f64,
    /// `∫ ½‖a‖² ds`
    pub a_norm_integral: f64,
    /// `∫ ∇_g·(Pa − U₀) ds`
    pub divergence_integral: f64,
}

impl PathRealization {
    pub fn terminal(&self) -> &[f64] {
        self.points.last().expect("paths hold at least the initial point")
    }
}

/// One Stratonovich–Heun step of `dX = f(X, t) dt + σ P_X ∘ dB`.
///
/// `noise_scale` is σ; the increment `db` is ambient with `N(0, dt)` entries.
pub fn heun_step<F>(
    m: &Manifold,
    drift: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    db: &[f64],
    noise_scale: f64,
    project: bool,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + ?Sized,
{
    let f0 = drift(x, t)?;
    let p0 = noise(m, x, db, noise_scale);
    let pred: Vec<f64> = (0..x.len()).map(|i| x[i] + f0[i] * dt + p0[i]).collect();
    let f1 = drift(&pred, t + dt)?;
    let p1 = noise(m, &pred, db, noise_scale);
    let next: Vec<f64> = (0..x.len()).map(|i| x[i] + 0.5 * (f0[i] + f1[i]) * dt + 0.5 * (p0[i] + p1[i])).collect();
    finish_step(m, next, t + dt, project)
}

fn noise(m: &Manifold, x: &[f64], db: &[f64], scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; x.len()];
    }
    let mut p = m.project_tangent(x, db);
    if scale != 1.0 {
        p.iter_mut().for_each(|v| *v *= scale);
    }
    p
}

fn finish_step(m: &Manifold, next: Vec<f64>, t: f64, project: bool) -> Result<Vec<f64>> {
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration { time: t, reason: "non-finite state".into() });
    }
    if !project {
        return Ok(next);
    }
    let y = m
        .closest_point(&next)
        .map_err(|e| Error::Integration { time: t, reason: format!("projection failed: {e}") })?;
    let defect = m.constraint_defect(&y);
    if defect > crate::manifold::ON_MANIFOLD_TOL {
        return Err(Error::Integration { time: t, reason: format!("constraint defect {defect:.3e} after projection") });
    }
    Ok(y)
}

/// Ambient Brownian increments for `n_steps` steps of size `dt`.
pub fn brownian_increments<R: Rng + ?Sized>(rng: &mut R, dim: usize, n_steps: usize, dt: f64) -> Vec<Vec<f64>> {
    let sd = dt.sqrt();
    (0..n_steps).map(|_| gaussian_vec(rng, dim).into_iter().map(|v| v * sd).collect()).collect()
}

/// Inference SDE `dY = U₀ ds + P ∘ dB` from `x0` over `[0, until]` in
/// `cfg.n_steps` equal steps. Integral accumulators are left at zero.
pub fn simulate_inference(m: &Manifold, cfg: &PathConfig, x0: &[f64], until: f64, rng: RngStream) -> Result<PathRealization> {
    m.check_point(x0)?;
    let mut path = PathRealization { times: vec![0.0], points: vec![x0.to_vec()], ..Default::default() };
    if until <= 0.0 {
        return Ok(path);
    }
    let dt = until / cfg.n_steps as f64;
    let mut g = rng.generator();
    let drift = |x: &[f64], _s: f64| Ok(m.prior_drift(x));
    let mut x = x0.to_vec();
    for k in 0..cfg.n_steps {
        let db: Vec<f64> = gaussian_vec(&mut g, m.ambient_dim()).into_iter().map(|v| v * dt.sqrt()).collect();
        x = heun_step(m, &drift, &x, k as f64 * dt, dt, &db, 1.0, cfg.project)?;
        path.times.push((k + 1) as f64 * dt);
        path.points.push(x.clone());
        path.increments.push(db);
    }
    Ok(path)
}

/// Terminal point of the inference SDE started at `x0`, without storing the path.
pub fn inference_endpoint(m: &Manifold, n_steps: usize, project: bool, x0: &[f64], until: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if until <= 0.0 {
        return Ok(x0.to_vec());
    }
    let dt = until / n_steps as f64;
    let sd = dt.sqrt();
    let drift = |x: &[f64], _s: f64| Ok(m.prior_drift(x));
    let mut x = x0.to_vec();
    for k in 0..n_steps {
        let db: Vec<f64> = gaussian_vec(rng, m.ambient_dim()).into_iter().map(|v| v * sd).collect();
        x = heun_step(m, &drift, &x, k as f64 * dt, dt, &db, 1.0, project)?;
    }
    Ok(x)
}

/// Drift and diffusion scale of the λ-family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaFamily {
    pub lambda: f64,
}

impl LambdaFamily {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda <= 1.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!("λ must be finite and ≤ 1, got {lambda}")));
        }
        Ok(LambdaFamily { lambda })
    }

    pub fn diffusion_scale(&self) -> f64 {
        (1.0 - self.lambda).max(0.0).sqrt()
    }

    /// `U₀ − (λ/2)·score`
    pub fn inference_drift(&self, score: &[f64], u0: &[f64]) -> Vec<f64> {
        u0.iter().zip(score).map(|(u, s)| u - 0.5 * self.lambda * s).collect()
    }

    /// `(1 − λ/2)·score − U₀`
    pub fn generative_drift(&self, score: &[f64], u0: &[f64]) -> Vec<f64> {
        score.iter().zip(u0).map(|(s, u)| (1.0 - 0.5 * self.lambda) * s - u).collect()
    }
}

/// Generative sample: `X₀ ~ p₀`, then integrate the λ-family generative
/// dynamics over `[0, T]`. `score(x, s)` is evaluated at inference time
/// `s = T − t` and should return the tangential field `P a`.
pub fn simulate_generative_with<F>(m: &Manifold, score: F, cfg: &PathConfig, family: LambdaFamily, rng: RngStream) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let mut g = rng.generator();
    let mut x = m.prior_sample(&mut g);
    let big_t = cfg.horizon;
    let dt = big_t / cfg.n_steps as f64;
    let sigma = family.diffusion_scale();
    let drift = |x: &[f64], t: f64| {
        let sc = score(x, big_t - t)?;
        Ok(family.generative_drift(&sc, &m.prior_drift(x)))
    };
    for k in 0..cfg.n_steps {
        let db: Vec<f64> = if sigma > 0.0 {
            gaussian_vec(&mut g, m.ambient_dim()).into_iter().map(|v| v * dt.sqrt()).collect()
        } else {
            vec![0.0; m.ambient_dim()]
        };
        x = heun_step(m, &drift, &x, k as f64 * dt, dt, &db, sigma, cfg.project)?;
    }
    Ok(x)
}

/// `P_x a(x, s)` for a network.
pub fn projected_score<'a>(m: &'a Manifold, net: &'a ScoreNetwork) -> impl Fn(&[f64], f64) -> Result<Vec<f64>> + 'a {
    move |x, s| Ok(m.project_tangent(x, &net.forward(x, s)?))
}

pub fn simulate_generative(m: &Manifold, net: &ScoreNetwork, cfg: &PathConfig, family: LambdaFamily, rng: RngStream) -> Result<Vec<f64>> {
    simulate_generative_with(m, projected_score(m, net), cfg, family, rng)
}

/// Exact Brownian motion on the torus: each angle moves by `N(0, t)`.
pub fn direct_torus_brownian<R: Rng + ?Sized>(d: usize, t: f64, y0: &[f64], rng: &mut R) -> Vec<f64> {
    if t <= 0.0 {
        return y0.to_vec();
    }
    let mut out = Vec::with_capacity(2 * d);
    for k in 0..d {
        let a0 = y0[2 * k + 1].atan2(y0[2 * k]);
        let step: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * t.sqrt();
        let a = (a0 + step).rem_euclid(2.0 * PI);
        out.push(a.cos());
        out.push(a.sin());
    }
    out
}

/// Tolerances of the adaptive ODE solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeTolerances {
    pub rtol: f64,
    pub atol: f64,
    pub min_step: f64,
}

impl Default for OdeTolerances {
    fn default() -> Self {
        OdeTolerances { rtol: 1e-3, atol: 1e-3, min_step: 1e-5 }
    }
}

/// Result of an adaptive ODE integration.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub terminal: Vec<f64>,
    /// Accumulated `∫ g ds` of the scalar rate.
    pub integral: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Integrates `dx/ds = v(x, s)` on the manifold together with `dℓ/ds = g(x, s)`
/// over `[s0, s1]`, where `rate(x, s)` returns `(v, g)`.
///
/// Heun steps with projected predictor and corrector; the step is controlled
/// by step doubling against `atol + rtol·|state|`.
pub fn integrate_ode_adaptive<F>(m: &Manifold, rate: F, x0: &[f64], s0: f64, s1: f64, tol: OdeTolerances) -> Result<OdeSolution>
where
    F: Fn(&[f64], f64) -> Result<(Vec<f64>, f64)>,
{
    let span = s1 - s0;
    let mut sol = OdeSolution { terminal: x0.to_vec(), integral: 0.0, accepted_steps: 0, rejected_steps: 0 };
    if span <= 0.0 {
        return Ok(sol);
    }
    let heun = |x: &[f64], l: f64, s: f64, h: f64, k0: Option<&(Vec<f64>, f64)>| -> Result<(Vec<f64>, f64)> {
        let owned;
        let (v0, g0) = match k0 {
            Some(k) => k,
            None => {
                owned = rate(x, s)?;
                &owned
            }
        };
        let pred: Vec<f64> = x.iter().zip(v0).map(|(a, b)| a + h * b).collect();
        let pred = finish_step(m, pred, s + h, true)?;
        let (v1, g1) = rate(&pred, s + h)?;
        let next: Vec<f64> = (0..x.len()).map(|i| x[i] + 0.5 * h * (v0[i] + v1[i])).collect();
        Ok((finish_step(m, next, s + h, true)?, l + 0.5 * h * (g0 + g1)))
    };
    let mut s = s0;
    let mut x = x0.to_vec();
    let mut l = 0.0;
    let mut h = span / 16.0;
    while s < s1 - 1e-12 * span {
        h = h.min(s1 - s);
        let k0 = rate(&x, s)?;
        let (xb, lb) = heun(&x, l, s, h, Some(&k0))?;
        let (xm, lm) = heun(&x, l, s, 0.5 * h, Some(&k0))?;
        let (xs, ls) = heun(&xm, lm, s + 0.5 * h, 0.5 * h, None)?;
        let mut err: f64 = xb
            .iter()
            .zip(&xs)
            .map(|(a, b)| (a - b).abs() / (tol.atol + tol.rtol * a.abs().max(b.abs())))
            .fold(0.0, f64::max);
        err = err.max((lb - ls).abs() / (tol.atol + tol.rtol * lb.abs().max(ls.abs())));
        if !err.is_finite() {
            return Err(Error::Integration { time: s, reason: "non-finite error estimate".into() });
        }
        if err <= 1.0 {
            s += h;
            x = xs;
            l = ls;
            sol.accepted_steps += 1;
        } else {
            sol.rejected_steps += 1;
            if h <= tol.min_step {
                return Err(Error::StepUnderflow { time: s, step: h });
            }
        }
        let factor = if err == 0.0 { 2.0 } else { (0.9 * err.powf(-1.0 / 3.0)).clamp(0.2, 2.0) };
        h = (h * factor).max(tol.min_step);
    }
    sol.terminal = x;
    sol.integral = l;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{angle, chi_square, chi_square_critical_1pct, ks_critical_1pct, ks_uniform, variance, wrapped_normal_density};
    use std::cell::RefCell;

    fn circle() -> Manifold {
        Manifold::sphere(1).unwrap()
    }

    #[test]
    fn zero_drift_zero_noise_is_a_fixed_point() {
        let m = Manifold::sphere(2).unwrap();
        let zero = |x: &[f64], _t: f64| Ok(vec![0.0; x.len()]);
        let x = [0.0, 0.6, 0.8];
        assert_eq!(heun_step(&m, &zero, &x, 0.0, 0.1, &[0.0; 3], 1.0, true).unwrap(), x.to_vec());
    }

    #[test]
    fn steps_stay_on_the_sphere() {
        let m = Manifold::sphere(2).unwrap();
        let mut g = RngStream::new(1, 0).generator();
        let drift = |x: &[f64], _t: f64| Ok(m.project_tangent(x, &[0.3, -1.0, 2.0]));
        let mut x = m.origin();
        for _ in 0..200 {
            let db = gaussian_vec(&mut g, 3).into_iter().map(|v| v * 0.1).collect::<Vec<_>>();
            x = heun_step(&m, &drift, &x, 0.0, 0.01, &db, 1.0, true).unwrap();
            assert!((crate::linalg::norm(&x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn circle_angle_increments_have_variance_dt() {
        let m = circle();
        let mut g = RngStream::new(2, 0).generator();
        let dt: f64 = 0.01;
        let zero = |x: &[f64], _t: f64| Ok(vec![0.0; x.len()]);
        let mut x = vec![1.0, 0.0];
        let mut incs = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let db: Vec<f64> = gaussian_vec(&mut g, 2).into_iter().map(|v| v * dt.sqrt()).collect();
            let y = heun_step(&m, &zero, &x, 0.0, dt, &db, 1.0, true).unwrap();
            let d = (y[1].atan2(y[0]) - x[1].atan2(x[0]) + PI).rem_euclid(2.0 * PI) - PI;
            incs.push(d);
            x = y;
        }
        let v = variance(&incs);
        assert!((v / dt - 1.0).abs() < 0.05, "variance ratio {}", v / dt);
    }

    #[test]
    fn zero_horizon_path_is_the_start_point() {
        let m = Manifold::sphere(2).unwrap();
        let p = simulate_inference(&m, &PathConfig::new(1.0, 10), &m.origin(), 0.0, RngStream::new(1, 0)).unwrap();
        assert_eq!(p.points.len(), 1);
        assert_eq!(p.terminal(), m.origin().as_slice());
    }

    #[test]
    fn long_circle_brownian_motion_is_uniform() {
        let m = circle();
        let cfg = PathConfig::new(10.0, 100);
        let n = 10_000;
        let base = RngStream::new(3, 0);
        let us: Vec<f64> = (0..n)
            .map(|i| {
                let y = inference_endpoint(&m, cfg.n_steps, true, &[1.0, 0.0], cfg.horizon, &mut base.substream(i).generator()).unwrap();
                angle(y[0], y[1]) / (2.0 * PI)
            })
            .collect();
        assert!(ks_uniform(&us) < ks_critical_1pct(n as usize));
    }

    #[test]
    fn heun_matches_wrapped_normal_at_quarter_time() {
        let m = circle();
        let n = 10_000;
        let bins = 40;
        let base = RngStream::new(4, 0);
        let mut counts = vec![0usize; bins];
        for i in 0..n {
            let y = inference_endpoint(&m, 1000, true, &[1.0, 0.0], 0.25, &mut base.substream(i).generator()).unwrap();
            let b = (angle(y[0], y[1]) / (2.0 * PI) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let w = 2.0 * PI / bins as f64;
        let expected: Vec<f64> = (0..bins)
            .map(|b| {
                // Simpson's rule on each cell.
                let (lo, hi) = (b as f64 * w, (b + 1) as f64 * w);
                let f = |a: f64| wrapped_normal_density(a, 0.0, 0.25, 30);
                (hi - lo) / 6.0 * (f(lo) + 4.0 * f(0.5 * (lo + hi)) + f(hi)) * n as f64
            })
            .collect();
        // Merge sparse tail cells so every expected count is at least 5.
        let (mut obs, mut exp, mut acc_o, mut acc_e) = (vec![], vec![], 0usize, 0.0);
        for (o, e) in counts.iter().zip(&expected) {
            acc_o += o;
            acc_e += e;
            if acc_e >= 5.0 {
                obs.push(acc_o);
                exp.push(acc_e);
                acc_o = 0;
                acc_e = 0.0;
            }
        }
        if acc_e > 0.0 {
            *obs.last_mut().unwrap() += acc_o;
            *exp.last_mut().unwrap() += acc_e;
        }
        let stat = chi_square(&obs, &exp);
        assert!(stat < chi_square_critical_1pct(obs.len() - 1), "χ² {stat} over {} cells", obs.len());
    }

    #[test]
    fn zero_network_generative_sde_is_uniform_and_seeded() {
        let m = circle();
        let cfg = PathConfig::new(10.0, 100);
        let zero = |x: &[f64], _s: f64| Ok(vec![0.0; x.len()]);
        let fam = LambdaFamily::new(0.0).unwrap();
        let n = 5000;
        let us: Vec<f64> = (0..n)
            .map(|i| {
                let y = simulate_generative_with(&m, zero, &cfg, fam, RngStream::new(5, i)).unwrap();
                angle(y[0], y[1]) / (2.0 * PI)
            })
            .collect();
        assert!(ks_uniform(&us) < ks_critical_1pct(n as usize));
        let a = simulate_generative_with(&m, zero, &cfg, fam, RngStream::new(5, 9)).unwrap();
        let b = simulate_generative_with(&m, zero, &cfg, fam, RngStream::new(5, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generative_time_runs_backwards() {
        let m = circle();
        let cfg = PathConfig::new(2.0, 4);
        let seen = RefCell::new(Vec::new());
        let score = |x: &[f64], s: f64| {
            seen.borrow_mut().push(s);
            Ok(vec![0.0; x.len()])
        };
        simulate_generative_with(&m, score, &cfg, LambdaFamily::new(0.0).unwrap(), RngStream::new(1, 1)).unwrap();
        // Heun evaluates at t_k and t_{k+1}; network times are T − t.
        let expected = [2.0, 1.5, 1.5, 1.0, 1.0, 0.5, 0.5, 0.0];
        let got = seen.borrow();
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn lambda_family_reductions() {
        assert!(matches!(LambdaFamily::new(1.5), Err(Error::Domain(_))));
        let f0 = LambdaFamily::new(0.0).unwrap();
        assert_eq!(f0.generative_drift(&[1.0, 2.0], &[0.5, 0.5]), vec![0.5, 1.5]);
        assert_eq!(f0.inference_drift(&[1.0, 2.0], &[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(f0.diffusion_scale(), 1.0);
        let f1 = LambdaFamily::new(1.0).unwrap();
        assert_eq!(f1.diffusion_scale(), 0.0);
        assert_eq!(f1.generative_drift(&[1.0], &[0.0]), vec![0.5]);
        assert_eq!(f1.inference_drift(&[1.0], &[0.0]), vec![-0.5]);
    }

    #[test]
    fn direct_torus_brownian_limits() {
        let y0 = [1.0, 0.0, 0.0, 1.0];
        let mut g = RngStream::new(6, 0).generator();
        assert_eq!(direct_torus_brownian(2, 0.0, &y0, &mut g), y0.to_vec());
        let n = 10_000;
        let us: Vec<f64> = (0..n)
            .map(|_| {
                let y = direct_torus_brownian(2, 1e4, &y0, &mut g);
                angle(y[2], y[3]) / (2.0 * PI)
            })
            .collect();
        assert!(ks_uniform(&us) < ks_critical_1pct(n));
    }

    #[test]
    fn direct_torus_brownian_matches_wrapped_normal() {
        let mut g = RngStream::new(7, 0).generator();
        let n = 10_000;
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let y = direct_torus_brownian(1, 0.25, &[0.0, 1.0], &mut g);
            let b = (angle(y[0], y[1]) / (2.0 * PI) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let w = 2.0 * PI / bins as f64;
        let expected: Vec<f64> = (0..bins)
            .map(|b| {
                let (lo, hi) = (b as f64 * w, (b + 1) as f64 * w);
                let f = |a: f64| wrapped_normal_density(a, PI / 2.0, 0.25, 30);
                (hi - lo) / 6.0 * (f(lo) + 4.0 * f(0.5 * (lo + hi)) + f(hi)) * n as f64
            })
            .collect();
        let keep: Vec<usize> = (0..bins).filter(|&b| expected[b] >= 5.0).collect();
        let obs: Vec<usize> = keep.iter().map(|&b| counts[b]).collect();
        let exp: Vec<f64> = keep.iter().map(|&b| expected[b]).collect();
        let stat = chi_square(&obs, &exp);
        assert!(stat < chi_square_critical_1pct(obs.len()), "χ² {stat}");
    }

    #[test]
    fn adaptive_ode_rotates_the_circle() {
        // dx/ds = J x rotates at unit speed; the scalar rate is constant.
        let m = circle();
        let rate = |x: &[f64], _s: f64| Ok((vec![-x[1], x[0]], 0.5));
        let sol = integrate_ode_adaptive(&m, rate, &[1.0, 0.0], 0.0, 1.0, OdeTolerances::default()).unwrap();
        let err = (sol.terminal[0] - 1f64.cos()).abs().max((sol.terminal[1] - 1f64.sin()).abs());
        assert!(err < 2e-3, "error {err} after {} steps", sol.accepted_steps);
        assert!((sol.integral - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adaptive_ode_reports_step_underflow() {
        let m = circle();
        let rate = |x: &[f64], s: f64| {
            let w = 1e9 * (1e4 * s).sin();
            Ok((vec![-w * x[1], w * x[0]], w))
        };
        let r = integrate_ode_adaptive(&m, rate, &[1.0, 0.0], 0.0, 1.0, OdeTolerances::default());
        assert!(matches!(r, Err(Error::StepUnderflow { .. })), "{r:?}");
    }
}
