//! Learned importance density `q(s)` on `(0, T)`.
//!
//! The CDF is a deep sigmoidal flow: `F(s) = f_L ∘ logit ∘ … ∘ f_1(logit(s/T))`
//! with monotone layers `f(z) = Σ_j w_j σ(a_j z + b_j)`, `a_j > 0` and `w` on
//! the simplex. Then `q(s) = F′(s)`. Sampling inverts `F` by bisection.
//!
//! Each layer starts at `a = 1, b = 0`, which makes every layer the identity
//! in probability space, so the initial proposal is exactly uniform.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeProposal {
    pub horizon: f64,
    pub layers: usize,
    pub units: usize,
    /// Per layer: `log a`, `b`, `logit w`.
    pub params: Vec<Vec<f64>>,
    pub optimizer: AdamState,
}

/// One importance-sampled evaluation: time, unweighted integrand and the
/// proposal density it was drawn under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedDraw {
    pub s: f64,
    pub integrand: f64,
    pub q: f64,
}

impl WeightedDraw {
    /// The importance-weighted estimator `g(s)/q(s)`.
    pub fn estimate(&self) -> f64 {
        self.integrand / self.q
    }
}

const EDGE: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl TimeProposal {
    /// Uniform proposal; `seed` draws the mixture logits that break symmetry.
    pub fn uniform<R: Rng + ?Sized>(horizon: f64, layers: usize, units: usize, rng: &mut R) -> Result<Self> {
        if !(horizon > 0.0) || layers == 0 || units == 0 {
            return Err(Error::Config("time proposal needs T > 0 and at least one layer and unit".into()));
        }
        let mut params = Vec::with_capacity(3 * layers);
        for _ in 0..layers {
            params.push(vec![0.0; units]);
            params.push(vec![0.0; units]);
            params.push((0..units).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let optimizer = AdamState::new(&params);
        Ok(TimeProposal { horizon, layers, units, params, optimizer })
    }

    /// Restores the exactly-uniform initial state (keeps the mixture logits).
    pub fn reset_to_uniform(&mut self) {
        for l in 0..self.layers {
            self.params[3 * l].iter_mut().for_each(|v| *v = 0.0);
            self.params[3 * l + 1].iter_mut().for_each(|v| *v = 0.0);
            self.params[3 * l + 2].iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = 0.0);
        }
        self.optimizer = AdamState::new(&self.params);
    }

    /// `(F(s), q(s))`
    pub fn cdf_and_density(&self, s: f64) -> (f64, f64) {
        let t = (s / self.horizon).clamp(EDGE, 1.0 - EDGE);
        let mut z = logit(t);
        // dz/ds
        let mut dz = 1.0 / (self.horizon * t * (1.0 - t));
        let mut y = t;
        for l in 0..self.layers {
            let (la, b, lw) = (&self.params[3 * l], &self.params[3 * l + 1], &self.params[3 * l + 2]);
            let w = softmax(lw);
            let (mut yy, mut dy) = (0.0, 0.0);
            for j in 0..self.units {
                let a = la[j].exp();
                let sg = sigmoid(a * z + b[j]);
                yy += w[j] * sg;
                dy += w[j] * a * sg * (1.0 - sg);
            }
            y = yy.clamp(EDGE, 1.0 - EDGE);
            dy *= dz;
            if l + 1 < self.layers {
                z = logit(y);
                dz = dy / (y * (1.0 - y));
            } else {
                dz = dy;
            }
        }
        (y, dz)
    }

    pub fn density(&self, s: f64) -> f64 {
        self.cdf_and_density(s).1
    }

    pub fn cdf(&self, s: f64) -> f64 {
        self.cdf_and_density(s).0
    }

    /// `F⁻¹(u)` by bisection on `[0, T]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, self.horizon);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Draws `s ~ q` and returns `(s, q(s))`; `s` lies strictly inside `(0, T)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let u: f64 = rng.sample(Open01);
        let s = self.quantile(u).clamp(self.horizon * 1e-9, self.horizon * (1.0 - 1e-9));
        (s, self.density(s))
    }

    /// Records `log q(s)` on a tape whose parameter slice is `self.params`.
    fn log_density_on_tape(&self, tape: &mut Tape<'_>, s: f64) -> Var {
        let t = (s / self.horizon).clamp(EDGE, 1.0 - EDGE);
        let input = tape.input(vec![t]);
        let mut z = tape_logit(tape, input);
        let mut y = input;
        for l in 0..self.layers {
            let la = tape.param(3 * l);
            let b = tape.param(3 * l + 1);
            let lw = tape.param(3 * l + 2);
            let a = tape.exp(la);
            let az = tape.mul_scalar(a, z);
            let pre = tape.add(az, b);
            let sg = tape.sigmoid(pre);
            let ew = tape.exp(lw);
            let total = tape.sum(ew);
            let one = tape.constant(vec![1.0]);
            let inv = tape.div(one, total);
            let w = tape.mul_scalar(ew, inv);
            y = tape.dot(w, sg);
            if l + 1 < self.layers {
                z = tape_logit(tape, y);
            }
        }
        let dir = tape.constant(vec![1.0 / self.horizon]);
        let q = tape.tangent(input, dir, y).expect("sigmoidal flows have tangent rules");
        tape.ln(q)
    }

    /// Gradient of the estimator's second moment `E[(g/q)²]` with respect to
    /// the proposal parameters, from draws made under (possibly older)
    /// proposals: `−mean[g² / (q_θ q_draw) ∂ log q_θ(s)]`.
    pub fn second_moment_gradient(&self, draws: &[WeightedDraw]) -> Vec<Vec<f64>> {
        let mut grads = autodiff::zeros_like(&self.params);
        let n = draws.len() as f64;
        for d in draws {
            let q_now = self.density(d.s);
            let c = -(d.integrand * d.integrand) / (q_now * d.q) / n;
            let mut tape = Tape::new(&self.params);
            let lq = self.log_density_on_tape(&mut tape, d.s);
            let loss = tape.scale(lq, c);
            tape.backward(loss, &mut grads).expect("scalar loss");
        }
        grads
    }

    /// Importance-sampled estimate of `E_q[(g/q)²]` under the current proposal.
    pub fn second_moment(&self, draws: &[WeightedDraw]) -> f64 {
        let n = draws.len() as f64;
        draws.iter().map(|d| d.integrand * d.integrand / (self.density(d.s) * d.q)).sum::<f64>() / n
    }

    /// One Adam step on the estimator's second moment. Resets to uniform
    /// (with a warning) if the update leaves a degenerate density.
    pub fn variance_step(&mut self, draws: &[WeightedDraw], lr: f64) -> Result<()> {
        if draws.len() < 2 {
            return Err(Error::Contract("proposal update needs at least two draws".into()));
        }
        let grads = self.second_moment_gradient(draws);
        let mut state = std::mem::replace(&mut self.optimizer, AdamState::new(&[]));
        adam_step(&mut self.params, &grads, &mut state, lr, &AdamConfig::default())?;
        self.optimizer = state;
        if self.is_degenerate() {
            log::warn!("time proposal degenerated; resetting to uniform");
            self.reset_to_uniform();
        }
        Ok(())
    }

    /// True if the density underflows or stops being finite on a probe grid.
    pub fn is_degenerate(&self) -> bool {
        if self.params.iter().flatten().any(|v| !v.is_finite()) {
            return true;
        }
        let floor = 1e-6 / self.horizon;
        (1..200).any(|i| {
            let q = self.density(self.horizon * i as f64 / 200.0);
            !q.is_finite() || q < floor
        })
    }
}

fn tape_logit(tape: &mut Tape<'_>, v: Var) -> Var {
    let lv = tape.ln(v);
    let neg = tape.scale(v, -1.0);
    let om = tape.shift(neg, 1.0);
    let lom = tape.ln(om);
    tape.sub(lv, lom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn fresh(seed: u64) -> TimeProposal {
        TimeProposal::uniform(2.0, 2, 6, &mut RngStream::new(seed, 0).generator()).unwrap()
    }

    #[test]
    fn initial_proposal_is_uniform() {
        let p = fresh(1);
        for i in 1..100 {
            let s = 2.0 * i as f64 / 100.0;
            let (f, q) = p.cdf_and_density(s);
            assert!((f - s / 2.0).abs() < 1e-12 && (q - 0.5).abs() < 1e-9, "s={s}: F={f} q={q}");
        }
    }

    fn perturbed(seed: u64) -> TimeProposal {
        let mut p = fresh(seed);
        let mut g = RngStream::new(seed, 1).generator();
        for v in p.params.iter_mut().flatten() {
            *v += g.gen_range(-0.8..0.8);
        }
        p
    }

    #[test]
    fn density_matches_cdf_derivative_and_integrates_to_one() {
        let p = perturbed(3);
        assert!(p.cdf(0.0) < 1e-3 && p.cdf(2.0) > 1.0 - 1e-3);
        // Interior mass by quadrature against the CDF difference.
        let (lo, hi, n) = (0.1, 1.9, 4000);
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..n).map(|i| p.density(lo + (i as f64 + 0.5) * h) * h).sum();
        assert!((mass - (p.cdf(hi) - p.cdf(lo))).abs() < 1e-6, "mass {mass}");
        for s in [0.1, 0.7, 1.9] {
            let fd = (p.cdf(s + 1e-6) - p.cdf(s - 1e-6)) / 2e-6;
            assert!((fd - p.density(s)).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn cdf_is_monotone_and_samples_lie_inside() {
        let p = perturbed(4);
        let mut prev = -1.0;
        for i in 0..=1000 {
            let f = p.cdf(2.0 * i as f64 / 1000.0);
            assert!(f >= prev);
            prev = f;
        }
        let mut g = RngStream::new(4, 2).generator();
        for _ in 0..1000 {
            let (s, q) = p.sample(&mut g);
            assert!(s > 0.0 && s < 2.0 && q > 0.0);
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let p = perturbed(5);
        for u in [0.01, 0.3, 0.5, 0.99] {
            assert!((p.cdf(p.quantile(u)) - u).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_log_density_and_gradient_match_finite_differences() {
        let p = perturbed(6);
        let s = 0.83;
        let mut tape = Tape::new(&p.params);
        let lq = p.log_density_on_tape(&mut tape, s);
        assert!((tape.scalar(lq) - p.density(s).ln()).abs() < 1e-10);
        let mut grads = autodiff::zeros_like(&p.params);
        tape.backward(lq, &mut grads).unwrap();
        for (ti, tensor) in p.params.iter().enumerate() {
            let fd = autodiff::finite_diff_gradient(
                |v| {
                    let mut q = p.clone();
                    q.params[ti] = v.to_vec();
                    q.density(s).ln()
                },
                tensor,
                1e-6,
            );
            for (a, b) in grads[ti].iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "tensor {ti}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_integrand_is_stationary_at_uniform() {
        let p = fresh(7);
        let mut g = RngStream::new(7, 1).generator();
        let draws: Vec<WeightedDraw> = (0..2000)
            .map(|_| {
                let (s, q) = p.sample(&mut g);
                WeightedDraw { s, integrand: 1.0, q }
            })
            .collect();
        // For g ≡ 1 the score has mean zero under q: each component of the
        // averaged gradient must sit within MC noise of zero.
        let per_draw: Vec<Vec<f64>> = draws.iter().map(|d| p.second_moment_gradient(&[*d]).concat()).collect();
        for k in 0..per_draw[0].len() {
            let col: Vec<f64> = per_draw.iter().map(|g| g[k]).collect();
            let (mean, se) = crate::stats::mean_se(&col);
            assert!(mean.abs() <= 4.0 * se + 1e-12, "component {k}: {mean} ± {se}");
        }
    }

    #[test]
    fn concentrated_integrand_pulls_mass_towards_zero() {
        let mut p = fresh(8);
        let big_t = p.horizon;
        let g_of = |s: f64| (-12.0 * s / big_t).exp();
        let mut rng = RngStream::new(8, 1).generator();
        let draw = |p: &TimeProposal, rng: &mut crate::rng::Generator, n: usize| -> Vec<WeightedDraw> {
            (0..n)
                .map(|_| {
                    let (s, q) = p.sample(rng);
                    WeightedDraw { s, integrand: g_of(s), q }
                })
                .collect()
        };
        let held_out_var = |p: &TimeProposal, seed: u64| {
            let mut r = RngStream::new(seed, 9).generator();
            let d = draw(p, &mut r, 1000);
            crate::stats::variance(&d.iter().map(WeightedDraw::estimate).collect::<Vec<_>>())
        };
        let before = held_out_var(&p, 1);
        for _ in 0..500 {
            let d = draw(&p, &mut rng, 64);
            p.variance_step(&d, 0.01).unwrap();
        }
        let after = held_out_var(&p, 1);
        assert!(p.cdf(big_t / 4.0) > 0.5, "mass below T/4: {}", p.cdf(big_t / 4.0));
        assert!(after <= before, "variance {before} → {after}");
    }

    #[test]
    fn degenerate_parameters_reset_to_uniform() {
        let mut p = fresh(9);
        p.params[0][0] = f64::NAN;
        assert!(p.is_degenerate());
        p.reset_to_uniform();
        assert!(!p.is_degenerate());
        assert!((p.density(1.0) - 0.5).abs() < 1e-9);
    }
}
