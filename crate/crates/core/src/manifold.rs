//! Embedded manifolds: tangential projections, retractions, priors.
//!
//! Points and vectors are plain ambient coordinate slices. For the special
//! orthogonal group they are the row-major flattening of an `n×n` matrix.
//!
//! Every projection has two forms: a direct one used by integrators, and a
//! tape-recorded one ([`Manifold::project_on_tape`]) used when the projected
//! field must itself be differentiated with respect to the base point.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, qr_decompose, svd_square, Matrix};
use crate::rng::gaussian_vec;

/// Tolerance of the on-manifold check.
pub const ON_MANIFOLD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Manifold {
    /// Unit sphere `S^dim ⊂ ℝ^{dim+1}`.
    Sphere { dim: usize },
    /// Product of `dim` unit circles in `ℝ^{2·dim}`.
    Torus { dim: usize },
    /// Upper sheet of `⟨x, x⟩_𝓛 = 1/K` in `ℝ^{dim+1}`.
    Hyperboloid { dim: usize, curvature: f64 },
    /// `SO(n)` as row-major `n×n` matrices.
    SpecialOrthogonal { n: usize },
}

/// `−x₀y₀ + Σ_{i≥1} x_i y_i`
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "lorentz_inner length mismatch");
    -x[0] * y[0] + x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum::<f64>()
}

/// `log Γ(k/2)` for a positive integer `k`.
fn ln_gamma_half(k: usize) -> f64 {
    let (mut acc, mut z) = if k.is_multiple_of(2) { (0.0, 1.0) } else { (0.5 * PI.ln(), 0.5) };
    while z < k as f64 / 2.0 - 1e-9 {
        acc += z.ln();
        z += 1.0;
    }
    acc
}

/// Log surface area of the unit sphere `S^k`.
pub fn ln_sphere_volume(k: usize) -> f64 {
    let h = (k + 1) as f64 / 2.0;
    std::f64::consts::LN_2 + h * PI.ln() - ln_gamma_half(k + 1)
}

/// Log volume of `SO(n)` under the metric induced by the Frobenius embedding.
pub fn ln_so_volume(n: usize) -> f64 {
    (1..n).map(ln_sphere_volume).sum::<f64>() + (n * (n - 1)) as f64 / 4.0 * std::f64::consts::LN_2
}

/// Hyperbolic log-density from one taken against the Euclidean-induced measure.
///
/// Both metric determinants are taken in the graph chart `x_{1:d} ↦ x`, where
/// `|G_ℰ| = 1 + r²/x₀²` and `|G_𝓛| = 1 − r²/x₀²`.
pub fn hyperbolic_density_conversion(log_p_euclidean: f64, x: &[f64]) -> f64 {
    log_p_euclidean - 0.5 * hyperbolic_log_det_ratio(x)
}

/// Inverse of [`hyperbolic_density_conversion`].
pub fn hyperbolic_density_conversion_inverse(log_p_lorentz: f64, x: &[f64]) -> f64 {
    log_p_lorentz + 0.5 * hyperbolic_log_det_ratio(x)
}

/// `log(|G_𝓛| / |G_ℰ|)`
fn hyperbolic_log_det_ratio(x: &[f64]) -> f64 {
    let x0sq = x[0] * x[0];
    let r2: f64 = x[1..].iter().map(|v| v * v).sum();
    let g_l = 1.0 - r2 / x0sq;
    let g_e = 1.0 + r2 / x0sq;
    g_l.ln() - g_e.ln()
}

impl Manifold {
    pub fn sphere(dim: usize) -> Result<Self> {
        Manifold::Sphere { dim }.validated()
    }

    pub fn torus(dim: usize) -> Result<Self> {
        Manifold::Torus { dim }.validated()
    }

    pub fn hyperboloid(dim: usize, curvature: f64) -> Result<Self> {
        Manifold::Hyperboloid { dim, curvature }.validated()
    }

    pub fn special_orthogonal(n: usize) -> Result<Self> {
        Manifold::SpecialOrthogonal { n }.validated()
    }

    /// Checks descriptor invariants (positive dimension, negative curvature).
    pub fn validated(self) -> Result<Self> {
        match self {
            Manifold::Sphere { dim } | Manifold::Torus { dim } if dim == 0 => {
                Err(Error::Config(format!("{} needs dimension ≥ 1", self.name())))
            }
            Manifold::Hyperboloid { dim, curvature } => {
                if dim == 0 {
                    Err(Error::Config("hyperboloid needs dimension ≥ 1".into()))
                } else if !(curvature < 0.0 && curvature.is_finite()) {
                    Err(Error::Config(format!("hyperboloid curvature must be negative, got {curvature}")))
                } else {
                    Ok(self)
                }
            }
            Manifold::SpecialOrthogonal { n } if n < 2 => Err(Error::Config("SO(n) needs n ≥ 2".into())),
            _ => Ok(self),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Manifold::Sphere { .. } => "sphere",
            Manifold::Torus { .. } => "torus",
            Manifold::Hyperboloid { .. } => "hyperboloid",
            Manifold::SpecialOrthogonal { .. } => "special_orthogonal",
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            Manifold::Sphere { dim } | Manifold::Torus { dim } | Manifold::Hyperboloid { dim, .. } => dim,
            Manifold::SpecialOrthogonal { n } => n * (n - 1) / 2,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match *self {
            Manifold::Sphere { dim } | Manifold::Hyperboloid { dim, .. } => dim + 1,
            Manifold::Torus { dim } => 2 * dim,
            Manifold::SpecialOrthogonal { n } => n * n,
        }
    }

    pub fn is_compact(&self) -> bool {
        !matches!(self, Manifold::Hyperboloid { .. })
    }

    /// Default terminal time of the diffusion.
    pub fn default_horizon(&self) -> f64 {
        if self.is_compact() {
            1.0
        } else {
            2.0
        }
    }

    /// Size of the defining-constraint violation at `x` (0 on the manifold).
    pub fn constraint_defect(&self, x: &[f64]) -> f64 {
        if x.len() != self.ambient_dim() || x.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        match *self {
            Manifold::Sphere { .. } => (norm(x) - 1.0).abs(),
            Manifold::Torus { .. } => x.chunks_exact(2).map(|b| (b[0].hypot(b[1]) - 1.0).abs()).fold(0.0, f64::max),
            Manifold::Hyperboloid { curvature, .. } => {
                if x[0] <= 0.0 {
                    f64::INFINITY
                } else {
                    (lorentz_inner(x, x) - 1.0 / curvature).abs()
                }
            }
            Manifold::SpecialOrthogonal { n } => {
                let m = Matrix::from_row_major(n, n, x.to_vec()).expect("finite entries checked");
                if m.determinant() <= 0.0 {
                    return f64::INFINITY;
                }
                m.transpose().matmul(&m).max_abs_diff(&Matrix::identity(n))
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.constraint_defect(x) <= ON_MANIFOLD_TOL
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        let defect = self.constraint_defect(x);
        if defect <= ON_MANIFOLD_TOL {
            Ok(())
        } else {
            Err(Error::Constraint { manifold: self.name().into(), defect })
        }
    }

    /// `P_x u` after checking that `x` lies on the manifold.
    pub fn tangential_projection(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if u.len() != self.ambient_dim() {
            return Err(Error::Contract(format!(
                "vector has length {}, ambient dimension is {}",
                u.len(),
                self.ambient_dim()
            )));
        }
        Ok(self.project_tangent(x, u))
    }

    /// `P_x u` without the on-manifold check.
    pub fn project_tangent(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match *self {
            Manifold::Sphere { .. } => remove_normal(u, x),
            Manifold::Torus { .. } => {
                let mut out = Vec::with_capacity(u.len());
                for (xb, ub) in x.chunks_exact(2).zip(u.chunks_exact(2)) {
                    out.extend(remove_normal(ub, xb));
                }
                out
            }
            Manifold::Hyperboloid { .. } => {
                let mut n = x.to_vec();
                n[0] = -n[0];
                remove_normal(u, &n)
            }
            Manifold::SpecialOrthogonal { n } => {
                // (U − X Uᵀ X) / 2
                let xm = Matrix::from_row_major(n, n, x.to_vec()).expect("finite point");
                let um = Matrix::from_row_major(n, n, u.to_vec()).expect("finite vector");
                let xutx = xm.matmul(&um.transpose()).matmul(&xm);
                u.iter().zip(xutx.as_slice()).map(|(a, b)| 0.5 * (a - b)).collect()
            }
        }
    }

    /// Records `P_x u` on `tape`, differentiable in both `x` and `u`.
    pub fn project_on_tape(&self, tape: &mut Tape<'_>, x: Var, u: Var) -> Var {
        match *self {
            Manifold::Sphere { .. } => remove_normal_on_tape(tape, u, x),
            Manifold::Torus { dim } => {
                let blocks: Vec<Var> = (0..dim)
                    .map(|k| {
                        let xb = tape.slice(x, 2 * k, 2);
                        let ub = tape.slice(u, 2 * k, 2);
                        remove_normal_on_tape(tape, ub, xb)
                    })
                    .collect();
                tape.concat(&blocks)
            }
            Manifold::Hyperboloid { dim, .. } => {
                let x0 = tape.slice(x, 0, 1);
                let neg = tape.scale(x0, -1.0);
                let rest = tape.slice(x, 1, dim);
                let n = tape.concat(&[neg, rest]);
                remove_normal_on_tape(tape, u, n)
            }
            Manifold::SpecialOrthogonal { n } => {
                let ut = tape.transpose(u, n, n);
                let xut = tape.matmul(x, ut, n, n, n);
                let xutx = tape.matmul(xut, x, n, n, n);
                let diff = tape.sub(u, xutx);
                tape.scale(diff, 0.5)
            }
        }
    }

    /// Retraction onto the manifold.
    pub fn closest_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ambient_dim() {
            return Err(Error::Contract(format!(
                "point has length {}, ambient dimension is {}",
                x.len(),
                self.ambient_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("closest_point of a non-finite vector".into()));
        }
        match *self {
            Manifold::Sphere { .. } => normalize(x),
            Manifold::Torus { .. } => {
                let mut out = Vec::with_capacity(x.len());
                for b in x.chunks_exact(2) {
                    out.extend(normalize(b)?);
                }
                Ok(out)
            }
            Manifold::Hyperboloid { curvature, .. } => {
                let l = lorentz_inner(x, x);
                if l >= 0.0 {
                    return Err(Error::Domain(format!("Lorentz norm {l:.3e} is not timelike")));
                }
                let c = 1.0 / (curvature * l).sqrt();
                let sign = if x[0] < 0.0 { -c } else { c };
                Ok(x.iter().map(|v| v * sign).collect())
            }
            Manifold::SpecialOrthogonal { n } => {
                let m = Matrix::from_row_major(n, n, x.to_vec())?;
                let svd = svd_square(&m)?;
                let smax = svd.s[0];
                if svd.s[n - 1] <= 1e-12 * smax.max(1e-300) {
                    return Err(Error::Domain("closest_point of a singular matrix".into()));
                }
                let mut u = svd.u;
                let mut r = u.matmul(&svd.v.transpose());
                if r.determinant() < 0.0 {
                    for i in 0..n {
                        u[(i, n - 1)] = -u[(i, n - 1)];
                    }
                    r = u.matmul(&svd.v.transpose());
                }
                Ok(r.into_vec())
            }
        }
    }

    /// Log-density of the prior against the volume measure induced by the
    /// Euclidean embedding.
    pub fn prior_log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.prior_log_density_unchecked(x))
    }

    pub fn prior_log_density_unchecked(&self, x: &[f64]) -> f64 {
        match *self {
            Manifold::Sphere { dim } => -ln_sphere_volume(dim),
            Manifold::Torus { dim } => -(dim as f64) * (2.0 * PI).ln(),
            Manifold::SpecialOrthogonal { n } => -ln_so_volume(n),
            Manifold::Hyperboloid { dim, .. } => {
                // Standard normal in graph coordinates, pushed to the sheet.
                let r2: f64 = x[1..].iter().map(|v| v * v).sum();
                let log_normal = -0.5 * r2 - 0.5 * dim as f64 * (2.0 * PI).ln();
                log_normal - 0.5 * (1.0 + r2 / (x[0] * x[0])).ln()
            }
        }
    }

    pub fn prior_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match *self {
            Manifold::Sphere { dim } => loop {
                if let Ok(p) = normalize(&gaussian_vec(rng, dim + 1)) {
                    return p;
                }
            },
            Manifold::Torus { dim } => {
                let mut out = Vec::with_capacity(2 * dim);
                for _ in 0..dim {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    out.push(a.cos());
                    out.push(a.sin());
                }
                out
            }
            Manifold::Hyperboloid { dim, curvature } => {
                let y = gaussian_vec(rng, dim);
                lift_to_hyperboloid(&y, curvature)
            }
            Manifold::SpecialOrthogonal { n } => loop {
                let g = Matrix::from_row_major(n, n, gaussian_vec(rng, n * n)).expect("finite draws");
                let Ok(qr) = qr_decompose(&g) else { continue };
                let mut q = qr.q;
                if q.determinant() < 0.0 {
                    for i in 0..n {
                        q[(i, 0)] = -q[(i, 0)];
                    }
                }
                return q.into_vec();
            },
        }
    }

    /// `U₀ = ½ ∇_g log p₀` (zero for the uniform priors on compact manifolds).
    pub fn prior_drift(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            Manifold::Hyperboloid { .. } => {
                let g = hyperboloid_prior_ambient_grad(x);
                let mut u = self.project_tangent(x, &g);
                u.iter_mut().for_each(|v| *v *= 0.5);
                u
            }
            _ => vec![0.0; x.len()],
        }
    }

    pub fn has_prior_drift(&self) -> bool {
        matches!(self, Manifold::Hyperboloid { .. })
    }

    /// Records `U₀(x)` on `tape`; `None` when the drift vanishes identically.
    pub fn prior_drift_on_tape(&self, tape: &mut Tape<'_>, x: Var) -> Option<Var> {
        let Manifold::Hyperboloid { dim, .. } = *self else { return None };
        let x0 = tape.slice(x, 0, 1);
        let y = tape.slice(x, 1, dim);
        let r2 = tape.dot(y, y);
        let x0sq = tape.mul(x0, x0);
        let den = tape.add(x0sq, r2);
        let one = tape.constant(vec![1.0]);
        let inv_den = tape.div(one, den);
        let ny = tape.scale(y, -1.0);
        let yd = tape.mul_scalar(y, inv_den);
        let gy = tape.sub(ny, yd);
        let x0den = tape.mul(x0, den);
        let g0 = tape.div(r2, x0den);
        let g = tape.concat(&[g0, gy]);
        let pg = self.project_on_tape(tape, x, g);
        Some(tape.scale(pg, 0.5))
    }

    /// Canonical base point (north pole, identity, apex, all angles zero).
    pub fn origin(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.ambient_dim()];
        match *self {
            Manifold::Sphere { dim } => x[dim] = 1.0,
            Manifold::Torus { dim } => (0..dim).for_each(|k| x[2 * k] = 1.0),
            Manifold::Hyperboloid { curvature, .. } => x[0] = (-1.0 / curvature).sqrt(),
            Manifold::SpecialOrthogonal { n } => (0..n).for_each(|i| x[i * n + i] = 1.0),
        }
        x
    }
}

/// Euclidean gradient of the ambient extension
/// `−½Σ_{i≥1}x_i² − ½ log((x₀² + r²)/x₀²)` of the hyperboloid prior.
fn hyperboloid_prior_ambient_grad(x: &[f64]) -> Vec<f64> {
    let x0 = x[0];
    let r2: f64 = x[1..].iter().map(|v| v * v).sum();
    let den = x0 * x0 + r2;
    let mut g = Vec::with_capacity(x.len());
    g.push(r2 / (x0 * den));
    g.extend(x[1..].iter().map(|v| -v - v / den));
    g
}

/// Point of the hyperboloid with graph coordinates `y`.
pub fn lift_to_hyperboloid(y: &[f64], curvature: f64) -> Vec<f64> {
    let r2: f64 = y.iter().map(|v| v * v).sum();
    let mut x = Vec::with_capacity(y.len() + 1);
    x.push((-1.0 / curvature + r2).sqrt());
    x.extend_from_slice(y);
    x
}

fn normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n < 1e-300 || !n.is_finite() {
        return Err(Error::Domain("cannot normalise a zero vector".into()));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// `u − (n·u)/(n·n) n`
fn remove_normal(u: &[f64], n: &[f64]) -> Vec<f64> {
    let c = dot(n, u) / dot(n, n);
    u.iter().zip(n).map(|(a, b)| a - c * b).collect()
}

fn remove_normal_on_tape(tape: &mut Tape<'_>, u: Var, n: Var) -> Var {
    let nu = tape.dot(n, u);
    let nn = tape.dot(n, n);
    let c = tape.div(nu, nn);
    let cn = tape.mul_scalar(n, c);
    tape.sub(u, cn)
}
