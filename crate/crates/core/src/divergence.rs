//! Riemannian divergence of ambient vector fields on embedded manifolds.
//!
//! For a tangential field `v` the divergence is `Σ_j e_jᵀ (dv/dx) e_j` over
//! any orthonormal basis `e_j` of the tangent space. The contraction is built
//! on a [`Tape`], so it stays differentiable with respect to the parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{dot, qr_decompose, Matrix};
use crate::manifold::Manifold;
use crate::rng::{gaussian_vec, rademacher_vec, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDistribution {
    Gaussian,
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMethod {
    /// Exact contraction over a QR-orthonormalised tangent basis.
    Qr,
    /// One projected Rademacher probe.
    Hutchinson,
}

impl DivergenceMethod {
    /// QR for small manifolds, Hutchinson for the orthogonal groups.
    pub fn default_for(m: &Manifold) -> Self {
        match m {
            Manifold::SpecialOrthogonal { .. } => DivergenceMethod::Hutchinson,
            _ => DivergenceMethod::Qr,
        }
    }
}

/// Orthonormal basis of the tangent space at `x`: `d` Gaussian vectors,
/// projected and QR-orthonormalised. A rank-deficient draw is retried once.
pub fn tangent_basis<R: Rng + ?Sized>(m: &Manifold, x: &[f64], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let d = m.intrinsic_dim();
    let mut last_err = None;
    for _ in 0..2 {
        let cols: Vec<Vec<f64>> = (0..d).map(|_| m.project_tangent(x, &gaussian_vec(rng, m.ambient_dim()))).collect();
        match qr_decompose(&Matrix::from_columns(&cols)?) {
            Ok(qr) => return Ok((0..d).map(|j| qr.q.column(j)).collect()),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("loop ran"))
}

/// Records `Σ_j e_jᵀ (dv/dx) e_j` for the field node `v` recorded from input `x`.
pub fn contract_on_tape(tape: &mut Tape<'_>, x: Var, v: Var, directions: &[Vec<f64>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for e in directions {
        let ev = tape.constant(e.clone());
        let jv = tape.tangent(x, ev, v)?;
        let term = tape.dot(ev, jv);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(vec![0.0])))
}

/// Projected probes `P_x z` scaled so the contraction is a Hutchinson mean.
pub fn hutchinson_directions<R: Rng + ?Sized>(
    m: &Manifold,
    x: &[f64],
    n: usize,
    dist: ProbeDistribution,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|_| {
            let z = match dist {
                ProbeDistribution::Gaussian => gaussian_vec(rng, m.ambient_dim()),
                ProbeDistribution::Rademacher => rademacher_vec(rng, m.ambient_dim()),
            };
            m.project_tangent(x, &z).into_iter().map(|v| v * scale).collect()
        })
        .collect()
}

/// Divergence of `field` at `x` by QR-basis contraction.
///
/// `field` records `v(x)` on the tape; it should already be composed with
/// the tangential projection.
pub fn divergence_qr<F>(field: F, params: &[Vec<f64>], m: &Manifold, x: &[f64], rng: RngStream) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    m.check_point(x)?;
    let basis = tangent_basis(m, x, &mut rng.generator())?;
    let mut tape = Tape::new(params);
    let xv = tape.input(x.to_vec());
    let v = field(&mut tape, xv)?;
    let div = contract_on_tape(&mut tape, xv, v, &basis)?;
    Ok(tape.scalar(div))
}

/// Projected Hutchinson estimate and its standard error.
///
/// With more probes than ambient coordinates, the ambient Jacobian is formed
/// once and each quadratic form `z′ᵀ J z′` evaluated from it.
pub fn divergence_hutchinson<F>(
    field: F,
    params: &[Vec<f64>],
    m: &Manifold,
    x: &[f64],
    n_samples: usize,
    dist: ProbeDistribution,
    rng: RngStream,
) -> Result<(f64, f64)>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if n_samples == 0 {
        return Err(Error::Contract("Hutchinson estimator needs at least one sample".into()));
    }
    m.check_point(x)?;
    let mut g = rng.generator();
    let probes = hutchinson_directions(m, x, n_samples, dist, &mut g);
    let mut tape = Tape::new(params);
    let xv = tape.input(x.to_vec());
    let v = field(&mut tape, xv)?;
    let amb = m.ambient_dim();
    let values: Vec<f64> = if n_samples > amb {
        // Column k of the ambient Jacobian.
        let cols: Vec<Vec<f64>> = (0..amb)
            .map(|k| {
                let mut e = vec![0.0; amb];
                e[k] = 1.0;
                let ev = tape.constant(e);
                tape.tangent(xv, ev, v).map(|t| tape.value(t).to_vec())
            })
            .collect::<Result<_>>()?;
        probes
            .iter()
            .map(|z| {
                let mut jz = vec![0.0; amb];
                for (k, zk) in z.iter().enumerate() {
                    jz.iter_mut().zip(&cols[k]).for_each(|(a, c)| *a += zk * c);
                }
                dot(z, &jz) * n_samples as f64
            })
            .collect()
    } else {
        probes
            .iter()
            .map(|z| {
                let zv = tape.constant(z.clone());
                let jz = tape.tangent(xv, zv, v)?;
                Ok(dot(z, tape.value(jz)) * n_samples as f64)
            })
            .collect::<Result<_>>()?
    };
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// Spherical coordinates `(θ, φ)` of a point on `S²`, θ measured from `+z`.
pub fn sphere_chart(x: &[f64]) -> (f64, f64) {
    (x[2].clamp(-1.0, 1.0).acos(), x[1].atan2(x[0]))
}

fn sphere_embed(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

/// Divergence on `S²` from the coordinate formula
/// `(1/√|G|) Σ_j ∂_j(√|G| ũ_j)` in the `(θ, φ)` chart, with `√|G| = sin θ`
/// and central differences of step `1e-5`. Test oracle only.
pub fn divergence_intrinsic_sphere2<F>(field: F, x: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let (theta, phi) = sphere_chart(x);
    if theta.sin() <= 1e-3 {
        return Err(Error::Domain(format!("spherical chart is singular near the pole (sin θ = {:.2e})", theta.sin())));
    }
    // √|G| ũ_θ and √|G| ũ_φ at chart coordinates.
    let weighted = |t: f64, p: f64| -> (f64, f64) {
        let y = sphere_embed(t, p);
        let v = field(&y);
        let d_theta = [t.cos() * p.cos(), t.cos() * p.sin(), -t.sin()];
        let d_phi = [-t.sin() * p.sin(), t.sin() * p.cos(), 0.0];
        let u_theta = dot(&v, &d_theta);
        let u_phi = dot(&v, &d_phi) / (t.sin() * t.sin());
        (t.sin() * u_theta, t.sin() * u_phi)
    };
    let h = 1e-5;
    let d_theta = (weighted(theta + h, phi).0 - weighted(theta - h, phi).0) / (2.0 * h);
    let d_phi = (weighted(theta, phi + h).1 - weighted(theta, phi - h).1) / (2.0 * h);
    Ok((d_theta + d_phi) / theta.sin())
}

/// `Σ_k (∇_g·V_k) V_k` where `V_k(x) = P_x e_k` are the projection columns.
pub fn tangential_field_self_divergence(m: &Manifold, x: &[f64], rng: RngStream) -> Result<Vec<f64>> {
    m.check_point(x)?;
    let amb = m.ambient_dim();
    let basis = tangent_basis(m, x, &mut rng.generator())?;
    let mut out = vec![0.0; amb];
    for k in 0..amb {
        let mut e = vec![0.0; amb];
        e[k] = 1.0;
        let mut tape = Tape::new(&[]);
        let xv = tape.input(x.to_vec());
        let ek = tape.constant(e.clone());
        let vk = m.project_on_tape(&mut tape, xv, ek);
        let div = contract_on_tape(&mut tape, xv, vk, &basis)?;
        let d = tape.scalar(div);
        let pk = m.project_tangent(x, &e);
        out.iter_mut().zip(&pk).for_each(|(o, p)| *o += d * p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use std::f64::consts::PI;

    fn projected_constant(m: Manifold, c: Vec<f64>) -> impl Fn(&mut Tape<'_>, Var) -> Result<Var> {
        move |t, x| {
            let cv = t.constant(c.clone());
            Ok(m.project_on_tape(t, x, cv))
        }
    }

    fn s2() -> Manifold {
        Manifold::sphere(2).unwrap()
    }

    #[test]
    fn linear_field_at_north_pole() {
        let d = divergence_qr(projected_constant(s2(), vec![0.0, 0.0, 1.0]), &[], &s2(), &[0.0, 0.0, 1.0], RngStream::new(1, 0)).unwrap();
        assert!((d + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_field_has_zero_divergence() {
        let zero = |t: &mut Tape<'_>, _x: Var| Ok(t.constant(vec![0.0; 3]));
        assert_eq!(divergence_qr(zero, &[], &s2(), &[1.0, 0.0, 0.0], RngStream::new(1, 0)).unwrap(), 0.0);
        let (est, se) = divergence_hutchinson(zero, &[], &s2(), &[1.0, 0.0, 0.0], 50, ProbeDistribution::Rademacher, RngStream::new(1, 0)).unwrap();
        assert_eq!((est, se), (0.0, 0.0));
        assert_eq!(divergence_intrinsic_sphere2(|_| vec![0.0; 3], &[0.6, 0.0, 0.8]).unwrap(), 0.0);
    }

    fn rotation_field(t: &mut Tape<'_>, x: Var) -> Result<Var> {
        // ω × x with ω = (0.3, −1.1, 0.7), written as a matrix–vector product.
        let w = t.constant(vec![0.0, -0.7, -1.1, 0.7, 0.0, -0.3, 1.1, 0.3, 0.0]);
        Ok(t.matvec(w, x, 3, 3))
    }

    #[test]
    fn killing_field_is_divergence_free() {
        let mut g = RngStream::new(2, 0).generator();
        for i in 0..10 {
            let x = s2().prior_sample(&mut g);
            let d = divergence_qr(rotation_field, &[], &s2(), &x, RngStream::new(2, i)).unwrap();
            assert!(d.abs() < 1e-12);
            let oracle = divergence_intrinsic_sphere2(
                |y| {
                    let mut t = Tape::new(&[]);
                    let yv = t.input(y.to_vec());
                    let v = rotation_field(&mut t, yv).unwrap();
                    t.value(v).to_vec()
                },
                &x,
            );
            if let Ok(o) = oracle {
                assert!(o.abs() < 1e-5);
            }
        }
    }

    #[test]
    fn intrinsic_oracle_on_projected_axis_field() {
        let theta = PI / 3.0;
        let x = [theta.sin(), 0.0, theta.cos()];
        let d = divergence_intrinsic_sphere2(|y| s2().project_tangent(y, &[0.0, 0.0, 1.0]), &x).unwrap();
        assert!((d + 1.0).abs() < 1e-5, "{d}");
    }

    #[test]
    fn intrinsic_oracle_rejects_poles() {
        assert!(divergence_intrinsic_sphere2(|_| vec![0.0; 3], &[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn hutchinson_tracks_linear_field() {
        let x = [0.0, 0.6, 0.8];
        let c = vec![0.2, -0.5, 1.0];
        let exact = -2.0 * dot(&x, &c);
        let (est, se) = divergence_hutchinson(projected_constant(s2(), c), &[], &s2(), &x, 100_000, ProbeDistribution::Gaussian, RngStream::new(3, 0)).unwrap();
        assert!((est - exact).abs() < 3.0 * se, "{est} ± {se} vs {exact}");
    }

    #[test]
    fn single_sample_hutchinson_is_reproducible() {
        let f = projected_constant(s2(), vec![0.2, -0.5, 1.0]);
        let x = [0.0, 0.6, 0.8];
        let a = divergence_hutchinson(&f, &[], &s2(), &x, 1, ProbeDistribution::Rademacher, RngStream::new(4, 4)).unwrap();
        let b = divergence_hutchinson(&f, &[], &s2(), &x, 1, ProbeDistribution::Rademacher, RngStream::new(4, 4)).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
    }

    /// Nonlinear test field `P_x tanh-free polynomial` on any manifold.
    fn poly_field(m: Manifold) -> impl Fn(&mut Tape<'_>, Var) -> Result<Var> {
        move |t, x| {
            let n = m.ambient_dim();
            let w: Vec<f64> = (0..n * n).map(|k| ((k * 7 + 3) % 11) as f64 / 11.0 - 0.5).collect();
            let wv = t.constant(w);
            let lin = t.matvec(wv, x, n, n);
            let sq = t.mul(x, x);
            let s = t.sin(lin);
            let u = t.add(s, sq);
            Ok(m.project_on_tape(t, x, u))
        }
    }

    #[test]
    fn basis_independence_and_linearity() {
        let mans = [s2(), Manifold::torus(2).unwrap(), Manifold::hyperboloid(2, -1.0).unwrap(), Manifold::special_orthogonal(3).unwrap()];
        let mut g = RngStream::new(5, 0).generator();
        for m in mans {
            let x = m.prior_sample(&mut g);
            let f = poly_field(m);
            let a = divergence_qr(&f, &[], &m, &x, RngStream::new(5, 1)).unwrap();
            let b = divergence_qr(&f, &[], &m, &x, RngStream::new(5, 2)).unwrap();
            assert!((a - b).abs() < 1e-10, "{}: {a} vs {b}", m.name());
            let c = vec![0.3; m.ambient_dim()];
            let lin = projected_constant(m, c.clone());
            let dl = divergence_qr(&lin, &[], &m, &x, RngStream::new(5, 3)).unwrap();
            let combo = |t: &mut Tape<'_>, xv: Var| {
                let p = f(t, xv)?;
                let q = lin(t, xv)?;
                let p = t.scale(p, 2.0);
                let q = t.scale(q, -0.5);
                Ok(t.add(p, q))
            };
            let dc = divergence_qr(combo, &[], &m, &x, RngStream::new(5, 4)).unwrap();
            assert!((dc - (2.0 * a - 0.5 * dl)).abs() < 1e-10, "{}", m.name());
        }
    }

    #[test]
    fn rademacher_probes_have_lower_variance() {
        let x = [0.48, 0.6, 0.64];
        let f = poly_field(s2());
        let var_of = |dist| {
            let (_, se) = divergence_hutchinson(&f, &[], &s2(), &x, 20_000, dist, RngStream::new(6, 0)).unwrap();
            se * se * 20_000.0
        };
        assert!(var_of(ProbeDistribution::Rademacher) <= var_of(ProbeDistribution::Gaussian));
    }

    #[test]
    fn self_divergence_vanishes_on_every_manifold() {
        let mans = [s2(), Manifold::torus(3).unwrap(), Manifold::hyperboloid(2, -1.0).unwrap(), Manifold::special_orthogonal(3).unwrap()];
        let mut g = RngStream::new(7, 0).generator();
        for m in mans {
            for i in 0..5 {
                let x = m.prior_sample(&mut g);
                let r = tangential_field_self_divergence(&m, &x, RngStream::new(7, i)).unwrap();
                assert!(norm(&r) < 1e-8, "{}: {}", m.name(), norm(&r));
            }
        }
    }

    #[test]
    fn divergence_theorem_on_the_sphere() {
        let f = poly_field(s2());
        let mut g = RngStream::new(8, 0).generator();
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = s2().prior_sample(&mut g);
                divergence_qr(&f, &[], &s2(), &x, RngStream::new(8, i + 1)).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}, se {}", sd / (n as f64).sqrt());
    }
}
