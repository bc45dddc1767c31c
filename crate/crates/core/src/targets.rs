//! Synthetic target distributions and CSV ingestion.
//!
//! Densities are taken against the volume measure induced by the ambient
//! Euclidean space, the same measure the priors use.

use std::f64::consts::PI;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::manifold::{hyperbolic_density_conversion_inverse, lift_to_hyperboloid, lorentz_inner, Manifold};
use crate::rng::gaussian_vec;
use crate::stats::wrapped_normal_density;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmfComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub concentration: f64,
}

/// On a torus `scale` holds one standard deviation per angle; on a
/// hyperboloid a single isotropic standard deviation in geodesic units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrappedComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsvMapping {
    /// `(lat°, lon°)` to the unit 2-sphere.
    LatlonToSphere,
    /// One angle column per circle factor.
    AnglesToTorus,
    /// Ambient coordinates, snapped to the manifold when within 1e-6.
    AmbientRaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    VmfMixture {
        components: Vec<VmfComponent>,
    },
    WrappedGaussianMixture {
        components: Vec<WrappedComponent>,
    },
    /// Alternating unit cells of `[−3, 3]²` in graph coordinates of ℍ².
    HyperbolicCheckerboard,
    /// `Σ w_i · c(κ) exp(κ tr(M_iᵀ X))` on SO(3).
    So3Multimodal {
        concentration: f64,
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    CsvDataset {
        path: PathBuf,
        mapping: CsvMapping,
        #[serde(default)]
        degrees: bool,
    },
}

/// A validated target bound to its manifold. CSV datasets are loaded once.
#[derive(Debug, Clone)]
pub struct Target {
    pub manifold: Manifold,
    pub spec: TargetSpec,
    data: Option<Vec<Vec<f64>>>,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("mixture weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
    }
    Ok(())
}

fn check_mean(m: &Manifold, mean: &[f64]) -> Result<()> {
    if mean.len() != m.ambient_dim() {
        return Err(Error::Config(format!("component mean has {} coordinates, {} expects {}", mean.len(), m.name(), m.ambient_dim())));
    }
    m.check_point(mean)
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `log I_ν(κ)` by its power series summed in log space.
pub fn ln_bessel_i(nu: f64, kappa: f64) -> f64 {
    if kappa == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let lh = (kappa / 2.0).ln();
    let mut terms = Vec::new();
    let mut peak = f64::NEG_INFINITY;
    let mut k = 0.0;
    loop {
        let t = (2.0 * k + nu) * lh - ln_gamma(k + 1.0) - ln_gamma(k + nu + 1.0);
        terms.push(t);
        peak = peak.max(t);
        // Terms peak near k ≈ κ/2 and then decay faster than geometrically.
        if k > kappa && t < peak - 40.0 {
            break;
        }
        k += 1.0;
    }
    log_sum_exp(&terms)
}

/// Log normaliser of the von Mises–Fisher density on `S^{p−1}`.
pub fn vmf_log_normalizer(p: usize, kappa: f64) -> f64 {
    let pf = p as f64;
    if kappa == 0.0 {
        return -crate::manifold::ln_sphere_volume(p - 1);
    }
    if p == 3 {
        // κ / (4π sinh κ), written to stay finite for large κ.
        return kappa.ln() - (4.0 * PI).ln() - kappa - (-(-2.0 * kappa).exp_m1()).ln() + std::f64::consts::LN_2;
    }
    let nu = pf / 2.0 - 1.0;
    nu * kappa.ln() - pf / 2.0 * (2.0 * PI).ln() - ln_bessel_i(nu, kappa)
}

/// Wood's rejection sampler for `vMF(μ, κ)` on `S^{p−1}`.
pub fn sample_vmf<R: Rng + ?Sized>(mean: &[f64], kappa: f64, rng: &mut R) -> Vec<f64> {
    let p = mean.len();
    let pm1 = (p - 1) as f64;
    let b = pm1 / (2.0 * kappa + (4.0 * kappa * kappa + pm1 * pm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + pm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(pm1 / 2.0, pm1 / 2.0).expect("positive shape");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.gen();
        if kappa * w + pm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    let v = loop {
        let g = gaussian_vec(rng, p - 1);
        let n = norm(&g);
        if n > 1e-12 {
            break g.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let r = (1.0 - w * w).max(0.0).sqrt();
    let mut x: Vec<f64> = v.iter().map(|vi| r * vi).collect();
    x.push(w);
    // Householder reflection taking the last axis to `mean`.
    let mut u = mean.iter().map(|m| -m).collect::<Vec<_>>();
    u[p - 1] += 1.0;
    let uu = dot(&u, &u);
    if uu > 1e-24 {
        let c = 2.0 * dot(&u, &x) / uu;
        x.iter_mut().zip(&u).for_each(|(xi, ui)| *xi -= c * ui);
    }
    let n = norm(&x);
    x.into_iter().map(|v| v / n).collect()
}

pub fn angles_of(x: &[f64]) -> Vec<f64> {
    x.chunks(2).map(|c| c[1].atan2(c[0])).collect()
}

pub fn embed_angles(angles: &[f64]) -> Vec<f64> {
    angles.iter().flat_map(|a| [a.cos(), a.sin()]).collect()
}

/// Wrapped-normal series truncation `|k| ≤ 30`.
const WRAP_TERMS: i32 = 30;

/// Exponential map of the curvature-`K` hyperboloid at `mu`, applied to the
/// tangent vector obtained by parallel transport of `(0, v)` from the apex.
fn hyperboloid_wrapped_point(mu: &[f64], v: &[f64], curvature: f64) -> Vec<f64> {
    let r = (-1.0 / curvature).sqrt();
    let z: Vec<f64> = mu.iter().map(|c| c / r).collect();
    // Transport in the unit model: u + (z̃·ũ)/(z₀+1) (o + z).
    let mut u = vec![0.0];
    u.extend(v.iter().map(|c| c / r));
    let coef = dot(&z[1..], &u[1..]) / (z[0] + 1.0);
    let mut w = u.clone();
    w[0] += coef * (1.0 + z[0]);
    w[1..].iter_mut().zip(&z[1..]).for_each(|(wi, zi)| *wi += coef * zi);
    let len = lorentz_inner(&w, &w).max(0.0).sqrt();
    let out: Vec<f64> = if len < 1e-300 {
        z.clone()
    } else {
        z.iter().zip(&w).map(|(zi, wi)| len.cosh() * zi + len.sinh() * wi / len).collect()
    };
    // Re-lift from the spatial part so the constraint holds to rounding.
    let y: Vec<f64> = out[1..].iter().map(|c| c * r).collect();
    lift_to_hyperboloid(&y, curvature)
}

/// Geodesic distance on the curvature-`K` hyperboloid.
fn hyperboloid_distance(a: &[f64], b: &[f64], curvature: f64) -> f64 {
    let r2 = -1.0 / curvature;
    let alpha = (-lorentz_inner(a, b) / r2).max(1.0);
    r2.sqrt() * alpha.acosh()
}

fn so3_trace(a: &[f64], b: &[f64]) -> f64 {
    // tr(AᵀB) for row-major 3×3 matrices.
    dot(a, b)
}

impl Target {
    pub fn new(manifold: Manifold, spec: TargetSpec) -> Result<Self> {
        let m = manifold;
        let data = match &spec {
            TargetSpec::VmfMixture { components } => {
                if !matches!(m, Manifold::Sphere { .. }) {
                    return Err(Error::Config("vmf-mixture needs a sphere".into()));
                }
                check_weights(&components.iter().map(|c| c.weight).collect::<Vec<_>>())?;
                for c in components {
                    check_mean(&m, &c.mean)?;
                    if !(c.concentration.is_finite() && c.concentration >= 0.0) {
                        return Err(Error::Config("vMF concentration must be finite and ≥ 0".into()));
                    }
                }
                None
            }
            TargetSpec::WrappedGaussianMixture { components } => {
                let need = match m {
                    Manifold::Torus { dim } => dim,
                    Manifold::Hyperboloid { .. } => 1,
                    _ => return Err(Error::Config("wrapped-gaussian-mixture needs a torus or hyperboloid".into())),
                };
                check_weights(&components.iter().map(|c| c.weight).collect::<Vec<_>>())?;
                for c in components {
                    check_mean(&m, &c.mean)?;
                    if c.scale.len() != need || c.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                        return Err(Error::Config(format!("wrapped Gaussian needs {need} positive scale(s)")));
                    }
                }
                None
            }
            TargetSpec::HyperbolicCheckerboard => {
                if !matches!(m, Manifold::Hyperboloid { dim: 2, .. }) {
                    return Err(Error::Config("hyperbolic-checkerboard needs a 2-dimensional hyperboloid".into()));
                }
                None
            }
            TargetSpec::So3Multimodal { concentration, means, weights } => {
                if !matches!(m, Manifold::SpecialOrthogonal { n: 3 }) {
                    return Err(Error::Config("so3-multimodal needs SO(3)".into()));
                }
                if means.len() != weights.len() {
                    return Err(Error::Config("so3-multimodal: means and weights differ in length".into()));
                }
                check_weights(weights)?;
                for mean in means {
                    check_mean(&m, mean)?;
                }
                if !(concentration.is_finite() && *concentration >= 0.0) {
                    return Err(Error::Config("so3-multimodal concentration must be finite and ≥ 0".into()));
                }
                None
            }
            TargetSpec::CsvDataset { path, mapping, degrees } => Some(ingest_csv(path, &m, *mapping, *degrees)?),
        };
        Ok(Target { manifold, spec, data })
    }

    /// Loaded dataset points, if this target is a dataset.
    pub fn data(&self) -> Option<&[Vec<f64>]> {
        self.data.as_deref()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = &self.manifold;
        match &self.spec {
            TargetSpec::VmfMixture { components } => {
                let c = &components[pick(&components.iter().map(|c| c.weight).collect::<Vec<_>>(), rng)];
                sample_vmf(&c.mean, c.concentration, rng)
            }
            TargetSpec::WrappedGaussianMixture { components } => {
                let c = &components[pick(&components.iter().map(|c| c.weight).collect::<Vec<_>>(), rng)];
                match *m {
                    Manifold::Torus { dim } => {
                        let mu = angles_of(&c.mean);
                        let g = gaussian_vec(rng, dim);
                        let a: Vec<f64> = mu.iter().zip(&g).zip(&c.scale).map(|((m, z), s)| m + s * z).collect();
                        embed_angles(&a)
                    }
                    Manifold::Hyperboloid { dim, curvature } => {
                        let v: Vec<f64> = gaussian_vec(rng, dim).into_iter().map(|z| z * c.scale[0]).collect();
                        hyperboloid_wrapped_point(&c.mean, &v, curvature)
                    }
                    _ => unreachable!("validated in Target::new"),
                }
            }
            TargetSpec::HyperbolicCheckerboard => {
                let Manifold::Hyperboloid { curvature, .. } = *m else { unreachable!("validated in Target::new") };
                loop {
                    let y = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                    if (f64::floor(y[0]) + f64::floor(y[1])).rem_euclid(2.0) == 0.0 {
                        return lift_to_hyperboloid(&y, curvature);
                    }
                }
            }
            TargetSpec::So3Multimodal { concentration, means, weights } => {
                let mean = &means[pick(weights, rng)];
                // Rejection from Haar; tr(MᵀX) ≤ 3 bounds the ratio.
                loop {
                    let x = m.prior_sample(rng);
                    let u: f64 = rng.gen();
                    if u.ln() <= concentration * (so3_trace(mean, &x) - 3.0) {
                        return x;
                    }
                }
            }
            TargetSpec::CsvDataset { .. } => {
                let data = self.data.as_ref().expect("loaded in Target::new");
                data[rng.gen_range(0..data.len())].clone()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn has_log_density(&self) -> bool {
        matches!(self.spec, TargetSpec::VmfMixture { .. } | TargetSpec::WrappedGaussianMixture { .. })
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let m = &self.manifold;
        m.check_point(x)?;
        match &self.spec {
            TargetSpec::VmfMixture { components } => {
                let p = x.len();
                let terms: Vec<f64> = components
                    .iter()
                    .map(|c| c.weight.ln() + vmf_log_normalizer(p, c.concentration) + c.concentration * dot(&c.mean, x))
                    .collect();
                Ok(log_sum_exp(&terms))
            }
            TargetSpec::WrappedGaussianMixture { components } => match *m {
                Manifold::Torus { .. } => {
                    let a = angles_of(x);
                    let terms: Vec<f64> = components
                        .iter()
                        .map(|c| {
                            let mu = angles_of(&c.mean);
                            c.weight.ln()
                                + a.iter()
                                    .zip(&mu)
                                    .zip(&c.scale)
                                    .map(|((ai, mi), s)| wrapped_normal_density(*ai, *mi, s * s, WRAP_TERMS).ln())
                                    .sum::<f64>()
                        })
                        .collect();
                    Ok(log_sum_exp(&terms))
                }
                Manifold::Hyperboloid { dim, curvature } => {
                    let r = (-1.0 / curvature).sqrt();
                    let d = dim as f64;
                    let terms: Vec<f64> = components
                        .iter()
                        .map(|c| {
                            let s2 = c.scale[0] * c.scale[0];
                            let dist = hyperboloid_distance(&c.mean, x, curvature);
                            let u = dist / r;
                            // log(sinh u / u), accurate near zero.
                            let jac = if u < 1e-4 { u * u / 6.0 } else { (u.sinh() / u).ln() };
                            c.weight.ln() - 0.5 * d * (2.0 * PI * s2).ln() - dist * dist / (2.0 * s2) - (d - 1.0) * jac
                        })
                        .collect();
                    Ok(hyperbolic_density_conversion_inverse(log_sum_exp(&terms), x))
                }
                _ => unreachable!("validated in Target::new"),
            },
            TargetSpec::HyperbolicCheckerboard => Err(Error::Unsupported("the hyperbolic checkerboard has no density".into())),
            TargetSpec::So3Multimodal { .. } => Err(Error::Unsupported("the SO(3) target has no closed-form density".into())),
            TargetSpec::CsvDataset { .. } => Err(Error::Unsupported("a dataset has no density".into())),
        }
    }
}

/// Reads a headed CSV file into manifold points.
pub fn ingest_csv(path: &Path, m: &Manifold, mapping: CsvMapping, degrees: bool) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path)?;
    parse_csv(file, m, mapping, degrees)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, reason: format!("{other:?}") },
    }
}

pub fn parse_csv<R: Read>(reader: R, m: &Manifold, mapping: CsvMapping, degrees: bool) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let width = rdr.headers().map_err(csv_error)?.len();
    let expected = match (mapping, *m) {
        (CsvMapping::LatlonToSphere, Manifold::Sphere { dim: 2 }) => 2,
        (CsvMapping::LatlonToSphere, _) => return Err(Error::Config("latlon-to-sphere needs the 2-sphere".into())),
        (CsvMapping::AnglesToTorus, Manifold::Torus { dim }) => dim,
        (CsvMapping::AnglesToTorus, _) => return Err(Error::Config("angles-to-torus needs a torus".into())),
        (CsvMapping::AmbientRaw, _) => m.ambient_dim(),
    };
    if width != expected {
        return Err(Error::Parse { line: 1, reason: format!("header has {width} columns, expected {expected}") });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Parse { line, reason: format!("non-numeric field in {:?}", rec.iter().collect::<Vec<_>>()) })?;
        let point = match mapping {
            CsvMapping::LatlonToSphere => {
                let (lat, lon) = (vals[0], vals[1]);
                if !(-90.0..=90.0).contains(&lat) {
                    return Err(Error::Parse { line, reason: format!("latitude {lat} outside [−90, 90]") });
                }
                let (lat, lon) = (lat.to_radians(), lon.to_radians());
                vec![lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
            }
            CsvMapping::AnglesToTorus => {
                let a: Vec<f64> = if degrees { vals.iter().map(|v| v.to_radians()).collect() } else { vals };
                embed_angles(&a)
            }
            CsvMapping::AmbientRaw => {
                let defect = m.constraint_defect(&vals);
                if defect > 1e-6 {
                    return Err(Error::Parse { line, reason: format!("point is off the manifold by {defect:.3e}") });
                }
                m.closest_point(&vals).map_err(|e| Error::Parse { line, reason: e.to_string() })?
            }
        };
        m.check_point(&point).map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        out.push(point);
    }
    Ok(out)
}

/// Rotation about the unit axis `k` by `angle`, row-major.
pub fn so3_rotation(axis: [f64; 3], angle: f64) -> Vec<f64> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let k = [axis[0] / n, axis[1] / n, axis[2] / n];
    let kx = Matrix::from_row_major(3, 3, vec![0.0, -k[2], k[1], k[2], 0.0, -k[0], -k[1], k[0], 0.0]).expect("3×3");
    let kx2 = kx.matmul(&kx);
    let (s, c) = angle.sin_cos();
    let mut r = Matrix::identity(3);
    for i in 0..3 {
        for j in 0..3 {
            r[(i, j)] += s * kx[(i, j)] + (1.0 - c) * kx2[(i, j)];
        }
    }
    r.into_vec()
}
