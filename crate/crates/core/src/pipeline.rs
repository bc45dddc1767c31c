//! Run configuration and the batch commands: train, eval, sample, density
//! and ablate. Every text output starts with a `# config_hash=… seed=…` line.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::divergence::DivergenceMethod;
use crate::error::{Error, Result};
use crate::manifold::{lift_to_hyperboloid, Manifold};
use crate::network::{Activation, NetworkConfig};
use crate::objective::{integrand_at_point, kelbo, ode_log_likelihood, ctelbo_estimate, InferenceSampler, IntegrandDraw, ObjectiveConfig};
use crate::proposal::TimeProposal;
use crate::rng::{gaussian_vec, RngStream};
use crate::sde::{heun_step, simulate_generative, LambdaFamily, OdeTolerances, PathConfig};
use crate::stats::{mean_se, variance};
use crate::targets::{CsvMapping, Target, TargetSpec};
use crate::trainer::{write_metrics, TrainConfig, Trainer};

fn d_act() -> Activation {
    Activation::Sine
}
fn d_layers() -> usize {
    3
}
fn d_width() -> usize {
    64
}
fn d_one() -> usize {
    1
}
fn d_nsteps() -> usize {
    100
}
fn d_true() -> bool {
    true
}
fn d_kelbo() -> usize {
    100
}
fn d_points() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "d_act")]
    pub activation: Activation,
    #[serde(default = "d_layers")]
    pub hidden_layers: usize,
    #[serde(default = "d_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub actnorm_first: bool,
    #[serde(default = "d_one")]
    pub time_features: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { activation: d_act(), hidden_layers: d_layers(), hidden_width: d_width(), actnorm_first: false, time_features: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Defaults to the manifold's horizon.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "d_nsteps")]
    pub n_steps: usize,
    #[serde(default = "d_true")]
    pub project: bool,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { horizon: None, n_steps: d_nsteps(), project: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    pub mapping: CsvMapping,
    #[serde(default)]
    pub degrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_kelbo")]
    pub kelbo_k: usize,
    #[serde(default = "d_points")]
    pub n_points: usize,
    #[serde(default)]
    pub ode: OdeTolerances,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { kelbo_k: d_kelbo(), n_points: d_points(), ode: OdeTolerances::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifold: Manifold,
    #[serde(default)]
    pub network: NetworkSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses and validates; relative dataset paths resolve against `base`.
    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        if let (Some(base), Some(d)) = (base, c.dataset.as_mut()) {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        if let (Some(base), Some(TargetSpec::CsvDataset { path, .. })) = (base, c.target.as_mut()) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.manifold.validated()?;
        self.train.validate()?;
        self.path_config().validate()?;
        self.network_config().validate()?;
        match (&self.target, &self.dataset) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("exactly one of `target` and `dataset` is required".into())),
        }
        if self.eval.kelbo_k == 0 {
            return Err(Error::Config("eval.kelbo_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.paths.horizon.unwrap_or_else(|| self.manifold.default_horizon())
    }

    pub fn path_config(&self) -> PathConfig {
        PathConfig { horizon: self.horizon(), n_steps: self.paths.n_steps, project: self.paths.project }
    }

    pub fn network_config(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            activation: n.activation,
            hidden_layers: n.hidden_layers,
            hidden_width: n.hidden_width,
            actnorm_first: n.actnorm_first,
            ambient_dim: self.manifold.ambient_dim(),
            time_features: n.time_features,
            time_scale: self.horizon(),
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        let mut o = ObjectiveConfig::new(&self.manifold, self.path_config());
        if let Some(d) = self.train.divergence {
            o.divergence = d;
        }
        o
    }

    pub fn target(&self) -> Result<Target> {
        let spec = match (&self.target, &self.dataset) {
            (Some(t), _) => t.clone(),
            (None, Some(d)) => TargetSpec::CsvDataset { path: d.path.clone(), mapping: d.mapping, degrees: d.degrees },
            (None, None) => return Err(Error::Config("no target or dataset".into())),
        };
        Target::new(self.manifold, spec)
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serialises");
        hex_digest(json.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `# config_hash=<hash> seed=<seed>[ key=value …]`
pub fn header_line(hash: &str, seed: u64, extra: &[(&str, String)]) -> String {
    let mut h = format!("# config_hash={hash} seed={seed}");
    for (k, v) in extra {
        let _ = write!(h, " {k}={v}");
    }
    h
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains from a validated config; `seed` overrides `train.seed`.
pub fn train_run(config: &RunConfig, seed: u64, dump_path: Option<PathBuf>, mut on_row: impl FnMut(&crate::trainer::MetricsRow)) -> Result<Trainer> {
    let mut config = config.clone();
    config.train.seed = seed;
    let target = config.target()?;
    let mut trainer = Trainer::new(config.manifold, config.network_config(), config.objective(), config.train.clone(), &target)?;
    trainer.config_hash = config.hash();
    trainer.dump_path = dump_path;
    trainer.run(&target, |r| on_row(r))?;
    Ok(trainer)
}

pub fn cmd_train(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<TrainOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("checkpoint.json");
    let metrics = out_dir.join("metrics.tsv");
    let every = (config.train.steps / 20).max(1);
    let trainer = train_run(config, seed, Some(out_dir.join("abort_state.json")), |r| {
        if r.step % every == 0 {
            log::info!("step {} loss {:.4} ± {:.4} lr {:.2e}", r.step, r.loss, r.loss_std, r.lr);
        }
    })?;
    trainer.checkpoint().save(&checkpoint)?;
    let mut w = create(&metrics)?;
    writeln!(w, "{}", header_line(&trainer.config_hash, seed, &[]))?;
    write_metrics(&mut w, &trainer.metrics)?;
    w.flush()?;
    Ok(TrainOutputs { checkpoint, metrics })
}

/// Summary of a likelihood evaluation over points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NllSummary {
    pub mean: f64,
    pub std: f64,
    pub std_error: f64,
    pub n: usize,
}

impl NllSummary {
    fn of(values: &[f64]) -> Self {
        let (mean, se) = mean_se(values);
        let std = if values.len() > 1 { variance(values).sqrt() } else { 0.0 };
        NllSummary { mean, std, std_error: se, n: values.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub elbo_nll: NllSummary,
    pub kelbo_nll: NllSummary,
    pub ode_nll: Option<NllSummary>,
    pub kelbo_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub kelbo_k: usize,
    pub ode: bool,
    pub tolerances: OdeTolerances,
    pub seed: u64,
}

/// Negative single-sample ELBO, KELBO and (optionally) exact ODE values per point.
pub fn evaluate(ck: &Checkpoint, points: &[Vec<f64>], opts: &EvalOptions) -> Result<EvalReport> {
    if points.is_empty() {
        return Err(Error::Config("no evaluation points".into()));
    }
    let m = &ck.manifold;
    let obj = ObjectiveConfig { path: ck.path, divergence: ck.divergence, sampler: InferenceSampler::Heun };
    let base = RngStream::new(opts.seed, 0);
    let mut elbo = Vec::with_capacity(points.len());
    let mut kel = Vec::with_capacity(points.len());
    for (i, x) in points.iter().enumerate() {
        let e = ctelbo_estimate(&ck.network, &ck.proposal, m, std::slice::from_ref(x), 1, &obj, base.substream2(1, i as u64))?;
        elbo.push(-e.value);
        kel.push(-kelbo(&ck.network, m, x, opts.kelbo_k, &obj, base.substream2(2, i as u64))?);
    }
    let ode_nll = if opts.ode {
        let v: Vec<f64> = points
            .par_iter()
            .map(|x| ode_log_likelihood(&ck.network, m, x, ck.path.horizon, opts.tolerances).map(|l| -l))
            .collect::<Result<_>>()?;
        Some(NllSummary::of(&v))
    } else {
        None
    };
    Ok(EvalReport { elbo_nll: NllSummary::of(&elbo), kelbo_nll: NllSummary::of(&kel), ode_nll, kelbo_k: opts.kelbo_k })
}

pub fn write_eval_report<W: Write>(mut w: W, report: &EvalReport, header: &str) -> Result<()> {
    writeln!(w, "{header}")?;
    writeln!(w, "metric\tmean\tstd\tstd_error\tn")?;
    let mut row = |name: &str, s: &NllSummary| writeln!(w, "{name}\t{:.6}\t{:.6}\t{:.6}\t{}", s.mean, s.std, s.std_error, s.n);
    row("nll_elbo", &report.elbo_nll)?;
    row(&format!("nll_kelbo_{}", report.kelbo_k), &report.kelbo_nll)?;
    if let Some(o) = &report.ode_nll {
        row("nll_ode", o)?;
    }
    Ok(())
}

/// `n` generative samples; sample `i` uses its own substream.
pub fn generate_samples(ck: &Checkpoint, n: usize, lambda: f64, n_steps: Option<usize>, seed: u64) -> Result<Vec<Vec<f64>>> {
    let family = LambdaFamily::new(lambda)?;
    let mut cfg = ck.path;
    if let Some(s) = n_steps {
        cfg.n_steps = s;
        cfg.validate()?;
    }
    let base = RngStream::new(seed, 0);
    (0..n as u64).into_par_iter().map(|i| simulate_generative(&ck.manifold, &ck.network, &cfg, family, base.substream(i))).collect()
}

pub fn write_points_csv<W: Write>(mut w: W, points: &[Vec<f64>], dim: usize, header: &str) -> Result<()> {
    writeln!(w, "{header}")?;
    let names: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", names.join(","))?;
    for p in points {
        let row: Vec<String> = p.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn cmd_sample(ck: &Checkpoint, n: usize, lambda: f64, n_steps: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let pts = generate_samples(ck, n, lambda, n_steps, seed)?;
    let header = header_line(&ck.config_hash, seed, &[("lambda", lambda.to_string()), ("n", n.to_string())]);
    let mut w = create(out)?;
    write_points_csv(&mut w, &pts, ck.manifold.ambient_dim(), &header)?;
    w.flush()?;
    Ok(())
}

/// Quadrature grid for density maps.
///
/// Text forms: sphere `NTxNP` (colatitude × longitude midpoints), torus `N`
/// per angle (or `N1xN2`), 2-D hyperboloid `N:L` (graph coordinates on
/// `[−L, L]²`).
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Sphere { n_theta: usize, n_phi: usize },
    Torus { counts: Vec<usize> },
    Hyperbolic { n: usize, half_width: f64 },
}

/// One grid cell: ambient point and cell volume in the embedding-induced measure.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub point: Vec<f64>,
    pub volume: f64,
}

fn parse_count(s: &str) -> Result<usize> {
    s.trim().parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| Error::Config(format!("bad grid count `{s}`")))
}

impl GridSpec {
    pub fn parse(m: &Manifold, text: &str) -> Result<Self> {
        match *m {
            Manifold::Sphere { dim: 2 } => {
                let (a, b) = text.split_once('x').ok_or_else(|| Error::Config(format!("sphere grid must look like 64x128, got `{text}`")))?;
                Ok(GridSpec::Sphere { n_theta: parse_count(a)?, n_phi: parse_count(b)? })
            }
            Manifold::Sphere { dim: 1 } => Ok(GridSpec::Torus { counts: vec![parse_count(text)?] }),
            Manifold::Torus { dim } => {
                let parts: Vec<&str> = text.split('x').collect();
                let counts: Vec<usize> = if parts.len() == 1 {
                    vec![parse_count(parts[0])?; dim]
                } else {
                    parts.iter().map(|p| parse_count(p)).collect::<Result<_>>()?
                };
                if counts.len() != dim {
                    return Err(Error::Config(format!("torus grid needs {dim} counts")));
                }
                if counts.iter().product::<usize>() > 4_000_000 {
                    return Err(Error::Config("grid has more than 4·10⁶ cells".into()));
                }
                Ok(GridSpec::Torus { counts })
            }
            Manifold::Hyperboloid { dim: 2, .. } => {
                let (a, b) = text.split_once(':').ok_or_else(|| Error::Config(format!("hyperbolic grid must look like 128:4, got `{text}`")))?;
                let l: f64 = b.trim().parse().ok().filter(|v: &f64| *v > 0.0 && v.is_finite()).ok_or_else(|| Error::Config(format!("bad half width `{b}`")))?;
                Ok(GridSpec::Hyperbolic { n: parse_count(a)?, half_width: l })
            }
            _ => Err(Error::Unsupported(format!("density grids are not available on {}", m.name()))),
        }
    }

    pub fn cells(&self, m: &Manifold) -> Vec<GridCell> {
        use std::f64::consts::PI;
        match self {
            GridSpec::Sphere { n_theta, n_phi } => {
                let (dt, dp) = (PI / *n_theta as f64, 2.0 * PI / *n_phi as f64);
                let mut out = Vec::with_capacity(n_theta * n_phi);
                for i in 0..*n_theta {
                    let t = (i as f64 + 0.5) * dt;
                    for j in 0..*n_phi {
                        let p = (j as f64 + 0.5) * dp;
                        out.push(GridCell { point: vec![t.sin() * p.cos(), t.sin() * p.sin(), t.cos()], volume: t.sin() * dt * dp });
                    }
                }
                out
            }
            GridSpec::Torus { counts } => {
                let total: usize = counts.iter().product();
                let vol: f64 = counts.iter().map(|c| 2.0 * PI / *c as f64).product();
                (0..total)
                    .map(|mut k| {
                        let mut point = Vec::with_capacity(2 * counts.len());
                        for c in counts.iter().rev() {
                            let a = ((k % c) as f64 + 0.5) * 2.0 * PI / *c as f64;
                            k /= c;
                            point.push(a.sin());
                            point.push(a.cos());
                        }
                        point.reverse();
                        GridCell { point, volume: vol }
                    })
                    .collect()
            }
            GridSpec::Hyperbolic { n, half_width } => {
                let Manifold::Hyperboloid { curvature, .. } = *m else { return Vec::new() };
                let h = 2.0 * half_width / *n as f64;
                let mut out = Vec::with_capacity(n * n);
                for i in 0..*n {
                    for j in 0..*n {
                        let y = [-half_width + (i as f64 + 0.5) * h, -half_width + (j as f64 + 0.5) * h];
                        let point = lift_to_hyperboloid(&y, curvature);
                        let r2 = y[0] * y[0] + y[1] * y[1];
                        out.push(GridCell { volume: (1.0 + r2 / (point[0] * point[0])).sqrt() * h * h, point });
                    }
                }
                out
            }
        }
    }
}

/// Model log-density at every cell, from the probability-flow ODE.
pub fn density_grid(ck: &Checkpoint, grid: &GridSpec, tol: OdeTolerances) -> Result<Vec<(GridCell, f64)>> {
    let cells = grid.cells(&ck.manifold);
    let vals: Vec<f64> = cells.par_iter().map(|c| ode_log_likelihood(&ck.network, &ck.manifold, &c.point, ck.path.horizon, tol)).collect::<Result<_>>()?;
    Ok(cells.into_iter().zip(vals).collect())
}

pub fn cmd_density(ck: &Checkpoint, grid_text: &str, tol: OdeTolerances, out: &Path) -> Result<f64> {
    let grid = GridSpec::parse(&ck.manifold, grid_text)?;
    let rows = density_grid(ck, &grid, tol)?;
    let mass: f64 = rows.iter().map(|(c, l)| l.exp() * c.volume).sum();
    let mut w = create(out)?;
    writeln!(w, "{}", header_line(&ck.config_hash, ck.seed, &[("grid", grid_text.to_string()), ("mass", format!("{mass:.6}"))]))?;
    let mut names: Vec<String> = (0..ck.manifold.ambient_dim()).map(|i| format!("x{i}")).collect();
    names.push("cell_volume".into());
    names.push("log_density".into());
    writeln!(w, "{}", names.join(","))?;
    for (c, l) in &rows {
        let mut row: Vec<String> = c.point.iter().map(|v| format!("{v:e}")).collect();
        row.push(format!("{:e}", c.volume));
        row.push(format!("{l:e}"));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    IntSteps,
    Importance,
    HutchinsonVsQr,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int-steps" => Ok(AblationMode::IntSteps),
            "importance" => Ok(AblationMode::Importance),
            "hutchinson-vs-qr" => Ok(AblationMode::HutchinsonVsQr),
            _ => Err(Error::Config(format!("unknown ablation mode `{s}`"))),
        }
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub loss: f64,
    pub std_error: f64,
    pub variance: f64,
    /// Variant-specific comparison: gap to the reference loss or a variance ratio.
    pub relative: f64,
}

fn summarize(variant: &str, values: &[f64]) -> AblationRow {
    let (loss, std_error) = mean_se(values);
    AblationRow { variant: variant.into(), loss, std_error, variance: variance(values), relative: f64::NAN }
}

/// Torus paths driven by one set of fine Brownian increments.
///
/// `steps` equal Heun steps use partial sums of the `fine` increments; the
/// reference advances each angle by the tangential component of every fine
/// increment, which is exact Brownian motion in law.
fn coupled_torus_states(m: &Manifold, x: &[f64], s: f64, fine: usize, steps: &[usize], g: &mut impl Rng) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let Manifold::Torus { dim } = *m else { return Err(Error::Config("integration-step ablation needs a torus".into())) };
    let dt = s / fine as f64;
    let incs: Vec<Vec<f64>> = (0..fine).map(|_| gaussian_vec(g, 2 * dim).into_iter().map(|v| v * dt.sqrt()).collect()).collect();
    let zero = |y: &[f64], _t: f64| Ok(vec![0.0; y.len()]);
    let mut heun = Vec::with_capacity(steps.len());
    for &n in steps {
        if !fine.is_multiple_of(n) {
            return Err(Error::Config(format!("{n} steps do not divide the {fine}-step reference grid")));
        }
        let group = fine / n;
        let h = s / n as f64;
        let mut y = x.to_vec();
        for k in 0..n {
            let mut db = vec![0.0; 2 * dim];
            for inc in &incs[k * group..(k + 1) * group] {
                db.iter_mut().zip(inc).for_each(|(a, b)| *a += b);
            }
            y = heun_step(m, &zero, &y, k as f64 * h, h, &db, 1.0, true)?;
        }
        heun.push(y);
    }
    let mut angles: Vec<f64> = x.chunks(2).map(|c| c[1].atan2(c[0])).collect();
    for inc in &incs {
        for (j, a) in angles.iter_mut().enumerate() {
            *a += -a.sin() * inc[2 * j] + a.cos() * inc[2 * j + 1];
        }
    }
    let direct = angles.iter().flat_map(|a| [a.cos(), a.sin()]).collect();
    Ok((heun, direct))
}

/// Loss under Heun paths with each step count versus exact sampling, with
/// common random numbers for the data point, the time and the noise.
pub fn ablate_int_steps(ck: &Checkpoint, xs: &[Vec<f64>], steps: &[usize], n_draws: usize, seed: u64) -> Result<Vec<AblationRow>> {
    let m = ck.manifold;
    let fine = steps.iter().copied().max().unwrap_or(1);
    let base = RngStream::new(seed, 0);
    let per_draw: Vec<Vec<f64>> = (0..n_draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut g = base.substream(i).generator();
            let x = &xs[g.gen_range(0..xs.len())];
            let (s, q) = ck.proposal.sample(&mut g);
            let (heun, direct) = coupled_torus_states(&m, x, s, fine, steps, &mut g)?;
            let div_stream = base.substream2(1, i);
            let mut vals = Vec::with_capacity(steps.len() + 1);
            for y in heun.iter().chain(std::iter::once(&direct)) {
                let d = integrand_at_point(&ck.network, &m, y, s, q, ck.divergence, &mut div_stream.generator(), None)?;
                vals.push(d.estimate());
            }
            Ok(vals)
        })
        .collect::<Result<_>>()?;
    let column = |k: usize| per_draw.iter().map(|v| v[k]).collect::<Vec<f64>>();
    let reference = column(steps.len());
    let mut rows: Vec<AblationRow> = steps
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let vals = column(k);
            let mut r = summarize(&format!("heun_{n}"), &vals);
            r.relative = r.loss - mean_se(&reference).0;
            r
        })
        .collect();
    let mut r = summarize("direct", &reference);
    r.relative = 0.0;
    rows.push(r);
    Ok(rows)
}

/// Estimator variance under the checkpoint's proposal versus a uniform one,
/// on the same points and inference noise.
pub fn ablate_importance(ck: &Checkpoint, xs: &[Vec<f64>], n_draws: usize, seed: u64) -> Result<Vec<AblationRow>> {
    let obj = ObjectiveConfig { path: ck.path, divergence: ck.divergence, sampler: InferenceSampler::Heun };
    let uniform = TimeProposal::uniform(ck.path.horizon, 1, 1, &mut RngStream::new(0, 0).generator())?;
    let run = |p: &TimeProposal| -> Result<Vec<f64>> {
        let base = RngStream::new(seed, 0);
        (0..n_draws as u64)
            .into_par_iter()
            .map(|i| {
                let mut g = base.substream(i).generator();
                let x = &xs[g.gen_range(0..xs.len())];
                let d = crate::objective::ctelbo_integrand(&ck.network, p, &ck.manifold, x, &obj, base.substream2(1, i), None)?;
                Ok(d.estimate())
            })
            .collect()
    };
    let learned = summarize("learned", &run(&ck.proposal)?);
    let mut uni = summarize("uniform", &run(&uniform)?);
    uni.relative = 1.0;
    let mut learned = learned;
    learned.relative = learned.variance / uni.variance;
    Ok(vec![uni, learned])
}

/// Estimator statistics with exact (QR) versus one-probe Hutchinson
/// divergences at the same times and inference states.
pub fn ablate_hutchinson(ck: &Checkpoint, xs: &[Vec<f64>], n_draws: usize, seed: u64) -> Result<Vec<AblationRow>> {
    let obj = ObjectiveConfig { path: ck.path, divergence: ck.divergence, sampler: InferenceSampler::Heun };
    let base = RngStream::new(seed, 0);
    let pairs: Vec<(IntegrandDraw, IntegrandDraw)> = (0..n_draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut g = base.substream(i).generator();
            let x = &xs[g.gen_range(0..xs.len())];
            let (s, q) = ck.proposal.sample(&mut g);
            let y = crate::objective::sample_inference_point(&ck.manifold, &obj, x, s, &mut g)?;
            let qr = integrand_at_point(&ck.network, &ck.manifold, &y, s, q, DivergenceMethod::Qr, &mut g, None)?;
            let hu = integrand_at_point(&ck.network, &ck.manifold, &y, s, q, DivergenceMethod::Hutchinson, &mut g, None)?;
            Ok((qr, hu))
        })
        .collect::<Result<_>>()?;
    let qr: Vec<f64> = pairs.iter().map(|p| p.0.estimate()).collect();
    let hu: Vec<f64> = pairs.iter().map(|p| p.1.estimate()).collect();
    let mut a = summarize("qr", &qr);
    a.relative = 1.0;
    let mut b = summarize("hutchinson", &hu);
    b.relative = b.variance / a.variance;
    Ok(vec![a, b])
}

pub fn write_ablation<W: Write>(mut w: W, rows: &[AblationRow], header: &str, relative_name: &str) -> Result<()> {
    writeln!(w, "{header}")?;
    writeln!(w, "variant\tloss\tstd_error\tvariance\t{relative_name}")?;
    for r in rows {
        writeln!(w, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", r.variant, r.loss, r.std_error, r.variance, r.relative)?;
    }
    Ok(())
}

/// Runs one ablation on `n_points` target draws and writes its table.
pub fn cmd_ablate(ck: &Checkpoint, target: &Target, mode: AblationMode, n_draws: usize, n_points: usize, seed: u64, out: &Path) -> Result<Vec<AblationRow>> {
    if n_draws < 2 || n_points == 0 {
        return Err(Error::Config("ablation needs at least 2 draws and 1 point".into()));
    }
    let xs = target.sample(&mut RngStream::new(seed, 1).generator(), n_points);
    let (rows, rel) = match mode {
        AblationMode::IntSteps => (ablate_int_steps(ck, &xs, &[10, 100], n_draws, seed)?, "gap_to_direct"),
        AblationMode::Importance => (ablate_importance(ck, &xs, n_draws, seed)?, "variance_ratio"),
        AblationMode::HutchinsonVsQr => (ablate_hutchinson(ck, &xs, n_draws, seed)?, "variance_ratio"),
    };
    let mode_name = serde_json::to_value(mode)?.as_str().unwrap_or_default().to_string();
    let mut w = create(out)?;
    write_ablation(&mut w, &rows, &header_line(&ck.config_hash, seed, &[("mode", mode_name), ("draws", n_draws.to_string())]), rel)?;
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPHERE_CONFIG: &str = r#"{
        "manifold": {"kind": "sphere", "dim": 2},
        "network": {"hidden_layers": 1, "hidden_width": 8},
        "train": {"learning_rate": 0.001, "steps": 0, "seed": 0},
        "paths": {"horizon": 1.0, "n_steps": 10},
        "target": {"kind": "vmf-mixture", "components": [{"weight": 1.0, "mean": [0, 0, 1], "concentration": 2.0}]}
    }"#;

    fn zero_checkpoint() -> Checkpoint {
        let c = RunConfig::from_json(SPHERE_CONFIG, None).unwrap();
        train_run(&c, 1, None, |_| {}).unwrap().checkpoint()
    }

    #[test]
    fn config_parses_and_hash_is_stable() {
        let a = RunConfig::from_json(SPHERE_CONFIG, None).unwrap();
        let b = RunConfig::from_json(SPHERE_CONFIG, None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_eq!(a.horizon(), 1.0);
    }

    #[test]
    fn unknown_keys_and_missing_sources_are_config_errors() {
        let extra = SPHERE_CONFIG.replace("\"paths\"", "\"bogus\": 1, \"paths\"");
        assert!(matches!(RunConfig::from_json(&extra, None), Err(Error::Config(_))));
        let nested = SPHERE_CONFIG.replace("\"hidden_width\": 8", "\"hidden_width\": 8, \"depth\": 2");
        assert!(matches!(RunConfig::from_json(&nested, None), Err(Error::Config(_))));
        let none: serde_json::Value = {
            let mut v: serde_json::Value = serde_json::from_str(SPHERE_CONFIG).unwrap();
            v.as_object_mut().unwrap().remove("target");
            v
        };
        assert!(matches!(RunConfig::from_json(&none.to_string(), None), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_eval_is_uniform() {
        let ck = zero_checkpoint();
        let pts = vec![vec![0.0, 0.0, 1.0], vec![0.6, 0.8, 0.0]];
        let r = evaluate(&ck, &pts, &EvalOptions { kelbo_k: 4, ode: true, tolerances: OdeTolerances::default(), seed: 0 }).unwrap();
        let l4p = (4.0 * std::f64::consts::PI).ln();
        for s in [r.elbo_nll, r.kelbo_nll, r.ode_nll.unwrap()] {
            assert!((s.mean - l4p).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sample_writes_only_headers() {
        let ck = zero_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.csv");
        cmd_sample(&ck, 0, 1.0, None, 3, &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("# config_hash=") && lines[0].contains("seed=3"));
        assert_eq!(lines[1], "x0,x1,x2");
    }

    #[test]
    fn samples_are_reproducible_and_on_manifold() {
        let ck = zero_checkpoint();
        let a = generate_samples(&ck, 20, 0.5, None, 9).unwrap();
        assert_eq!(a, generate_samples(&ck, 20, 0.5, None, 9).unwrap());
        assert!(a.iter().all(|x| ck.manifold.contains(x)));
        assert!(matches!(generate_samples(&ck, 1, 1.5, None, 9), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_network_density_grid_has_unit_mass() {
        let ck = zero_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let mass = cmd_density(&ck, "16x32", OdeTolerances::default(), &dir.path().join("d.csv")).unwrap();
        assert!((mass - 1.0).abs() < 0.01);
    }

    #[test]
    fn grid_specs_parse_per_manifold() {
        let t2 = Manifold::torus(2).unwrap();
        assert_eq!(GridSpec::parse(&t2, "8").unwrap(), GridSpec::Torus { counts: vec![8, 8] });
        let cells = GridSpec::parse(&t2, "4x6").unwrap().cells(&t2);
        assert_eq!(cells.len(), 24);
        let vol: f64 = cells.iter().map(|c| c.volume).sum();
        assert!((vol - 4.0 * std::f64::consts::PI.powi(2)).abs() < 1e-9);
        assert!(cells.iter().all(|c| t2.contains(&c.point)));
        assert!(GridSpec::parse(&Manifold::sphere(2).unwrap(), "64").is_err());
        assert!(matches!(GridSpec::parse(&Manifold::special_orthogonal(3).unwrap(), "4"), Err(Error::Unsupported(_))));
    }

    #[test]
    fn coupled_reference_is_brownian_in_law() {
        // Angle variance of the coupled reference after time s is s.
        let m = Manifold::torus(1).unwrap();
        let mut g = RngStream::new(5, 0).generator();
        let s = 0.7;
        let a: Vec<f64> = (0..20_000)
            .map(|_| {
                let (_, d) = coupled_torus_states(&m, &[1.0, 0.0], s, 100, &[10], &mut g).unwrap();
                d[1].atan2(d[0])
            })
            .collect();
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var - s).abs() < 0.03, "variance {var}");
    }
}
