//! The variational field `a(x, s)`: an MLP over ambient coordinates and time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::gaussian_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sine,
    Swish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub activation: Activation,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Data-initialised affine normalisation after the first hidden affine map.
    #[serde(default)]
    pub actnorm_first: bool,
    pub ambient_dim: usize,
    /// Number of time features; the first is always `s/T`.
    #[serde(default = "one")]
    pub time_features: usize,
    /// `T`, used to rescale time to `[0, 1]`.
    pub time_scale: f64,
}

fn one() -> usize {
    1
}

impl NetworkConfig {
    pub fn new(ambient_dim: usize, time_scale: f64) -> Self {
        NetworkConfig {
            activation: Activation::Sine,
            hidden_layers: 3,
            hidden_width: 64,
            actnorm_first: false,
            ambient_dim,
            time_features: 1,
            time_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::Config("network needs at least one hidden layer of width ≥ 1".into()));
        }
        if self.ambient_dim == 0 || self.time_features == 0 {
            return Err(Error::Config("network ambient dimension and time features must be positive".into()));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::Config(format!("time scale must be positive, got {}", self.time_scale)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.ambient_dim + self.time_features
    }

    /// `(rows, cols)` of each affine layer, input to output.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.hidden_layers {
            shapes.push((self.hidden_width, fan_in));
            fan_in = self.hidden_width;
        }
        shapes.push((self.ambient_dim, fan_in));
        shapes
    }

    /// Tensor lengths in storage order: `W₀, b₀, [scale, shift], W₁, b₁, …`.
    pub fn tensor_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, (r, c)) in self.layer_shapes().into_iter().enumerate() {
            out.push(r * c);
            out.push(r);
            if i == 0 && self.actnorm_first {
                out.push(r);
                out.push(r);
            }
        }
        out
    }

    /// Time features of `s`: `t = s/T`, then `sin(kπt), cos(kπt)` pairs.
    pub fn time_embedding(&self, s: f64) -> Vec<f64> {
        let t = s / self.time_scale;
        let mut f = Vec::with_capacity(self.time_features);
        f.push(t);
        let mut k = 1.0;
        while f.len() < self.time_features {
            f.push((k * std::f64::consts::PI * t).sin());
            if f.len() < self.time_features {
                f.push((k * std::f64::consts::PI * t).cos());
            }
            k += 1.0;
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetwork {
    pub config: NetworkConfig,
    /// Parameter tensors in the order of [`NetworkConfig::tensor_lengths`].
    pub params: Vec<Vec<f64>>,
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Sine => z.sin(),
        Activation::Swish => autodiff::swish(z),
    }
}

impl ScoreNetwork {
    /// Fan-in-scaled Gaussian weights, zero biases and a zero final layer.
    ///
    /// With `actnorm_first`, the normalisation is calibrated on
    /// `calibration` (pairs of point and time) so each unit has zero mean and
    /// unit standard deviation over the batch.
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R, calibration: Option<&[(Vec<f64>, f64)]>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let mut params = Vec::new();
        for (i, (r, c)) in shapes.iter().copied().enumerate() {
            if i == last {
                params.push(vec![0.0; r * c]);
            } else {
                let sd = (1.0 / c as f64).sqrt();
                params.push(gaussian_vec(rng, r * c).into_iter().map(|v| v * sd).collect());
            }
            params.push(vec![0.0; r]);
            if i == 0 && config.actnorm_first {
                params.push(vec![1.0; r]);
                params.push(vec![0.0; r]);
            }
        }
        let mut net = ScoreNetwork { config, params };
        if net.config.actnorm_first {
            let batch = calibration.filter(|b| !b.is_empty()).ok_or_else(|| {
                Error::Config("actnorm_first requires a nonempty calibration batch".into())
            })?;
            net.calibrate(batch)?;
        }
        Ok(net)
    }

    fn calibrate(&mut self, batch: &[(Vec<f64>, f64)]) -> Result<()> {
        let width = self.config.hidden_width;
        let n = batch.len() as f64;
        let mut mean = vec![0.0; width];
        let mut pre = Vec::with_capacity(batch.len());
        for (x, s) in batch {
            let z = self.first_affine(x, *s)?;
            mean.iter_mut().zip(&z).for_each(|(m, v)| *m += v / n);
            pre.push(z);
        }
        let mut var = vec![0.0; width];
        for z in &pre {
            var.iter_mut().zip(z.iter().zip(&mean)).for_each(|(acc, (v, m))| *acc += (v - m).powi(2) / n);
        }
        self.params[2] = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        self.params[3] = mean.iter().map(|m| -m).collect();
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.ambient_dim {
            return Err(Error::Contract(format!(
                "network expects {} coordinates, got {}",
                self.config.ambient_dim,
                x.len()
            )));
        }
        Ok(())
    }

    fn first_affine(&self, x: &[f64], s: f64) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut input = x.to_vec();
        input.extend(self.config.time_embedding(s));
        Ok(affine(&self.params[0], &self.params[1], &input))
    }

    /// `a(x, s)` evaluated directly (no tape).
    pub fn forward(&self, x: &[f64], s: f64) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let mut h = self.first_affine(x, s)?;
        let mut idx = 2;
        if cfg.actnorm_first {
            let (scale, shift) = (&self.params[2], &self.params[3]);
            h.iter_mut().zip(scale.iter().zip(shift)).for_each(|(v, (a, b))| *v = a * (*v + b));
            idx = 4;
        }
        h.iter_mut().for_each(|v| *v = activate(cfg.activation, *v));
        for layer in 1..=cfg.hidden_layers {
            h = affine(&self.params[idx], &self.params[idx + 1], &h);
            idx += 2;
            if layer < cfg.hidden_layers {
                h.iter_mut().for_each(|v| *v = activate(cfg.activation, *v));
            }
        }
        Ok(h)
    }

    /// Records `a(x, s)` on a tape whose parameter slice is `self.params`.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, x: Var, s: f64) -> Result<Var> {
        let cfg = &self.config;
        if tape.dim(x) != cfg.ambient_dim {
            return Err(Error::Contract(format!(
                "network expects {} coordinates, got {}",
                cfg.ambient_dim,
                tape.dim(x)
            )));
        }
        let time = tape.constant(cfg.time_embedding(s));
        let mut h = tape.concat(&[x, time]);
        let mut idx = 0;
        let mut fan_in = cfg.input_dim();
        for layer in 0..=cfg.hidden_layers {
            let rows = if layer == cfg.hidden_layers { cfg.ambient_dim } else { cfg.hidden_width };
            let w = tape.param(idx);
            let b = tape.param(idx + 1);
            idx += 2;
            let z = tape.matvec(w, h, rows, fan_in);
            let mut z = tape.add(z, b);
            if layer == 0 && cfg.actnorm_first {
                let scale = tape.param(idx);
                let shift = tape.param(idx + 1);
                idx += 2;
                let shifted = tape.add(z, shift);
                z = tape.mul(shifted, scale);
            }
            h = if layer == cfg.hidden_layers {
                z
            } else {
                match cfg.activation {
                    Activation::Sine => tape.sin(z),
                    Activation::Swish => tape.swish(z),
                }
            };
            fan_in = rows;
        }
        Ok(h)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols)
        .zip(b)
        .map(|(row, bi)| bi + crate::linalg::dot(row, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::Manifold;
    use crate::rng::RngStream;

    fn randomise_last_layer(net: &mut ScoreNetwork, seed: u64) {
        let mut g = RngStream::new(seed, 3).generator();
        let n = net.params.len();
        for i in [n - 2, n - 1] {
            let len = net.params[i].len();
            net.params[i] = gaussian_vec(&mut g, len);
        }
    }

    fn small_config(act: Activation) -> NetworkConfig {
        NetworkConfig { activation: act, hidden_layers: 2, hidden_width: 8, ..NetworkConfig::new(3, 1.0) }
    }

    #[test]
    fn initial_network_is_the_zero_map() {
        let net = ScoreNetwork::init(small_config(Activation::Sine), &mut RngStream::new(1, 0).generator(), None).unwrap();
        let s2 = Manifold::sphere(2).unwrap();
        let mut g = RngStream::new(2, 0).generator();
        for _ in 0..20 {
            let x = s2.prior_sample(&mut g);
            assert_eq!(net.forward(&x, 0.3).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn tape_and_direct_forward_agree() {
        for act in [Activation::Sine, Activation::Swish] {
            let mut cfg = small_config(act);
            cfg.time_features = 4;
            cfg.actnorm_first = true;
            let batch: Vec<(Vec<f64>, f64)> = (0..5).map(|i| (vec![0.1 * i as f64, 0.2, -0.3], 0.1 * i as f64)).collect();
            let mut net = ScoreNetwork::init(cfg, &mut RngStream::new(4, 0).generator(), Some(&batch)).unwrap();
            randomise_last_layer(&mut net, 4);
            let x = vec![0.6, 0.0, 0.8];
            let direct = net.forward(&x, 0.45).unwrap();
            let mut tape = Tape::new(&net.params);
            let xv = tape.input(x);
            let y = net.forward_on_tape(&mut tape, xv, 0.45).unwrap();
            for (a, b) in direct.iter().zip(tape.value(y)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let net = ScoreNetwork::init(small_config(Activation::Swish), &mut RngStream::new(1, 0).generator(), None).unwrap();
        assert!(matches!(net.forward(&[1.0, 0.0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn hidden_unit_permutation_leaves_output_unchanged() {
        let mut cfg = small_config(Activation::Swish);
        cfg.hidden_layers = 1;
        let mut net = ScoreNetwork::init(cfg, &mut RngStream::new(6, 0).generator(), None).unwrap();
        randomise_last_layer(&mut net, 6);
        let mut perm = net.clone();
        let (i, j) = (1, 5);
        let cols = perm.config.input_dim();
        for c in 0..cols {
            perm.params[0].swap(i * cols + c, j * cols + c);
        }
        perm.params[1].swap(i, j);
        let width = perm.config.hidden_width;
        for r in 0..perm.config.ambient_dim {
            perm.params[2].swap(r * width + i, r * width + j);
        }
        let x = [0.0, 0.6, 0.8];
        let (a, b) = (net.forward(&x, 0.2).unwrap(), perm.forward(&x, 0.2).unwrap());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn seeded_forward_is_bitwise_reproducible() {
        let build = || {
            let mut n = ScoreNetwork::init(small_config(Activation::Sine), &mut RngStream::new(11, 0).generator(), None).unwrap();
            randomise_last_layer(&mut n, 11);
            n.forward(&[0.0, 0.0, 1.0], 0.7).unwrap()
        };
        let (a, b) = (build(), build());
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn actnorm_calibration_statistics() {
        let mut cfg = small_config(Activation::Sine);
        cfg.actnorm_first = true;
        cfg.hidden_width = 16;
        let s2 = Manifold::sphere(2).unwrap();
        let mut g = RngStream::new(9, 0).generator();
        let batch: Vec<(Vec<f64>, f64)> = (0..256).map(|_| (s2.prior_sample(&mut g), g.gen::<f64>())).collect();
        let net = ScoreNetwork::init(cfg, &mut g, Some(&batch)).unwrap();
        let outs: Vec<Vec<f64>> = batch
            .iter()
            .map(|(x, s)| {
                let z = net.first_affine(x, *s).unwrap();
                z.iter().zip(net.params[2].iter().zip(&net.params[3])).map(|(v, (a, b))| a * (v + b)).collect()
            })
            .collect();
        let n = outs.len() as f64;
        for u in 0..16 {
            let mean = outs.iter().map(|o| o[u]).sum::<f64>() / n;
            let sd = (outs.iter().map(|o| (o[u] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "unit {u}: mean {mean} sd {sd}");
        }
    }

    #[test]
    fn actnorm_without_batch_is_a_config_error() {
        let mut cfg = small_config(Activation::Sine);
        cfg.actnorm_first = true;
        let r = ScoreNetwork::init(cfg.clone(), &mut RngStream::new(1, 0).generator(), None);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = ScoreNetwork::init(cfg, &mut RngStream::new(1, 0).generator(), Some(&[]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn sine_preactivations_are_bounded_on_the_sphere() {
        let cfg = small_config(Activation::Sine);
        let net = ScoreNetwork::init(cfg.clone(), &mut RngStream::new(3, 0).generator(), None).unwrap();
        let s2 = Manifold::sphere(2).unwrap();
        let mut g = RngStream::new(3, 1).generator();
        // Row norms of W₀ bound every pre-activation for |x| = 1 and s/T ≤ 1.
        let cols = cfg.input_dim();
        let bound: f64 = net.params[0].chunks(cols).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max) * (2f64).sqrt();
        for _ in 0..200 {
            let x = s2.prior_sample(&mut g);
            let z = net.first_affine(&x, g.gen::<f64>()).unwrap();
            assert!(z.iter().all(|v| v.is_finite() && v.abs() <= bound));
        }
    }

    #[test]
    fn output_is_lipschitz_in_time() {
        let mut net = ScoreNetwork::init(small_config(Activation::Swish), &mut RngStream::new(5, 0).generator(), None).unwrap();
        randomise_last_layer(&mut net, 5);
        // Swish is 1.1-Lipschitz; Frobenius norms bound the operator norms.
        let lip: f64 = net.params.iter().step_by(2).map(|w| 1.1 * w.iter().map(|v| v * v).sum::<f64>().sqrt()).product();
        let x = [0.0, 0.6, 0.8];
        let delta = 1e-6;
        for s in [0.0, 0.3, 0.9] {
            let (a, b) = (net.forward(&x, s).unwrap(), net.forward(&x, s + delta).unwrap());
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!(diff <= lip * delta / net.config.time_scale + 1e-15);
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_sizes() {
        let bad = r#"{"activation":"sine","hidden_layers":2,"hidden_width":4,"ambient_dim":3,"time_scale":1.0,"depth":9}"#;
        assert!(serde_json::from_str::<NetworkConfig>(bad).is_err());
        let mut cfg = small_config(Activation::Sine);
        cfg.hidden_layers = 0;
        assert!(cfg.validate().is_err());
    }
}
