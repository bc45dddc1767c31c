//! Summary statistics and goodness-of-fit helpers.

use std::f64::consts::PI;

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let (mean, _) = mean_se(values);
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// `log(Σ exp(v_i) / n)`, stable for large magnitudes.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Kolmogorov–Smirnov statistic of samples in `[0, 1)` against the uniform law.
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| {
            let lo = u - i as f64 / n;
            let hi = (i as f64 + 1.0) / n - u;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Upper 1% quantile of χ²(df) by the Wilson–Hilferty approximation.
pub fn chi_square_critical_1pct(df: usize) -> f64 {
    let k = df as f64;
    let z = 2.326_347_874;
    let c = 2.0 / (9.0 * k);
    k * (1.0 - c + z * c.sqrt()).powi(3)
}

/// Pearson statistic of observed counts against expected counts.
pub fn chi_square(observed: &[usize], expected: &[f64]) -> f64 {
    observed.iter().zip(expected).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum()
}

/// Wrapped-normal density on the circle, `Σ_{|k|≤kmax} N(θ + 2πk; μ, var)`.
pub fn wrapped_normal_density(theta: f64, mean: f64, var: f64, kmax: i32) -> f64 {
    let norm = 1.0 / (2.0 * PI * var).sqrt();
    (-kmax..=kmax)
        .map(|k| {
            let d = theta - mean + 2.0 * PI * k as f64;
            norm * (-d * d / (2.0 * var)).exp()
        })
        .sum()
}

/// Angle of a unit 2-vector, wrapped to `[0, 2π)`.
pub fn angle(c: f64, s: f64) -> f64 {
    s.atan2(c).rem_euclid(2.0 * PI)
}

/// Histogram of angles in `[0, 2π)` with `bins` equal cells.
pub fn angle_histogram(angles: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0usize; bins];
    for a in angles {
        let b = ((a.rem_euclid(2.0 * PI) / (2.0 * PI)) * bins as f64) as usize;
        h[b.min(bins - 1)] += 1;
    }
    h
}

/// Total-variation distance between two histograms, each normalised to mass 1.
pub fn total_variation(a: &[usize], b: &[usize]) -> f64 {
    let (na, nb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    0.5 * a.iter().zip(b).map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs()).sum::<f64>()
}
