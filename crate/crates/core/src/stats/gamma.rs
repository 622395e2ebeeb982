//! Maximum-likelihood gamma fits and goodness-of-fit helpers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma};
use statrs::function::gamma::{digamma, ln_gamma};

use super::special::{kolmogorov_sf, trigamma};
use super::StatsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape_k: f64,
    pub scale_theta: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl GammaFit {
    pub fn distribution(&self) -> Gamma {
        Gamma::new(self.shape_k, 1.0 / self.scale_theta).expect("fitted parameters are positive")
    }

    pub fn mean(&self) -> f64 {
        self.shape_k * self.scale_theta
    }

    /// Gradient of the log-likelihood over `samples` with respect to `(k, θ)`.
    pub fn log_likelihood_gradient(&self, samples: &[f64]) -> [f64; 2] {
        let n = samples.len() as f64;
        let (k, theta) = (self.shape_k, self.scale_theta);
        let sum_ln: f64 = samples.iter().map(|x| x.ln()).sum();
        let sum: f64 = samples.iter().sum();
        [sum_ln - n * theta.ln() - n * digamma(k), sum / (theta * theta) - n * k / theta]
    }
}

pub fn gamma_log_likelihood(samples: &[f64], k: f64, theta: f64) -> f64 {
    let n = samples.len() as f64;
    let sum_ln: f64 = samples.iter().map(|x| x.ln()).sum();
    let sum: f64 = samples.iter().sum();
    (k - 1.0) * sum_ln - sum / theta - n * ln_gamma(k) - n * k * theta.ln()
}

/// MLE of shape and scale. The shape solves `ln k − ψ(k) = ln x̄ − mean(ln x)`
/// by safeguarded Newton iteration from the method-of-moments estimate; the
/// scale follows as `x̄ / k`.
pub fn fit_gamma(samples: &[f64]) -> Result<GammaFit, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got: samples.len() });
    }
    if let Some(&bad) = samples.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(StatsError::NonPositiveSample(bad));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mean_ln = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_ln;
    if var <= 0.0 || s <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let mut k = mean * mean / var;
    let mut iterations = 0;
    for it in 1..=200 {
        iterations = it;
        let f = k.ln() - digamma(k) - s;
        let df = 1.0 / k - trigamma(k);
        let mut next = k - f / df;
        if !(next > 0.0) || !next.is_finite() {
            next = 0.5 * k;
        }
        let step = (next - k).abs();
        k = next;
        if step <= 1e-15 * k {
            break;
        }
    }
    let theta = mean / k;
    Ok(GammaFit { shape_k: k, scale_theta: theta, log_likelihood: gamma_log_likelihood(samples, k, theta), iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF, with
/// Stephens' small-sample correction for the p-value.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let n = x.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    KsResult { statistic: d, p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d), n: x.len() }
}

/// KS test of `samples` against their own fitted gamma distribution.
pub fn ks_test_gamma(samples: &[f64], fit: &GammaFit) -> KsResult {
    let dist = fit.distribution();
    ks_test(samples, |x| dist.cdf(x))
}

/// Histogram with the fitted density evaluated at bin centres, as CSV
/// (`bin_lo,bin_hi,count,density,fitted_density`).
pub fn histogram_csv(samples: &[f64], bins: usize, fit: &GammaFit) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,density,fitted_density\n");
    if samples.is_empty() || bins == 0 {
        return out;
    }
    let max = samples.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = ((x / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let dist = fit.distribution();
    let n = samples.len() as f64;
    for (b, &c) in counts.iter().enumerate() {
        let lo = b as f64 * width;
        let hi = lo + width;
        let centre = 0.5 * (lo + hi);
        out.push_str(&format!("{lo:.6},{hi:.6},{c},{:.9e},{:.9e}\n", c as f64 / (n * width), dist.pdf(centre)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Gamma as GammaDist};

    #[test]
    fn recovers_shape_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let d = GammaDist::new(2.0, 3.0).unwrap();
        let x: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
        let fit = fit_gamma(&x).unwrap();
        assert!((fit.shape_k - 2.0).abs() / 2.0 < 0.02, "k = {}", fit.shape_k);
        assert!((fit.scale_theta - 3.0).abs() / 3.0 < 0.02, "theta = {}", fit.scale_theta);
    }

    #[test]
    fn exponential_data_has_unit_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = Exp::new(0.25).unwrap();
        let x: Vec<f64> = (0..20_000).map(|_| d.sample(&mut rng)).collect();
        let fit = fit_gamma(&x).unwrap();
        assert!((fit.shape_k - 1.0).abs() < 0.05, "k = {}", fit.shape_k);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = GammaDist::new(0.7, 40.0).unwrap();
        let x: Vec<f64> = (0..1000).map(|_| d.sample(&mut rng)).collect();
        let fit = fit_gamma(&x).unwrap();
        let [gk, gt] = fit.log_likelihood_gradient(&x);
        assert!((gk * gk + gt * gt).sqrt() < 1e-8, "gradient ({gk}, {gt})");
        // and it is a maximum
        for (dk, dt) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-2), (0.0, -1e-2)] {
            assert!(gamma_log_likelihood(&x, fit.shape_k + dk, fit.scale_theta + dt) < fit.log_likelihood);
        }
    }

    #[test]
    fn rejects_bad_samples() {
        assert_eq!(fit_gamma(&[1.0, 0.0, 2.0]), Err(StatsError::NonPositiveSample(0.0)));
        assert_eq!(fit_gamma(&[3.0, 3.0, 3.0]), Err(StatsError::ZeroVariance));
    }

    #[test]
    fn ks_accepts_true_model_and_rejects_wrong_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = GammaDist::new(3.0, 2.0).unwrap();
        let x: Vec<f64> = (0..500).map(|_| d.sample(&mut rng)).collect();
        let fit = fit_gamma(&x).unwrap();
        assert!(ks_test_gamma(&x, &fit).p_value > 0.05);
        let wrong = GammaFit { shape_k: 1.0, scale_theta: 6.0, log_likelihood: 0.0, iterations: 0 };
        assert!(ks_test_gamma(&x, &wrong).p_value < 1e-3);
    }

    #[test]
    fn histogram_has_requested_bins() {
        let fit = GammaFit { shape_k: 2.0, scale_theta: 1.0, log_likelihood: 0.0, iterations: 0 };
        let csv = histogram_csv(&[0.5, 1.0, 1.5, 4.0], 4, &fit);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0.000000,1.000000,1,"));
    }
}
