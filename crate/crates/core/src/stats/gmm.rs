//! One-dimensional Gaussian mixtures fitted by expectation–maximization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StatsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the log-likelihood gains less than this.
    pub tol: f64,
    pub variance_floor: f64,
}

impl GmmOptions {
    pub fn new(k: usize) -> Self {
        Self { k, seed: 0, restarts: 10, max_iter: 500, tol: 1e-8, variance_floor: 1e-12 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Mixture components sorted by ascending mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub log_likelihood: f64,
    /// Most responsible component per input sample, in input order.
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Log-likelihood after every EM iteration of the selected restart.
    pub trace: Vec<f64>,
}

const LN_2PI: f64 = 1.8378770664093453;

fn log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Params {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

/// k-means++ seeding followed by hard-assignment moments.
fn kmeanspp_init(x: &[f64], k: usize, floor: f64, rng: &mut ChaCha8Rng) -> Params {
    let n = x.len();
    let mut centers = vec![x[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = x.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            x[pick]
        } else {
            x[rng.random_range(0..n)]
        };
        centers.push(next);
        for (d, v) in d2.iter_mut().zip(x) {
            *d = d.min((v - next).powi(2));
        }
    }
    let overall_mean = x.iter().sum::<f64>() / n as f64;
    let overall_var = (x.iter().map(|v| (v - overall_mean).powi(2)).sum::<f64>() / n as f64).max(floor);
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); k];
    for &v in x {
        let c = (0..k).min_by(|&a, &b| (v - centers[a]).abs().total_cmp(&(v - centers[b]).abs())).unwrap();
        sums[c].0 += 1;
        sums[c].1 += v;
        sums[c].2 += v * v;
    }
    let mut p = Params { weights: vec![0.0; k], means: centers, variances: vec![overall_var; k] };
    for c in 0..k {
        let (cnt, s, ss) = sums[c];
        p.weights[c] = (cnt.max(1)) as f64 / (n + k) as f64;
        if cnt >= 2 {
            let m = s / cnt as f64;
            p.variances[c] = (ss / cnt as f64 - m * m).max(floor);
        }
    }
    let wsum: f64 = p.weights.iter().sum();
    p.weights.iter_mut().for_each(|w| *w /= wsum);
    p
}

/// One EM run from `init`; returns the final parameters, responsibilities'
/// log-likelihood trace and iteration count.
fn run_em(x: &[f64], mut p: Params, opts: &GmmOptions) -> Result<(Params, Vec<f64>), StatsError> {
    let n = x.len();
    let k = opts.k;
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut logp = vec![0.0; k];
    for _ in 0..opts.max_iter {
        // E step
        let mut ll = 0.0;
        for (i, &v) in x.iter().enumerate() {
            for c in 0..k {
                logp[c] = p.weights[c].ln() + log_density(v, p.means[c], p.variances[c]);
            }
            let lse = log_sum_exp(&logp);
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (logp[c] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(StatsError::NonFinite("GMM log-likelihood"));
        }
        debug_assert!(ll >= prev - 1e-9 * (1.0 + prev.abs()), "EM log-likelihood decreased: {prev} -> {ll}");
        trace.push(ll);
        let converged = (ll - prev).abs() < opts.tol;
        prev = ll;
        if converged {
            break;
        }
        // M step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk <= f64::MIN_POSITIVE {
                // empty component: keep it alive with a vanishing weight
                p.weights[c] = f64::MIN_POSITIVE;
                continue;
            }
            let mean = (0..n).map(|i| resp[i * k + c] * x[i]).sum::<f64>() / nk;
            let var = (0..n).map(|i| resp[i * k + c] * (x[i] - mean).powi(2)).sum::<f64>() / nk;
            p.weights[c] = nk / n as f64;
            p.means[c] = mean;
            p.variances[c] = var.max(opts.variance_floor);
        }
    }
    Ok((p, trace))
}

/// Fits a `k`-component mixture; the best of `restarts` seeded k-means++
/// initializations wins (ties go to the earlier restart). The result does not
/// depend on the order of `samples`.
pub fn fit_gmm_1d(samples: &[f64], opts: &GmmOptions) -> Result<GmmFit, StatsError> {
    let k = opts.k;
    if k == 0 || samples.len() < k {
        return Err(StatsError::TooFewSamples { needed: k.max(1), got: samples.len() });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite("GMM sample"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]));
    let x: Vec<f64> = order.iter().map(|&i| samples[i]).collect();
    if k > 1 && x.first() == x.last() {
        return Err(StatsError::DegenerateData);
    }
    let mut best: Option<(Params, Vec<f64>)> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let init = kmeanspp_init(&x, k, opts.variance_floor, &mut rng);
        let (p, trace) = run_em(&x, init, opts)?;
        let ll = *trace.last().unwrap();
        if best.as_ref().is_none_or(|(_, t)| ll > *t.last().unwrap()) {
            best = Some((p, trace));
        }
    }
    let (p, trace) = best.unwrap();
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| p.means[a].total_cmp(&p.means[b]));
    let weights: Vec<f64> = idx.iter().map(|&c| p.weights[c]).collect();
    let means: Vec<f64> = idx.iter().map(|&c| p.means[c]).collect();
    let variances: Vec<f64> = idx.iter().map(|&c| p.variances[c]).collect();
    let wsum: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / wsum).collect();
    let mut assignments = vec![0; samples.len()];
    for (i, &v) in samples.iter().enumerate() {
        assignments[i] = (0..k)
            .max_by(|&a, &b| {
                let la = weights[a].ln() + log_density(v, means[a], variances[a]);
                let lb = weights[b].ln() + log_density(v, means[b], variances[b]);
                la.total_cmp(&lb).then(b.cmp(&a))
            })
            .unwrap();
    }
    Ok(GmmFit {
        k,
        weights,
        means,
        variances,
        log_likelihood: *trace.last().unwrap(),
        assignments,
        iterations: trace.len(),
        trace,
    })
}

/// NET-volume group of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeGroup {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumePartition {
    pub groups: BTreeMap<String, VolumeGroup>,
    pub fit: GmmFit,
}

impl VolumePartition {
    pub fn members(&self, group: VolumeGroup) -> Vec<&str> {
        self.groups.iter().filter(|(_, g)| **g == group).map(|(id, _)| id.as_str()).collect()
    }
}

/// Relative variance floor used by [`partition_by_volume`], as a fraction of
/// the overall variance of the log-volumes. Keeps singleton clusters from
/// collapsing to spikes of unbounded likelihood.
pub const PARTITION_VARIANCE_FLOOR: f64 = 1e-2;

/// Three-component mixture on `ln(1 + volume)`; components ordered by mean
/// become low / medium / high.
pub fn partition_by_volume(volumes: &BTreeMap<String, usize>, seed: u64) -> Result<VolumePartition, StatsError> {
    let logs: Vec<f64> = volumes.values().map(|&v| (v as f64).ln_1p()).collect();
    if logs.len() < 3 {
        return Err(StatsError::TooFewSamples { needed: 3, got: logs.len() });
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / logs.len() as f64;
    let mut opts = GmmOptions::new(3).with_seed(seed);
    opts.variance_floor = (PARTITION_VARIANCE_FLOOR * var).max(1e-12);
    let fit = fit_gmm_1d(&logs, &opts)?;
    let groups = volumes
        .keys()
        .zip(&fit.assignments)
        .map(|(id, &c)| (id.clone(), [VolumeGroup::Low, VolumeGroup::Medium, VolumeGroup::High][c]))
        .collect();
    Ok(VolumePartition { groups, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn recovers_three_well_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers = [10.0, 100.0, 1000.0];
        let mut x = Vec::new();
        let mut truth = Vec::new();
        for (c, &m) in centers.iter().enumerate() {
            let noise = Normal::new(0.0, 0.01 * m).unwrap();
            for _ in 0..100 {
                x.push(m + noise.sample(&mut rng));
                truth.push(c);
            }
        }
        let fit = fit_gmm_1d(&x, &GmmOptions::new(3).with_seed(1)).unwrap();
        for (m, c) in fit.means.iter().zip(centers) {
            assert!((m - c).abs() / c < 0.02, "mean {m} vs {c}");
        }
        assert_eq!(fit.assignments, truth);
        assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(fit.variances.iter().all(|&v| v >= 1e-12));
    }

    #[test]
    fn em_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..400).map(|i| noise.sample(&mut rng) + if i % 3 == 0 { 2.5 } else { 0.0 }).collect();
        let fit = fit_gmm_1d(&x, &GmmOptions::new(2).with_seed(11)).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn single_component_is_closed_form() {
        let x = [1.0, 2.0, 4.0, 8.0, 16.0];
        let fit = fit_gmm_1d(&x, &GmmOptions::new(1)).unwrap();
        let mean = x.iter().sum::<f64>() / 5.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((fit.means[0] - mean).abs() < 1e-12);
        assert!((fit.variances[0] - var).abs() < 1e-9);
        assert_eq!(fit.weights, vec![1.0]);
    }

    #[test]
    fn input_errors() {
        assert_eq!(fit_gmm_1d(&[1.0, 2.0], &GmmOptions::new(3)), Err(StatsError::TooFewSamples { needed: 3, got: 2 }));
        assert_eq!(fit_gmm_1d(&[5.0; 6], &GmmOptions::new(2)), Err(StatsError::DegenerateData));
    }

    fn vols(v: &[usize]) -> BTreeMap<String, usize> {
        v.iter().enumerate().map(|(i, &x)| (format!("r{i}"), x)).collect()
    }

    #[test]
    fn partition_example() {
        let p = partition_by_volume(&vols(&[0, 5, 5000, 5200, 90000]), 0).unwrap();
        assert_eq!(p.members(VolumeGroup::Low), vec!["r0", "r1"]);
        assert_eq!(p.members(VolumeGroup::Medium), vec!["r2", "r3"]);
        assert_eq!(p.members(VolumeGroup::High), vec!["r4"]);
    }

    #[test]
    fn partition_is_order_invariant() {
        let a = partition_by_volume(&vols(&[0, 5, 5000, 5200, 90000]), 4).unwrap();
        let b = partition_by_volume(&vols(&[5200, 90000, 0, 5000, 5]), 4).unwrap();
        let sorted = |p: &VolumePartition| {
            let mut v: Vec<(usize, VolumeGroup)> = Vec::new();
            for (id, g) in &p.groups {
                let i: usize = id[1..].parse().unwrap();
                v.push((i, *g));
            }
            v
        };
        // map each record's volume to its group
        let va = [0, 5, 5000, 5200, 90000];
        let vb = [5200, 90000, 0, 5000, 5];
        let mut ga: Vec<(usize, VolumeGroup)> = sorted(&a).into_iter().map(|(i, g)| (va[i], g)).collect();
        let mut gb: Vec<(usize, VolumeGroup)> = sorted(&b).into_iter().map(|(i, g)| (vb[i], g)).collect();
        ga.sort();
        gb.sort();
        assert_eq!(ga, gb);
        assert_eq!(a.fit.means, b.fit.means);
    }

    #[test]
    fn partition_rejects_identical_volumes() {
        assert_eq!(partition_by_volume(&vols(&[42; 6]), 0).unwrap_err(), StatsError::DegenerateData);
        assert!(matches!(partition_by_volume(&vols(&[]), 0), Err(StatsError::TooFewSamples { .. })));
    }
}
