//! Tukey's honestly significant difference test and the studentized range
//! distribution it relies on.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::anova::{anova_oneway, check_groups};
use super::special::{normal_cdf, normal_pdf, CompositeRule};
use super::StatsError;

/// `P(max − min ≤ w)` for `k` iid standard normals.
fn range_cdf(w: f64, k: usize, rule: &CompositeRule, phi: &[f64]) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let km1 = (k - 1) as i32;
    let mut acc = 0.0;
    for ((&z, &wt), &pz) in rule.points.iter().zip(&rule.weights).zip(phi) {
        let inner = (pz - normal_cdf(z - w)).max(0.0);
        acc += wt * normal_pdf(z) * inner.powi(km1);
    }
    (k as f64 * acc).clamp(0.0, 1.0)
}

/// CDF of the studentized range `Q = R / S` with `k` means and `df`
/// degrees of freedom, by Gauss–Legendre quadrature over the
/// distribution of `S = sqrt(χ²_df / df)`.
pub fn studentized_range_cdf(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    assert!(k >= 2 && df > 0.0, "studentized range needs k ≥ 2 and df > 0");
    let inner = CompositeRule::new(-8.5, 8.5, 16, 16);
    let phi: Vec<f64> = inner.points.iter().map(|&z| normal_cdf(z)).collect();
    if df > 25_000.0 {
        return range_cdf(q, k, &inner, &phi);
    }
    // log density of S: ln 2 + (ν/2) ln(ν/2) − lnΓ(ν/2) + (ν−1) ln s − ν s²/2
    let half = df / 2.0;
    let log_norm = std::f64::consts::LN_2 + half * half.ln() - ln_gamma(half);
    let spread = 1.0 / (2.0 * df).sqrt();
    let lo = (1.0 - 12.0 * spread).max(0.0);
    let hi = 1.0 + 12.0 * spread.max(0.35);
    let outer = CompositeRule::new(lo, hi, 24, 16);
    outer
        .integrate(|s| {
            if s <= 0.0 {
                return 0.0;
            }
            let log_g = log_norm + (df - 1.0) * s.ln() - df * s * s / 2.0;
            log_g.exp() * range_cdf(q * s, k, &inner, &phi)
        })
        .clamp(0.0, 1.0)
}

/// Quantile of the studentized range by Illinois-type regula falsi.
pub fn studentized_range_quantile(p: f64, k: usize, df: f64) -> Option<f64> {
    if !(p > 0.0 && p < 1.0) {
        return None;
    }
    let f = |q: f64| studentized_range_cdf(q, k, df) - p;
    let (mut a, mut fa) = (0.0, -p);
    let mut b = 4.0;
    let mut fb = f(b);
    while fb < 0.0 {
        a = b;
        fa = fb;
        b *= 2.0;
        if b > 1e4 {
            return None;
        }
        fb = f(b);
    }
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c);
        if fc.abs() < 1e-13 || (b - a).abs() < 1e-12 * c.abs().max(1.0) {
            return Some(c);
        }
        if (fc < 0.0) == (fa < 0.0) {
            a = c;
            fa = fc;
            if side == -1 {
                fb /= 2.0;
            }
            side = -1;
        } else {
            b = c;
            fb = fc;
            if side == 1 {
                fa /= 2.0;
            }
            side = 1;
        }
    }
    None
}

/// Degrees of freedom of [`Q05_TABLE`] columns.
pub const Q05_DFS: [u32; 25] =
    [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 24, 30, 40, 60, 120];

/// Upper 5% points of the studentized range for k = 2..=10 means.
pub const Q05_TABLE: [[f64; 25]; 9] = [
    [
        17.9693, 6.0849, 4.5007, 3.9265, 3.6354, 3.4605, 3.3441, 3.2612, 3.1992, 3.1511, 3.1127, 3.0813, 3.0552,
        3.0332, 3.0143, 2.9980, 2.9837, 2.9712, 2.9600, 2.9500, 2.9188, 2.8882, 2.8582, 2.8288, 2.8000,
    ],
    [
        26.9755, 8.3308, 5.9096, 5.0402, 4.6017, 4.3392, 4.1649, 4.0410, 3.9485, 3.8768, 3.8196, 3.7729, 3.7341,
        3.7014, 3.6734, 3.6491, 3.6280, 3.6093, 3.5927, 3.5779, 3.5317, 3.4864, 3.4421, 3.3987, 3.3561,
    ],
    [
        32.8187, 9.7980, 6.8245, 5.7571, 5.2183, 4.8956, 4.6813, 4.5288, 4.4149, 4.3266, 4.2561, 4.1987, 4.1509,
        4.1105, 4.0760, 4.0461, 4.0200, 3.9970, 3.9766, 3.9583, 3.9013, 3.8454, 3.7907, 3.7371, 3.6846,
    ],
    [
        37.0815, 10.8811, 7.5017, 6.2870, 5.6731, 5.3049, 5.0601, 4.8858, 4.7554, 4.6543, 4.5736, 4.5077, 4.4529,
        4.4066, 4.3670, 4.3327, 4.3027, 4.2763, 4.2528, 4.2319, 4.1663, 4.1021, 4.0391, 3.9774, 3.9169,
    ],
    [
        40.4076, 11.7343, 8.0371, 6.7064, 6.0329, 5.6284, 5.3591, 5.1672, 5.0235, 4.9120, 4.8230, 4.7502, 4.6897,
        4.6385, 4.5947, 4.5568, 4.5237, 4.4944, 4.4685, 4.4452, 4.3727, 4.3015, 4.2316, 4.1632, 4.0960,
    ],
    [
        43.1186, 12.4349, 8.4783, 7.0526, 6.3299, 5.8953, 5.6057, 5.3991, 5.2444, 5.1242, 5.0281, 4.9496, 4.8842,
        4.8290, 4.7816, 4.7406, 4.7048, 4.6731, 4.6450, 4.6199, 4.5413, 4.4642, 4.3885, 4.3141, 4.2412,
    ],
    [
        45.3973, 13.0273, 8.8525, 7.3465, 6.5823, 6.1222, 5.8153, 5.5962, 5.4319, 5.3042, 5.2021, 5.1187, 5.0491,
        4.9903, 4.9399, 4.8962, 4.8580, 4.8243, 4.7944, 4.7676, 4.6838, 4.6014, 4.5205, 4.4411, 4.3630,
    ],
    [
        47.3566, 13.5390, 9.1766, 7.6015, 6.8014, 6.3192, 5.9973, 5.7673, 5.5947, 5.4605, 5.3531, 5.2653, 5.1921,
        5.1301, 5.0770, 5.0310, 4.9907, 4.9552, 4.9236, 4.8954, 4.8069, 4.7199, 4.6345, 4.5504, 4.4678,
    ],
    [
        49.0710, 13.9885, 9.4620, 7.8263, 6.9947, 6.4931, 6.1579, 5.9183, 5.7384, 5.5984, 5.4863, 5.3946, 5.3181,
        5.2534, 5.1979, 5.1498, 5.1077, 5.0705, 5.0375, 5.0079, 4.9152, 4.8241, 4.7345, 4.6463, 4.5595,
    ],
];

/// Tabulated 5% point, interpolating linearly in `1/df` between columns.
pub fn q05_table_lookup(k: usize, df: f64) -> Option<f64> {
    if !(2..=10).contains(&k) || !(1.0..=120.0).contains(&df) {
        return None;
    }
    let row = &Q05_TABLE[k - 2];
    let pos = Q05_DFS.iter().position(|&d| d as f64 >= df)?;
    if Q05_DFS[pos] as f64 == df || pos == 0 {
        return Some(row[pos]);
    }
    let (d0, d1) = (Q05_DFS[pos - 1] as f64, Q05_DFS[pos] as f64);
    let t = (1.0 / df - 1.0 / d0) / (1.0 / d1 - 1.0 / d0);
    Some(row[pos - 1] + t * (row[pos] - row[pos - 1]))
}

/// Critical value `q(α; k, df)`; quadrature first, the 5% table if that fails.
pub fn tukey_critical_value(alpha: f64, k: usize, df: f64) -> Result<f64, StatsError> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(StatsError::BadAlpha(alpha));
    }
    studentized_range_quantile(1.0 - alpha, k, df)
        .filter(|q| q.is_finite())
        .or_else(|| if alpha == 0.05 { q05_table_lookup(k, df) } else { None })
        .ok_or(StatsError::NoConvergence("studentized range quantile"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub group_a: usize,
    pub group_b: usize,
    pub mean_diff: f64,
    pub q_statistic: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyResult {
    pub pairs: Vec<TukeyPair>,
    pub alpha: f64,
    pub critical_value: f64,
    pub df_within: usize,
}

impl TukeyResult {
    pub fn pair(&self, a: usize, b: usize) -> Option<&TukeyPair> {
        let (a, b) = (a.min(b), a.max(b));
        self.pairs.iter().find(|p| p.group_a == a && p.group_b == b)
    }
}

/// All-pairs comparison with the Tukey–Kramer standard error.
pub fn tukey_hsd(groups: &[Vec<f64>], alpha: f64) -> Result<TukeyResult, StatsError> {
    check_groups(groups)?;
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(StatsError::BadAlpha(alpha));
    }
    let anova = anova_oneway(groups)?;
    let critical_value = tukey_critical_value(alpha, groups.len(), anova.df_within as f64)?;
    let mut pairs = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let diff = anova.group_means[a] - anova.group_means[b];
            let se = (anova.ms_within / 2.0 * (1.0 / groups[a].len() as f64 + 1.0 / groups[b].len() as f64)).sqrt();
            let q = diff.abs() / se;
            pairs.push(TukeyPair {
                group_a: a,
                group_b: b,
                mean_diff: diff,
                q_statistic: q,
                significant: q > critical_value,
            });
        }
    }
    Ok(TukeyResult { pairs, alpha, critical_value, df_within: anova.df_within })
}
