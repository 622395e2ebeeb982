//! One-way analysis of variance.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::StatsError;
use crate::volume::neumaier_sum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ms_between: f64,
    pub ms_within: f64,
    pub group_means: Vec<f64>,
    pub group_sizes: Vec<usize>,
}

pub(crate) fn check_groups(groups: &[Vec<f64>]) -> Result<(), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(StatsError::GroupTooSmall { group: i, size: g.len() });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite("ANOVA sample"));
        }
    }
    Ok(())
}

/// Survival function of the F distribution via the regularized incomplete beta.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    check_groups(groups)?;
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let group_means: Vec<f64> = groups.iter().map(|g| neumaier_sum(g.iter().copied()) / g.len() as f64).collect();
    let grand = neumaier_sum(groups.iter().flatten().copied()) / n_total as f64;
    let ss_between =
        neumaier_sum(groups.iter().zip(&group_means).map(|(g, m)| g.len() as f64 * (m - grand) * (m - grand)));
    let ss_within =
        neumaier_sum(groups.iter().zip(&group_means).flat_map(|(g, &m)| g.iter().map(move |v| (v - m) * (v - m))));
    let df_between = groups.len() - 1;
    let df_within = n_total - groups.len();
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;
    if !(ms_within > 0.0) {
        return Err(StatsError::ZeroWithinVariance);
    }
    let f = ms_between / ms_within;
    Ok(AnovaResult {
        f_statistic: f,
        p_value: f_survival(f, df_between as f64, df_within as f64),
        df_between,
        df_within,
        ms_between,
        ms_within,
        group_means,
        group_sizes: groups.iter().map(Vec::len).collect(),
    })
}
