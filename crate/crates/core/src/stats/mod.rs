//! Mixture clustering, distribution fits and group comparisons.

use thiserror::Error;

pub mod anova;
pub mod gamma;
pub mod gmm;
pub mod intensity;
pub mod special;
pub mod tukey;

pub use anova::{anova_oneway, AnovaResult};
pub use gamma::{fit_gamma, histogram_csv, ks_test, ks_test_gamma, GammaFit, KsResult};
pub use gmm::{fit_gmm_1d, partition_by_volume, GmmFit, GmmOptions, VolumeGroup, VolumePartition};
pub use intensity::{intensity_by_region, Region};
pub use tukey::{tukey_hsd, TukeyPair, TukeyResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all samples are identical")]
    DegenerateData,
    #[error("sample {0} is not strictly positive")]
    NonPositiveSample(f64),
    #[error("samples have zero variance")]
    ZeroVariance,
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {group} has {size} samples; at least two are required")]
    GroupTooSmall { group: usize, size: usize },
    #[error("pooled within-group variance is zero")]
    ZeroWithinVariance,
    #[error("alpha {0} outside (0, 0.5]")]
    BadAlpha(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
}
