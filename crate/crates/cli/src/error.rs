//! Failure classes and their exit codes.

use std::fmt;

use netseg_core::extraction::ExtractionError;
use netseg_core::labels::LabelError;
use netseg_core::metrics::MetricError;
use netseg_core::nifti::NiftiError;
use netseg_core::phantom::PhantomError;
use netseg_core::stats::StatsError;
use netseg_core::volume::VolumeError;
use netseg_neural::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    /// Bad flags or configuration.
    Usage,
    /// Unreadable, missing or inconsistent inputs.
    Data,
    /// Non-finite values, degenerate statistics, solver failures.
    Numeric,
}

impl Class {
    pub fn exit_code(self) -> i32 {
        match self {
            Class::Usage => 2,
            Class::Data => 3,
            Class::Numeric => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Class::Usage => "usage",
            Class::Data => "data",
            Class::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    /// Innermost error variant, e.g. `ShapeMismatch`.
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { class: Class::Usage, kind: "Usage".into(), message: message.into() }
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        Self { class: Class::Data, kind: kind.into(), message: message.into() }
    }

    fn classify<E: fmt::Debug + fmt::Display>(class: Class, e: &E) -> Self {
        Self { class, kind: innermost_variant(&format!("{e:?}")), message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error [{}]: {}", self.class.name(), self.kind, self.message)
    }
}

/// Follows `Outer(Inner(..))` in a derived Debug string down to the last
/// variant name.
fn innermost_variant(debug: &str) -> String {
    let mut rest = debug;
    let mut last = "";
    loop {
        let ident_len = rest.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(rest.len());
        let ident = &rest[..ident_len];
        if ident.is_empty() || !ident.starts_with(|c: char| c.is_ascii_uppercase()) {
            break;
        }
        last = ident;
        match rest[ident_len..].strip_prefix('(') {
            Some(inner) => rest = inner,
            None => break,
        }
    }
    if last.is_empty() {
        "Error".into()
    } else {
        last.to_string()
    }
}

fn volume_class(e: &VolumeError) -> Class {
    match e {
        VolumeError::NonFinite(_) | VolumeError::ZeroVariance => Class::Numeric,
        _ => Class::Data,
    }
}

fn stats_class(e: &StatsError) -> Class {
    match e {
        StatsError::BadAlpha(_) => Class::Usage,
        StatsError::TooFewSamples { .. }
        | StatsError::TooFewGroups(_)
        | StatsError::GroupTooSmall { .. }
        | StatsError::NonPositiveSample(_) => Class::Data,
        _ => Class::Numeric,
    }
}

fn metric_class(e: &MetricError) -> Class {
    match e {
        MetricError::BadPercentile(_) | MetricError::BadThreshold(_) => Class::Usage,
        _ => Class::Data,
    }
}

fn nifti_class(e: &NiftiError) -> Class {
    match e {
        NiftiError::Volume(v) => volume_class(v),
        _ => Class::Data,
    }
}

macro_rules! from_lib {
    ($ty:ty, $class:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                let class: fn(&$ty) -> Class = $class;
                CliError::classify(class(&e), &e)
            }
        }
    };
}

from_lib!(VolumeError, volume_class);
from_lib!(StatsError, stats_class);
from_lib!(MetricError, metric_class);
from_lib!(NiftiError, nifti_class);
from_lib!(LabelError, |e| match e {
    LabelError::UnknownSchema(_) | LabelError::UnknownSegment(_) => Class::Usage,
    LabelError::Volume(v) => volume_class(v),
    _ => Class::Data,
});
from_lib!(PhantomError, |e| match e {
    PhantomError::InvalidSpec(_) => Class::Usage,
    PhantomError::Volume(v) => volume_class(v),
    PhantomError::Nifti(n) => nifti_class(n),
    _ => Class::Data,
});
from_lib!(ExtractionError, |e| match e {
    ExtractionError::Volume(v) => volume_class(v),
    ExtractionError::Metric(m) => metric_class(m),
    ExtractionError::Stats(s) => stats_class(s),
    _ => Class::Data,
});
from_lib!(NeuralError, |e| match e {
    NeuralError::NonFiniteLoss { .. } => Class::Numeric,
    NeuralError::BadConfig(_) | NeuralError::BadGroupCount { .. } => Class::Usage,
    NeuralError::Volume(v) => volume_class(v),
    NeuralError::Metric(m) => metric_class(m),
    _ => Class::Data,
});
from_lib!(std::io::Error, |_| Class::Data);
from_lib!(serde_json::Error, |_| Class::Data);
