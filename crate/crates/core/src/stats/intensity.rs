//! Per-record regional intensity samples for the ANOVA.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::labels::{Schema, ED, ET, NCR, NET};
use crate::volume::{neumaier_sum, Modality, MultiModalRecord};

/// Tumor compartments of the unified 4-label scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Ncr,
    Ed,
    Net,
    Et,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Ncr, Region::Ed, Region::Net, Region::Et];

    pub fn label(self) -> u8 {
        match self {
            Region::Ncr => NCR,
            Region::Ed => ED,
            Region::Net => NET,
            Region::Et => ET,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Ncr => "NCR",
            Region::Ed => "ED",
            Region::Net => "NET",
            Region::Et => "ET",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type RegionSamples = BTreeMap<Modality, BTreeMap<Region, Vec<f64>>>;

/// Mean intensity of every (record, region, modality) triple. Records without
/// unified labels and empty regions are skipped.
pub fn intensity_by_region(records: &[MultiModalRecord]) -> RegionSamples {
    let mut out: RegionSamples =
        Modality::ALL.iter().map(|&m| (m, Region::ALL.iter().map(|&r| (r, Vec::new())).collect())).collect();
    for rec in records {
        let Some(labels) = rec.labels.as_ref().filter(|l| l.schema() == Schema::Unified4Label) else {
            log::warn!("record {} has no unified labels; skipped", rec.record_id);
            continue;
        };
        for region in Region::ALL {
            let idx: Vec<usize> =
                labels.data().iter().enumerate().filter(|(_, &l)| l == region.label()).map(|(i, _)| i).collect();
            if idx.is_empty() {
                log::debug!("record {}: region {region} empty", rec.record_id);
                continue;
            }
            for m in Modality::ALL {
                let data = rec.channel(m).data();
                let mean = neumaier_sum(idx.iter().map(|&i| data[i])) / idx.len() as f64;
                out.get_mut(&m).unwrap().get_mut(&region).unwrap().push(mean);
            }
        }
    }
    out
}
