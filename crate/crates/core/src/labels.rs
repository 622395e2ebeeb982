//! Year-dependent BraTS label schemas and the hierarchical evaluation
//! segments built from them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{ensure_same_shape, Grid, LabelVolume, Mask, Shape3, VolumeError};

pub const BACKGROUND: u8 = 0;
pub const NCR: u8 = 1;
pub const ED: u8 = 2;
pub const NET: u8 = 3;
pub const ET: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("unknown label schema {0:?} (expected brats2015, brats2018, brats2021 or unified)")]
    UnknownSchema(String),
    #[error("unknown segment {0:?}")]
    UnknownSegment(String),
    #[error("segment masks violate containment: {0}")]
    InconsistentMasks(String),
    #[error("segment {segment} is not defined for schema {schema}")]
    MissingSegment { segment: Segment, schema: Schema },
    #[error("cannot relabel a {0} volume for unification")]
    UnsupportedSchema(Schema),
    #[error("decomposition needs masks at source resolution, got factor {0}")]
    Upscaled(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// A label convention used by a particular BraTS release.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Brats2015,
    Brats2018,
    Brats2021,
    #[serde(rename = "unified")]
    Unified4Label,
}

impl Schema {
    pub const ALL: [Schema; 4] = [Schema::Brats2015, Schema::Brats2018, Schema::Brats2021, Schema::Unified4Label];

    pub fn name(self) -> &'static str {
        match self {
            Schema::Brats2015 => "brats2015",
            Schema::Brats2018 => "brats2018",
            Schema::Brats2021 => "brats2021",
            Schema::Unified4Label => "unified",
        }
    }

    /// Label 3 is unused in the 2018 and 2021 releases.
    pub fn is_valid_label(self, label: u8) -> bool {
        match self {
            Schema::Brats2015 | Schema::Unified4Label => label <= ET,
            Schema::Brats2018 | Schema::Brats2021 => matches!(label, BACKGROUND | NCR | ED | ET),
        }
    }

    /// Data labels composing each evaluation segment.
    pub fn segment_defs(self) -> &'static [(Segment, &'static [u8])] {
        match self {
            Schema::Brats2015 => {
                &[(Segment::At, &[NCR, ET]), (Segment::Tc, &[NCR, NET, ET]), (Segment::Wt, &[NCR, ED, NET, ET])]
            }
            Schema::Brats2018 => &[(Segment::At, &[ET]), (Segment::Tc, &[NCR, ET]), (Segment::Wt, &[NCR, ED, ET])],
            Schema::Brats2021 => &[(Segment::Et, &[ET]), (Segment::Tc, &[NCR, ET]), (Segment::Wt, &[NCR, ED, ET])],
            Schema::Unified4Label => &[
                (Segment::Et, &[ET]),
                (Segment::Tc, &[NCR, ET]),
                (Segment::Wt, &[NCR, ED, NET, ET]),
                (Segment::Net, &[NET]),
                (Segment::Tcn, &[NCR, NET, ET]),
            ],
        }
    }

    pub fn segments(self) -> Vec<Segment> {
        self.segment_defs().iter().map(|(s, _)| *s).collect()
    }

    pub fn labels_of(self, segment: Segment) -> Option<&'static [u8]> {
        self.segment_defs().iter().find(|(s, _)| *s == segment).map(|(_, l)| *l)
    }

    /// The innermost segment: active tumor before 2021, enhancing tumor after.
    fn innermost(self) -> Segment {
        match self {
            Schema::Brats2015 | Schema::Brats2018 => Segment::At,
            Schema::Brats2021 | Schema::Unified4Label => Segment::Et,
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schema {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "brats2015" => Ok(Schema::Brats2015),
            "brats2018" => Ok(Schema::Brats2018),
            "brats2021" | "brats2022" => Ok(Schema::Brats2021),
            "unified" | "unified4label" => Ok(Schema::Unified4Label),
            _ => Err(LabelError::UnknownSchema(s.to_string())),
        }
    }
}

/// Evaluation segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Segment {
    At,
    Et,
    Tc,
    Wt,
    Net,
    Tcn,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::At => "AT",
            Segment::Et => "ET",
            Segment::Tc => "TC",
            Segment::Wt => "WT",
            Segment::Net => "NET",
            Segment::Tcn => "TCN",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Segment {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "AT" => Ok(Segment::At),
            "ET" => Ok(Segment::Et),
            "TC" => Ok(Segment::Tc),
            "WT" => Ok(Segment::Wt),
            "NET" => Ok(Segment::Net),
            "TCN" => Ok(Segment::Tcn),
            _ => Err(LabelError::UnknownSegment(s.to_string())),
        }
    }
}

/// Named binary masks sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMaskSet {
    masks: BTreeMap<Segment, Mask>,
    resolution_factor: usize,
}

impl SegmentMaskSet {
    pub fn new(masks: BTreeMap<Segment, Mask>, resolution_factor: usize) -> Result<Self, LabelError> {
        let mut shapes = masks.values().map(|m| m.shape());
        if let Some(first) = shapes.next() {
            for s in shapes {
                ensure_same_shape(first, s)?;
            }
        }
        Ok(Self { masks, resolution_factor })
    }

    pub fn get(&self, segment: Segment) -> Option<&Mask> {
        self.masks.get(&segment)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Segment, &Mask)> {
        self.masks.iter().map(|(s, m)| (*s, m))
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.masks.keys().copied().collect()
    }

    pub fn resolution_factor(&self) -> usize {
        self.resolution_factor
    }

    pub fn shape(&self) -> Option<Shape3> {
        self.masks.values().next().map(|m| m.shape())
    }

    pub fn upscale_repeat(&self, factor: usize) -> Result<Self, LabelError> {
        let masks =
            self.masks.iter().map(|(s, m)| Ok((*s, m.upscale_repeat(factor)?))).collect::<Result<_, VolumeError>>()?;
        Ok(Self { masks, resolution_factor: self.resolution_factor * factor })
    }

    /// Checks every nesting relation that holds between present segments.
    pub fn check_containment(&self) -> Result<(), LabelError> {
        use Segment::*;
        let chains: [(Segment, Segment); 6] = [(Et, Tc), (At, Tc), (Tc, Tcn), (Tc, Wt), (Tcn, Wt), (Net, Tcn)];
        for (inner, outer) in chains {
            if let (Some(a), Some(b)) = (self.get(inner), self.get(outer)) {
                if !a.is_subset_of(b)? {
                    return Err(LabelError::InconsistentMasks(format!("{inner} not within {outer}")));
                }
            }
        }
        if let (Some(net), Some(wt)) = (self.get(Net), self.get(Wt)) {
            if !net.is_subset_of(wt)? {
                return Err(LabelError::InconsistentMasks("NET not within WT".into()));
            }
        }
        Ok(())
    }
}

/// Builds each evaluation segment as the indicator of its label set.
pub fn compose_segments(labels: &LabelVolume) -> SegmentMaskSet {
    let masks = labels.schema().segment_defs().iter().map(|(seg, set)| (*seg, labels.mask_of(set))).collect();
    SegmentMaskSet { masks, resolution_factor: 1 }
}

/// Inverse of [`compose_segments`]. Each voxel takes the label of the finest
/// segment it belongs to: ET/AT (4), then NET (3), then the rest of TC (1 or,
/// for 2015, 3), then the rest of WT (2).
pub fn decompose_to_labels(masks: &SegmentMaskSet, schema: Schema) -> Result<LabelVolume, LabelError> {
    if masks.resolution_factor != 1 {
        return Err(LabelError::Upscaled(masks.resolution_factor));
    }
    let need = |seg: Segment| masks.get(seg).ok_or(LabelError::MissingSegment { segment: seg, schema });
    let inner = need(schema.innermost())?;
    let tc = need(Segment::Tc)?;
    let wt = need(Segment::Wt)?;
    masks.check_containment()?;
    let shape = wt.shape();
    let empty = Mask::empty(shape);
    let net = match schema {
        Schema::Unified4Label => masks.get(Segment::Net).unwrap_or(&empty),
        _ => &empty,
    };
    if schema == Schema::Unified4Label {
        if net.and(tc)?.any() {
            return Err(LabelError::InconsistentMasks("NET overlaps TC".into()));
        }
        if let Some(tcn) = masks.get(Segment::Tcn) {
            if *tcn != tc.or(net)? {
                return Err(LabelError::InconsistentMasks("TCN differs from TC ∪ NET".into()));
            }
        }
    }
    // 2015 folds NCR into AT, so the TC remainder there is NET.
    let tc_rest = if schema == Schema::Brats2015 { NET } else { NCR };
    let data = (0..wt.len())
        .map(|i| {
            if inner.data()[i] {
                ET
            } else if net.data()[i] {
                NET
            } else if tc.data()[i] {
                tc_rest
            } else if wt.data()[i] {
                ED
            } else {
                BACKGROUND
            }
        })
        .collect();
    Ok(LabelVolume::new(Grid::new(shape, data)?, schema)?)
}

/// Moves voxels of `net_mask` into label 3 and re-tags the volume as
/// [`Schema::Unified4Label`]. Only tumor voxels carrying the fused labels
/// (NCR=1 or ED=2) are reassigned; background and ET are left untouched.
pub fn relabel_for_unification(labels: &LabelVolume, net_mask: &Mask) -> Result<LabelVolume, LabelError> {
    if !matches!(labels.schema(), Schema::Brats2018 | Schema::Brats2021 | Schema::Unified4Label) {
        return Err(LabelError::UnsupportedSchema(labels.schema()));
    }
    let grid = labels.grid().zip_map(net_mask, |l, m| if m && matches!(l, NCR | ED) { NET } else { l })?;
    Ok(LabelVolume::new(grid, Schema::Unified4Label)?.with_spacing(labels.spacing()))
}

/// Folds NET back into the region a release merged it with: NCR for 2018,
/// ED for 2021. 2015 keeps dedicated NET labels.
pub fn fuse_to_schema(unified: &LabelVolume, target: Schema) -> Result<LabelVolume, LabelError> {
    if unified.schema() != Schema::Unified4Label {
        return Err(LabelError::UnsupportedSchema(unified.schema()));
    }
    let replacement = match target {
        Schema::Brats2018 => NCR,
        Schema::Brats2021 => ED,
        Schema::Brats2015 | Schema::Unified4Label => NET,
    };
    let grid = unified.grid().map(|l| if l == NET { replacement } else { l });
    Ok(LabelVolume::new(grid, target)?.with_spacing(unified.spacing()))
}
