//! Recovering NET compartments hidden in fused NCR labels.
//!
//! A model that separates NCR from NET (trained on 2021-style labels) predicts
//! TC and ET; its NCR estimate `TC \ ET` is subtracted from the fused 2018
//! NCR label, and what remains is NET.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{compose_segments, fuse_to_schema, relabel_for_unification, LabelError, Schema, Segment};
use crate::labels::{BACKGROUND, ED, ET, NCR, NET};
use crate::metrics::{threshold_predictions, MetricError, ProbabilityMaps};
use crate::morphology::{apply_filters, default_net_filters, FilterStep, MorphologyError};
use crate::stats::{partition_by_volume, StatsError, VolumeGroup, VolumePartition};
use crate::volume::{Grid, LabelVolume, Mask, MultiModalRecord, VolumeError};

pub type PredictError = Box<dyn std::error::Error + Send + Sync>;

/// Anything that maps a record to per-segment probabilities.
pub trait SegmentPredictor {
    /// Segments present in every prediction.
    fn segments(&self) -> Vec<Segment>;
    fn predict(&self, record: &MultiModalRecord) -> Result<ProbabilityMaps, PredictError>;
}

/// Returns 0/1 maps derived from known unified labels, re-expressed in `schema`.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub schema: Schema,
    pub truth: BTreeMap<String, LabelVolume>,
}

impl OraclePredictor {
    pub fn new(schema: Schema, truth: impl IntoIterator<Item = (String, LabelVolume)>) -> Self {
        Self { schema, truth: truth.into_iter().collect() }
    }

    /// Oracle over the records' own unified labels.
    pub fn from_records<'a>(schema: Schema, records: impl IntoIterator<Item = &'a MultiModalRecord>) -> Self {
        Self::new(schema, records.into_iter().filter_map(|r| Some((r.record_id.clone(), r.labels.clone()?))))
    }
}

impl SegmentPredictor for OraclePredictor {
    fn segments(&self) -> Vec<Segment> {
        self.schema.segments()
    }

    fn predict(&self, record: &MultiModalRecord) -> Result<ProbabilityMaps, PredictError> {
        let unified = self
            .truth
            .get(&record.record_id)
            .ok_or_else(|| format!("oracle has no labels for {}", record.record_id))?;
        let labels = fuse_to_schema(unified, self.schema)?;
        let maps = compose_segments(&labels).iter().map(|(s, m)| (s, m.map(|b| if b { 1.0 } else { 0.0 }))).collect();
        Ok(ProbabilityMaps { maps, resolution_factor: 1 })
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("model does not predict segment {0}")]
    ModelSegmentMismatch(Segment),
    #[error("expected {expected} labels, got {got}")]
    WrongSchema { expected: Schema, got: Schema },
    #[error("record {0} has no labels")]
    MissingLabels(String),
    #[error("prediction failed: {0}")]
    Prediction(PredictError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Morphology(#[from] MorphologyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// What is subtracted from the fused NCR label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubtractMode {
    /// `TC_pred \ ET_pred`
    #[default]
    MinusNcrPred,
    /// `TC_pred`
    MinusTcPred,
}

impl fmt::Display for SubtractMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubtractMode::MinusNcrPred => "minus_ncr_pred",
            SubtractMode::MinusTcPred => "minus_tc_pred",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub subtract_mode: SubtractMode,
    pub filter_sequence: Vec<FilterStep>,
    pub prediction_threshold: f64,
    /// Also relabel predicted-ET voxels that are background or ED as ET.
    pub literal_et_reassignment: bool,
    /// Label given to NET voxels a refinement model no longer predicts.
    pub released_net_label: u8,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            subtract_mode: SubtractMode::MinusNcrPred,
            filter_sequence: default_net_filters(),
            prediction_threshold: 0.5,
            literal_et_reassignment: false,
            released_net_label: NCR,
        }
    }
}

impl ExtractionConfig {
    fn check(&self) -> Result<(), ExtractionError> {
        if !(self.prediction_threshold > 0.0 && self.prediction_threshold < 1.0) {
            return Err(MetricError::BadThreshold(self.prediction_threshold).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionResult {
    pub record_id: String,
    pub net_mask: Mask,
    pub ncr_mask: Mask,
    pub relabeled: LabelVolume,
    pub fused_voxels: usize,
    pub raw_net_voxels: usize,
    pub net_voxels: usize,
    pub group: Option<VolumeGroup>,
}

impl ExtractionResult {
    pub fn report(&self, mode: SubtractMode) -> ExtractionReport {
        ExtractionReport {
            record_id: self.record_id.clone(),
            subtract_mode: mode,
            fused_voxels: self.fused_voxels,
            raw_net_voxels: self.raw_net_voxels,
            net_voxels: self.net_voxels,
            ncr_voxels: self.ncr_mask.count(),
            group: self.group,
        }
    }
}

/// Serializable per-record summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub record_id: String,
    pub subtract_mode: SubtractMode,
    pub fused_voxels: usize,
    pub raw_net_voxels: usize,
    pub net_voxels: usize,
    pub ncr_voxels: usize,
    pub group: Option<VolumeGroup>,
}

/// `TC \ ET`, voxelwise.
pub fn predict_ncr_masks(tc_pred: &Mask, et_pred: &Mask) -> Result<Mask, ExtractionError> {
    Ok(tc_pred.minus(et_pred)?)
}

/// Thresholded TC and ET predictions of `model` on the record's own grid.
/// Upscaled outputs are block-averaged back before thresholding.
pub fn predict_tc_et(
    model: &dyn SegmentPredictor,
    record: &MultiModalRecord,
    threshold: f64,
) -> Result<(Mask, Mask), ExtractionError> {
    for seg in [Segment::Tc, Segment::Et] {
        if !model.segments().contains(&seg) {
            return Err(ExtractionError::ModelSegmentMismatch(seg));
        }
    }
    let probs = model.predict(record).map_err(ExtractionError::Prediction)?;
    let probs = probs.downsample_mean(probs.resolution_factor);
    let masks = threshold_predictions(&probs, threshold)?;
    let get = |s| masks.get(s).cloned().ok_or(ExtractionError::ModelSegmentMismatch(s));
    Ok((get(Segment::Tc)?, get(Segment::Et)?))
}

/// `NCR_pred = TC_pred \ ET_pred` from a model.
pub fn predict_ncr(
    model: &dyn SegmentPredictor,
    record: &MultiModalRecord,
    threshold: f64,
) -> Result<Mask, ExtractionError> {
    let (tc, et) = predict_tc_et(model, record, threshold)?;
    predict_ncr_masks(&tc, &et)
}

/// Mask-level decomposition of a fused NCR region. Returns `(raw_net, net, ncr)`:
/// the unfiltered difference, the filtered NET clipped to `fused ∪ allowed`,
/// and the remaining fused voxels.
pub fn decompose_fused(
    fused: &Mask,
    allowed: &Mask,
    tc_pred: &Mask,
    et_pred: &Mask,
    cfg: &ExtractionConfig,
) -> Result<(Mask, Mask, Mask), ExtractionError> {
    let subtrahend = match cfg.subtract_mode {
        SubtractMode::MinusNcrPred => tc_pred.minus(et_pred)?,
        SubtractMode::MinusTcPred => tc_pred.clone(),
    };
    let raw = fused.minus(&subtrahend)?;
    let net = apply_filters(&raw, &cfg.filter_sequence)?.and(&fused.or(allowed)?)?;
    let ncr = fused.minus(&net)?;
    Ok((raw, net, ncr))
}

/// Splits label 1 of a 2018-style volume into NCR and NET. Filtering may
/// grow NET into ED (kept) but never into background or ET.
pub fn extract_net(
    record_id: &str,
    labels_2018: &LabelVolume,
    tc_pred: &Mask,
    et_pred: &Mask,
    cfg: &ExtractionConfig,
) -> Result<ExtractionResult, ExtractionError> {
    cfg.check()?;
    if labels_2018.schema() != Schema::Brats2018 {
        return Err(ExtractionError::WrongSchema { expected: Schema::Brats2018, got: labels_2018.schema() });
    }
    let fused = labels_2018.mask_of(&[NCR]);
    let ed = labels_2018.mask_of(&[ED]);
    let (raw, net, ncr) = decompose_fused(&fused, &ed, tc_pred, et_pred, cfg)?;
    let mut relabeled = relabel_for_unification(labels_2018, &net)?;
    if cfg.literal_et_reassignment {
        let grid = relabeled.grid().zip_map(et_pred, |l, e| if e && matches!(l, BACKGROUND | ED) { ET } else { l })?;
        relabeled = LabelVolume::new(grid, Schema::Unified4Label)?.with_spacing(labels_2018.spacing());
    }
    let net_voxels = net.count();
    Ok(ExtractionResult {
        record_id: record_id.to_string(),
        fused_voxels: fused.count(),
        raw_net_voxels: raw.count(),
        net_voxels,
        net_mask: net,
        ncr_mask: ncr,
        relabeled,
        group: None,
    })
}

/// Extraction results of a whole dataset.
#[derive(Debug, Clone)]
pub struct DatasetExtraction {
    pub results: BTreeMap<String, ExtractionResult>,
    pub errors: BTreeMap<String, String>,
    pub partition: VolumePartition,
}

impl DatasetExtraction {
    /// Records of the medium NET-volume group, used to train the 4-label model.
    pub fn training_subset(&self) -> Vec<&str> {
        self.partition.members(VolumeGroup::Medium)
    }

    pub fn reports(&self, mode: SubtractMode) -> Vec<ExtractionReport> {
        self.results.values().map(|r| r.report(mode)).collect()
    }
}

/// Runs [`extract_net`] on every record (2018-style labels), collecting
/// per-record failures, then groups the successful ones by NET volume.
pub fn run_dataset_extraction(
    records: &[MultiModalRecord],
    model: &dyn SegmentPredictor,
    cfg: &ExtractionConfig,
    seed: u64,
) -> Result<DatasetExtraction, ExtractionError> {
    cfg.check()?;
    let mut results = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for rec in records {
        let outcome = (|| {
            let labels = rec.labels.as_ref().ok_or_else(|| ExtractionError::MissingLabels(rec.record_id.clone()))?;
            let (tc, et) = predict_tc_et(model, rec, cfg.prediction_threshold)?;
            extract_net(&rec.record_id, labels, &tc, &et, cfg)
        })();
        match outcome {
            Ok(r) => {
                results.insert(rec.record_id.clone(), r);
            }
            Err(e) => {
                log::warn!("extraction failed for {}: {e}", rec.record_id);
                errors.insert(rec.record_id.clone(), e.to_string());
            }
        }
    }
    let volumes: BTreeMap<String, usize> = results.iter().map(|(id, r)| (id.clone(), r.net_voxels)).collect();
    let partition = partition_by_volume(&volumes, seed)?;
    for (id, r) in results.iter_mut() {
        r.group = partition.groups.get(id).copied();
    }
    Ok(DatasetExtraction { results, errors, partition })
}

/// Outcome of re-predicting NET on one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedRecord {
    pub record_id: String,
    pub relabeled: LabelVolume,
    pub net_before: usize,
    pub net_after: usize,
}

/// Replaces the NET label of every (unified) record by the thresholded,
/// filtered NET prediction of `net_model`. New NET may only claim NCR, ED or
/// NET voxels; NET voxels no longer predicted get `cfg.released_net_label`.
pub fn refine_dataset(
    records: &[MultiModalRecord],
    net_model: &dyn SegmentPredictor,
    cfg: &ExtractionConfig,
) -> Result<Vec<RefinedRecord>, ExtractionError> {
    cfg.check()?;
    if !net_model.segments().contains(&Segment::Net) {
        return Err(ExtractionError::ModelSegmentMismatch(Segment::Net));
    }
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let labels = rec.labels.as_ref().ok_or_else(|| ExtractionError::MissingLabels(rec.record_id.clone()))?;
        if labels.schema() != Schema::Unified4Label {
            return Err(ExtractionError::WrongSchema { expected: Schema::Unified4Label, got: labels.schema() });
        }
        let probs = net_model.predict(rec).map_err(ExtractionError::Prediction)?;
        let probs = probs.downsample_mean(probs.resolution_factor);
        let pred = probs.get(Segment::Net).ok_or(ExtractionError::ModelSegmentMismatch(Segment::Net))?;
        let pred: Mask = pred.map(|p| p >= cfg.prediction_threshold);
        let allowed = labels.mask_of(&[NCR, ED, NET]);
        let net = apply_filters(&pred.and(&allowed)?, &cfg.filter_sequence)?.and(&allowed)?;
        let release = cfg.released_net_label;
        let grid: Grid<u8> = labels.grid().zip_map(&net, |l, n| match (l, n) {
            (_, true) => NET,
            (NET, false) => release,
            (l, false) => l,
        })?;
        let relabeled = LabelVolume::new(grid, Schema::Unified4Label)?.with_spacing(labels.spacing());
        let before = labels.data().iter().filter(|&&l| l == NET).count();
        let after = net.count();
        log::info!("{}: NET {before} -> {after} voxels", rec.record_id);
        out.push(RefinedRecord { record_id: rec.record_id.clone(), relabeled, net_before: before, net_after: after });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(shape: [usize; 3], f: impl Fn([usize; 3]) -> bool) -> Mask {
        Grid::from_fn(shape, f)
    }

    fn box_of(lo: [usize; 3], hi: [usize; 3]) -> impl Fn([usize; 3]) -> bool {
        move |c| (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a])
    }

    #[test]
    fn ring_from_tc_minus_et() {
        let s = [5, 5, 5];
        let tc = mask(s, box_of([1, 1, 1], [4, 4, 4]));
        let et = mask(s, box_of([2, 2, 2], [3, 3, 3]));
        let ncr = predict_ncr_masks(&tc, &et).unwrap();
        assert_eq!(ncr.count(), 26);
        assert!(!ncr.get([2, 2, 2]));
        assert_eq!(predict_ncr_masks(&tc, &tc).unwrap().count(), 0);
    }

    fn raw_cfg() -> ExtractionConfig {
        ExtractionConfig { filter_sequence: vec![], ..Default::default() }
    }

    #[test]
    fn disjoint_core_and_rim() {
        let s = [10, 10, 10];
        let core = mask(s, box_of([3, 3, 3], [7, 7, 7]));
        let rim = mask(s, |c| box_of([1, 1, 1], [9, 9, 9])(c) && !box_of([2, 2, 2], [8, 8, 8])(c));
        let fused = core.or(&rim).unwrap();
        let none = Mask::empty(s);
        // subtrahend = TC \ ET = core
        let (raw, net, ncr) = decompose_fused(&fused, &none, &core, &none, &raw_cfg()).unwrap();
        assert_eq!(raw, rim);
        assert_eq!(net, rim);
        assert_eq!(ncr, core);
        // fused within the subtrahend leaves nothing
        let (raw, _, ncr) = decompose_fused(&fused, &none, &fused, &none, &raw_cfg()).unwrap();
        assert_eq!(raw.count(), 0);
        assert_eq!(ncr, fused);
    }

    #[test]
    fn minus_tc_mode_subtracts_et_too() {
        let s = [6, 6, 6];
        let fused = mask(s, box_of([0, 0, 0], [6, 6, 3]));
        let tc = mask(s, box_of([0, 0, 0], [6, 6, 2]));
        let et = mask(s, box_of([0, 0, 1], [6, 6, 2]));
        let ncr_mode = decompose_fused(&fused, &Mask::empty(s), &tc, &et, &raw_cfg()).unwrap().0;
        let cfg = ExtractionConfig { subtract_mode: SubtractMode::MinusTcPred, ..raw_cfg() };
        let tc_mode = decompose_fused(&fused, &Mask::empty(s), &tc, &et, &cfg).unwrap().0;
        assert_eq!(ncr_mode.count(), 72);
        assert_eq!(tc_mode.count(), 36);
    }

    #[test]
    fn isolated_noise_is_filtered() {
        let s = [20, 20, 20];
        let core = mask(s, box_of([8, 8, 8], [12, 12, 12]));
        let shell = mask(s, |c| box_of([4, 4, 4], [16, 16, 16])(c) && !box_of([7, 7, 7], [13, 13, 13])(c));
        // box edges do not survive an opening by the cross, so start from a
        // shell the default filters leave alone
        let filters = default_net_filters();
        let rim = apply_filters(&shell, &filters).unwrap();
        assert_eq!(apply_filters(&rim, &filters).unwrap(), rim);
        assert!(rim.count() > 1000);
        let mut fused = core.or(&rim).unwrap();
        for c in [[0, 0, 0], [19, 19, 19], [0, 19, 0], [1, 10, 17], [18, 2, 9]] {
            fused.set(c, true);
        }
        let none = Mask::empty(s);
        let (raw, net, ncr) = decompose_fused(&fused, &none, &core, &none, &ExtractionConfig::default()).unwrap();
        assert_eq!(raw.count(), rim.count() + 5);
        assert_eq!(net, rim);
        assert_eq!(ncr.count(), core.count() + 5);
    }

    #[test]
    fn relabels_only_the_fused_region() {
        let s = [4, 4, 4];
        let grid = Grid::from_fn(s, |[a, _, _]| [0, 1, 2, 4][a]);
        let l18 = LabelVolume::new(grid, Schema::Brats2018).unwrap();
        let tc = Mask::empty(s);
        let r = extract_net("r", &l18, &tc, &tc, &raw_cfg()).unwrap();
        assert_eq!(r.net_voxels, 16);
        assert_eq!(r.relabeled.schema(), Schema::Unified4Label);
        assert_eq!(r.relabeled.count_label_voxels()[&NET], 16);
        assert_eq!(r.relabeled.count_label_voxels()[&ED], 16);
        assert_eq!(r.relabeled.count_label_voxels()[&ET], 16);
        // literal mode: predicted ET takes over background and ED
        let et = Grid::from_fn(s, |[a, b, _]| a != 1 && b == 0);
        let cfg = ExtractionConfig { literal_et_reassignment: true, ..raw_cfg() };
        let r = extract_net("r", &l18, &tc, &et, &cfg).unwrap();
        assert_eq!(r.relabeled.count_label_voxels()[&ET], 16 + 8);
    }

    #[test]
    fn wrong_inputs() {
        let s = [2, 2, 2];
        let l21 = LabelVolume::new(Grid::filled(s, 0), Schema::Brats2021).unwrap();
        let m = Mask::empty(s);
        assert!(matches!(extract_net("r", &l21, &m, &m, &raw_cfg()), Err(ExtractionError::WrongSchema { .. })));
        let l18 = l21.retag(Schema::Brats2018).unwrap();
        assert!(matches!(
            extract_net("r", &l18, &Mask::empty([3, 3, 3]), &m, &raw_cfg()),
            Err(ExtractionError::Volume(VolumeError::ShapeMismatch(..)))
        ));
        let cfg = ExtractionConfig { prediction_threshold: 1.0, ..raw_cfg() };
        assert!(extract_net("r", &l18, &m, &m, &cfg).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExtractionConfig = serde_json::from_str(r#"{"subtract_mode":"minus_tc_pred"}"#).unwrap();
        assert_eq!(cfg.subtract_mode, SubtractMode::MinusTcPred);
        assert_eq!(cfg.filter_sequence, default_net_filters());
        assert_eq!(cfg.prediction_threshold, 0.5);
    }

    fn arb_mask(shape: [usize; 3]) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(any::<bool>(), shape.iter().product::<usize>())
            .prop_map(move |d| Grid::new(shape, d).unwrap())
    }

    proptest! {
        #[test]
        fn net_and_ncr_partition_fused(
            fused in arb_mask([5, 5, 5]), tc in arb_mask([5, 5, 5]), et in arb_mask([5, 5, 5]), ed in arb_mask([5, 5, 5]),
        ) {
            for cfg in [raw_cfg(), ExtractionConfig::default()] {
                let (raw, net, ncr) = decompose_fused(&fused, &ed, &tc, &et, &cfg).unwrap();
                prop_assert_eq!(net.and(&ncr).unwrap().count(), 0);
                prop_assert!(raw.is_subset_of(&fused).unwrap());
                prop_assert!(net.is_subset_of(&fused.or(&ed).unwrap()).unwrap());
                prop_assert_eq!(ncr.or(&net.and(&fused).unwrap()).unwrap(), fused.clone());
            }
        }

        #[test]
        fn larger_subtrahend_never_grows_raw_net(
            fused in arb_mask([4, 4, 4]), tc in arb_mask([4, 4, 4]), extra in arb_mask([4, 4, 4]),
        ) {
            let none = Mask::empty([4, 4, 4]);
            let cfg = ExtractionConfig { subtract_mode: SubtractMode::MinusTcPred, ..raw_cfg() };
            let small = decompose_fused(&fused, &none, &tc, &none, &cfg).unwrap().0;
            let big = decompose_fused(&fused, &none, &tc.or(&extra).unwrap(), &none, &cfg).unwrap().0;
            prop_assert!(big.is_subset_of(&small).unwrap());
        }
    }
}
