use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use netseg_core::labels::{compose_segments, Schema, Segment, SegmentMaskSet};
use netseg_core::metrics::{evaluate, threshold_predictions, MetricReport};
use netseg_core::nifti::read_label_volume;
use netseg_core::volume::MultiModalRecord;
use netseg_neural::{load_checkpoint, SegmentationModel};
use serde::{Deserialize, Serialize};

use super::{required, split_held_out};
use crate::error::CliError;
use crate::io::{load_records, require_dir, try_par_map, write_table};
use crate::{Common, Params};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted label file (pairs with --gt).
    #[arg(long, requires = "gt", conflicts_with_all = ["data", "model"])]
    pred: Option<PathBuf>,
    /// Ground-truth label file.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// Dataset directory (pairs with --model).
    #[arg(long, requires = "model")]
    data: Option<PathBuf>,
    /// Checkpoint (`model.json`).
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    /// Label schema of the files or dataset.
    #[arg(long)]
    schema: Option<Schema>,
    /// Score only the last N records (sorted by id).
    #[arg(long)]
    test_count: Option<usize>,
    /// Probability threshold for network outputs.
    #[arg(long)]
    threshold: Option<f64>,
    /// Hausdorff percentile (100 for the maximum).
    #[arg(long)]
    hd_percentile: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub schema: Schema,
    /// All records when unset.
    pub test_count: Option<usize>,
    pub threshold: f64,
    pub hd_percentile: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            pred: None,
            gt: None,
            data: None,
            model: None,
            schema: Schema::Unified4Label,
            test_count: None,
            threshold: 0.5,
            hd_percentile: 95.0,
        }
    }
}

/// Mean scores of one segment over the evaluated records.
#[derive(Debug, Serialize)]
struct SegmentSummary {
    segment: Segment,
    records: usize,
    dice: f64,
    iou: f64,
    /// Over records where the distance is defined.
    hausdorff_mm: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Summary {
    records: usize,
    /// Mean over records of the per-record ET/AT/TC/WT mean Dice.
    mean_dice: f64,
    segments: Vec<SegmentSummary>,
}

fn summarize(reports: &[MetricReport]) -> Summary {
    let mut per: BTreeMap<Segment, Vec<_>> = BTreeMap::new();
    for r in reports {
        for (s, sc) in &r.per_segment {
            per.entry(*s).or_default().push(*sc);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let segments = per
        .into_iter()
        .map(|(segment, scores)| {
            let dice: Vec<f64> = scores.iter().map(|s| s.dice).collect();
            let iou: Vec<f64> = scores.iter().map(|s| s.iou).collect();
            let hd: Vec<f64> = scores.iter().filter_map(|s| s.hausdorff_mm).collect();
            SegmentSummary {
                segment,
                records: scores.len(),
                dice: mean(&dice).unwrap_or(f64::NAN),
                iou: mean(&iou).unwrap_or(f64::NAN),
                hausdorff_mm: mean(&hd),
            }
        })
        .collect();
    let means: Vec<f64> = reports.iter().map(MetricReport::mean_dice).filter(|d| d.is_finite()).collect();
    Summary { records: reports.len(), mean_dice: mean(&means).unwrap_or(f64::NAN), segments }
}

fn label_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("record");
    let stem = name.strip_suffix(".nii").or_else(|| name.strip_suffix(".nii.gz")).unwrap_or(name);
    stem.strip_suffix("_seg").unwrap_or(stem).to_string()
}

fn score_record(model: &SegmentationModel, rec: &MultiModalRecord, p: &EvalParams) -> Result<MetricReport, CliError> {
    let labels = rec
        .labels
        .as_ref()
        .ok_or_else(|| CliError::data("MissingLabels", format!("record {} has no labels", rec.record_id)))?;
    let probs = model.predict_record(rec)?;
    let factor = probs.resolution_factor;
    let pred = threshold_predictions(&probs, p.threshold)?;
    let gt = compose_segments(labels);
    let mut masks = BTreeMap::new();
    for &seg in &model.segments {
        let m = gt.get(seg).ok_or_else(|| {
            CliError::data("MissingSegment", format!("segment {seg} is not defined for schema {}", labels.schema()))
        })?;
        masks.insert(seg, m.clone());
    }
    let gt = SegmentMaskSet::new(masks, 1)?.upscale_repeat(factor)?;
    let spacing = labels.spacing().map(|s| s / factor as f64);
    Ok(evaluate(&rec.record_id, &pred, &gt, spacing, p.hd_percentile)?)
}

impl Params for EvalParams {
    type Args = EvalArgs;
    const NAME: &'static str = "eval";

    fn apply(&mut self, a: &EvalArgs) -> Result<(), CliError> {
        if a.pred.is_some() {
            (self.pred, self.gt, self.data, self.model) = (a.pred.clone(), a.gt.clone(), None, None);
        }
        if a.data.is_some() {
            (self.pred, self.gt, self.data, self.model) = (None, None, a.data.clone(), a.model.clone());
        }
        if let Some(s) = a.schema {
            self.schema = s;
        }
        if a.test_count.is_some() {
            self.test_count = a.test_count;
        }
        if let Some(t) = a.threshold {
            self.threshold = t;
        }
        if let Some(h) = a.hd_percentile {
            self.hd_percentile = h;
        }
        Ok(())
    }

    fn validate(&self, _: &Common) -> Result<(), CliError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CliError::usage(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.hd_percentile > 0.0 && self.hd_percentile <= 100.0) {
            return Err(CliError::usage(format!("percentile must be in (0, 100], got {}", self.hd_percentile)));
        }
        let exists = |p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(CliError::data("NotFound", format!("{} does not exist", p.display())))
            }
        };
        match (&self.pred, &self.gt, &self.data, &self.model) {
            (Some(p), Some(g), None, None) => exists(p).and(exists(g)),
            (None, None, Some(d), Some(m)) => require_dir(d, "data").and(exists(m)),
            _ => Err(CliError::usage("give either --pred with --gt, or --data with --model")),
        }
    }

    fn run(&self, common: &Common) -> Result<(), CliError> {
        let reports = if let (Some(p), Some(g)) = (&self.pred, &self.gt) {
            let pred = compose_segments(&read_label_volume(p, self.schema)?);
            let gt_labels = read_label_volume(g, self.schema)?;
            let spacing = gt_labels.spacing();
            vec![evaluate(&label_stem(g), &pred, &compose_segments(&gt_labels), spacing, self.hd_percentile)?]
        } else {
            let (model, _) = load_checkpoint(required(&self.model, "model")?)?;
            let records = load_records(required(&self.data, "data")?, self.schema, common.jobs)?;
            let n = self.test_count.unwrap_or(records.len());
            let (_, scored) = split_held_out(&records, n)?;
            log::info!("scoring {} records", scored.len());
            try_par_map(&scored, common.jobs, |r| score_record(&model, r, self))?
        };
        let summary = summarize(&reports);
        write_table(&common.out, "metrics", common.format, &reports, || {
            let mut csv = format!("{}\n", MetricReport::csv_header());
            for r in &reports {
                csv.push_str(&r.csv_rows());
            }
            csv
        })?;
        write_table(&common.out, "summary", common.format, &summary, || {
            let mut csv = String::from("segment,records,dice,iou,hd\n");
            for s in &summary.segments {
                let hd = s.hausdorff_mm.map(|h| format!("{h:.6}")).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{:.6},{:.6},{hd}", s.segment, s.records, s.dice, s.iou);
            }
            let _ = writeln!(csv, "mean,{},{:.6},,", summary.records, summary.mean_dice);
            csv
        })?;
        for s in &summary.segments {
            println!("{}\tdice {:.4}\tiou {:.4}", s.segment, s.dice, s.iou);
        }
        println!("mean\tdice {:.4}", summary.mean_dice);
        Ok(())
    }
}
