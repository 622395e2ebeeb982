use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use netseg_core::extraction::{
    extract_net, predict_tc_et, ExtractionConfig, ExtractionReport, OraclePredictor, SegmentPredictor, SubtractMode,
};
use netseg_core::labels::Schema;
use netseg_core::nifti::{read_label_volume, record_path};
use netseg_core::stats::{partition_by_volume, VolumeGroup};
use netseg_core::volume::MultiModalRecord;
use netseg_neural::load_checkpoint;
use serde::{Deserialize, Serialize};

use super::required;
use crate::error::CliError;
use crate::io::{load_records, require_dir, try_par_map, write_json, write_records, write_table};
use crate::{Common, Params};

fn parse_mode(s: &str) -> Result<SubtractMode, String> {
    match s {
        "minus_ncr_pred" => Ok(SubtractMode::MinusNcrPred),
        "minus_tc_pred" => Ok(SubtractMode::MinusTcPred),
        _ => Err("expected minus_ncr_pred or minus_tc_pred".into()),
    }
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Dataset directory with 2018-style labels (NET fused into label 1).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label schema of the dataset.
    #[arg(long)]
    schema: Option<Schema>,
    /// Checkpoint (`model.json`) of a network predicting TC and ET.
    #[arg(long, conflicts_with = "truth")]
    model: Option<PathBuf>,
    /// Directory of unified ground-truth labels used as a perfect predictor.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Probability threshold for predicted masks.
    #[arg(long)]
    threshold: Option<f64>,
    /// What is subtracted from the fused label: minus_ncr_pred or minus_tc_pred.
    #[arg(long, value_parser = parse_mode)]
    subtract_mode: Option<SubtractMode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractParams {
    pub data: Option<PathBuf>,
    pub schema: Schema,
    pub model: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub extraction: ExtractionConfig,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            data: None,
            schema: Schema::Brats2018,
            model: None,
            truth: None,
            extraction: ExtractionConfig::default(),
        }
    }
}

fn oracle(truth: &Path, records: &[MultiModalRecord], jobs: usize) -> Result<OraclePredictor, CliError> {
    let labels = try_par_map(records, jobs, |r| {
        let path = record_path(truth, &r.record_id, None);
        Ok((r.record_id.clone(), read_label_volume(path, Schema::Unified4Label)?))
    })?;
    Ok(OraclePredictor::new(Schema::Brats2021, labels))
}

impl Params for ExtractParams {
    type Args = ExtractArgs;
    const NAME: &'static str = "extract";

    fn apply(&mut self, a: &ExtractArgs) -> Result<(), CliError> {
        if a.data.is_some() {
            self.data = a.data.clone();
        }
        if let Some(s) = a.schema {
            self.schema = s;
        }
        if a.model.is_some() {
            self.model = a.model.clone();
            self.truth = None;
        }
        if a.truth.is_some() {
            self.truth = a.truth.clone();
            self.model = None;
        }
        if let Some(t) = a.threshold {
            self.extraction.prediction_threshold = t;
        }
        if let Some(m) = a.subtract_mode {
            self.extraction.subtract_mode = m;
        }
        Ok(())
    }

    fn validate(&self, _: &Common) -> Result<(), CliError> {
        require_dir(required(&self.data, "data")?, "data")?;
        if self.schema != Schema::Brats2018 {
            return Err(CliError::usage(format!("extraction needs brats2018 labels, not {}", self.schema)));
        }
        let t = self.extraction.prediction_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::usage(format!("threshold must lie in (0, 1), got {t}")));
        }
        match (&self.model, &self.truth) {
            (Some(m), None) if !m.is_file() => {
                Err(CliError::data("NotFound", format!("checkpoint {} does not exist", m.display())))
            }
            (None, Some(t)) => require_dir(t, "truth"),
            (None, None) => Err(CliError::usage("one of --model or --truth is required")),
            _ => Ok(()),
        }
    }

    fn run(&self, common: &Common) -> Result<(), CliError> {
        let records = load_records(required(&self.data, "data")?, self.schema, common.jobs)?;
        let predictor: Box<dyn SegmentPredictor + Sync> = match (&self.model, &self.truth) {
            (Some(m), _) => Box::new(load_checkpoint(m)?.0),
            (None, Some(t)) => Box::new(oracle(t, &records, common.jobs)?),
            (None, None) => unreachable!("validated"),
        };
        let cfg = &self.extraction;
        let mut results = try_par_map(&records, common.jobs, |rec| {
            let labels = rec
                .labels
                .as_ref()
                .ok_or_else(|| CliError::data("MissingLabels", format!("record {} has no labels", rec.record_id)))?;
            let (tc, et) = predict_tc_et(predictor.as_ref(), rec, cfg.prediction_threshold)?;
            Ok(extract_net(&rec.record_id, labels, &tc, &et, cfg)?)
        })?;
        let volumes: BTreeMap<String, usize> = results.iter().map(|r| (r.record_id.clone(), r.net_voxels)).collect();
        let partition = partition_by_volume(&volumes, common.seed)?;
        for r in &mut results {
            r.group = partition.groups.get(&r.record_id).copied();
        }

        let relabeled: Vec<MultiModalRecord> = records
            .iter()
            .zip(&results)
            .map(|(rec, r)| MultiModalRecord { labels: Some(r.relabeled.clone()), ..rec.clone() })
            .collect();
        write_records(&common.out, &relabeled, common.jobs)?;
        let reports: Vec<ExtractionReport> = results.iter().map(|r| r.report(cfg.subtract_mode)).collect();
        write_table(&common.out, "extraction", common.format, &reports, || {
            let mut csv =
                String::from("record_id,subtract_mode,fused_voxels,raw_net_voxels,net_voxels,ncr_voxels,group\n");
            for r in &reports {
                let group = r.group.map(|g| format!("{g:?}").to_lowercase()).unwrap_or_default();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{group}",
                    r.record_id, r.subtract_mode, r.fused_voxels, r.raw_net_voxels, r.net_voxels, r.ncr_voxels
                );
            }
            csv
        })?;
        write_json(&common.out.join("groups.json"), &partition)?;
        for g in [VolumeGroup::Low, VolumeGroup::Medium, VolumeGroup::High] {
            log::info!("{g:?} NET-volume group: {} records", partition.members(g).len());
        }
        Ok(())
    }
}
