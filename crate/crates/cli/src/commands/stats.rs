use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::PathBuf;

use clap::Args;
use netseg_core::labels::{Schema, NET};
use netseg_core::stats::{
    anova_oneway, fit_gamma, histogram_csv, intensity_by_region, ks_test_gamma, partition_by_volume, tukey_hsd,
    AnovaResult, GammaFit, KsResult, Region, VolumeGroup,
};
use serde::{Deserialize, Serialize};

use super::required;
use crate::error::CliError;
use crate::io::{load_records, require_dir, write_json, write_text};
use crate::{Common, Format, Params};

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Dataset directory with unified labels.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Family-wise error rate of the Tukey comparisons.
    #[arg(long)]
    alpha: Option<f64>,
    /// Histogram bins for the NET-volume distribution.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsParams {
    pub data: Option<PathBuf>,
    pub alpha: f64,
    pub bins: usize,
}

impl Default for StatsParams {
    fn default() -> Self {
        Self { data: None, alpha: 0.05, bins: 20 }
    }
}

#[derive(Debug, Serialize)]
struct PairComparison {
    a: Region,
    b: Region,
    mean_diff: f64,
    q_statistic: f64,
    significant: bool,
}

#[derive(Debug, Serialize)]
struct ModalityStats {
    modality: String,
    regions: Vec<Region>,
    anova: AnovaResult,
    tukey_critical_value: f64,
    tukey: Vec<PairComparison>,
}

#[derive(Debug, Serialize)]
struct VolumeStats {
    volumes: BTreeMap<String, usize>,
    groups: BTreeMap<String, VolumeGroup>,
    /// Fitted to the nonzero volumes.
    gamma: GammaFit,
    ks: KsResult,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    records: usize,
    alpha: f64,
    intensity: Vec<ModalityStats>,
    net_volume: VolumeStats,
}

impl Params for StatsParams {
    type Args = StatsArgs;
    const NAME: &'static str = "stats";

    fn apply(&mut self, a: &StatsArgs) -> Result<(), CliError> {
        if a.data.is_some() {
            self.data = a.data.clone();
        }
        if let Some(v) = a.alpha {
            self.alpha = v;
        }
        if let Some(v) = a.bins {
            self.bins = v;
        }
        Ok(())
    }

    fn validate(&self, _: &Common) -> Result<(), CliError> {
        require_dir(required(&self.data, "data")?, "data")?;
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(CliError::usage(format!("alpha {} outside (0, 0.5]", self.alpha)));
        }
        if self.bins == 0 {
            return Err(CliError::usage("--bins must be at least 1"));
        }
        Ok(())
    }

    fn run(&self, common: &Common) -> Result<(), CliError> {
        let records = load_records(required(&self.data, "data")?, Schema::Unified4Label, common.jobs)?;
        let samples = intensity_by_region(&records);
        let mut intensity = Vec::new();
        for (modality, by_region) in &samples {
            let (regions, groups): (Vec<Region>, Vec<Vec<f64>>) =
                by_region.iter().filter(|(_, v)| !v.is_empty()).map(|(r, v)| (*r, v.clone())).unzip();
            let anova = anova_oneway(&groups)?;
            let tukey = tukey_hsd(&groups, self.alpha)?;
            log::info!("{}: F = {:.3}, p = {:.3e}", modality.name(), anova.f_statistic, anova.p_value);
            intensity.push(ModalityStats {
                modality: modality.name().to_string(),
                regions: regions.clone(),
                anova,
                tukey_critical_value: tukey.critical_value,
                tukey: tukey
                    .pairs
                    .iter()
                    .map(|p| PairComparison {
                        a: regions[p.group_a],
                        b: regions[p.group_b],
                        mean_diff: p.mean_diff,
                        q_statistic: p.q_statistic,
                        significant: p.significant,
                    })
                    .collect(),
            });
        }

        let volumes: BTreeMap<String, usize> = records
            .iter()
            .filter_map(|r| {
                Some((r.record_id.clone(), r.labels.as_ref()?.data().iter().filter(|&&l| l == NET).count()))
            })
            .collect();
        let nonzero: Vec<f64> = volumes.values().filter(|&&v| v > 0).map(|&v| v as f64).collect();
        if nonzero.len() < volumes.len() {
            log::warn!("{} records without NET left out of the gamma fit", volumes.len() - nonzero.len());
        }
        let gamma = fit_gamma(&nonzero)?;
        let ks = ks_test_gamma(&nonzero, &gamma);
        let partition = partition_by_volume(&volumes, common.seed)?;
        log::info!(
            "NET volume gamma k = {:.4}, theta = {:.4}, KS p = {:.4}",
            gamma.shape_k,
            gamma.scale_theta,
            ks.p_value
        );
        write_text(&common.out.join("net_volume_hist.csv"), &histogram_csv(&nonzero, self.bins, &gamma))?;

        let report = StatsReport {
            records: records.len(),
            alpha: self.alpha,
            intensity,
            net_volume: VolumeStats { volumes, groups: partition.groups, gamma, ks },
        };
        match common.format {
            Format::Json => write_json(&common.out.join("stats.json"), &report),
            Format::Csv => write_csv_tables(common, &report),
        }
    }
}

fn write_csv_tables(common: &Common, r: &StatsReport) -> Result<(), CliError> {
    let mut anova = String::from("modality,f_statistic,p_value,df_between,df_within\n");
    let mut tukey = String::from("modality,region_a,region_b,mean_diff,q_statistic,significant\n");
    for m in &r.intensity {
        let a = &m.anova;
        let _ =
            writeln!(anova, "{},{:.9},{:.6e},{},{}", m.modality, a.f_statistic, a.p_value, a.df_between, a.df_within);
        for p in &m.tukey {
            let _ = writeln!(
                tukey,
                "{},{},{},{:.9},{:.9},{}",
                m.modality, p.a, p.b, p.mean_diff, p.q_statistic, p.significant
            );
        }
    }
    let mut volumes = String::from("record_id,net_voxels,group\n");
    for (id, v) in &r.net_volume.volumes {
        let g = r.net_volume.groups.get(id).map(|g| format!("{g:?}").to_lowercase()).unwrap_or_default();
        let _ = writeln!(volumes, "{id},{v},{g}");
    }
    let g = &r.net_volume.gamma;
    let fit = format!(
        "shape_k,scale_theta,log_likelihood,ks_statistic,ks_p_value,n\n{:.9},{:.9},{:.9},{:.9},{:.6e},{}\n",
        g.shape_k,
        g.scale_theta,
        g.log_likelihood,
        r.net_volume.ks.statistic,
        r.net_volume.ks.p_value,
        r.net_volume.ks.n
    );
    write_text(&common.out.join("anova.csv"), &anova)?;
    write_text(&common.out.join("tukey.csv"), &tukey)?;
    write_text(&common.out.join("net_volumes.csv"), &volumes)?;
    write_text(&common.out.join("gamma_fit.csv"), &fit)
}
