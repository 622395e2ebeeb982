use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use netseg_core::labels::{Schema, Segment};
use netseg_core::stats::{VolumeGroup, VolumePartition};
use netseg_neural::{
    save_checkpoint, train, EarlyStop, FilterBlockKind, NetworkConfig, PatchSampling, Sample, SegmentationModel,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use super::{required, split_held_out};
use crate::error::CliError;
use crate::io::{load_records, require_dir, triple, try_par_map, write_table};
use crate::{Common, Params};

fn parse_block(s: &str) -> Result<FilterBlockKind, String> {
    match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "plain" => Ok(FilterBlockKind::Plain),
        "residual" => Ok(FilterBlockKind::Residual),
        "residualnorm" => Ok(FilterBlockKind::ResidualNorm),
        "preactivation" => Ok(FilterBlockKind::PreActivation),
        _ => Err("expected plain, residual, residual-norm or pre-activation".into()),
    }
}

fn parse_group(s: &str) -> Result<VolumeGroup, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| "expected low, medium or high".to_string())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label schema of the dataset.
    #[arg(long)]
    schema: Option<Schema>,
    /// Output segments, e.g. ET,TC,WT (default: every segment of the schema).
    #[arg(long, value_delimiter = ',')]
    segments: Option<Vec<Segment>>,
    /// Hold out the last N records (sorted by id) from training.
    #[arg(long)]
    test_count: Option<usize>,
    /// `groups.json` written by `extract`; trains on one NET-volume group.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Group to train on when --groups is given.
    #[arg(long, value_parser = parse_group)]
    group: Option<VolumeGroup>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_filters: Option<usize>,
    /// plain, residual, residual-norm or pre-activation.
    #[arg(long, value_parser = parse_block)]
    block: Option<FilterBlockKind>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Predict at the input resolution instead of twice it.
    #[arg(long)]
    no_upscaling: bool,
    #[arg(long)]
    norm_groups: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch multiplicative learning-rate decay.
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train on random crops of this size D,H,W.
    #[arg(long, value_delimiter = ',')]
    patch: Option<Vec<usize>>,
    #[arg(long)]
    patches_per_sample: Option<usize>,
    /// Share of crops centred on tumor voxels.
    #[arg(long)]
    foreground_fraction: Option<f64>,
    /// Stop when Dice of this segment stagnates.
    #[arg(long)]
    early_stop: Option<Segment>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub data: Option<PathBuf>,
    pub schema: Schema,
    pub segments: Option<Vec<Segment>>,
    pub test_count: usize,
    pub groups: Option<PathBuf>,
    pub group: VolumeGroup,
    /// `input_shape` and `out_segments` are taken from the data.
    pub network: NetworkConfig,
    /// `seed` is replaced by the run seed.
    pub train: TrainConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            data: None,
            schema: Schema::Unified4Label,
            segments: None,
            test_count: 0,
            groups: None,
            group: VolumeGroup::Medium,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl TrainParams {
    fn segments(&self) -> Vec<Segment> {
        self.segments.clone().unwrap_or_else(|| self.schema.segments())
    }
}

impl Params for TrainParams {
    type Args = TrainArgs;
    const NAME: &'static str = "train";

    fn apply(&mut self, a: &TrainArgs) -> Result<(), CliError> {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = a.$flag.clone() { self.$($field).+ = v; })*
            };
        }
        if a.data.is_some() {
            self.data = a.data.clone();
        }
        if a.segments.is_some() {
            self.segments = a.segments.clone();
        }
        if a.groups.is_some() {
            self.groups = a.groups.clone();
        }
        set!(
            schema => schema,
            test_count => test_count,
            group => group,
            levels => network.levels,
            base_filters => network.base_filters,
            block => network.block_kind,
            dropout => network.dropout_rate,
            norm_groups => network.norm_groups,
            epochs => train.epochs,
            lr => train.lr0,
            decay => train.decay_per_epoch,
            batch_size => train.batch_size,
        );
        if a.no_upscaling {
            self.network.upscaling_head = false;
        }
        if let Some(p) = &a.patch {
            let size = triple(p, "patch")?;
            let prev = self.train.patches;
            self.train.patches = Some(PatchSampling {
                size,
                per_sample: prev.map_or(1, |p| p.per_sample),
                foreground_fraction: prev.map_or(0.5, |p| p.foreground_fraction),
            });
        }
        if a.patches_per_sample.is_some() || a.foreground_fraction.is_some() {
            let p = self
                .train
                .patches
                .as_mut()
                .ok_or_else(|| CliError::usage("--patches-per-sample/--foreground-fraction need --patch"))?;
            p.per_sample = a.patches_per_sample.unwrap_or(p.per_sample);
            p.foreground_fraction = a.foreground_fraction.unwrap_or(p.foreground_fraction);
        }
        if let Some(seg) = a.early_stop {
            let mut rule = self.train.early_stop.unwrap_or(EarlyStop::new(seg));
            rule.metric = seg;
            self.train.early_stop = Some(rule);
        }
        if let Some(p) = a.patience {
            self.train.early_stop.as_mut().ok_or_else(|| CliError::usage("--patience needs --early-stop"))?.patience =
                p;
        }
        self.network.out_segments = self.segments().len();
        Ok(())
    }

    fn validate(&self, _: &Common) -> Result<(), CliError> {
        require_dir(required(&self.data, "data")?, "data")?;
        for seg in self.segments() {
            if self.schema.labels_of(seg).is_none() {
                return Err(CliError::usage(format!("segment {seg} is not defined for schema {}", self.schema)));
            }
        }
        if let Some(g) = &self.groups {
            if !g.is_file() {
                return Err(CliError::data("NotFound", format!("groups file {} does not exist", g.display())));
            }
        }
        let mut net = self.network.clone();
        // the grid is only known once the data is read
        let d = 1usize << net.levels.saturating_sub(1).min(16);
        net.input_shape = [4, d, d, d];
        net.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.lr0 <= 0.0 || !(0.0..1.0).contains(&t.decay_per_epoch) {
            return Err(CliError::usage("epochs, batch size and learning rate must be positive, decay in [0, 1)"));
        }
        Ok(())
    }

    fn run(&self, common: &Common) -> Result<(), CliError> {
        let records = load_records(required(&self.data, "data")?, self.schema, common.jobs)?;
        let (mut train_set, held_out) = split_held_out(&records, self.test_count)?;
        if let Some(path) = &self.groups {
            let partition: VolumePartition = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            train_set.retain(|r| partition.groups.get(&r.record_id) == Some(&self.group));
            log::info!("training on {} records of the {:?} group", train_set.len(), self.group);
        }
        if train_set.is_empty() {
            return Err(CliError::data("EmptyDataset", "no training records left after the split"));
        }
        log::info!("{} training records, {} held out", train_set.len(), held_out.len());

        let segments = self.segments();
        let shape = train_set[0].shape();
        let network = NetworkConfig { input_shape: [4, shape[0], shape[1], shape[2]], ..self.network.clone() };
        let factor = network.resolution_factor();
        let samples: Vec<Sample> =
            try_par_map(&train_set, common.jobs, |r| Ok(Sample::from_record(r, &segments, factor)?))?;
        let mut model = SegmentationModel::new(network, segments, common.seed)?;
        log::info!("{} parameters", model.network.parameter_count());
        let cfg = TrainConfig { seed: common.seed, ..self.train.clone() };
        let log = train(&mut model, &samples, &[], &cfg)?;

        let epoch = log.best_epoch.or(log.last().map(|e| e.epoch)).unwrap_or(0);
        let metrics: BTreeMap<String, f64> = log
            .epochs
            .get(epoch)
            .map(|e| e.dice.iter().map(|(s, d)| (format!("dice_{s}"), *d)).collect())
            .unwrap_or_default();
        save_checkpoint(&common.out.join("model.json"), &model, epoch, metrics)?;
        write_table(&common.out, "train_log", common.format, &log, || log.to_csv())?;
        if let Some(last) = log.last() {
            log::info!("final epoch {}: loss {:.5}, dice {:?}", last.epoch, last.loss, last.dice);
        }
        Ok(())
    }
}
