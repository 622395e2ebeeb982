use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::PathBuf;

use clap::Args;
use netseg_core::labels::{compose_segments, fuse_to_schema, Schema, Segment};
use netseg_core::volume::MultiModalRecord;
use serde::{Deserialize, Serialize};

use super::required;
use crate::error::CliError;
use crate::io::{load_records, require_dir, try_par_map, write_records, write_table};
use crate::{Common, Params};

#[derive(Args, Debug)]
pub struct ComposeArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label schema of the dataset.
    #[arg(long)]
    schema: Option<Schema>,
    /// Schema to write.
    #[arg(long)]
    to_schema: Option<Schema>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposeParams {
    pub data: Option<PathBuf>,
    pub schema: Schema,
    pub to_schema: Schema,
}

impl Default for ComposeParams {
    fn default() -> Self {
        Self { data: None, schema: Schema::Unified4Label, to_schema: Schema::Brats2021 }
    }
}

#[derive(Debug, Serialize)]
struct SegmentCounts {
    record_id: String,
    schema: Schema,
    voxels: BTreeMap<Segment, usize>,
}

fn convert(rec: &MultiModalRecord, from: Schema, to: Schema) -> Result<MultiModalRecord, CliError> {
    let mut out = rec.clone();
    if let Some(labels) = &rec.labels {
        if from != to {
            out.labels = Some(fuse_to_schema(labels, to)?);
        }
    }
    Ok(out)
}

impl Params for ComposeParams {
    type Args = ComposeArgs;
    const NAME: &'static str = "compose";

    fn apply(&mut self, a: &ComposeArgs) -> Result<(), CliError> {
        if a.data.is_some() {
            self.data = a.data.clone();
        }
        if let Some(s) = a.schema {
            self.schema = s;
        }
        if let Some(s) = a.to_schema {
            self.to_schema = s;
        }
        Ok(())
    }

    fn validate(&self, _: &Common) -> Result<(), CliError> {
        require_dir(required(&self.data, "data")?, "data")?;
        if self.schema != self.to_schema && self.schema != Schema::Unified4Label {
            return Err(CliError::usage(format!(
                "only unified labels can be converted (got {} -> {})",
                self.schema, self.to_schema
            )));
        }
        Ok(())
    }

    fn run(&self, common: &Common) -> Result<(), CliError> {
        let records = load_records(required(&self.data, "data")?, self.schema, common.jobs)?;
        let converted = try_par_map(&records, common.jobs, |r| convert(r, self.schema, self.to_schema))?;
        write_records(&common.out, &converted, common.jobs)?;
        let counts: Vec<SegmentCounts> = converted
            .iter()
            .filter_map(|r| {
                let labels = r.labels.as_ref()?;
                let voxels = compose_segments(labels).iter().map(|(s, m)| (s, m.count())).collect();
                Some(SegmentCounts { record_id: r.record_id.clone(), schema: labels.schema(), voxels })
            })
            .collect();
        write_table(&common.out, "segments", common.format, &counts, || {
            let mut csv = String::from("record_id,schema,segment,voxels\n");
            for c in &counts {
                for (s, v) in &c.voxels {
                    let _ = writeln!(csv, "{},{},{s},{v}", c.record_id, c.schema);
                }
            }
            csv
        })?;
        log::info!("wrote {} {} records to {}", converted.len(), self.to_schema, common.out.display());
        Ok(())
    }
}
