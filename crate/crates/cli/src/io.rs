//! Dataset loading, artifact writing and record-level parallelism.

use std::fs;
use std::path::Path;

use netseg_core::labels::Schema;
use netseg_core::nifti::{list_records, read_record, write_record};
use netseg_core::volume::MultiModalRecord;
use serde::Serialize;

use crate::error::CliError;
use crate::Format;

/// Maps `f` over `items` on up to `jobs` scoped threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

/// Like [`par_map`] for fallible work; reports the first failure in input order.
pub fn try_par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    par_map(items, jobs, f).into_iter().collect()
}

pub fn require_dir(dir: &Path, what: &str) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::data("NotFound", format!("{what} directory {} does not exist", dir.display())))
    }
}

/// Every record of `dir`, sorted by id.
pub fn load_records(dir: &Path, schema: Schema, jobs: usize) -> Result<Vec<MultiModalRecord>, CliError> {
    require_dir(dir, "data")?;
    let ids = list_records(dir)?;
    if ids.is_empty() {
        return Err(CliError::data("EmptyDataset", format!("no records (*_t1.nii) in {}", dir.display())));
    }
    log::info!("loading {} records from {}", ids.len(), dir.display());
    try_par_map(&ids, jobs, |id| Ok(read_record(dir, id, schema)?))
}

pub fn write_records(dir: &Path, records: &[MultiModalRecord], jobs: usize) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    try_par_map(records, jobs, |r| Ok(write_record(dir, r)?))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data("Io", format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes `<dir>/<stem>.json` or `<dir>/<stem>.csv` depending on `format`.
pub fn write_table<T: Serialize>(
    dir: &Path,
    stem: &str,
    format: Format,
    value: &T,
    csv: impl FnOnce() -> String,
) -> Result<(), CliError> {
    match format {
        Format::Json => write_json(&dir.join(format!("{stem}.json")), value),
        Format::Csv => write_text(&dir.join(format!("{stem}.csv")), &csv()),
    }
}

/// Parses `D,H,W` style triples given as a list.
pub fn triple<T: Copy>(values: &[T], flag: &str) -> Result<[T; 3], CliError> {
    <[T; 3]>::try_from(values).map_err(|_| CliError::usage(format!("--{flag} needs exactly three values")))
}
