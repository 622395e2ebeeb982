pub mod compose;
pub mod eval;
pub mod extract;
pub mod phantom;
pub mod stats;
pub mod train;

use std::path::{Path, PathBuf};

use crate::error::CliError;

/// A required path option that may come from a flag or the config file.
pub(crate) fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

/// Splits sorted records into `(train, held_out)` with the last `test_count`
/// records held out.
pub(crate) fn split_held_out<T: Clone>(records: &[T], test_count: usize) -> Result<(Vec<T>, Vec<T>), CliError> {
    if test_count > records.len() {
        return Err(CliError::usage(format!("--test-count {test_count} exceeds the {} records", records.len())));
    }
    let (a, b) = records.split_at(records.len() - test_count);
    Ok((a.to_vec(), b.to_vec()))
}
