//! File formats: spec JSON, weight JSON, binary datasets, PGM and IDX.

pub mod dataset_file;
pub mod idx;
pub mod pgm;
pub mod spec_file;
pub mod weights;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}
