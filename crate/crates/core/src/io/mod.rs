//! Volume files, dataset manifests, and PNG previews.

pub mod dataset;
pub mod native;
pub mod nifti;
pub mod render;

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub use dataset::{read_dataset, write_dataset, DatasetManifest, PairEntry};
pub use native::{read_volume, write_volume, Sidecar};

/// Reads a native (`.json` / `.raw`) or NIfTI-1 (`.nii`) volume.
pub fn load_any(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => nifti::read_nifti(path),
        Some("json") | Some("raw") => Ok(read_volume(path)?.0),
        _ => Err(Error::format(
            path,
            "expected a .json/.raw native volume or a .nii file",
        )),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
