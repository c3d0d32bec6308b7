//! Native volume format: `<stem>.raw` holds little-endian `f32` voxels in
//! x-fastest order, `<stem>.json` describes them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype_role: VolumeRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    /// File name of the voxel stream, relative to the sidecar.
    pub data: String,
}

fn stem_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

/// Writes `<stem>.json` and `<stem>.raw`; returns the sidecar path.
pub fn write_volume(path: &Path, v: &Volume, subject_id: Option<&str>) -> Result<PathBuf> {
    let (json, raw) = stem_paths(path);
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_file(&raw, &bytes)?;
    let sidecar = Sidecar {
        shape: v.dims(),
        spacing: v.spacing(),
        dtype_role: v.role(),
        subject_id: subject_id.map(str::to_string),
        data: raw.file_name().expect("file name").to_string_lossy().into_owned(),
    };
    write_file(&json, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(json)
}

/// Reads a volume given its sidecar, its voxel file, or their common stem.
pub fn read_volume(path: &Path) -> Result<(Volume, Sidecar)> {
    let (json, _) = stem_paths(path);
    let sidecar: Sidecar =
        serde_json::from_slice(&read_file(&json)?).map_err(|e| Error::format(&json, e.to_string()))?;
    let raw = json.parent().unwrap_or(Path::new("")).join(&sidecar.data);
    let bytes = read_file(&raw)?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::format(
            &raw,
            format!(
                "expected {} bytes for shape {:?}, found {}",
                n * 4,
                sidecar.shape,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let v = Volume::new(sidecar.shape, sidecar.spacing, sidecar.dtype_role, data)
        .map_err(|e| Error::format(&raw, e.to_string()))?;
    Ok((v, sidecar))
}
