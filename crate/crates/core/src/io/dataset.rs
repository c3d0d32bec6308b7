//! Directory of scan pairs with a `dataset.json` manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::native::{read_volume, write_volume};
use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::volume::{ChangeLabel, ScanPair};

pub const MANIFEST_NAME: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub subject_id: String,
    pub label: ChangeLabel,
    /// Paths relative to the manifest directory.
    pub baseline: String,
    pub followup: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub pairs: Vec<PairEntry>,
}

/// Writes every pair under `dir/<subject_id>/` and the manifest at `dir/dataset.json`.
pub fn write_dataset(dir: &Path, pairs: &[ScanPair]) -> Result<(PathBuf, DatasetManifest)> {
    let mut entries = Vec::with_capacity(pairs.len());
    let rel = |p: PathBuf| p.strip_prefix(dir).expect("under dir").to_string_lossy().into_owned();
    for p in pairs {
        let sub = dir.join(&p.subject_id);
        let id = Some(p.subject_id.as_str());
        let baseline = rel(write_volume(&sub.join("baseline"), &p.baseline, id)?);
        let followup = rel(write_volume(&sub.join("followup"), &p.followup, id)?);
        let change_mask = match &p.change_mask {
            Some(m) => Some(rel(write_volume(&sub.join("change_mask"), m, id)?)),
            None => None,
        };
        entries.push(PairEntry {
            subject_id: p.subject_id.clone(),
            label: p.label,
            baseline,
            followup,
            change_mask,
        });
    }
    let manifest = DatasetManifest { pairs: entries };
    let path = dir.join(MANIFEST_NAME);
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok((path, manifest))
}

/// Accepts the manifest file or the directory holding it.
pub fn read_dataset(path: &Path) -> Result<Vec<ScanPair>> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let manifest: DatasetManifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    manifest
        .pairs
        .iter()
        .map(|e| {
            let mask = match &e.change_mask {
                Some(m) => Some(read_volume(&dir.join(m))?.0),
                None => None,
            };
            let pair = ScanPair::new(
                e.subject_id.clone(),
                read_volume(&dir.join(&e.baseline))?.0,
                read_volume(&dir.join(&e.followup))?.0,
                mask,
            )?;
            if pair.label != e.label {
                return Err(Error::format(
                    &manifest_path,
                    format!("{}: label {:?} disagrees with mask presence", e.subject_id, e.label),
                ));
            }
            Ok(pair)
        })
        .collect()
}
