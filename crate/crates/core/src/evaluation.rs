//! Lesion-wise scoring.
//!
//! A ground-truth blob counts as detected when some predicted blob overlaps it
//! with IoU at or above `iou_min`; a predicted blob is a false positive when it
//! reaches that IoU with no ground-truth blob. Matching is coverage based, so
//! one blob may validate several on the other side.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Blob, BlobSet};
use crate::rng::Rng;

/// `|A ∩ B| / |A ∪ B|` over sorted voxel lists.
pub fn blob_iou(a: &Blob, b: &Blob) -> f64 {
    let inter = intersection_size(&a.voxels, &b.voxels);
    let union = a.size() + b.size() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Chance-level control: every predicted blob keeps its shape and volume but
/// is moved by a uniformly random translation that keeps it inside the volume.
pub fn random_placement(pred: &BlobSet, rng: &mut Rng) -> BlobSet {
    let d = pred.source_shape;
    let blobs = pred
        .blobs
        .iter()
        .map(|b| {
            let coords: Vec<[usize; 3]> = b
                .voxels
                .iter()
                .map(|&i| [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])])
                .collect();
            let mut lo = [usize::MAX; 3];
            let mut hi = [0; 3];
            for c in &coords {
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
            let origin: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..d[a] - (hi[a] - lo[a])));
            let mut voxels: Vec<usize> = coords
                .iter()
                .map(|c| {
                    let p: [usize; 3] = std::array::from_fn(|a| c[a] - lo[a] + origin[a]);
                    p[0] + d[0] * (p[1] + d[1] * p[2])
                })
                .collect();
            voxels.sort_unstable();
            Blob { id: b.id, voxels }
        })
        .collect();
    BlobSet {
        blobs,
        source_shape: d,
        connectivity: pred.connectivity,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    pub gt_blob: usize,
    pub pred_blob: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatchResult {
    pub ltp: usize,
    pub lfn: usize,
    pub lfp: usize,
    pub matches: Vec<LesionMatch>,
}

pub fn match_lesions(gt: &BlobSet, pred: &BlobSet, iou_min: f64) -> Result<LesionMatchResult> {
    if gt.source_shape != pred.source_shape {
        return Err(Error::ShapeMismatch {
            what: "ground-truth and predicted blob sets",
            left: gt.source_shape.to_vec(),
            right: pred.source_shape.to_vec(),
        });
    }
    // Only overlapping pairs can have positive IoU; find them through a label map.
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (pi, b) in pred.blobs.iter().enumerate() {
        for &v in &b.voxels {
            owner.insert(v, pi);
        }
    }
    let mut matches = Vec::new();
    let mut gt_hit = vec![false; gt.len()];
    let mut pred_hit = vec![false; pred.len()];
    for (gi, g) in gt.blobs.iter().enumerate() {
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for v in &g.voxels {
            if let Some(&pi) = owner.get(v) {
                *overlap.entry(pi).or_default() += 1;
            }
        }
        for (pi, p) in pred.blobs.iter().enumerate() {
            let inter = overlap.get(&pi).copied().unwrap_or(0);
            if inter == 0 && iou_min > 0.0 {
                continue;
            }
            let iou = inter as f64 / (g.size() + p.size() - inter) as f64;
            if iou >= iou_min {
                gt_hit[gi] = true;
                pred_hit[pi] = true;
                matches.push(LesionMatch {
                    gt_blob: g.id,
                    pred_blob: p.id,
                    iou,
                });
            }
        }
    }
    let ltp = gt_hit.iter().filter(|&&h| h).count();
    Ok(LesionMatchResult {
        ltp,
        lfn: gt.len() - ltp,
        lfp: pred_hit.iter().filter(|&&h| !h).count(),
        matches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub ltpr: f64,
    pub lfpr: f64,
    pub ppv: f64,
}

/// LTPR with no ground-truth blobs is 1; with no true or false positive
/// detections LFPR is 0 and PPV is 1.
pub fn pair_metrics(m: &LesionMatchResult) -> PairMetrics {
    let ltpr = if m.ltp + m.lfn == 0 {
        1.0
    } else {
        m.ltp as f64 / (m.ltp + m.lfn) as f64
    };
    let (lfpr, ppv) = if m.ltp + m.lfp == 0 {
        (0.0, 1.0)
    } else {
        let d = (m.ltp + m.lfp) as f64;
        (m.lfp as f64 / d, m.ltp as f64 / d)
    };
    PairMetrics { ltpr, lfpr, ppv }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Distribution {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
            min: v[0],
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub ltpr: Distribution,
    pub lfpr: Distribution,
    pub ppv: Distribution,
    pub conventions: String,
}

pub const CONVENTIONS: &str =
    "LTPR=1 when a pair has no ground-truth blobs; LFPR=0 and PPV=1 when a pair has no positive detections";

pub fn aggregate(per_pair: &[PairMetrics]) -> Result<Summary> {
    if per_pair.is_empty() {
        return Err(Error::EmptyInput("per-pair metrics"));
    }
    let col = |f: fn(&PairMetrics) -> f64| per_pair.iter().map(f).collect::<Vec<_>>();
    Ok(Summary {
        pairs: per_pair.len(),
        ltpr: Distribution::of(&col(|m| m.ltpr)),
        lfpr: Distribution::of(&col(|m| m.lfpr)),
        ppv: Distribution::of(&col(|m| m.ppv)),
        conventions: CONVENTIONS.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub subject_id: String,
    pub result: LesionMatchResult,
    pub metrics: PairMetrics,
}

pub fn evaluate_pair(subject_id: &str, gt: &BlobSet, pred: &BlobSet, iou_min: f64) -> Result<PairRecord> {
    let result = match_lesions(gt, pred, iou_min)?;
    let metrics = pair_metrics(&result);
    Ok(PairRecord {
        subject_id: subject_id.to_string(),
        result,
        metrics,
    })
}

pub fn per_pair_csv(records: &[PairRecord]) -> String {
    let mut out = String::from("subject_id,ltp,lfn,lfp,ltpr,lfpr,ppv\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.subject_id, r.result.ltp, r.result.lfn, r.result.lfp, r.metrics.ltpr, r.metrics.lfpr, r.metrics.ppv
        ));
    }
    out
}

/// Quartile table with one row per metric.
pub fn quartile_csv(s: &Summary) -> String {
    let mut out = String::from("metric,mean,min,q1,median,q3,max\n");
    for (name, d) in [("ltpr", &s.ltpr), ("lfpr", &s.lfpr), ("ppv", &s.ppv)] {
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            d.mean, d.min, d.q1, d.median, d.q3, d.max
        ));
    }
    out
}
