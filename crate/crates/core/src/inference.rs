//! From probability map to lesion blobs: thresholding, connected components,
//! size filtering, and padded detector inference.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorInput};
use crate::error::{Error, Result};
use crate::volume::{abs_difference, ScanPair, Volume, VolumeRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => manhattan == 1 || manhattan == 2,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub id: usize,
    /// Sorted linear voxel indices (x fastest).
    pub voxels: Vec<usize>,
}

impl Blob {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    pub fn centroid(&self, dims: [usize; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for &i in &self.voxels {
            c[0] += (i % dims[0]) as f64;
            c[1] += ((i / dims[0]) % dims[1]) as f64;
            c[2] += (i / (dims[0] * dims[1])) as f64;
        }
        c.map(|v| v / self.voxels.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSet {
    pub blobs: Vec<Blob>,
    pub source_shape: [usize; 3],
    pub connectivity: Connectivity,
}

impl BlobSet {
    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blobs.iter().map(Blob::size).collect()
    }

    pub fn total_voxels(&self) -> usize {
        self.blobs.iter().map(Blob::size).sum()
    }

    /// Binary mask of the union of all blobs.
    pub fn to_mask(&self, spacing: [f64; 3]) -> Volume {
        let mut data = vec![0.0f32; self.source_shape.iter().product()];
        for b in &self.blobs {
            for &i in &b.voxels {
                data[i] = 1.0;
            }
        }
        Volume::new(self.source_shape, spacing, VolumeRole::BinaryMask, data).expect("mask data matches shape")
    }

    /// CSV with one row per blob: id, size, centroid.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,size,centroid_x,centroid_y,centroid_z\n");
        for b in &self.blobs {
            let c = b.centroid(self.source_shape);
            out.push_str(&format!("{},{},{:.3},{:.3},{:.3}\n", b.id, b.size(), c[0], c[1], c[2]));
        }
        out
    }
}

/// `mask = p > kappa`.
pub fn binarize(p: &Volume, kappa: f64) -> Result<Volume> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::invalid("kappa", format!("must lie in [0, 1], got {kappa}")));
    }
    let data = p
        .data()
        .iter()
        .map(|&v| if v as f64 > kappa { 1.0 } else { 0.0 })
        .collect();
    p.with_data(VolumeRole::BinaryMask, data)
}

/// Labels the maximal connected sets of positive voxels. Blob ids follow the
/// scanline order of each blob's first voxel.
pub fn connected_components(mask: &Volume, connectivity: Connectivity) -> BlobSet {
    let dims = mask.dims();
    let data = mask.data();
    let offsets = connectivity.offsets();
    let mut visited = vec![false; data.len()];
    let mut queue = VecDeque::new();
    let mut blobs = Vec::new();
    for start in 0..data.len() {
        if visited[start] || data[start] <= 0.0 {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            let x = (i % dims[0]) as i64;
            let y = ((i / dims[0]) % dims[1]) as i64;
            let z = (i / (dims[0] * dims[1])) as i64;
            for o in &offsets {
                let (nx, ny, nz) = (x + o[0], y + o[1], z + o[2]);
                if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as i64 || ny >= dims[1] as i64 || nz >= dims[2] as i64 {
                    continue;
                }
                let j = nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize);
                if !visited[j] && data[j] > 0.0 {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        voxels.sort_unstable();
        blobs.push(Blob {
            id: blobs.len(),
            voxels,
        });
    }
    BlobSet {
        blobs,
        source_shape: dims,
        connectivity,
    }
}

/// Keeps blobs with at least `min_size` voxels; ids are preserved.
pub fn filter_blobs(bs: &BlobSet, min_size: usize) -> BlobSet {
    BlobSet {
        blobs: bs.blobs.iter().filter(|b| b.size() >= min_size).cloned().collect(),
        source_shape: bs.source_shape,
        connectivity: bs.connectivity,
    }
}

/// Threshold, label, and size-filter a probability map.
pub fn extract_blobs(p: &Volume, kappa: f64, connectivity: Connectivity, min_size: usize) -> Result<BlobSet> {
    Ok(filter_blobs(
        &connected_components(&binarize(p, kappa)?, connectivity),
        min_size,
    ))
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Mirror-pads (without repeating the edge voxel) at the high end of each axis.
pub fn reflect_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let d = v.dims();
    if (0..3).any(|a| target[a] < d[a]) {
        return Err(Error::invalid(
            "target",
            format!("padded shape {target:?} smaller than {d:?}"),
        ));
    }
    Volume::from_fn(target, v.spacing(), v.role(), |x, y, z| {
        v.get(reflect_index(x, d[0]), reflect_index(y, d[1]), reflect_index(z, d[2]))
    })
}

pub fn padded_dims(dims: [usize; 3], multiple: usize) -> [usize; 3] {
    dims.map(|d| d.div_ceil(multiple) * multiple)
}

/// Builds the two input stacks `(a, |a − b|)` and `(b, |a − b|)`.
pub fn detector_input(a: &Volume, b: &Volume) -> Result<DetectorInput> {
    let diff = abs_difference(a, b)?;
    DetectorInput::new(a, b, &diff)
}

/// Change probability for a pair; the volumes are padded to the network's
/// divisibility requirement and the result cropped back.
pub fn predict_change(pair: &ScanPair, net: &Detector) -> Result<Volume> {
    let dims = pair.dims();
    for (name, v) in [("baseline", &pair.baseline), ("followup", &pair.followup)] {
        let (lo, hi) = v
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        if lo < -1e-3 || hi > 1.0 + 1e-3 {
            log::warn!(
                "{} {name} intensities span [{lo}, {hi}], expected normalised input",
                pair.subject_id
            );
        }
    }
    let target = padded_dims(dims, net.config().divisor());
    let (a, b) = if target == dims {
        (pair.baseline.clone(), pair.followup.clone())
    } else {
        (
            reflect_pad(&pair.baseline, target)?,
            reflect_pad(&pair.followup, target)?,
        )
    };
    let out = net.predict(&detector_input(&a, &b)?)?;
    if target == dims {
        Ok(out)
    } else {
        out.crop([0, 0, 0], dims)
    }
}

pub fn predict_batch(pairs: &[ScanPair], net: &Detector) -> Result<Vec<Volume>> {
    pairs.iter().map(|p| predict_change(p, net)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    const ISO: [f64; 3] = [1.0; 3];

    fn mask_from(dims: [usize; 3], set: &[[usize; 3]]) -> Volume {
        let mut m = Volume::zeros(dims, ISO, VolumeRole::BinaryMask).into_data();
        for p in set {
            m[p[0] + dims[0] * (p[1] + dims[1] * p[2])] = 1.0;
        }
        Volume::new(dims, ISO, VolumeRole::BinaryMask, m).unwrap()
    }

    fn cube(origin: [usize; 3], side: usize) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    out.push([origin[0] + x, origin[1] + y, origin[2] + z]);
                }
            }
        }
        out
    }

    #[test]
    fn neighbourhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn binarize_is_strict() {
        let p = Volume::filled([2, 2, 2], ISO, VolumeRole::Probability, 0.05).unwrap();
        assert_eq!(binarize(&p, 0.1).unwrap().count_positive(), 0);
        let p = Volume::filled([2, 2, 2], ISO, VolumeRole::Probability, 0.9).unwrap();
        assert_eq!(binarize(&p, 0.1).unwrap().count_positive(), 8);
        let p = Volume::filled([2, 2, 2], ISO, VolumeRole::Probability, 0.25).unwrap();
        assert_eq!(binarize(&p, 0.25).unwrap().count_positive(), 0);
    }

    #[test]
    fn separated_cubes_are_two_blobs() {
        let mut set = cube([0, 0, 0], 3);
        set.extend(cube([4, 0, 0], 3));
        let bs = connected_components(&mask_from([8, 4, 4], &set), Connectivity::TwentySix);
        assert_eq!(bs.sizes(), vec![27, 27]);
        assert!(connected_components(&mask_from([3, 3, 3], &[]), Connectivity::Six).is_empty());
    }

    #[test]
    fn diagonal_contact_depends_on_connectivity() {
        let m = mask_from([2, 2, 2], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
        let m = mask_from([2, 2, 1], &[[0, 0, 0], [1, 1, 0]]);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).len(), 1);
    }

    #[test]
    fn size_filter() {
        let mut set = cube([0, 0, 0], 3);
        set.extend(cube([5, 5, 5], 2));
        let bs = connected_components(&mask_from([8, 8, 8], &set), Connectivity::TwentySix);
        assert_eq!(bs.sizes(), vec![27, 8]);
        assert_eq!(filter_blobs(&bs, 0), bs);
        assert_eq!(filter_blobs(&bs, 20).sizes(), vec![27]);
        assert!(filter_blobs(&bs, 100).is_empty());
    }

    #[test]
    fn reflect_padding_round_trip() {
        let v = Volume::from_fn([5, 3, 6], ISO, VolumeRole::Intensity, |x, y, z| {
            (x + 10 * y + 100 * z) as f32
        })
        .unwrap();
        let p = reflect_pad(&v, padded_dims(v.dims(), 4)).unwrap();
        assert_eq!(p.dims(), [8, 4, 8]);
        assert_eq!(p.get(5, 0, 0), v.get(3, 0, 0));
        assert_eq!(p.get(0, 3, 0), v.get(0, 1, 0));
        assert_eq!(p.crop([0, 0, 0], v.dims()).unwrap(), v);
    }

    #[test]
    fn json_connectivity() {
        let c: Connectivity = serde_json::from_str("18").unwrap();
        assert_eq!(c, Connectivity::Eighteen);
        assert!(serde_json::from_str::<Connectivity>("7").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn filter_then_relabel_is_a_fixed_point(seed in 0u64..10_000, density in 0.1f64..0.6, min in 0usize..6) {
            let mut rng = seeded(seed);
            let m = Volume::from_fn([6, 6, 6], ISO, VolumeRole::BinaryMask, |_, _, _| {
                if rng.random::<f64>() < density { 1.0 } else { 0.0 }
            }).unwrap();
            let once = filter_blobs(&connected_components(&m, Connectivity::TwentySix), min);
            let twice = filter_blobs(&connected_components(&once.to_mask(ISO), Connectivity::TwentySix), min);
            prop_assert_eq!(once.sizes(), twice.sizes());
            prop_assert!(filter_blobs(&once, min + 3).len() <= once.len());
            let all = connected_components(&m, Connectivity::Six);
            prop_assert_eq!(all.total_voxels(), m.count_positive());
        }
    }
}
