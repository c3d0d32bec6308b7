//! Volumes, scan pairs, and the preprocessing operations applied to them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// What the voxel values of a [`Volume`] mean. Constrains the admissible values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeRole {
    Intensity,
    Probability,
    BinaryMask,
    LabelMap,
}

impl VolumeRole {
    /// Roles resampled with nearest-neighbour lookup.
    pub fn is_discrete(self) -> bool {
        matches!(self, VolumeRole::BinaryMask | VolumeRole::LabelMap)
    }
}

/// A 3D scalar field stored x-fastest: `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    role: VolumeRole,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], role: VolumeRole, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid("dims", format!("every axis must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("spacing", format!("must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                what: "voxel buffer length",
                left: vec![data.len()],
                right: vec![n],
            });
        }
        check_role(role, &data)?;
        Ok(Self {
            dims,
            spacing,
            role,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], role: VolumeRole) -> Self {
        let n = dims.iter().product();
        Self::new(dims, spacing, role, vec![0.0; n]).expect("zero volume is always valid")
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], role: VolumeRole, value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, role, vec![value; n])
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        role: VolumeRole,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, role, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn role(&self) -> VolumeRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Reinterprets the values under another role, re-checking the role invariant.
    pub fn with_role(self, role: VolumeRole) -> Result<Self> {
        check_role(role, &self.data)?;
        Ok(Self { role, ..self })
    }

    /// Builds a volume of the same geometry with new values.
    pub fn with_data(&self, role: VolumeRole, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, role, data)
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn ensure_same_geometry(&self, other: &Volume, what: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                what,
                left: self.dims.to_vec(),
                right: other.dims.to_vec(),
            });
        }
        if self.spacing != other.spacing {
            return Err(Error::invalid(
                "spacing",
                format!("{what}: {:?} vs {:?}", self.spacing, other.spacing),
            ));
        }
        Ok(())
    }

    /// Axis-aligned sub-volume starting at `origin`.
    pub fn crop(&self, origin: [usize; 3], shape: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if shape[a] == 0 || origin[a] + shape[a] > self.dims[a] {
                return Err(Error::CropTooLarge {
                    crop: shape,
                    volume: self.dims,
                });
            }
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                let start = self.index(origin[0], origin[1] + y, origin[2] + z);
                data.extend_from_slice(&self.data[start..start + shape[0]]);
            }
        }
        Volume::new(shape, self.spacing, self.role, data)
    }

    /// Number of voxels with value > 0.5 (for masks).
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }
}

fn check_role(role: VolumeRole, data: &[f32]) -> Result<()> {
    let bad = match role {
        VolumeRole::Intensity => data.iter().position(|v| !v.is_finite()),
        VolumeRole::Probability => data.iter().position(|v| !(0.0..=1.0).contains(v)),
        VolumeRole::BinaryMask => data.iter().position(|&v| v != 0.0 && v != 1.0),
        VolumeRole::LabelMap => data
            .iter()
            .position(|&v| !(v >= 0.0 && v.fract() == 0.0 && v.is_finite())),
    };
    match bad {
        Some(i) => Err(Error::invalid(
            "data",
            format!("voxel {i} = {} violates the {role:?} role", data[i]),
        )),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeLabel {
    Change,
    NoChange,
}

/// Two co-registered scans of one subject, with a change mask for `Change` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPair {
    pub baseline: Volume,
    pub followup: Volume,
    pub subject_id: String,
    pub change_mask: Option<Volume>,
    pub label: ChangeLabel,
}

impl ScanPair {
    pub fn new(
        subject_id: impl Into<String>,
        baseline: Volume,
        followup: Volume,
        change_mask: Option<Volume>,
    ) -> Result<Self> {
        baseline.ensure_same_geometry(&followup, "baseline vs follow-up")?;
        if let Some(mask) = &change_mask {
            if mask.dims() != baseline.dims() {
                return Err(Error::ShapeMismatch {
                    what: "change mask vs scans",
                    left: mask.dims().to_vec(),
                    right: baseline.dims().to_vec(),
                });
            }
            if mask.role() != VolumeRole::BinaryMask {
                return Err(Error::invalid("change_mask", "must be a binary mask"));
            }
        }
        let label = if change_mask.is_some() {
            ChangeLabel::Change
        } else {
            ChangeLabel::NoChange
        };
        Ok(Self {
            baseline,
            followup,
            subject_id: subject_id.into(),
            change_mask,
            label,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.baseline.dims()
    }
}

/// Linear-interpolated percentile (0..=100) of a non-empty slice.
pub fn percentile(values: &mut [f32], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] as f64 + (values[hi] as f64 - values[lo] as f64) * frac
}

/// Which voxels the normalisation percentiles are computed over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileDomain {
    /// Nonzero voxels only; stripped volumes have a dominant zero background.
    #[default]
    Foreground,
    Whole,
}

/// Rescales intensities so the `p_low`/`p_high` percentiles of the nonzero
/// voxels map to 0 and 1, clamping outside that range.
pub fn normalize_intensity(v: &Volume, p_low: f64, p_high: f64) -> Result<Volume> {
    normalize_intensity_with(v, p_low, p_high, PercentileDomain::Foreground)
}

pub fn normalize_intensity_with(v: &Volume, p_low: f64, p_high: f64, domain: PercentileDomain) -> Result<Volume> {
    if v.role() != VolumeRole::Intensity {
        return Err(Error::invalid("volume", "normalisation needs an intensity volume"));
    }
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low >= p_high {
        return Err(Error::invalid(
            "percentiles",
            format!("need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})"),
        ));
    }
    let mut samples: Vec<f32> = match domain {
        PercentileDomain::Foreground => v.data().iter().copied().filter(|&x| x != 0.0).collect(),
        PercentileDomain::Whole => v.data().to_vec(),
    };
    if samples.is_empty() {
        return Err(Error::DegenerateIntensityRange(0.0));
    }
    let q_low = percentile(&mut samples, p_low);
    let q_high = percentile(&mut samples, p_high);
    if q_high <= q_low {
        return Err(Error::DegenerateIntensityRange(q_low));
    }
    let scale = 1.0 / (q_high - q_low);
    let data = v
        .data()
        .iter()
        .map(|&x| ((x as f64 - q_low) * scale).clamp(0.0, 1.0) as f32)
        .collect();
    v.with_data(VolumeRole::Intensity, data)
}

/// Resamples onto an isotropic grid of `target_mm` voxels.
///
/// Grids are corner-aligned: the first and last sample along each axis land on
/// the first and last input voxel. Intensity and probability volumes use
/// trilinear interpolation, masks and label maps nearest-neighbour.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0 && target_mm.is_finite()) {
        return Err(Error::invalid(
            "target_mm",
            format!("must be positive, got {target_mm}"),
        ));
    }
    let in_dims = v.dims();
    let spacing = v.spacing();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = ((in_dims[a] as f64 * spacing[a] / target_mm).round() as usize).max(1);
    }
    let out_spacing = [target_mm; 3];
    if out_dims == in_dims && spacing == out_spacing {
        return Ok(v.clone());
    }

    // Per-axis lookup tables: (lower index, upper index, fraction).
    let tables: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..out_dims[a])
                .map(|i| {
                    let c = if out_dims[a] == 1 {
                        0.0
                    } else {
                        i as f64 * (in_dims[a] - 1) as f64 / (out_dims[a] - 1) as f64
                    };
                    let lo = (c.floor() as usize).min(in_dims[a] - 1);
                    let hi = (lo + 1).min(in_dims[a] - 1);
                    (lo, hi, c - lo as f64)
                })
                .collect()
        })
        .collect();

    let discrete = v.role().is_discrete();
    Volume::from_fn(out_dims, out_spacing, v.role(), |x, y, z| {
        let (x0, x1, fx) = tables[0][x];
        let (y0, y1, fy) = tables[1][y];
        let (z0, z1, fz) = tables[2][z];
        if discrete {
            let px = if fx >= 0.5 { x1 } else { x0 };
            let py = if fy >= 0.5 { y1 } else { y0 };
            let pz = if fz >= 0.5 { z1 } else { z0 };
            return v.get(px, py, pz);
        }
        let g = |x, y, z| v.get(x, y, z) as f64;
        let c00 = g(x0, y0, z0) * (1.0 - fx) + g(x1, y0, z0) * fx;
        let c10 = g(x0, y1, z0) * (1.0 - fx) + g(x1, y1, z0) * fx;
        let c01 = g(x0, y0, z1) * (1.0 - fx) + g(x1, y0, z1) * fx;
        let c11 = g(x0, y1, z1) * (1.0 - fx) + g(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        (c0 * (1.0 - fz) + c1 * fz) as f32
    })
}

/// Voxelwise `|a - b|`.
pub fn abs_difference(a: &Volume, b: &Volume) -> Result<Volume> {
    a.ensure_same_geometry(b, "abs_difference operands")?;
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q).abs()).collect();
    a.with_data(VolumeRole::Intensity, data)
}

/// Draws a crop origin uniformly over all valid offsets.
pub fn random_crop_origin(dims: [usize; 3], crop: [usize; 3], rng: &mut Rng) -> Result<[usize; 3]> {
    let mut origin = [0usize; 3];
    for a in 0..3 {
        if crop[a] == 0 || crop[a] > dims[a] {
            return Err(Error::CropTooLarge { crop, volume: dims });
        }
        origin[a] = rng.random_range(0..=dims[a] - crop[a]);
    }
    Ok(origin)
}

/// Crops baseline, follow-up and (if present) the change mask with one window.
pub fn random_crop_pair(pair: &ScanPair, crop: [usize; 3], rng: &mut Rng) -> Result<ScanPair> {
    let origin = random_crop_origin(pair.dims(), crop, rng)?;
    crop_pair(pair, origin, crop)
}

pub fn crop_pair(pair: &ScanPair, origin: [usize; 3], crop: [usize; 3]) -> Result<ScanPair> {
    Ok(ScanPair {
        baseline: pair.baseline.crop(origin, crop)?,
        followup: pair.followup.crop(origin, crop)?,
        subject_id: pair.subject_id.clone(),
        change_mask: pair.change_mask.as_ref().map(|m| m.crop(origin, crop)).transpose()?,
        label: pair.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::rng::Rng;
    use proptest::prelude::*;

    const ISO: [f64; 3] = [1.0; 3];

    fn ramp_volume(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        Volume::from_fn(dims, spacing, VolumeRole::Intensity, |x, y, z| {
            (x as f32) + 10.0 * y as f32 + 100.0 * z as f32
        })
        .unwrap()
    }

    #[test]
    fn role_invariants_are_enforced() {
        assert!(Volume::new([2, 1, 1], ISO, VolumeRole::Probability, vec![0.2, 1.2]).is_err());
        assert!(Volume::new([2, 1, 1], ISO, VolumeRole::BinaryMask, vec![0.0, 0.5]).is_err());
        assert!(Volume::new([2, 1, 1], ISO, VolumeRole::LabelMap, vec![0.0, -1.0]).is_err());
        assert!(Volume::new([0, 1, 1], ISO, VolumeRole::Intensity, vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], VolumeRole::Intensity, vec![1.0]).is_err());
    }

    #[test]
    fn normalize_foreground_ramp() {
        // 100 background zeros followed by a ramp 0..99.
        let mut data = vec![0.0f32; 100];
        data.extend((0..100).map(|i| i as f32));
        let v = Volume::new([200, 1, 1], ISO, VolumeRole::Intensity, data.clone()).unwrap();
        let out = normalize_intensity(&v, 0.0, 99.0).unwrap();

        // Oracle: sort the nonzero values and interpolate ranks directly.
        let mut fg: Vec<f64> = data.iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
        fg.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q0 = fg[0];
        let r = 0.99 * (fg.len() - 1) as f64;
        let q99 = fg[r.floor() as usize] + (fg[r.ceil() as usize] - fg[r.floor() as usize]) * r.fract();
        assert_eq!(q0, 1.0);
        assert!((q99 - 98.02).abs() < 1e-9);
        for (i, &x) in data.iter().enumerate() {
            let expect = ((x as f64 - q0) / (q99 - q0)).clamp(0.0, 1.0);
            assert!((out.data()[i] as f64 - expect).abs() < 1e-6);
        }
        let max = out.data().iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(max, 1.0);
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn normalize_identity_on_full_unit_range() {
        let data: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let v = Volume::new([8, 8, 1], ISO, VolumeRole::Intensity, data).unwrap();
        let out = normalize_intensity_with(&v, 0.0, 100.0, PercentileDomain::Whole).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn foreground_domain_ignores_background() {
        // Whole-volume percentiles would put q_low at the zero background.
        let data = vec![0.0, 0.0, 0.0, 2.0, 3.0, 4.0];
        let v = Volume::new([6, 1, 1], ISO, VolumeRole::Intensity, data).unwrap();
        let fg = normalize_intensity(&v, 0.0, 100.0).unwrap();
        assert_eq!(fg.data(), &[0.0, 0.0, 0.0, 0.0, 0.5, 1.0]);
        let whole = normalize_intensity_with(&v, 0.0, 100.0, PercentileDomain::Whole).unwrap();
        assert_eq!(whole.data(), &[0.0, 0.0, 0.0, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        let v = Volume::filled([4, 4, 4], ISO, VolumeRole::Intensity, 0.3).unwrap();
        assert!(matches!(
            normalize_intensity(&v, 0.0, 99.0),
            Err(Error::DegenerateIntensityRange(_))
        ));
        let zeros = Volume::zeros([4, 4, 4], ISO, VolumeRole::Intensity);
        assert!(normalize_intensity(&zeros, 0.0, 99.0).is_err());
    }

    #[test]
    fn resample_native_is_identity() {
        let v = ramp_volume([5, 4, 3], ISO);
        let out = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn resample_ramp_matches_closed_form() {
        let v = ramp_volume([4, 4, 4], [2.0; 3]);
        let out = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(out.dims(), [8, 8, 8]);
        assert_eq!(out.spacing(), [1.0; 3]);
        // Trilinear interpolation reproduces a linear field exactly.
        let scale = 3.0 / 7.0;
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let expect = scale * (x as f64 + 10.0 * y as f64 + 100.0 * z as f64);
                    assert!((out.get(x, y, z) as f64 - expect).abs() < 1e-3);
                }
            }
        }
        for &(cx, cy, cz) in &[(0, 0, 0), (7, 7, 7), (7, 0, 0), (0, 7, 7)] {
            let src = v.get(cx * 3 / 7, cy * 3 / 7, cz * 3 / 7);
            assert_eq!(out.get(cx, cy, cz), src);
        }
    }

    #[test]
    fn resample_mask_stays_binary() {
        let mut rng = seeded(3);
        let m = Volume::from_fn([5, 6, 3], [1.3, 0.7, 2.5], VolumeRole::BinaryMask, |_, _, _| {
            if rng.random_bool(0.4) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let out = resample_isotropic(&m, 1.0).unwrap();
        assert_eq!(out.role(), VolumeRole::BinaryMask);
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(out.dims(), [7, 4, 8]);
    }

    #[test]
    fn abs_difference_cases() {
        let a = Volume::filled([3, 3, 3], ISO, VolumeRole::Intensity, 1.0).unwrap();
        let b = Volume::zeros([3, 3, 3], ISO, VolumeRole::Intensity);
        assert!(abs_difference(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(abs_difference(&a, &b).unwrap().data().iter().all(|&v| v == 1.0));
        let c = Volume::zeros([3, 3, 2], ISO, VolumeRole::Intensity);
        assert!(matches!(abs_difference(&a, &c), Err(Error::ShapeMismatch { .. })));
    }

    fn random_pair(rng: &mut Rng, dims: [usize; 3]) -> ScanPair {
        let b = Volume::from_fn(dims, ISO, VolumeRole::Intensity, |_, _, _| rng.random()).unwrap();
        let f = Volume::from_fn(dims, ISO, VolumeRole::Intensity, |_, _, _| rng.random()).unwrap();
        let m = Volume::from_fn(dims, ISO, VolumeRole::BinaryMask, |_, _, _| {
            if rng.random_bool(0.1) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        ScanPair::new("s", b, f, Some(m)).unwrap()
    }

    #[test]
    fn crop_full_shape_and_determinism() {
        let mut rng = seeded(1);
        let pair = random_pair(&mut rng, [6, 5, 4]);
        let full = random_crop_pair(&pair, [6, 5, 4], &mut rng).unwrap();
        assert_eq!(full, pair);
        let a = random_crop_pair(&pair, [3, 2, 2], &mut seeded(9)).unwrap();
        let b = random_crop_pair(&pair, [3, 2, 2], &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            random_crop_pair(&pair, [7, 1, 1], &mut rng),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn crop_origins_are_uniform() {
        let mut rng = seeded(2024);
        let mut counts = vec![0usize; 7 * 7 * 7];
        let draws = 10_000;
        for _ in 0..draws {
            let o = random_crop_origin([10, 10, 10], [4, 4, 4], &mut rng).unwrap();
            counts[o[0] + 7 * (o[1] + 7 * o[2])] += 1;
        }
        let expected = draws as f64 / counts.len() as f64;
        for &c in &counts {
            assert!(c as f64 <= 5.0 * expected && c as f64 >= expected / 5.0, "count {c}");
        }
    }

    proptest! {
        #[test]
        fn crop_commutes_with_difference(seed in 0u64..1000, ox in 0usize..3, oy in 0usize..3, oz in 0usize..2) {
            let mut rng = seeded(seed);
            let pair = random_pair(&mut rng, [5, 5, 4]);
            let crop = crop_pair(&pair, [ox, oy, oz], [3, 3, 3]).unwrap();
            let lhs = abs_difference(&pair.baseline, &pair.followup).unwrap().crop([ox, oy, oz], [3, 3, 3]).unwrap();
            let rhs = abs_difference(&crop.baseline, &crop.followup).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn abs_difference_is_symmetric(seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let pair = random_pair(&mut rng, [4, 3, 2]);
            prop_assert_eq!(
                abs_difference(&pair.baseline, &pair.followup).unwrap(),
                abs_difference(&pair.followup, &pair.baseline).unwrap()
            );
        }

        #[test]
        fn normalize_twice_is_normalize_once(seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let v = Volume::from_fn([6, 6, 3], ISO, VolumeRole::Intensity, |_, _, _| {
                if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.1f32..5.0) }
            }).unwrap();
            let once = normalize_intensity_with(&v, 0.0, 100.0, PercentileDomain::Whole).unwrap();
            let twice = normalize_intensity_with(&once, 0.0, 100.0, PercentileDomain::Whole).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
