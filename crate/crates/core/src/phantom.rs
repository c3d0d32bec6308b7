//! Synthetic longitudinal scans with known change.
//!
//! A subject is a smooth textured ellipsoid on a zero background with a few
//! static bright lesions. Each scan of the pair gets its own Gaussian noise
//! (inside the ellipsoid only) and a weak multiplicative linear bias field.
//! Change subjects receive new spherical lesions in the follow-up scan; their
//! voxels form the ground-truth mask.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};
use crate::volume::{ScanPair, Volume, VolumeRole};

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub n_pairs: usize,
    /// Static lesions present in both scans.
    pub lesion_count_range: (usize, usize),
    /// New lesions inserted into the follow-up of a change subject.
    pub new_lesion_range: (usize, usize),
    pub lesion_radius_range: (f64, f64),
    pub lesion_intensity: f64,
    pub noise_sigma: f64,
    /// Peak relative gain of the per-scan bias field.
    pub bias_amplitude: f64,
    pub change_probability: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [48, 48, 16],
            n_pairs: 20,
            lesion_count_range: (1, 3),
            new_lesion_range: (1, 3),
            lesion_radius_range: (2.0, 3.5),
            lesion_intensity: 0.9,
            noise_sigma: 0.02,
            bias_amplitude: 0.01,
            change_probability: 0.5,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::invalid("shape", "extents must be >= 1"));
        }
        let (rmin, rmax) = self.lesion_radius_range;
        if !(rmin >= 1.0 && rmax >= rmin) {
            return Err(Error::invalid("lesion_radius_range", "need 1 <= min <= max"));
        }
        for (field, (lo, hi)) in [
            ("lesion_count_range", self.lesion_count_range),
            ("new_lesion_range", self.new_lesion_range),
        ] {
            if lo > hi {
                return Err(Error::invalid(field, "min exceeds max"));
            }
        }
        if self.new_lesion_range.0 < 1 {
            return Err(Error::invalid(
                "new_lesion_range",
                "change subjects need at least one new lesion",
            ));
        }
        if !(0.0..=1.0).contains(&self.lesion_intensity) {
            return Err(Error::invalid("lesion_intensity", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be >= 0"));
        }
        if !(0.0..0.5).contains(&self.bias_amplitude) {
            return Err(Error::invalid("bias_amplitude", "must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.change_probability) {
            return Err(Error::invalid("change_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub centre: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).map(|a| (p[a] as f64 - self.centre[a]).powi(2)).sum::<f64>() <= self.radius * self.radius
    }

    /// Linear indices of covered voxels.
    pub fn voxels(&self, dims: [usize; 3]) -> Vec<usize> {
        let lo = |a: usize| (self.centre[a] - self.radius).ceil().max(0.0) as usize;
        let hi = |a: usize| ((self.centre[a] + self.radius).floor().max(0.0) as usize).min(dims[a] - 1);
        let mut out = Vec::new();
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    if self.contains([x, y, z]) {
                        out.push(x + dims[0] * (y + dims[1] * z));
                    }
                }
            }
        }
        out
    }
}

/// One generated subject, with the noise-free images kept for inspection.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub pair: ScanPair,
    pub clean_baseline: Volume,
    pub clean_followup: Volume,
    pub static_lesions: Vec<Sphere>,
    pub new_lesions: Vec<Sphere>,
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub subjects: Vec<PhantomSubject>,
}

impl PhantomDataset {
    pub fn no_change(&self) -> Vec<ScanPair> {
        self.subjects
            .iter()
            .filter(|s| s.pair.change_mask.is_none())
            .map(|s| s.pair.clone())
            .collect()
    }

    pub fn change(&self) -> Vec<ScanPair> {
        self.subjects
            .iter()
            .filter(|s| s.pair.change_mask.is_some())
            .map(|s| s.pair.clone())
            .collect()
    }

    pub fn pairs(&self) -> Vec<ScanPair> {
        self.subjects.iter().map(|s| s.pair.clone()).collect()
    }
}

struct Anatomy {
    dims: [usize; 3],
    centre: [f64; 3],
    semi_axes: [f64; 3],
    waves: Vec<([f64; 3], f64)>,
}

impl Anatomy {
    fn random(dims: [usize; 3], rng: &mut Rng) -> Self {
        let centre = dims.map(|d| (d as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5));
        let semi_axes = dims.map(|d| (d as f64 / 2.0 - 1.0).max(0.5) * rng.random_range(0.85..0.95));
        let waves = (0..3)
            .map(|_| {
                let f = [0, 1, 2].map(|_| rng.random_range(-0.45..0.45));
                (f, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self {
            dims,
            centre,
            semi_axes,
            waves,
        }
    }

    /// Normalised ellipsoidal radius; < 1 inside the brain.
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn inside(&self, p: [usize; 3]) -> bool {
        self.radius(p.map(|c| c as f64)) < 1.0
    }

    fn tissue(&self, p: [usize; 3]) -> f64 {
        let q = p.map(|c| c as f64);
        0.5 + self
            .waves
            .iter()
            .map(|(f, phase)| 0.05 * (f[0] * q[0] + f[1] * q[1] + f[2] * q[2] + phase).sin())
            .sum::<f64>()
    }

    fn clean(&self, lesions: &[Sphere], intensity: f64) -> Vec<f32> {
        let d = self.dims;
        let mut data = vec![0.0f32; d.iter().product()];
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    if self.inside([x, y, z]) {
                        data[x + d[0] * (y + d[1] * z)] = self.tissue([x, y, z]) as f32;
                    }
                }
            }
        }
        for s in lesions {
            for i in s.voxels(d) {
                data[i] = intensity as f32;
            }
        }
        data
    }
}

fn place_lesion(anatomy: &Anatomy, existing: &[Sphere], radius_range: (f64, f64), rng: &mut Rng) -> Result<Sphere> {
    let d = anatomy.dims;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let radius = if radius_range.0 == radius_range.1 {
            radius_range.0
        } else {
            rng.random_range(radius_range.0..radius_range.1)
        };
        let centre = [0, 1, 2].map(|a| {
            let reach = (anatomy.semi_axes[a] - radius).max(0.0);
            anatomy.centre[a] + rng.random_range(-1.0..1.0) * reach
        });
        let sphere = Sphere { centre, radius };
        let voxels = sphere.voxels(d);
        if voxels.is_empty() {
            continue;
        }
        let fits = voxels
            .iter()
            .all(|&i| anatomy.inside([i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])]));
        let apart = existing.iter().all(|e| {
            let dist = (0..3).map(|a| (e.centre[a] - centre[a]).powi(2)).sum::<f64>().sqrt();
            dist > e.radius + radius + 1.5
        });
        if fits && apart {
            return Ok(sphere);
        }
    }
    Err(Error::LesionPlacement(PLACEMENT_ATTEMPTS))
}

fn acquire(anatomy: &Anatomy, clean: &[f32], cfg: &PhantomConfig, rng: &mut Rng) -> Vec<f32> {
    let d = anatomy.dims;
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let dir = {
        let v = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0f64));
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
        v.map(|c| c / n)
    };
    let amp = cfg.bias_amplitude * rng.random_range(-1.0..1.0);
    let mut out = clean.to_vec();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let i = x + d[0] * (y + d[1] * z);
                if !anatomy.inside([x, y, z]) {
                    continue;
                }
                let p = [x, y, z].map(|c| c as f64);
                let t = (0..3)
                    .map(|a| dir[a] * (p[a] - anatomy.centre[a]) / anatomy.semi_axes[a])
                    .sum::<f64>();
                let gain = 1.0 + amp * t.clamp(-1.0, 1.0);
                let e = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                out[i] = ((clean[i] as f64 * gain + e).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    out
}

pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> Result<PhantomSubject> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Phantom, index as u64);
    let dims = cfg.shape;
    let anatomy = Anatomy::random(dims, &mut rng);
    let is_change = rng.random::<f64>() < cfg.change_probability;

    let n_static = rng.random_range(cfg.lesion_count_range.0..=cfg.lesion_count_range.1);
    let mut static_lesions = Vec::new();
    for _ in 0..n_static {
        let s = place_lesion(&anatomy, &static_lesions, cfg.lesion_radius_range, &mut rng)?;
        static_lesions.push(s);
    }
    let mut new_lesions = Vec::new();
    if is_change {
        let n_new = rng.random_range(cfg.new_lesion_range.0..=cfg.new_lesion_range.1);
        let mut all = static_lesions.clone();
        for _ in 0..n_new {
            let s = place_lesion(&anatomy, &all, cfg.lesion_radius_range, &mut rng)?;
            all.push(s);
            new_lesions.push(s);
        }
    }

    let clean_b = anatomy.clean(&static_lesions, cfg.lesion_intensity);
    let all: Vec<Sphere> = static_lesions.iter().chain(&new_lesions).copied().collect();
    let clean_f = anatomy.clean(&all, cfg.lesion_intensity);
    let noisy_b = acquire(&anatomy, &clean_b, cfg, &mut rng);
    let noisy_f = acquire(&anatomy, &clean_f, cfg, &mut rng);

    let spacing = [1.0; 3];
    let vol = |data: Vec<f32>| Volume::new(dims, spacing, VolumeRole::Intensity, data);
    let mask = if is_change {
        let mut m = vec![0.0f32; clean_b.len()];
        for s in &new_lesions {
            for i in s.voxels(dims) {
                m[i] = 1.0;
            }
        }
        Some(Volume::new(dims, spacing, VolumeRole::BinaryMask, m)?)
    } else {
        None
    };
    let pair = ScanPair::new(format!("phantom-{index:04}"), vol(noisy_b)?, vol(noisy_f)?, mask)?;
    Ok(PhantomSubject {
        pair,
        clean_baseline: vol(clean_b)?,
        clean_followup: vol(clean_f)?,
        static_lesions,
        new_lesions,
    })
}

pub fn generate_dataset(cfg: &PhantomConfig) -> Result<PhantomDataset> {
    cfg.validate()?;
    let subjects = (0..cfg.n_pairs)
        .map(|i| generate_subject(cfg, i))
        .collect::<Result<_>>()?;
    Ok(PhantomDataset { subjects })
}
