//! SuperMix: synthetic change by super-pixel swapping.
//!
//! Every super-pixel `t` of the scan draws `u_t ~ U(0, 1)` independently and
//! keeps the original voxels when `u_t < τ`; otherwise it takes the voxels of
//! the perturbed VAE reconstruction and is marked changed in the pseudo-label.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};
use crate::superpixel::{slic3d, SlicParams, SuperpixelSegmentation};
use crate::vae::Vae;
use crate::volume::{ChangeLabel, ScanPair, Volume, VolumeRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperMixConfig {
    /// Probability that a super-pixel is left untouched.
    pub tau: f64,
    pub n_seg_min: usize,
    pub n_seg_max: usize,
    /// Half-width of the latent scaling draw.
    pub delta: f64,
    pub compactness: f64,
    pub slic_max_iter: usize,
}

impl Default for SuperMixConfig {
    fn default() -> Self {
        Self {
            tau: 0.98,
            n_seg_min: 200,
            n_seg_max: 5000,
            delta: 5.0,
            compactness: 0.1,
            slic_max_iter: 10,
        }
    }
}

impl SuperMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid("tau", "must lie in [0, 1]"));
        }
        if self.n_seg_min < 1 || self.n_seg_min > self.n_seg_max {
            return Err(Error::invalid("n_seg_min", "need 1 <= n_seg_min <= n_seg_max"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invalid("delta", "must be >= 0"));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::invalid("compactness", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub x_prime: Volume,
    pub x_hat: Volume,
    pub y_hat: Volume,
    /// `λ_t` per super-pixel: true keeps the original voxels.
    pub lambda_draws: Vec<bool>,
    pub tau: f64,
    pub n_seg_used: usize,
}

impl SynthSample {
    pub fn flipped(&self) -> usize {
        self.lambda_draws.iter().filter(|&&keep| !keep).count()
    }
}

/// `round(exp(u))` with `u ~ U(ln min, ln max)`, clamped to `[min, max]`.
pub fn sample_nseg(cfg: &SuperMixConfig, rng: &mut Rng) -> usize {
    if cfg.n_seg_min == cfg.n_seg_max {
        return cfg.n_seg_min;
    }
    let (lo, hi) = ((cfg.n_seg_min as f64).ln(), (cfg.n_seg_max as f64).ln());
    let u = rng.random_range(lo..hi);
    (u.exp().round() as usize).clamp(cfg.n_seg_min, cfg.n_seg_max)
}

/// Assembles `x′ = Σ_t λ_t (b_t ⊙ x) + (1 − λ_t)(b_t ⊙ x̃)` and its pseudo-label.
/// `x_hat` is filled with `x` here; [`make_training_triple`] sets the partner scan.
pub fn synthesize(
    x: &Volume,
    x_tilde: &Volume,
    seg: &SuperpixelSegmentation,
    tau: f64,
    rng: &mut Rng,
) -> Result<SynthSample> {
    x.ensure_same_geometry(x_tilde, "scan and reconstruction")?;
    if x.dims() != seg.labels.dims() {
        return Err(Error::ShapeMismatch {
            what: "scan and super-pixel labels",
            left: x.dims().to_vec(),
            right: seg.labels.dims().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("tau", "must lie in [0, 1]"));
    }
    let lambda_draws: Vec<bool> = (0..seg.n_actual).map(|_| rng.random::<f64>() < tau).collect();
    let mut mixed = Vec::with_capacity(x.len());
    let mut label = Vec::with_capacity(x.len());
    for ((&a, &b), &l) in x.data().iter().zip(x_tilde.data()).zip(seg.labels.data()) {
        if lambda_draws[l as usize] {
            mixed.push(a);
            label.push(0.0);
        } else {
            mixed.push(b);
            label.push(1.0);
        }
    }
    Ok(SynthSample {
        x_prime: x.with_data(VolumeRole::Intensity, mixed)?,
        x_hat: x.clone(),
        y_hat: x.with_data(VolumeRole::BinaryMask, label)?,
        lambda_draws,
        tau,
        n_seg_used: seg.n_actual,
    })
}

/// Builds one self-supervision triple from a no-change pair. All draws come
/// from per-sample streams indexed by `sample_index`.
pub fn make_training_triple(
    pair: &ScanPair,
    vae: &Vae,
    cfg: &SuperMixConfig,
    seed: u64,
    sample_index: u64,
) -> Result<SynthSample> {
    if pair.label != ChangeLabel::NoChange {
        return Err(Error::NotNoChangePair(pair.subject_id.clone()));
    }
    cfg.validate()?;
    let x = &pair.baseline;
    let mut latent_rng = stream(seed, Stream::Latent, sample_index);
    let code = vae.encode(x)?;
    let z = crate::vae::sample_latent(&code, &mut latent_rng);
    let mut perturb_rng = stream(seed, Stream::Perturb, sample_index);
    let (z_tilde, _) = crate::vae::perturb_latent(&z, cfg.delta, vae.config().elementwise_delta, &mut perturb_rng)?;
    let x_tilde = vae.decode(&z_tilde, x.spacing())?;

    let mut count_rng = stream(seed, Stream::SegmentCount, sample_index);
    let n_seg = sample_nseg(cfg, &mut count_rng).min(x.len());
    let seg = slic3d(
        x,
        &SlicParams {
            n_seg,
            compactness: cfg.compactness,
            max_iter: cfg.slic_max_iter,
            ..SlicParams::default()
        },
    )?;
    let mut mix_rng = stream(seed, Stream::Mix, sample_index);
    let mut sample = synthesize(x, &x_tilde, &seg, cfg.tau, &mut mix_rng)?;
    sample.x_hat = pair.followup.clone();
    Ok(sample)
}
