//! Two-stage training: the VAE on no-change crops, then the detector on
//! SuperMix triples synthesised on the fly.
//!
//! One outer iteration streams `samples_per_iteration` samples through Adam
//! in mini-batches. Every random draw is taken from a stream keyed by the
//! global sample index, so a run is a pure function of (seed, config, data).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorConfig, DetectorInput};
use crate::error::{Error, Result};
use crate::losses::{detector_loss_grads, Head, LossConfig};
use crate::nn::{Adam, Graph, Tensor};
use crate::rng::{stream, Stream};
use crate::supermix::{make_training_triple, SuperMixConfig, SynthSample};
use crate::vae::{loss_on_graph, standard_normal, Vae, VaeConfig};
use crate::volume::{abs_difference, crop_pair, random_crop_origin, ChangeLabel, ScanPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vae,
    Detector,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Detector => "detector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub outer_iterations: usize,
    pub samples_per_iteration: usize,
    pub mini_batch: usize,
    pub lr_initial: f64,
    /// Inverse-time decay per optimiser step.
    pub lr_decay: f64,
    pub adam_betas: (f64, f64),
    /// Training crop; `None` trains on whole volumes.
    pub crop_shape: Option<[usize; 3]>,
    /// Write an intermediate checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn vae_default() -> Self {
        Self {
            outer_iterations: 200,
            samples_per_iteration: 4096,
            mini_batch: 2,
            lr_initial: 5e-5,
            lr_decay: 0.0,
            adam_betas: (0.9, 0.999),
            crop_shape: Some([192, 192, 16]),
            checkpoint_every: 10,
            seed: 0,
        }
    }

    pub fn detector_default() -> Self {
        Self {
            outer_iterations: 60,
            samples_per_iteration: 100,
            mini_batch: 2,
            lr_initial: 2e-4,
            lr_decay: 1e-3,
            adam_betas: (0.9, 0.999),
            crop_shape: Some([192, 192, 16]),
            checkpoint_every: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_iterations < 1 || self.samples_per_iteration < 1 || self.mini_batch < 1 {
            return Err(Error::invalid(
                "outer_iterations",
                "iteration, sample and batch counts must be >= 1",
            ));
        }
        if !(self.lr_initial > 0.0) {
            return Err(Error::invalid("lr_initial", "must be > 0"));
        }
        if !(self.lr_decay >= 0.0) {
            return Err(Error::invalid("lr_decay", "must be >= 0"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid("adam_betas", "both betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `lr_initial / (1 + lr_decay · step)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_initial / (1.0 + self.lr_decay * step as f64)
    }

    pub fn steps_per_iteration(&self) -> usize {
        self.samples_per_iteration.div_ceil(self.mini_batch)
    }
}

/// Mean loss and its components over one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub stage: Stage,
    pub loss: f64,
    pub components: Vec<(String, f64)>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// `iteration,stage,loss,<components...>,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,stage,loss");
        if let Some(first) = self.rows.first() {
            for (name, _) in &first.components {
                out.push(',');
                out.push_str(name);
            }
        }
        out.push_str(",lr\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{:.9e}", r.iteration, r.stage.name(), r.loss);
            for (_, v) in &r.components {
                let _ = write!(out, ",{v:.9e}");
            }
            let _ = writeln!(out, ",{:.9e}", r.lr);
        }
        out
    }
}

pub struct Trained<M> {
    pub model: M,
    pub history: LossHistory,
    pub steps: u64,
    /// Detector stage: synthesised samples whose pseudo-label was empty.
    pub empty_targets: usize,
}

fn finite_or_abort(value: f64, iteration: usize, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            iteration,
            step: step as usize,
            detail: format!("{what} = {value}"),
        })
    }
}

fn no_change_only(data: &[ScanPair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(p) = data.iter().find(|p| p.label != ChangeLabel::NoChange) {
        return Err(Error::NotNoChangePair(p.subject_id.clone()));
    }
    Ok(())
}

fn crop_for(pair: &ScanPair, crop: Option<[usize; 3]>, seed: u64, index: u64) -> Result<ScanPair> {
    match crop {
        None => Ok(pair.clone()),
        Some(shape) => {
            let mut rng = stream(seed, Stream::Crop, index);
            let origin = random_crop_origin(pair.dims(), shape, &mut rng)?;
            crop_pair(pair, origin, shape)
        }
    }
}

fn pick(data: &[ScanPair], seed: u64, index: u64) -> &ScanPair {
    let mut rng = stream(seed, Stream::PairChoice, index);
    &data[rng.random_range(0..data.len())]
}

fn save_checkpoint(dir: Option<&Path>, name: &str, ck: crate::nn::Checkpoint) -> Result<Option<PathBuf>> {
    match dir {
        None => Ok(None),
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join(name);
            ck.save(&path)?;
            Ok(Some(path))
        }
    }
}

/// Trains a VAE on random crops of either scan of no-change pairs.
pub fn train_vae(
    data: &[ScanPair],
    cfg: &VaeConfig,
    sched: &TrainSchedule,
    checkpoint_dir: Option<&Path>,
) -> Result<Trained<Vae>> {
    no_change_only(data)?;
    sched.validate()?;
    let shape = sched.crop_shape.unwrap_or(data[0].dims());
    cfg.latent_dims(shape)?;
    let mut vae = Vae::build(cfg, sched.seed)?;
    let mut adam = Adam::new(&vae.store, sched.adam_betas.0, sched.adam_betas.1);
    let mut history = LossHistory::default();
    let spi = sched.samples_per_iteration;

    for iteration in 0..sched.outer_iterations {
        let (mut sum, mut sum_l1, mut sum_kl) = (0.0, 0.0, 0.0);
        let mut lr = sched.lr_at(adam.steps());
        for batch_start in (0..spi).step_by(sched.mini_batch) {
            let batch_end = (batch_start + sched.mini_batch).min(spi);
            let scale = 1.0 / (batch_end - batch_start) as f64;
            let mut grads = vae.store.zero_grads();
            for k in batch_start..batch_end {
                let index = (iteration * spi + k) as u64;
                let pair = crop_for(pick(data, sched.seed, index), sched.crop_shape, sched.seed, index)?;
                let mut which = stream(sched.seed, Stream::ScanChoice, index);
                let x = if which.random::<bool>() {
                    &pair.baseline
                } else {
                    &pair.followup
                };
                let latent = cfg.latent_dims(x.dims())?;
                let eps = standard_normal(
                    &[cfg.latent_channels, latent[0], latent[1], latent[2]],
                    &mut stream(sched.seed, Stream::Latent, index),
                );
                let mut g = Graph::new(&vae.store);
                let vars = vae.forward_graph(&mut g, x, eps)?;
                let (root, loss) = loss_on_graph(&mut g, x, &vars, cfg.kl_weight)?;
                finite_or_abort(loss.total, iteration, adam.steps(), "vae loss")?;
                g.backward(root, scale, &mut grads);
                sum += loss.total;
                sum_l1 += loss.recon_l1;
                sum_kl += loss.kl;
            }
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    step: adam.steps() as usize,
                    detail: "non-finite gradient".into(),
                });
            }
            lr = sched.lr_at(adam.steps());
            adam.step(&mut vae.store, &grads, lr);
        }
        let n = spi as f64;
        history.rows.push(HistoryRow {
            iteration,
            stage: Stage::Vae,
            loss: sum / n,
            components: vec![("recon_l1".into(), sum_l1 / n), ("kl".into(), sum_kl / n)],
            lr,
        });
        log::info!(
            "stage=vae iteration={} loss={:.6} recon_l1={:.6} kl={:.6}",
            iteration,
            sum / n,
            sum_l1 / n,
            sum_kl / n
        );
        if sched.checkpoint_every > 0
            && (iteration + 1) % sched.checkpoint_every == 0
            && iteration + 1 < sched.outer_iterations
        {
            save_checkpoint(
                checkpoint_dir,
                &format!("vae_iter{:04}.ckpt", iteration + 1),
                vae.checkpoint(serde_json::json!({ "iteration": iteration + 1, "steps": adam.steps() }))?,
            )?;
        }
    }
    save_checkpoint(
        checkpoint_dir,
        "vae.ckpt",
        vae.checkpoint(serde_json::json!({ "iteration": sched.outer_iterations, "steps": adam.steps() }))?,
    )?;
    Ok(Trained {
        model: vae,
        history,
        steps: adam.steps(),
        empty_targets: 0,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorTraining {
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub supermix: SuperMixConfig,
    /// Crop the pair before computing super-pixels and the reconstruction
    /// (instead of synthesising on the whole volume and cropping afterwards).
    pub synthesise_on_crop: bool,
}

/// The self-supervision triple for global sample `index`, at training shape.
pub fn training_sample(
    data: &[ScanPair],
    vae: &Vae,
    cfg: &DetectorTraining,
    sched: &TrainSchedule,
    index: u64,
) -> Result<SynthSample> {
    let pair = pick(data, sched.seed, index);
    if cfg.synthesise_on_crop {
        let cropped = crop_for(pair, sched.crop_shape, sched.seed, index)?;
        return make_training_triple(&cropped, vae, &cfg.supermix, sched.seed, index);
    }
    let s = make_training_triple(pair, vae, &cfg.supermix, sched.seed, index)?;
    match sched.crop_shape {
        None => Ok(s),
        Some(shape) => {
            let mut rng = stream(sched.seed, Stream::Crop, index);
            let origin = random_crop_origin(s.x_prime.dims(), shape, &mut rng)?;
            Ok(SynthSample {
                x_prime: s.x_prime.crop(origin, shape)?,
                x_hat: s.x_hat.crop(origin, shape)?,
                y_hat: s.y_hat.crop(origin, shape)?,
                ..s
            })
        }
    }
}

fn head_of(t: &Tensor) -> Head<'_> {
    Head {
        dims: t.spatial(),
        probs: t.data(),
    }
}

pub fn sample_input(s: &SynthSample) -> Result<DetectorInput> {
    let diff = abs_difference(&s.x_prime, &s.x_hat)?;
    DetectorInput::new(&s.x_prime, &s.x_hat, &diff)
}

/// Trains the change detector on SuperMix triples built from no-change pairs.
pub fn train_detector(
    data: &[ScanPair],
    vae: &Vae,
    cfg: &DetectorTraining,
    sched: &TrainSchedule,
    checkpoint_dir: Option<&Path>,
) -> Result<Trained<Detector>> {
    no_change_only(data)?;
    sched.validate()?;
    cfg.loss.validate()?;
    cfg.supermix.validate()?;
    let synth_shape = if cfg.synthesise_on_crop {
        sched.crop_shape.unwrap_or(data[0].dims())
    } else {
        data[0].dims()
    };
    vae.config().latent_dims(synth_shape).map_err(|e| {
        Error::invalid(
            "crop_shape",
            format!("VAE cannot encode synthesis shape {synth_shape:?}: {e}"),
        )
    })?;
    let train_shape = sched.crop_shape.unwrap_or(data[0].dims());
    cfg.detector.check_dims(train_shape)?;

    let mut det = Detector::build(&cfg.detector, sched.seed)?;
    let mut adam = Adam::new(&det.store, sched.adam_betas.0, sched.adam_betas.1);
    let mut history = LossHistory::default();
    let mut empty_targets = 0usize;
    let spi = sched.samples_per_iteration;
    let l2 = cfg.detector.l2_weight;
    let side_count = if cfg.detector.use_deep_supervision {
        cfg.detector.levels - 1
    } else {
        0
    };

    for iteration in 0..sched.outer_iterations {
        let (mut sum, mut sum_final, mut sum_l2) = (0.0, 0.0, 0.0);
        let mut sum_sides = vec![0.0; side_count];
        let mut lr = sched.lr_at(adam.steps());
        for batch_start in (0..spi).step_by(sched.mini_batch) {
            let batch_end = (batch_start + sched.mini_batch).min(spi);
            let scale = 1.0 / (batch_end - batch_start) as f64;
            let mut grads = det.store.zero_grads();
            let l2_term = l2 * det.store.kernel_sq_norm();
            for k in batch_start..batch_end {
                let index = (iteration * spi + k) as u64;
                let sample = training_sample(data, vae, cfg, sched, index)?;
                if sample.y_hat.count_positive() == 0 {
                    empty_targets += 1;
                }
                let input = sample_input(&sample)?;
                let target: Vec<f64> = sample.y_hat.data().iter().map(|&v| v as f64).collect();
                let mut g = Graph::new(&det.store);
                let vars = det.forward_graph(&mut g, &input)?;
                let sides: Vec<Head> = vars.side_outputs.iter().map(|&v| head_of(g.value(v))).collect();
                let (breakdown, head_grads) =
                    detector_loss_grads(head_of(g.value(vars.final_map)), &sides, &target, &cfg.loss)?;
                finite_or_abort(breakdown.total, iteration, adam.steps(), "detector loss")?;
                let heads: Vec<_> = std::iter::once(vars.final_map)
                    .chain(vars.side_outputs.iter().copied())
                    .collect();
                let grad_tensors = heads
                    .iter()
                    .zip(head_grads)
                    .map(|(&v, gr)| Tensor::new(g.value(v).shape().to_vec(), gr))
                    .collect::<Result<Vec<_>>>()?;
                let root = g.objective(breakdown.total, &heads, grad_tensors)?;
                g.backward(root, scale, &mut grads);
                sum += breakdown.total + l2_term;
                sum_final += breakdown.final_head;
                sum_l2 += l2_term;
                for (acc, v) in sum_sides.iter_mut().zip(&breakdown.side_heads) {
                    *acc += v;
                }
            }
            grads.add_l2(&det.store, l2);
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    step: adam.steps() as usize,
                    detail: "non-finite gradient".into(),
                });
            }
            lr = sched.lr_at(adam.steps());
            adam.step(&mut det.store, &grads, lr);
        }
        let n = spi as f64;
        let mut components = vec![("final_head".to_string(), sum_final / n)];
        for (k, s) in sum_sides.iter().enumerate() {
            components.push((format!("side_head{k}"), s / n));
        }
        components.push(("l2".into(), sum_l2 / n));
        history.rows.push(HistoryRow {
            iteration,
            stage: Stage::Detector,
            loss: sum / n,
            components,
            lr,
        });
        log::info!(
            "stage=detector iteration={} loss={:.6} final_head={:.6} lr={:.3e} empty_targets={}",
            iteration,
            sum / n,
            sum_final / n,
            lr,
            empty_targets
        );
        if sched.checkpoint_every > 0
            && (iteration + 1) % sched.checkpoint_every == 0
            && iteration + 1 < sched.outer_iterations
        {
            save_checkpoint(
                checkpoint_dir,
                &format!("detector_iter{:04}.ckpt", iteration + 1),
                det.checkpoint(serde_json::json!({ "iteration": iteration + 1, "steps": adam.steps() }))?,
            )?;
        }
    }
    save_checkpoint(
        checkpoint_dir,
        "detector.ckpt",
        det.checkpoint(serde_json::json!({
            "iteration": sched.outer_iterations,
            "steps": adam.steps(),
            "empty_targets": empty_targets,
            "loss": cfg.loss,
            "supermix": cfg.supermix,
        }))?,
    )?;
    Ok(Trained {
        model: det,
        history,
        steps: adam.steps(),
        empty_targets,
    })
}
