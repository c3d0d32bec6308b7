use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use longichange::detector::Detector;
use longichange::evaluation::{aggregate, evaluate_pair, per_pair_csv, quartile_csv, PairRecord, Summary};
use longichange::inference::{connected_components, extract_blobs, predict_change};
use longichange::io::render::{save_png, slice_mosaic, Overlay, RED};
use longichange::io::{read_dataset, read_volume, write_dataset, write_volume};
use longichange::nn::Checkpoint;
use longichange::phantom::generate_dataset;
use longichange::training::{train_detector as fit_detector, train_vae as fit_vae, training_sample, TrainSchedule};
use longichange::vae::Vae;
use longichange::volume::{normalize_intensity_with, resample_isotropic};
use longichange::{ChangeLabel, ScanPair, Volume, VolumeRole};

use crate::config::Config;
use crate::manifest::Recorder;
use crate::CliError;

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

#[derive(Debug, Args)]
pub struct ScheduleFlags {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub samples_per_iteration: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl ScheduleFlags {
    pub fn apply(&self, s: &mut TrainSchedule) {
        if let Some(v) = self.iterations {
            s.outer_iterations = v;
        }
        if let Some(v) = self.samples_per_iteration {
            s.samples_per_iteration = v;
        }
        if let Some(v) = self.lr {
            s.lr_initial = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct PostFlags {
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub min_blob: Option<usize>,
}

impl PostFlags {
    pub fn apply(&self, c: &mut crate::config::InferenceConfig) {
        if let Some(v) = self.kappa {
            c.kappa = v;
        }
        if let Some(v) = self.min_blob {
            c.min_blob = v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub subject_id: String,
    /// Relative to the predictions directory.
    pub probability: String,
    pub mask: String,
    pub blobs: String,
    pub n_blobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictions {
    pub detector: PathBuf,
    pub kappa: f64,
    pub min_blob: usize,
    pub pairs: Vec<PredictionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: PathBuf,
    pub kappa: f64,
    pub min_blob: usize,
    pub iou_min: f64,
    pub mean_predicted_blobs: f64,
    pub summary: Summary,
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).map_err(rt)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn no_change_pairs(dataset: &Path) -> Result<Vec<ScanPair>, CliError> {
    let pairs: Vec<_> = read_dataset(dataset)?
        .into_iter()
        .filter(|p| p.label == ChangeLabel::NoChange)
        .collect();
    if pairs.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: no no-change pairs to train on",
            dataset.display()
        )));
    }
    Ok(pairs)
}

/// A crop larger than the scans is shrunk to the scan extent on that axis.
fn fit_crop(s: &mut TrainSchedule, dims: [usize; 3]) {
    if let Some(c) = s.crop_shape.as_mut() {
        let fitted = [c[0].min(dims[0]), c[1].min(dims[1]), c[2].min(dims[2])];
        if fitted != *c {
            log::warn!("crop {:?} exceeds scan dims {:?}, using {:?}", c, dims, fitted);
            *c = fitted;
        }
    }
}

fn load_vae(path: &Path) -> Result<Vae, CliError> {
    Ok(Vae::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn phantom(cfg: &Config, out: &Path) -> Result<PathBuf, CliError> {
    let rec = Recorder::start("phantom", &[]);
    create_dir(out)?;
    let data = generate_dataset(&cfg.phantom)?;
    let (manifest, m) = write_dataset(out, &data.pairs())?;
    let changed = m.pairs.iter().filter(|p| p.label == ChangeLabel::Change).count();
    log::info!(
        "pairs={} change={} dataset={}",
        m.pairs.len(),
        changed,
        manifest.display()
    );
    rec.finish(out, cfg, Some(cfg.phantom.seed), &[out.to_path_buf()])
}

pub fn preprocess(cfg: &Config, dataset: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let rec = Recorder::start("preprocess", &[dataset]);
    create_dir(out)?;
    let p = &cfg.preprocess;
    let prep = |v: &Volume| -> Result<Volume, CliError> {
        let v = match p.target_mm {
            Some(mm) => resample_isotropic(v, mm)?,
            None => v.clone(),
        };
        Ok(match v.role() {
            VolumeRole::Intensity => normalize_intensity_with(&v, p.p_low, p.p_high, p.domain)?,
            _ => v,
        })
    };
    let mut pairs = Vec::new();
    for pair in read_dataset(dataset)? {
        let mask = pair.change_mask.as_ref().map(&prep).transpose()?;
        pairs.push(ScanPair::new(
            pair.subject_id.clone(),
            prep(&pair.baseline)?,
            prep(&pair.followup)?,
            mask,
        )?);
    }
    write_dataset(out, &pairs)?;
    log::info!("pairs={} out={}", pairs.len(), out.display());
    rec.finish(out, cfg, None, &[out.to_path_buf()])
}

pub fn train_vae(cfg: &Config, dataset: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let rec = Recorder::start("train-vae", &[dataset]);
    create_dir(out)?;
    let data = no_change_pairs(dataset)?;
    let mut sched = cfg.vae_schedule.clone();
    fit_crop(&mut sched, data[0].dims());
    let trained = fit_vae(&data, &cfg.vae, &sched, Some(out))?;
    write_text(&out.join("loss_history.csv"), &trained.history.to_csv())?;
    log::info!(
        "steps={} final_loss={:?}",
        trained.steps,
        trained.history.losses().last()
    );
    rec.finish(out, cfg, Some(sched.seed), &[out.to_path_buf()])
}

pub fn synth_preview(cfg: &Config, dataset: &Path, vae: &Path, count: usize, out: &Path) -> Result<PathBuf, CliError> {
    let rec = Recorder::start("synth-preview", &[dataset, vae]);
    create_dir(out)?;
    let data = no_change_pairs(dataset)?;
    let vae = load_vae(vae)?;
    let mut sched = cfg.detector_schedule.clone();
    sched.crop_shape = None;
    for i in 0..count {
        let s = training_sample(&data, &vae, &cfg.detector, &sched, i as u64)?;
        let stem = out.join(format!("sample_{i:03}"));
        write_volume(&stem.with_extension("x_prime"), &s.x_prime, None)?;
        write_volume(&stem.with_extension("x_hat"), &s.x_hat, None)?;
        write_volume(&stem.with_extension("y_hat"), &s.y_hat, None)?;
        let overlay = [Overlay {
            mask: &s.y_hat,
            colour: RED,
            alpha: 0.5,
        }];
        save_png(
            &stem.with_extension("x_prime.png"),
            &slice_mosaic(&s.x_prime, &overlay, 8)?,
        )?;
        save_png(&stem.with_extension("x_hat.png"), &slice_mosaic(&s.x_hat, &[], 8)?)?;
        log::info!(
            "sample={i} n_seg={} flipped={} changed_voxels={}",
            s.n_seg_used,
            s.flipped(),
            s.y_hat.count_positive()
        );
    }
    rec.finish(out, cfg, Some(sched.seed), &[out.to_path_buf()])
}

pub fn train_detector(cfg: &Config, dataset: &Path, vae: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let rec = Recorder::start("train-detector", &[dataset, vae]);
    create_dir(out)?;
    let data = no_change_pairs(dataset)?;
    let vae = load_vae(vae)?;
    let mut sched = cfg.detector_schedule.clone();
    fit_crop(&mut sched, data[0].dims());
    let trained = fit_detector(&data, &vae, &cfg.detector, &sched, Some(out))?;
    write_text(&out.join("loss_history.csv"), &trained.history.to_csv())?;
    if trained.empty_targets > 0 {
        log::warn!("empty_targets={} samples had no changed voxels", trained.empty_targets);
    }
    log::info!(
        "steps={} final_loss={:?}",
        trained.steps,
        trained.history.losses().last()
    );
    rec.finish(out, cfg, Some(sched.seed), &[out.to_path_buf()])
}

pub fn infer(cfg: &Config, dataset: &Path, detector: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let rec = Recorder::start("infer", &[dataset, detector]);
    create_dir(out)?;
    let net = Detector::from_checkpoint(&Checkpoint::load(detector)?)?;
    let inf = &cfg.inference;
    let mut entries = Vec::new();
    for pair in read_dataset(dataset)? {
        let id = pair.subject_id.as_str();
        let prob = predict_change(&pair, &net)?;
        let blobs = extract_blobs(&prob, inf.kappa, inf.connectivity, inf.min_blob)?;
        let dir = out.join(id);
        let rel = |p: PathBuf| p.strip_prefix(out).unwrap_or(&p).to_string_lossy().into_owned();
        let probability = rel(write_volume(&dir.join("probability"), &prob, Some(id))?);
        let mask = rel(write_volume(
            &dir.join("mask"),
            &blobs.to_mask(prob.spacing()),
            Some(id),
        )?);
        let blob_csv = dir.join("blobs.csv");
        write_text(&blob_csv, &blobs.to_csv())?;
        log::info!("subject={id} blobs={}", blobs.len());
        entries.push(PredictionEntry {
            subject_id: id.to_string(),
            probability,
            mask,
            blobs: rel(blob_csv),
            n_blobs: blobs.len(),
        });
    }
    write_json(
        &out.join(PREDICTIONS_FILE),
        &Predictions {
            detector: detector.to_path_buf(),
            kappa: inf.kappa,
            min_blob: inf.min_blob,
            pairs: entries,
        },
    )?;
    rec.finish(out, cfg, None, &[out.to_path_buf()])
}

/// Ground truth and prediction blobs use the same connectivity; the
/// probability maps are re-thresholded with the evaluation's κ and size filter.
pub fn evaluate(cfg: &Config, dataset: &Path, predictions: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let rec = Recorder::start("evaluate", &[dataset, predictions]);
    create_dir(out)?;
    let pred_dir = if predictions.is_dir() {
        predictions.to_path_buf()
    } else {
        predictions.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    let preds: Predictions = read_json(&pred_dir.join(PREDICTIONS_FILE))?;
    let inf = &cfg.inference;
    let mut records: Vec<PairRecord> = Vec::new();
    let mut blob_counts = Vec::new();
    for pair in read_dataset(dataset)? {
        let Some(entry) = preds.pairs.iter().find(|e| e.subject_id == pair.subject_id) else {
            return Err(CliError::Runtime(format!(
                "no prediction for subject {}",
                pair.subject_id
            )));
        };
        let (prob, _) = read_volume(&pred_dir.join(&entry.probability))?;
        if prob.dims() != pair.dims() {
            return Err(CliError::Runtime(format!(
                "subject {}: prediction dims {:?} vs scan dims {:?}",
                pair.subject_id,
                prob.dims(),
                pair.dims()
            )));
        }
        let pred = extract_blobs(&prob, inf.kappa, inf.connectivity, inf.min_blob)?;
        let gt = match &pair.change_mask {
            Some(m) => connected_components(m, inf.connectivity),
            None => connected_components(
                &Volume::zeros(pair.dims(), pair.baseline.spacing(), VolumeRole::BinaryMask),
                inf.connectivity,
            ),
        };
        blob_counts.push(pred.len() as f64);
        records.push(evaluate_pair(&pair.subject_id, &gt, &pred, cfg.evaluation.iou_min)?);
    }
    let metrics: Vec<_> = records.iter().map(|r| r.metrics).collect();
    let summary = aggregate(&metrics)?;
    write_text(&out.join("per_pair.csv"), &per_pair_csv(&records))?;
    write_text(&out.join("quartiles.csv"), &quartile_csv(&summary))?;
    write_json(&out.join("summary.json"), &summary)?;
    write_json(
        &out.join(EVALUATION_FILE),
        &Evaluation {
            predictions: pred_dir,
            kappa: inf.kappa,
            min_blob: inf.min_blob,
            iou_min: cfg.evaluation.iou_min,
            mean_predicted_blobs: blob_counts.iter().sum::<f64>() / blob_counts.len().max(1) as f64,
            summary: summary.clone(),
        },
    )?;
    log::info!(
        "pairs={} ltpr={:.4} lfpr={:.4} ppv={:.4}",
        summary.pairs,
        summary.ltpr.mean,
        summary.lfpr.mean,
        summary.ppv.mean
    );
    rec.finish(out, cfg, None, &[out.to_path_buf()])
}

pub fn report(cfg: &Config, runs: &[String], out: &Path) -> Result<PathBuf, CliError> {
    let mut named = Vec::new();
    for r in runs {
        let Some((name, dir)) = r.split_once('=') else {
            return Err(CliError::Config(format!("--run expects name=dir, got {r:?}")));
        };
        named.push((name.to_string(), PathBuf::from(dir)));
    }
    let inputs: Vec<&Path> = named.iter().map(|(_, d)| d.as_path()).collect();
    let rec = Recorder::start("report", &inputs);
    create_dir(out)?;
    let mut csv = String::from(
        "method,pairs,ltpr_mean,ltpr_median,lfpr_mean,lfpr_median,ppv_mean,ppv_median,mean_predicted_blobs\n",
    );
    let mut md = String::from("| method | pairs | LTPR | LFPR | PPV | blobs/pair |\n|---|---|---|---|---|---|\n");
    for (name, dir) in &named {
        let e: Evaluation = read_json(&dir.join(EVALUATION_FILE))?;
        let s = &e.summary;
        csv.push_str(&format!(
            "{name},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.2}\n",
            s.pairs,
            s.ltpr.mean,
            s.ltpr.median,
            s.lfpr.mean,
            s.lfpr.median,
            s.ppv.mean,
            s.ppv.median,
            e.mean_predicted_blobs
        ));
        md.push_str(&format!(
            "| {name} | {} | {:.3} ({:.3}) | {:.3} ({:.3}) | {:.3} ({:.3}) | {:.2} |\n",
            s.pairs,
            s.ltpr.mean,
            s.ltpr.median,
            s.lfpr.mean,
            s.lfpr.median,
            s.ppv.mean,
            s.ppv.median,
            e.mean_predicted_blobs
        ));
    }
    md.push_str("\nmean (median) per pair\n");
    let outputs = [
        write_text(&out.join("report.csv"), &csv)?,
        write_text(&out.join("report.md"), &md)?,
    ];
    rec.finish(out, cfg, None, &outputs)
}
