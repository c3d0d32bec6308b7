use longichange::detector::DetectorConfig;
use longichange::phantom::{generate_dataset, PhantomConfig};
use longichange::supermix::SuperMixConfig;
use longichange::training::{train_detector, train_vae, DetectorTraining, TrainSchedule};
use longichange::vae::VaeConfig;

fn schedule(iterations: usize, lr: f64, decay: f64) -> TrainSchedule {
    TrainSchedule {
        outer_iterations: iterations,
        samples_per_iteration: 20,
        mini_batch: 2,
        lr_initial: lr,
        lr_decay: decay,
        adam_betas: (0.9, 0.999),
        crop_shape: None,
        checkpoint_every: 0,
        seed: 21,
    }
}

#[test]
fn detector_loss_halves_within_200_steps() {
    let data = generate_dataset(&PhantomConfig {
        shape: [24, 24, 8],
        n_pairs: 10,
        change_probability: 0.0,
        lesion_count_range: (0, 1),
        new_lesion_range: (1, 1),
        lesion_radius_range: (1.5, 2.0),
        seed: 4,
        ..PhantomConfig::default()
    })
    .unwrap()
    .no_change();
    let vae = train_vae(
        &data,
        &VaeConfig {
            channels: vec![4, 8, 8],
            latent_channels: 2,
            ..VaeConfig::default()
        },
        &schedule(3, 1e-3, 0.0),
        None,
    )
    .unwrap()
    .model;
    let cfg = DetectorTraining {
        detector: DetectorConfig {
            levels: 3,
            base_channels: 8,
            use_inception: false,
            ..DetectorConfig::default()
        },
        supermix: SuperMixConfig {
            tau: 0.9,
            n_seg_min: 50,
            n_seg_max: 400,
            ..SuperMixConfig::default()
        },
        ..DetectorTraining::default()
    };
    let t = train_detector(&data, &vae, &cfg, &schedule(20, 1e-3, 1e-3), None).unwrap();
    assert_eq!(t.steps, 200);
    let losses = t.history.losses();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.5 * first, "loss {first:.4} → {last:.4}: {losses:?}");
}
