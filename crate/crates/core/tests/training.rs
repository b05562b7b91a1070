mod common;

use stm_core::model::{Model, ModelConfig, CHECKPOINT_FILE};
use stm_core::scenes::{generate_dataset, SceneConfig};
use stm_core::training::{batch_gradients, mean_loss, train, Adam, TrainConfig};
use stm_core::SceneSample;

fn small_model(num_classes: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        num_classes,
        ..ModelConfig::default().with_joint_dim(8)
    };
    Model::init(cfg, seed).unwrap()
}

fn clips(num_classes: usize, count: usize, noise: f64, seed: u64) -> Vec<SceneSample> {
    let cfg = SceneConfig {
        num_classes,
        noise_std: noise,
        distractors_min: 0,
        distractors_max: if num_classes > 2 { 2 } else { 0 },
        seed,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, count).unwrap()
}

#[test]
fn tiny_step_strictly_reduces_batch_loss() {
    let data = clips(6, 8, 0.05, 3);
    let batch: Vec<&SceneSample> = data.iter().collect();
    let mut model = small_model(6, 3);
    let cfg = TrainConfig {
        lr: 1e-6,
        ..TrainConfig::default()
    };
    let (before, grads) = batch_gradients(&model, &batch).unwrap();
    Adam::new(&cfg, &model.params)
        .update(&mut model.params, &grads, cfg.lr)
        .unwrap();
    let after = mean_loss(&model, &data).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn two_class_noise_free_loss_drops_by_four_fifths() {
    let data = clips(2, 64, 0.0, 21);
    let cfg = TrainConfig {
        epochs: 20,
        seed: 21,
        ..TrainConfig::default()
    };
    let out = train(small_model(2, 21), &data, &[], &cfg, None).unwrap();
    let last = out.log.last().unwrap().loss;
    assert!(
        last <= 0.2 * out.initial_loss,
        "initial {} final {last}",
        out.initial_loss
    );
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = clips(4, 24, 0.05, 8);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 5,
        seed: 8,
        ..TrainConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut bytes = Vec::new();
    for d in &dirs {
        train(
            small_model(4, 8),
            &data[..20],
            &data[20..],
            &cfg,
            Some(d.path()),
        )
        .unwrap();
        bytes.push(std::fs::read(d.path().join(CHECKPOINT_FILE)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn thread_count_does_not_change_gradients() {
    let data = clips(6, 12, 0.05, 4);
    let batch: Vec<&SceneSample> = data.iter().collect();
    let model = small_model(6, 4);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| batch_gradients(&model, &batch).unwrap())
    };
    let (l1, g1) = run(1);
    let (l3, g3) = run(3);
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert_eq!(g1, g3);
}
