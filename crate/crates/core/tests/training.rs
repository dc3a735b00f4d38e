use timegate::harness::{evaluate, train_fresh, TrainConfig};
use timegate::pipeline::{ModelConfig, ModelState};
use timegate::synth::{generate, DatasetSpec, Task};
use timegate::tg_block::TGConfig;

fn tiny_data(task: Task) -> timegate::synth::Dataset {
    generate(&DatasetSpec {
        task,
        n_train: 24,
        n_test: 12,
        frames: 4,
        grid: 3,
        d_model: 8,
        seed: 5,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn tiny_model(layers: usize) -> ModelConfig {
    let mut tg = TGConfig::new(8, 2);
    tg.num_layers = layers;
    tg.mlp_hidden = 16;
    ModelConfig {
        tg,
        num_queries: 2,
        text_len: 2,
        ..ModelConfig::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_reload_reproduces_accuracy() {
    let data = tiny_data(Task::Direction);
    let outcome = train_fresh(&tiny_model(2), &data, &quick_train()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tgv");
    outcome.state.save(&path).unwrap();
    let reloaded = ModelState::load(&path).unwrap();
    assert_eq!(reloaded.to_bytes().unwrap(), outcome.state.to_bytes().unwrap());
    let acc = evaluate(&reloaded.build(false).unwrap(), &data.test).unwrap();
    assert_eq!(acc, outcome.report.test_accuracy);
}

#[test]
fn training_is_bitwise_repeatable() {
    let data = tiny_data(Task::Order);
    let a = train_fresh(&tiny_model(1), &data, &quick_train()).unwrap();
    let b = train_fresh(&tiny_model(1), &data, &quick_train()).unwrap();
    assert_eq!(a.report.checkpoint_sha256, b.report.checkpoint_sha256);
    assert_eq!(a.report.epoch_losses, b.report.epoch_losses);
}

#[test]
fn zero_depth_matches_all_sublayers_off() {
    let data = tiny_data(Task::Direction);
    let baseline = train_fresh(&tiny_model(0), &data, &quick_train()).unwrap();
    let mut off = tiny_model(2);
    off.tg.spatial_enabled = false;
    off.tg.temporal_enabled = false;
    off.tg.mlp_enabled = false;
    let disabled = train_fresh(&off, &data, &quick_train()).unwrap();
    assert_eq!(baseline.report.epoch_losses, disabled.report.epoch_losses);
    assert_eq!(baseline.report.test_accuracy, disabled.report.test_accuracy);
}

#[test]
fn frozen_groups_keep_their_weights() {
    let data = tiny_data(Task::Static);
    let mut cfg = tiny_model(1);
    cfg.frozen_groups = vec!["tg".into(), "compressor".into()];
    let before = ModelState::init(&cfg, quick_train().seed).unwrap();
    let after = train_fresh(&cfg, &data, &quick_train()).unwrap().state;
    for entry in before.params.entries() {
        let moved = after.params.get(&entry.name).unwrap().data != entry.data;
        let frozen = matches!(entry.group(), "tg" | "compressor");
        assert_eq!(moved, !frozen, "{}", entry.name);
    }
}
