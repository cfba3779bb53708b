use xstream_core::data::{generate, make_batch, Dataset, SyntheticSpec};
use xstream_core::model::ModelConfig;
use xstream_core::numerics::Rng;
use xstream_core::trainer::{Stream, TrainConfig, TrainState};

fn small() -> (TrainConfig, Dataset) {
    let spec = SyntheticSpec { samples_per_class: 16, test_per_class: 4, ..SyntheticSpec::default() };
    let cfg = TrainConfig {
        stage1_epochs: 3,
        cycle_epochs: 2,
        cycles: 1,
        batch_size: 16,
        proto_freeze_epochs: 1,
        queue_len: 80,
        queue_start_epoch_stage1: [1, 1],
        queue_start_epoch_stage2: 0,
        model: ModelConfig { hidden: vec![16], embed_dim: 8, prototypes: 10 },
        ..TrainConfig::default()
    };
    (cfg, generate(&spec).unwrap())
}

fn first_batch(data: &Dataset, cfg: &TrainConfig) -> xstream_core::data::TwoStreamBatch {
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    make_batch(&data.train, &idx, &cfg.augment, &mut Rng::new(1))
}

#[test]
fn queue_holds_the_most_recent_features_in_order() {
    let (cfg, data) = small();
    let batch = first_batch(&data, &cfg);
    let mut state = TrainState::init(data.input_dims(), &cfg).unwrap();
    let per_step = 2 * cfg.batch_size;
    for n in 1..=5 {
        state.single_stream_step(Stream::First, &batch, 0.01, &cfg, true).unwrap();
        let q = &state.queues[0];
        let expected = (n * per_step).min(cfg.queue_len);
        assert_eq!(q.len(), expected);
        let last = (n * per_step) as u64;
        assert_eq!(q.tags(), (last - expected as u64..last).collect::<Vec<_>>());
        assert!(state.queues[1].is_empty());
    }
}

#[test]
fn cross_step_fills_both_queues_and_leaves_the_other_stream_alone() {
    let (cfg, data) = small();
    let batch = first_batch(&data, &cfg);
    let mut state = TrainState::init(data.input_dims(), &cfg).unwrap();
    let before = state.stream(Stream::Second).clone();
    let own = state.stream(Stream::First).checksum();
    state.cross_stream_step(Stream::First, &batch, 0.05, &cfg, true).unwrap();
    assert_eq!(state.stream(Stream::Second), &before);
    assert_ne!(state.stream(Stream::First).checksum(), own);
    assert_eq!(state.queues[0].len(), 2 * cfg.batch_size);
    assert_eq!(state.queues[1].len(), 2 * cfg.batch_size);
}

#[test]
fn logged_queue_fill_follows_the_start_epoch() {
    let (cfg, data) = small();
    let mut state = TrainState::init(data.input_dims(), &cfg).unwrap();
    let mut log = Vec::new();
    state.train_single_stream(Stream::First, &data, &cfg, &mut log).unwrap();
    let steps = data.train.len() / cfg.batch_size;
    let fills: Vec<usize> = log.iter().filter_map(|r| r.queue_fill).collect();
    let start = cfg.queue_start_epoch_stage1[0];
    let expected: Vec<usize> =
        (0..cfg.stage1_epochs).map(|e| if e < start { 0 } else { ((e + 1 - start) * steps * 2 * cfg.batch_size).min(cfg.queue_len) }).collect();
    assert_eq!(fills, expected);
}

#[test]
fn prototypes_stay_fixed_for_the_whole_freeze_window() {
    let (mut cfg, data) = small();
    cfg.proto_freeze_epochs = cfg.stage1_epochs;
    let mut state = TrainState::init(data.input_dims(), &cfg).unwrap();
    let bank = state.stream(Stream::First).bank.c.clone();
    let enc = state.stream(Stream::First).encoder.clone();
    state.train_single_stream(Stream::First, &data, &cfg, &mut Vec::new()).unwrap();
    let after = &state.stream(Stream::First).bank.c;
    assert!(bank.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_ne!(state.stream(Stream::First).encoder, enc);
}

#[test]
fn repeated_steps_on_one_batch_reduce_the_loss() {
    let (cfg, data) = small();
    let batch = first_batch(&data, &cfg);
    let mut state = TrainState::init(data.input_dims(), &cfg).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| state.single_stream_step(Stream::First, &batch, 0.1, &cfg, false).unwrap()).collect();
    let head = losses[..5].iter().sum::<f64>() / 5.0;
    let tail = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head - 0.1, "first {head} last {tail}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let (cfg, data) = small();
    let mut straight = TrainState::init(data.input_dims(), &cfg).unwrap();
    let mut log_a = Vec::new();
    straight.run_stage1(&data, &cfg, &mut log_a).unwrap();
    let tensors = straight.to_tensors().unwrap();
    straight.run_cycles(&data, &cfg, &mut log_a).unwrap();

    let mut resumed = TrainState::from_tensors(&tensors, &cfg).unwrap();
    let mut log_b = Vec::new();
    resumed.run_cycles(&data, &cfg, &mut log_b).unwrap();
    assert_eq!(resumed.to_tensors().unwrap(), straight.to_tensors().unwrap());
    assert_eq!(&log_a[log_a.len() - log_b.len()..], &log_b[..]);
}
