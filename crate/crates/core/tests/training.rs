use fusionhead::features::FeatureTable;
use fusionhead::mlp::{MlpModel, MlpSpec};
use fusionhead::numeric::{Matrix, RandomStream};
use fusionhead::optim::{
    train, OptimizerConfig, OptimizerKind, OptimizerState, TrainConfig, TrainStatus,
};
use proptest::prelude::*;

fn blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> FeatureTable {
    let mut s = RandomStream::new(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let centre = if j == c % dim { 4.0 } else { 0.0 };
                data.push(centre + spread * s.next_gaussian());
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    FeatureTable::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        labels,
        (0..classes).map(|c| format!("c{c}")).collect(),
        Matrix::from_vec(n, dim, data).unwrap(),
    )
    .unwrap()
}

fn one_step(kind: OptimizerKind, lr: f64, decay: f64, theta: &mut [f64], grads: &[Vec<f64>], state: &mut Option<OptimizerState>) {
    let st = state.get_or_insert_with(|| {
        let mut c = OptimizerConfig::new(kind, lr);
        c.weight_decay = decay;
        OptimizerState::new(c)
    });
    st.step(&mut [&mut theta[..]], grads).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adamw_without_decay_is_adam(seed in any::<u64>(), lr in 1e-4f64..1e-1) {
        let mut s = RandomStream::new(seed);
        let start: Vec<f64> = (0..5).map(|_| s.next_gaussian()).collect();
        let (mut a, mut b) = (start.clone(), start);
        let (mut sa, mut sb) = (None, None);
        for _ in 0..100 {
            let g = vec![a.iter().map(|x| 2.0 * x + s.next_gaussian()).collect::<Vec<_>>()];
            one_step(OptimizerKind::Adam, lr, 0.0, &mut a, &g, &mut sa);
            one_step(OptimizerKind::AdamW, lr, 0.0, &mut b, &g, &mut sb);
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_gradients_leave_parameters(kind_idx in 0usize..4, lr in 1e-5f64..1.0) {
        let kind = OptimizerKind::ALL[kind_idx];
        let mut theta = vec![0.5, -1.5, 3.0];
        let before = theta.clone();
        let mut st = None;
        for _ in 0..5 {
            one_step(kind, lr, 0.0, &mut theta, &[vec![0.0; 3]], &mut st);
        }
        prop_assert_eq!(theta, before);
    }

    #[test]
    fn first_adam_step_is_bounded_by_the_rate(g in -1e3f64..1e3, lr in 1e-5f64..1.0) {
        let mut theta = vec![0.0];
        let mut st = None;
        one_step(OptimizerKind::Adam, lr, 0.0, &mut theta, &[vec![g]], &mut st);
        prop_assert!(theta[0].abs() <= lr * (1.0 + 1e-12));
    }
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 50,
        optimizer: OptimizerConfig::new(OptimizerKind::Adam, 1e-4),
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_blobs_reach_full_validation_accuracy() {
    let train_set = blobs(3, 60, 6, 0.3, 1);
    let val_set = blobs(3, 20, 6, 0.3, 2);
    let spec = MlpSpec::with_hidden(6, &[(64, 0.2), (32, 0.1)], 3);
    let model = MlpModel::init(&spec, &mut RandomStream::new(3)).unwrap();
    let out = train(model, &train_set, Some(&val_set), &quick_config(4)).unwrap();
    let best = out.history.iter().filter_map(|h| h.val_accuracy).fold(0.0, f64::max);
    assert_eq!(best, 1.0);
    assert!(out.history.len() <= 50);
}

#[test]
fn history_is_deterministic_and_rates_never_rise() {
    let train_set = blobs(3, 30, 5, 1.5, 5);
    let val_set = blobs(3, 10, 5, 1.5, 6);
    let spec = MlpSpec::with_hidden(5, &[(16, 0.3)], 3);
    let run = || {
        let model = MlpModel::init(&spec, &mut RandomStream::new(8)).unwrap();
        let mut cfg = quick_config(9);
        cfg.optimizer.learning_rate = 0.05;
        cfg.plateau_patience = 2;
        train(model, &train_set, Some(&val_set), &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    assert!(a.history.windows(2).all(|w| w[1].learning_rate <= w[0].learning_rate));
}

#[test]
fn early_stopping_returns_the_best_epoch_snapshot() {
    let train_set = blobs(2, 20, 3, 2.0, 10);
    let val_set = blobs(2, 10, 3, 2.0, 11);
    let spec = MlpSpec::with_hidden(3, &[(32, 0.0)], 2);
    let init = MlpModel::init(&spec, &mut RandomStream::new(12)).unwrap();
    let mut cfg = quick_config(13);
    cfg.optimizer.learning_rate = 0.05;
    cfg.max_epochs = 200;
    cfg.early_stop_patience = 3;
    let out = train(init.clone(), &train_set, Some(&val_set), &cfg).unwrap();
    assert_eq!(out.status, TrainStatus::EarlyStopped);
    let best_loss = out.history.iter().filter_map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.history[out.best_epoch - 1].val_loss, Some(best_loss));
    // Replaying exactly best_epoch epochs reproduces the snapshot bit for bit.
    cfg.max_epochs = out.best_epoch;
    let replay = train(init, &train_set, Some(&val_set), &cfg).unwrap();
    assert_eq!(replay.model, out.model);
}

#[test]
fn training_rejects_missing_classes() {
    let mut set = blobs(3, 5, 3, 1.0, 1);
    set.labels.iter_mut().for_each(|l| *l = (*l).min(1));
    let model = MlpModel::init(&MlpSpec::with_hidden(3, &[(4, 0.0)], 3), &mut RandomStream::new(0)).unwrap();
    assert!(train(model, &set, None, &quick_config(0)).is_err());
}
