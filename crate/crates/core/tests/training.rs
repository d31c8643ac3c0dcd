use lbp_wht::train::{
    build_model, evaluate, make_synthetic_dataset, run_experiment, softmax_cross_entropy, train, DatasetSpec, ModeSpec,
    ModelConfig, OptimizerConfig, TrainConfig,
};
use lbp_wht::{Matrix, Strategy};

fn small_task(difficulty: f64) -> DatasetSpec {
    DatasetSpec {
        n_samples: 200,
        tokens: 16,
        channels: 8,
        classes: 2,
        seed: 4,
        difficulty,
        ..DatasetSpec::default()
    }
}

#[test]
fn untrained_two_class_model_is_near_chance() {
    let mut accs = vec![];
    for seed in 0..10 {
        let cfg = TrainConfig {
            seed,
            dataset: DatasetSpec { seed: 100 + seed, classes: 2, ..small_task(1.0) },
            ..TrainConfig::default()
        };
        let (_, eval_set) = make_synthetic_dataset(&cfg.dataset).unwrap();
        accs.push(evaluate(&build_model(&cfg).unwrap(), &eval_set).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "{accs:?}");
}

#[test]
fn linear_probe_solves_noise_free_task() {
    let cfg = TrainConfig {
        epochs: 20,
        learning_rate: 0.01,
        model: ModelConfig { hidden: vec![], ..ModelConfig::default() },
        dataset: DatasetSpec { n_samples: 400, classes: 4, ..small_task(0.0) },
        ..TrainConfig::default()
    };
    let (_, log) = run_experiment(&cfg).unwrap();
    assert!(log.final_eval_acc() >= 0.99, "{}", log.final_eval_acc());
}

#[test]
fn memorized_set_evaluates_like_training_accuracy() {
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 0.01,
        dataset: DatasetSpec { n_samples: 60, ..small_task(0.0) },
        ..TrainConfig::default()
    };
    let (train_set, _) = make_synthetic_dataset(&cfg.dataset).unwrap();
    let mut model = build_model(&cfg).unwrap();
    let log = train(&mut model, &cfg, &train_set, &train_set).unwrap();
    let last = log.epochs.last().unwrap();
    assert_eq!(last.train_acc, 1.0);
    assert_eq!(evaluate(&model, &train_set).unwrap(), last.eval_acc);
    assert_eq!(last.eval_acc, 1.0);
}

#[test]
fn one_small_sgd_step_lowers_batch_loss() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        optimizer: OptimizerConfig::Sgd { momentum: 0.0 },
        model: ModelConfig { hidden: vec![], ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let (train_set, _) = make_synthetic_dataset(&cfg.dataset).unwrap();
    let ids: Vec<usize> = (0..cfg.batch_size).collect();
    let (x, labels) = train_set.batch(&ids).unwrap();
    let mut model = build_model(&cfg).unwrap();
    let (before, g, _) = softmax_cross_entropy(&model.forward(&x).unwrap(), &labels).unwrap();
    let grads = model.backward(&g, |_, _| Ok(())).unwrap();
    let head = model.linears_mut().pop().unwrap();
    let step = grads.layers.last().unwrap().g_w.as_ref().unwrap().scale(cfg.learning_rate);
    let updated: Matrix = head.weight().sub(&step).unwrap();
    *head.weight_mut() = updated;
    let (after, _, _) = softmax_cross_entropy(&model.logits(&x).unwrap(), &labels).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn low_rank_run_costs_less_than_exact() {
    let base = TrainConfig { epochs: 2, dataset: small_task(1.0), ..TrainConfig::default() };
    let exact = run_experiment(&base).unwrap().1;
    for mode in ["lp_l1:2", "lp_linf:2", "lhe:4:2"] {
        let cfg = TrainConfig { bp_mode: mode.parse().unwrap(), ..base.clone() };
        let log = run_experiment(&cfg).unwrap().1;
        assert!(log.cum_backward_flops < exact.cum_backward_flops, "{mode}");
        assert!(log.cum_trained_flops < exact.cum_trained_flops, "{mode}");
    }
}

#[test]
fn mixed_modes_are_bitwise_reproducible() {
    let cfg = TrainConfig {
        epochs: 2,
        model: ModelConfig { hidden: vec![8, 8, 8], ..ModelConfig::default() },
        layer_modes: Some(vec![
            ModeSpec::Lora(2),
            ModeSpec::LbpWht(Strategy::Lhe { rank: 3, profile_steps: 2 }),
            ModeSpec::LbpWht(Strategy::LpL1(2)),
        ]),
        dataset: small_task(1.0),
        ..TrainConfig::default()
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.1.without_timing(), b.1.without_timing());
    for (la, lb) in a.0.linears().iter().zip(b.0.linears()) {
        assert_eq!(la.weight(), lb.weight());
    }
    assert!(a.1.modes[1].starts_with("lbp_wht(lhe"), "{:?}", a.1.modes);
}

#[test]
fn frozen_prefix_keeps_weights_bytes() {
    let cfg = TrainConfig { epochs: 2, frozen_prefix: 2, dataset: small_task(1.0), ..TrainConfig::default() };
    let before = build_model(&cfg).unwrap();
    let (after, log) = run_experiment(&cfg).unwrap();
    for k in 0..2 {
        let a: Vec<u64> = before.linears()[k].weight().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = after.linears()[k].weight().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "layer {k}");
    }
    assert_ne!(before.head().weight(), after.head().weight());
    assert!(log.cum_trained_flops < log.cum_backward_flops);
}
