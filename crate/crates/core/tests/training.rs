use prpo_core::{
    eval_accuracy, eval_tasks, EvalMode, FusionConfig, Method, OracleConfig, PriorMode,
    TaskConfig, TrainConfig, Trainer, WarmStart,
};
use prpo_core::policy::PolicyParams;

fn toy(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        seed,
        lr: 3.0,
        epochs: 10,
        early_stop_patience: 0,
        fusion: FusionConfig {
            min_gap: 2,
            ..FusionConfig::default()
        },
        warm_start: WarmStart {
            seed,
            ..WarmStart::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn identical_configs_give_identical_metrics() {
    let cfg = TrainConfig {
        epochs: 3,
        updates_per_epoch: 4,
        ..toy(Method::Prpo, 5)
    };
    let a = Trainer::new(cfg.clone()).unwrap().train().unwrap();
    let b = Trainer::new(cfg).unwrap().train().unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train_accuracy.to_bits(), y.train_accuracy.to_bits());
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        assert_eq!(x.mean_entropy.to_bits(), y.mean_entropy.to_bits());
    }
}

#[test]
fn outcome_anchored_methods_keep_length_stable() {
    for method in [Method::Grpo, Method::Prpo, Method::PrmAvg] {
        let history = Trainer::new(toy(method, 1)).unwrap().train().unwrap();
        assert_eq!(history.len(), 10);
        let first = history[0].mean_gen_length;
        for m in &history {
            let r = m.mean_gen_length / first;
            assert!((0.5..=2.0).contains(&r), "{method} epoch {}: ratio {r}", m.epoch);
        }
    }
}

#[test]
fn process_only_on_hard_prefix_shortens_responses() {
    let cfg = TrainConfig {
        oracle: OracleConfig {
            hard_prefix: true,
            ..OracleConfig::default()
        },
        ..toy(Method::ProcessOnly, 2)
    };
    let mut t = Trainer::new(cfg).unwrap();
    let history = t.train().unwrap();
    assert!(t.update_history.len() >= 200);
    let first = history.first().unwrap().mean_gen_length;
    let last = history.last().unwrap().mean_gen_length;
    assert!(last < first, "{first} -> {last}");
}

#[test]
#[ignore = "collapse_rate peaks and then falls once the policy has collapsed; see notes"]
fn process_only_relative_collapse_rate_rises() {
    let cfg = TrainConfig {
        oracle: OracleConfig {
            hard_prefix: true,
            ..OracleConfig::default()
        },
        fusion: FusionConfig {
            min_gap: 2,
            prior_mode: PriorMode::Relative,
            ..FusionConfig::default()
        },
        ..toy(Method::ProcessOnly, 0)
    };
    let history = Trainer::new(cfg).unwrap().train().unwrap();
    for w in history.windows(2) {
        assert!(
            w[1].collapse_rate > w[0].collapse_rate,
            "epoch {}: {} -> {}",
            w[1].epoch,
            w[0].collapse_rate,
            w[1].collapse_rate
        );
    }
}

#[test]
fn uniform_answers_score_one_in_ten() {
    // well-formed completions whose digits, answer included, are uniform
    let policy = PolicyParams::warm_start(&WarmStart {
        format: 30.0,
        skill: 0.0,
        spread: 0.0,
        distractor: 0.0,
        answer: 0.0,
        ..WarmStart::default()
    });
    let n = 4000;
    let tasks = eval_tasks(&TaskConfig::default(), n, 3);
    let mode = EvalMode::Sampled {
        n: 1,
        temperature: 1.0,
        top_p: 1.0,
        seed: 42,
    };
    let acc = eval_accuracy(&policy, &tasks, 32, mode).unwrap().accuracy;
    let se = (0.1f64 * 0.9 / n as f64).sqrt();
    assert!((acc - 0.1).abs() < 3.0 * se, "accuracy {acc}");
}

#[test]
fn cold_sampling_matches_greedy() {
    let policy = PolicyParams::warm_start(&WarmStart {
        skill: 1.0,
        spread: 2.0,
        ..WarmStart::default()
    });
    let tasks = eval_tasks(&TaskConfig::default(), 300, 8);
    let greedy = eval_accuracy(&policy, &tasks, 32, EvalMode::Greedy).unwrap();
    assert!(greedy.accuracy > 0.0 && greedy.accuracy < 1.0);
    let cold = EvalMode::Sampled {
        n: 1,
        temperature: 1e-6,
        top_p: 1.0,
        seed: 42,
    };
    let sampled = eval_accuracy(&policy, &tasks, 32, cold).unwrap();
    assert_eq!(sampled.accuracy, greedy.accuracy);
    assert_eq!(sampled.pass_at_n, greedy.accuracy);
}

#[test]
fn zero_epochs_leave_no_history() {
    let history = Trainer::new(TrainConfig {
        epochs: 0,
        ..toy(Method::Prpo, 0)
    })
    .unwrap()
    .train()
    .unwrap();
    assert!(history.is_empty());
}
