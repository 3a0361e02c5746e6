//! Train, checkpoint, roll out and evaluate a small game through the public API.

use bankmfg::evaluation::{
    best_response_major, best_response_minor, initial_representatives, value_estimate, Rollout, RolloutMode,
};
use bankmfg::market::ActionGrid;
use bankmfg::trainer::{Checkpoint, Frozen, PolicyCheckpoint, TrainConfig, Trainer};
use bankmfg::{Game64, Scalar};

fn small_game() -> Game64 {
    let mut game = Game64::default();
    game.params.horizon = 3;
    game.actions = ActionGrid::uniform(0.025, 0.035, 5).unwrap();
    game
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        outer_iterations: 3,
        inner_iterations: 15,
        batch_size: 16,
        width: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn train<T: Scalar>(seed: u64) -> (Trainer<T>, Vec<(f64, f64)>) {
    let mut trainer = Trainer::new(small_game().cast::<T>(), small_config(seed)).unwrap();
    let mut losses = Vec::new();
    trainer
        .run(|_, report| {
            losses.extend(report.records.iter().map(|r| (r.loss_major, r.loss_minor)));
            Ok(())
        })
        .unwrap();
    (trainer, losses)
}

fn check_pipeline<T: Scalar>() {
    let (trainer, losses) = train::<T>(11);
    assert_eq!(trainer.completed(), 3);
    assert_eq!(losses.len(), 45);
    assert!(losses.iter().all(|&(a, b)| a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()));

    let text = trainer.policy_checkpoint().to_json().unwrap();
    let policy: PolicyCheckpoint<f64> = PolicyCheckpoint::<T>::from_json(&text).unwrap().cast();
    assert_eq!(policy.completed_outer, 3);

    let game = small_game();
    let frozen = Frozen::new(&game, &policy.major, &policy.minor).unwrap();
    let (reps, weights) = initial_representatives(&game);
    let paths = Rollout::new(&game, &frozen.major, &frozen.minor)
        .tracking(reps.clone())
        .full_tree()
        .unwrap();
    assert_eq!(paths.len(), 9);
    let mass: f64 = paths.iter().map(|p| p.probability).sum();
    assert!((mass - 1.0).abs() < 1e-12);
    for p in &paths {
        assert!(p.max_mass_defect(&game) < 1e-9);
    }
    let values = value_estimate(&paths, &weights, game.params.gamma, RolloutMode::FullTree);

    let minor = best_response_minor(&game, &frozen.major, &frozen.minor, &reps, &weights, 9).unwrap();
    assert!(minor.gap >= -1e-12);
    // the exact on-policy value is the rollout value of the tracked minors
    assert!((minor.on_policy_exact - values.minor).abs() < 1e-12);
    let major = best_response_major(&game, &frozen.major, &frozen.minor, 3, 1 << 20).unwrap();
    assert!(major.gap >= -1e-12);
    assert!((major.on_policy - values.major).abs() < 1e-12);
}

#[test]
fn pipeline_in_f64() {
    check_pipeline::<f64>();
}

#[test]
fn pipeline_in_f32() {
    check_pipeline::<f32>();
}

#[test]
fn seeds_control_the_run() {
    let (a, la) = train::<f64>(3);
    let (b, lb) = train::<f64>(3);
    let (_, lc) = train::<f64>(4);
    assert_eq!(la, lb);
    assert_ne!(la, lc);
    assert_eq!(a.checkpoint().to_json().unwrap(), b.checkpoint().to_json().unwrap());
}

#[test]
fn state_file_resumes_to_the_same_result() {
    let (full, _) = train::<f32>(5);

    let mut short = Trainer::new(
        small_game().cast::<f32>(),
        TrainConfig {
            outer_iterations: 1,
            ..small_config(5)
        },
    )
    .unwrap();
    short.run(|_, _| Ok(())).unwrap();
    let mut state = Checkpoint::<f32>::from_json(&short.checkpoint().to_json().unwrap()).unwrap();
    state.config.outer_iterations = 3;
    let mut resumed = Trainer::from_checkpoint(small_game().cast::<f32>(), state).unwrap();
    resumed.run(|_, _| Ok(())).unwrap();
    assert_eq!(
        resumed.policy_checkpoint().to_json().unwrap(),
        full.policy_checkpoint().to_json().unwrap()
    );
}
