use foura_core::adapter::{GateMode, Transform};
use foura_core::train::denoise::{self, predict_eps_base};
use foura_core::train::{run_matrix_fit, run_toy_denoise, Task, TrainConfig};
use foura_core::FouraError;

fn denoise_cfg() -> TrainConfig {
    TrainConfig {
        task: Task::ToyDenoise,
        transform: Transform::Dct,
        gate_mode: Some(GateMode::HardAdaptive),
        rank: 8,
        timesteps: 20,
        steps: 1000,
        ..TrainConfig::default()
    }
}

#[test]
fn nothing_to_learn_stays_at_zero_loss() {
    for (transform, gate) in [(Transform::None, None), (Transform::Dct, Some(GateMode::Soft))] {
        let cfg = TrainConfig {
            r_true: 0,
            tail_scale: 0.0,
            steps: 200,
            transform,
            gate_mode: gate,
            ..TrainConfig::default()
        };
        let trace = run_matrix_fit(&cfg).unwrap();
        assert!(trace.final_loss() < 1e-6, "{transform:?}: {}", trace.final_loss());
        let b = &trace.final_layers[0].b;
        assert!(b.max_abs() < 1e-6);
    }
}

#[test]
fn soft_gate_prunes_and_fits() {
    let cfg = TrainConfig {
        rank: 8,
        r_true: 2,
        steps: 2000,
        lambda_entropy: 0.1,
        ..TrainConfig::default()
    };
    let trace = run_matrix_fit(&cfg).unwrap();
    let final_rank = trace.effective_ranks.last().unwrap()[0];
    assert!(final_rank < 8, "effective rank {final_rank}");
    assert!(trace.final_loss() < 1e-3, "loss {}", trace.final_loss());
    assert!(trace.frozen_masks[0].iter().filter(|&&b| b).count() < 8);
}

#[test]
fn identical_configs_give_identical_losses() {
    let cfg = TrainConfig {
        steps: 150,
        seed: 7,
        transform: Transform::Dft,
        ..TrainConfig::default()
    };
    let a = run_matrix_fit(&cfg).unwrap();
    let b = run_matrix_fit(&cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.losses), bits(&b.losses));
    let c = run_matrix_fit(&TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(bits(&a.losses), bits(&c.losses));
}

#[test]
fn wrong_task_and_bad_config_are_rejected() {
    assert!(run_toy_denoise(&TrainConfig::default()).is_err());
    let bad = TrainConfig { steps: 0, ..TrainConfig::default() };
    assert!(matches!(run_matrix_fit(&bad), Err(FouraError::ConfigError { .. })));
    let diverge = TrainConfig {
        lr: 1e12,
        steps: 200,
        optimizer: foura_core::train::OptimizerKind::Sgd,
        transform: Transform::None,
        gate_mode: None,
        ..TrainConfig::default()
    };
    match run_matrix_fit(&diverge) {
        Err(e) => assert!(e.is_numerical(), "{e}"),
        Ok(t) => panic!("expected divergence, final loss {}", t.final_loss()),
    }
}

#[test]
fn frozen_full_mask_keeps_nominal_rank() {
    let cfg = TrainConfig {
        gate_mode: Some(GateMode::Frozen),
        steps: 50,
        ..denoise_cfg()
    };
    let trace = run_toy_denoise(&cfg).unwrap();
    assert_eq!(trace.timestep_ranks.len(), 2 * 20);
    assert!(trace.timestep_ranks.iter().all(|r| r.effective_rank == 8));
}

#[test]
fn all_zero_frozen_mask_gives_rank_zero() {
    let cfg = denoise_cfg();
    let layers: Vec<_> = denoise::initial_layers(&cfg)
        .unwrap()
        .iter()
        .map(|l| l.frozen_with(&[false; 8]).unwrap())
        .collect();
    let (x_start, _) = denoise::eval_start(&cfg).unwrap();
    let traj = denoise::denoise_trajectory(&layers, &x_start, 20).unwrap();
    assert_eq!(traj.reports.len(), 20);
    assert!(traj.reports.iter().flatten().all(|r| r.effective_rank == 0));
}

#[test]
fn trained_adaptive_gate_varies_over_timesteps() {
    let trace = run_toy_denoise(&TrainConfig { seed: 1, ..denoise_cfg() }).unwrap();
    let mut ranks: Vec<usize> = trace.timestep_ranks.iter().map(|r| r.effective_rank).collect();
    assert!(ranks.iter().all(|&r| r <= 8));
    ranks.sort_unstable();
    ranks.dedup();
    assert!(ranks.len() >= 2, "{ranks:?}");
}

#[test]
fn zero_strength_denoiser_is_the_base_model() {
    let cfg = TrainConfig { steps: 200, ..denoise_cfg() };
    let trace = run_toy_denoise(&cfg).unwrap();
    let layers: Vec<_> = trace
        .final_layers
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.alpha = 0.0;
            l
        })
        .collect();
    let (x_start, _) = denoise::eval_start(&cfg).unwrap();
    let traj = denoise::denoise_trajectory(&layers, &x_start, 20).unwrap();
    for ((t, state), eps) in traj.timesteps.iter().zip(&traj.states).zip(&traj.eps) {
        let base = predict_eps_base(&layers, state, *t).unwrap();
        assert!(eps.max_abs_diff(&base) < 1e-12, "t = {t}");
    }
}
