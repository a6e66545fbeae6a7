//! Toy denoiser: a two-layer linear ε-predictor over 16-dim signals.
//!
//! Clean samples lie in a planted 3-dim subspace, `x0 = c·Pᵀ`. A sample at
//! timestep `t ∈ 1..=T` is `x_t = x0 + (t/T)·n` with `n ~ N(0, I)`, and the
//! model predicts the corruption `x_t − x0` from `[x_t | emb(t)]`. Sampling
//! runs `x_{t−1} = x_t − ε̂(x_t, t)/t`, which lands on `x0` for a perfect
//! predictor. The base weights are near-identity, so the frozen model
//! predicts `ε̂ ≈ x_t`; adapters on both layers learn the correction.

use crate::adapter::{self, AdapterLayer, GateMode, MaskReport};
use crate::autodiff::Tape;
use crate::error::{FouraError, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

use super::matrix_fit::random_orthonormal;
use super::{
    apply_step, calibrate_all, init_adapter, layer_grads, layer_graph, register_layer,
    static_mask_summary, summarize_masks, OptimizerState, Task, TimestepRecord, TrainConfig,
    TrainTrace, STREAM_BASE, STREAM_CALIB, STREAM_DATA, STREAM_EVAL, STREAM_INIT, STREAM_TARGET,
};

pub const SIGNAL_DIM: usize = 16;
pub const EMBED_DIM: usize = 16;
pub const CLEAN_RANK: usize = 3;
const BASE_NOISE: f64 = 0.01;

/// Sinusoidal embedding of timestep `t`: interleaved `sin, cos` pairs at
/// geometrically spaced frequencies.
pub fn timestep_embedding(t: usize) -> Vec<f64> {
    let half = EMBED_DIM / 2;
    let mut out = vec![0.0; EMBED_DIM];
    for j in 0..half {
        let freq = 100f64.powf(-(j as f64) / half as f64);
        out[2 * j] = (t as f64 * freq).sin();
        out[2 * j + 1] = (t as f64 * freq).cos();
    }
    out
}

/// `[x_t | emb(t)]`, the embedding repeated on every token.
pub fn denoiser_input(x_t: &Matrix, t: usize) -> Result<Matrix> {
    let emb = timestep_embedding(t);
    let e = Matrix::from_fn(x_t.rows(), EMBED_DIM, |_, j| emb[j]);
    x_t.hstack(&e)
}

/// Frozen base weights: `W1 ≈ I₃₂` and `W2 ≈ [I₁₆; 0]`, each plus small noise.
pub fn base_weights(cfg: &TrainConfig) -> (Matrix, Matrix) {
    let mut rng = Rng::derive(cfg.base_seed, STREAM_BASE);
    let width = SIGNAL_DIM + EMBED_DIM;
    let w1 = Matrix::from_fn(width, width, |i, j| f64::from(u8::from(i == j)))
        .add(&rng.gaussian_matrix(width, width, BASE_NOISE))
        .expect("same shape");
    let w2 = Matrix::from_fn(width, SIGNAL_DIM, |i, j| f64::from(u8::from(i == j)))
        .add(&rng.gaussian_matrix(width, SIGNAL_DIM, BASE_NOISE))
        .expect("same shape");
    (w1, w2)
}

/// Planted clean-signal basis `P` (`16 × 3`, orthonormal columns).
pub fn clean_basis(cfg: &TrainConfig) -> Matrix {
    random_orthonormal(&mut Rng::derive(cfg.target_seed, STREAM_TARGET), SIGNAL_DIM, CLEAN_RANK)
}

/// A clean sample and a noise draw, each `tokens × 16`.
fn draw_pair(rng: &mut Rng, basis: &Matrix, tokens: usize) -> Result<(Matrix, Matrix)> {
    let c = rng.gaussian_matrix(tokens, CLEAN_RANK, 1.0);
    let x0 = c.matmul(&basis.transpose())?;
    let n = rng.gaussian_matrix(tokens, SIGNAL_DIM, 1.0);
    Ok((x0, n))
}

fn noised(x0: &Matrix, n: &Matrix, t: usize, timesteps: usize) -> Result<Matrix> {
    x0.add(&n.scale(t as f64 / timesteps as f64))
}

/// Adapter-equipped ε̂ for one input; returns the prediction and one mask
/// report per layer.
pub fn predict_eps(layers: &[AdapterLayer], x_t: &Matrix, t: usize) -> Result<(Matrix, Vec<MaskReport>)> {
    let mut h = denoiser_input(x_t, t)?;
    let mut reports = Vec::with_capacity(layers.len());
    for layer in layers {
        let (out, rep) = adapter::forward(layer, &h)?;
        reports.push(rep.unwrap_or_else(|| MaskReport::from_binary(&vec![true; layer.rank()])));
        h = out;
    }
    Ok((h, reports))
}

/// ε̂ of the frozen base model alone.
pub fn predict_eps_base(layers: &[AdapterLayer], x_t: &Matrix, t: usize) -> Result<Matrix> {
    let mut h = denoiser_input(x_t, t)?;
    for layer in layers {
        h = layer.base_forward(&h)?;
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct DenoiseTrajectory {
    /// Timesteps visited, `T, T−1, ..., 1`.
    pub timesteps: Vec<usize>,
    /// `x_T, ..., x_0` (one more entry than `timesteps`).
    pub states: Vec<Matrix>,
    pub eps: Vec<Matrix>,
    /// `[step][layer]`.
    pub reports: Vec<Vec<MaskReport>>,
}

/// Runs `x_{t−1} = x_t − ε̂(x_t, t)/t` from `x_start` at `t = timesteps`.
pub fn denoise_trajectory(layers: &[AdapterLayer], x_start: &Matrix, timesteps: usize) -> Result<DenoiseTrajectory> {
    if timesteps < 1 {
        return Err(FouraError::invalid("need at least one timestep"));
    }
    let mut traj = DenoiseTrajectory {
        timesteps: Vec::with_capacity(timesteps),
        states: vec![x_start.clone()],
        eps: Vec::with_capacity(timesteps),
        reports: Vec::with_capacity(timesteps),
    };
    let mut x = x_start.clone();
    for t in (1..=timesteps).rev() {
        let (eps, reps) = predict_eps(layers, &x, t)?;
        x = x.sub(&eps.scale(1.0 / t as f64))?;
        traj.timesteps.push(t);
        traj.states.push(x.clone());
        traj.eps.push(eps);
        traj.reports.push(reps);
    }
    Ok(traj)
}

/// Initial adapters for both layers.
pub fn initial_layers(cfg: &TrainConfig) -> Result<Vec<AdapterLayer>> {
    let (w1, w2) = base_weights(cfg);
    let mut rng = Rng::derive(cfg.seed, STREAM_INIT);
    Ok(vec![init_adapter(cfg, w1, &mut rng)?, init_adapter(cfg, w2, &mut rng)?])
}

/// Eval trajectory start: a seeded clean sample plus full-strength noise.
pub fn eval_start(cfg: &TrainConfig) -> Result<(Matrix, Matrix)> {
    let basis = clean_basis(cfg);
    let (x0, n) = draw_pair(&mut Rng::derive(cfg.seed, STREAM_EVAL), &basis, cfg.tokens)?;
    Ok((noised(&x0, &n, cfg.timesteps, cfg.timesteps)?, x0))
}

pub fn run_toy_denoise(cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if cfg.task != Task::ToyDenoise {
        return Err(FouraError::invalid("run_toy_denoise needs task = toy_denoise"));
    }
    let basis = clean_basis(cfg);
    let mut layers = initial_layers(cfg)?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut data = Rng::derive(cfg.seed, STREAM_DATA);
    let big_t = cfg.timesteps;
    let n_layers = layers.len();

    let mut trace = TrainTrace {
        losses: Vec::with_capacity(cfg.steps),
        effective_ranks: Vec::with_capacity(cfg.steps),
        soft_means: Vec::with_capacity(cfg.steps),
        timestep_ranks: Vec::new(),
        final_layers: Vec::new(),
        frozen_masks: Vec::new(),
    };

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let vars: Vec<_> = layers.iter().map(|l| register_layer(&mut tape, l)).collect();
        let mut fit_terms = Vec::with_capacity(cfg.batch);
        let mut ent_terms = Vec::new();
        let mut softs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_layers];
        for _ in 0..cfg.batch {
            let t = 1 + data.below(big_t);
            let (x0, n) = draw_pair(&mut data, &basis, cfg.tokens)?;
            let x_t = noised(&x0, &n, t, big_t)?;
            let target = n.scale(t as f64 / big_t as f64);
            let mut h = tape.constant(denoiser_input(&x_t, t)?);
            for (li, (layer, v)) in layers.iter().zip(&vars).enumerate() {
                let node = layer_graph(&mut tape, layer, v, h)?;
                if let Some(s) = node.soft {
                    softs[li].push(tape.value(s).data().to_vec());
                    let e = tape.entropy(s)?;
                    ent_terms.push(tape.scale(e, cfg.lambda_entropy));
                }
                h = node.out;
            }
            fit_terms.push(tape.mse(h, &target)?);
        }
        let fit = tape.sum_scalars(&fit_terms)?;
        let fit = tape.scale(fit, 1.0 / cfg.batch as f64);
        let objective = if ent_terms.is_empty() {
            fit
        } else {
            let ent = tape.sum_scalars(&ent_terms)?;
            let ent = tape.scale(ent, 1.0 / cfg.batch as f64);
            tape.add(fit, ent)?
        };
        if !tape.scalar(objective).is_finite() {
            return Err(FouraError::TrainingDiverged {
                step,
                reason: format!("loss is {}", tape.scalar(objective)),
            });
        }
        trace.losses.push(tape.scalar(fit));
        let (effs, means): (Vec<usize>, Vec<f64>) = layers
            .iter()
            .zip(&softs)
            .map(|(l, s)| {
                if s.is_empty() {
                    static_mask_summary(l)
                } else {
                    summarize_masks(s, cfg.threshold, cfg.rank)
                }
            })
            .unzip();
        trace.effective_ranks.push(effs);
        trace.soft_means.push(means);

        let grads = tape.backward(objective)?;
        let g: Vec<_> = layers.iter().zip(&vars).map(|(l, v)| layer_grads(&grads, v, l)).collect();
        apply_step(&mut layers, &g, &mut opt, cfg.lr, step)?;
    }

    // Per-timestep masks along one seeded sampling trajectory.
    let (x_start, _) = eval_start(cfg)?;
    let traj = denoise_trajectory(&layers, &x_start, big_t)?;
    for (t, reps) in traj.timesteps.iter().zip(&traj.reports) {
        for (li, rep) in reps.iter().enumerate() {
            trace.timestep_ranks.push(TimestepRecord {
                timestep: *t,
                layer: li,
                effective_rank: rep.effective_rank,
                soft_mean: rep.soft_mean(),
            });
        }
    }

    // Calibration inputs for each layer: the activations it sees on a
    // seeded batch spread over all timesteps.
    let mut calib = Rng::derive(cfg.seed, STREAM_CALIB);
    let mut inputs: Vec<Vec<Matrix>> = vec![Vec::new(); n_layers];
    for i in 0..cfg.calib_batch {
        let t = 1 + i % big_t;
        let (x0, n) = draw_pair(&mut calib, &basis, cfg.tokens)?;
        let mut h = denoiser_input(&noised(&x0, &n, t, big_t)?, t)?;
        for (li, layer) in layers.iter().enumerate() {
            inputs[li].push(h.clone());
            h = adapter::forward(layer, &h)?.0;
        }
    }
    trace.frozen_masks = calibrate_all(&layers, &inputs)?;
    trace.final_layers = layers;
    Ok(trace)
}

/// Mean squared error between the sampler's final state and the clean sample.
pub fn reconstruction_mse(layers: &[AdapterLayer], cfg: &TrainConfig) -> Result<f64> {
    let (x_start, x0) = eval_start(cfg)?;
    let traj = denoise_trajectory(layers, &x_start, cfg.timesteps)?;
    let last = traj.states.last().expect("non-empty");
    let diff = last.sub(&x0)?;
    Ok(diff.sum_squares() / diff.data().len() as f64)
}

/// True when every layer's gate (if any) is in frozen mode.
pub fn all_frozen(layers: &[AdapterLayer]) -> bool {
    layers
        .iter()
        .all(|l| l.gate.as_ref().is_none_or(|g| g.mode == GateMode::Frozen))
}
