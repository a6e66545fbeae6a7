//! Matrix-fit task: learn a planted weight update from input/output pairs.
//!
//! The base weight is `W0 ~ N(0, 1/k)`. The target is `W* = W0 + Δ*`, where
//! `Δ*` is a random rank-`r_true` task component with singular values
//! `1, 0.8, 0.64, ...` plus a weaker tail of rank `tail_rank` along the
//! leading singular directions of `W0`. Batches of Gaussian tokens `z` are
//! regressed onto `z·W*`.

use crate::adapter::AdapterLayer;
use crate::autodiff::Tape;
use crate::error::{FouraError, Result};
use crate::linalg;
use crate::matrix::Matrix;
use crate::rng::Rng;

use super::{
    apply_step, calibrate_all, init_adapter, layer_grads, layer_graph, register_layer,
    static_mask_summary, summarize_masks, OptimizerState, Task, TrainConfig, TrainTrace,
    STREAM_BASE, STREAM_CALIB, STREAM_DATA, STREAM_INIT, STREAM_TARGET,
};

/// Decay of successive planted singular values.
const SIGMA_DECAY: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct MatrixFitProblem {
    pub w0: Matrix,
    pub delta_star: Matrix,
}

impl MatrixFitProblem {
    pub fn target(&self) -> Result<Matrix> {
        self.w0.add(&self.delta_star)
    }
}

/// `n × r` matrix with orthonormal columns (Gram–Schmidt on Gaussians).
pub fn random_orthonormal(rng: &mut Rng, n: usize, r: usize) -> Matrix {
    assert!(r <= n);
    let mut q = Matrix::zeros(n, r);
    let mut j = 0;
    while j < r {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for p in 0..j {
                let dot: f64 = (0..n).map(|i| q.get(i, p) * v[i]).sum();
                for (i, x) in v.iter_mut().enumerate() {
                    *x -= dot * q.get(i, p);
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for (i, x) in v.iter().enumerate() {
            q.set(i, j, x / norm);
        }
        j += 1;
    }
    q
}

pub fn base_weight(cfg: &TrainConfig) -> Matrix {
    let k = cfg.dim;
    Rng::derive(cfg.base_seed, STREAM_BASE).gaussian_matrix(k, k, 1.0 / (k as f64).sqrt())
}

pub fn planted_delta(cfg: &TrainConfig, w0: &Matrix) -> Result<Matrix> {
    let k = cfg.dim;
    let mut rng = Rng::derive(cfg.target_seed, STREAM_TARGET);
    let mut delta = Matrix::zeros(k, k);
    let add_outer = |delta: &mut Matrix, s: f64, u: &[f64], v: &[f64]| {
        for i in 0..k {
            for j in 0..k {
                let x = delta.get(i, j) + s * u[i] * v[j];
                delta.set(i, j, x);
            }
        }
    };
    if cfg.r_true > 0 {
        let u = random_orthonormal(&mut rng, k, cfg.r_true);
        let v = random_orthonormal(&mut rng, k, cfg.r_true);
        for i in 0..cfg.r_true {
            add_outer(&mut delta, SIGMA_DECAY.powi(i as i32), &u.col(i), &v.col(i));
        }
    }
    if cfg.tail_scale > 0.0 && cfg.tail_rank > 0 {
        let base = linalg::svd(w0)?;
        for j in 0..cfg.tail_rank {
            let s = cfg.tail_scale;
            add_outer(&mut delta, s, &base.u.col(j), &base.v.col(j));
        }
    }
    Ok(delta)
}

pub fn problem(cfg: &TrainConfig) -> Result<MatrixFitProblem> {
    let w0 = base_weight(cfg);
    let delta_star = planted_delta(cfg, &w0)?;
    Ok(MatrixFitProblem { w0, delta_star })
}

/// The adapter a run starts from.
pub fn initial_layer(cfg: &TrainConfig, w0: Matrix) -> Result<AdapterLayer> {
    init_adapter(cfg, w0, &mut Rng::derive(cfg.seed, STREAM_INIT))
}

/// Mean squared error of `layer` against `z·w_star` over a batch.
pub fn fit_loss(layer: &AdapterLayer, w_star: &Matrix, batch: &[Matrix]) -> Result<f64> {
    let mut total = 0.0;
    for z in batch {
        let (out, _) = crate::adapter::forward(layer, z)?;
        let diff = out.sub(&z.matmul(w_star)?)?;
        total += diff.sum_squares() / diff.data().len() as f64;
    }
    Ok(total / batch.len() as f64)
}

pub fn run_matrix_fit(cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if cfg.task != Task::MatrixFit {
        return Err(FouraError::invalid("run_matrix_fit needs task = matrix_fit"));
    }
    let prob = problem(cfg)?;
    let w_star = prob.target()?;
    let mut layer = initial_layer(cfg, prob.w0.clone())?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut data = Rng::derive(cfg.seed, STREAM_DATA);
    let (d, k) = (cfg.tokens, cfg.dim);

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
        let vars = register_layer(&mut tape, &layer);
        let mut fit_terms = Vec::with_capacity(cfg.batch);
        let mut ent_terms = Vec::new();
        let mut softs = Vec::new();
        for _ in 0..cfg.batch {
            let z = data.gaussian_matrix(d, k, 1.0);
            let target = z.matmul(&w_star)?;
            let zv = tape.constant(z);
            let node = layer_graph(&mut tape, &layer, &vars, zv)?;
            fit_terms.push(tape.mse(node.out, &target)?);
            if let Some(s) = node.soft {
                softs.push(tape.value(s).data().to_vec());
                let h = tape.entropy(s)?;
                ent_terms.push(tape.scale(h, cfg.lambda_entropy));
            }
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
        let loss = tape.scalar(fit);
        if !tape.scalar(objective).is_finite() {
            return Err(FouraError::TrainingDiverged {
                step,
                reason: format!("loss is {}", tape.scalar(objective)),
            });
        }
        trace.losses.push(loss);
        let (eff, mean) = if softs.is_empty() {
            static_mask_summary(&layer)
        } else {
            summarize_masks(&softs, cfg.threshold, cfg.rank)
        };
        trace.effective_ranks.push(vec![eff]);
        trace.soft_means.push(vec![mean]);

        let grads = tape.backward(objective)?;
        let g = layer_grads(&grads, &vars, &layer);
        apply_step(std::slice::from_mut(&mut layer), &[g], &mut opt, cfg.lr, step)?;
    }

    let mut calib = Rng::derive(cfg.seed, STREAM_CALIB);
    let batch: Vec<Matrix> = (0..cfg.calib_batch)
        .map(|_| calib.gaussian_matrix(d, k, 1.0))
        .collect();
    trace.frozen_masks = calibrate_all(std::slice::from_ref(&layer), &[batch])?;
    trace.final_layers = vec![layer];
    Ok(trace)
}
