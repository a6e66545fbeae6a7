//! Training: adapter layers on the tape, gradient checking, optimizers and
//! the two toy tasks (`matrix_fit`, `toy_denoise`).

pub mod denoise;
pub mod matrix_fit;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterLayer, GateMode, GateState, Transform};
use crate::autodiff::{Gradients, Part, Tape, Var};
use crate::error::{FouraError, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::spectral::{Axis, TransformKind};

pub use denoise::{denoise_trajectory, run_toy_denoise, DenoiseTrajectory};
pub use matrix_fit::run_matrix_fit;
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    MatrixFit,
    ToyDenoise,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::MatrixFit => "matrix_fit",
            Task::ToyDenoise => "toy_denoise",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "matrix_fit" => Ok(Task::MatrixFit),
            "toy_denoise" => Ok(Task::ToyDenoise),
            other => Err(format!(
                "unknown task `{other}` (expected matrix_fit|toy_denoise)"
            )),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub rank: usize,
    pub transform: Transform,
    pub axis: Axis,
    /// `None` trains without a gate (LoRA, or FouRA with an all-ones mask).
    pub gate_mode: Option<GateMode>,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub lambda_entropy: f64,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub threshold: f64,
    /// Initial value of the gate's output bias.
    pub gate_bias: f64,
    /// Std of the Gaussian gate initialization.
    pub gate_init_std: f64,
    /// Seed of the frozen base weights.
    pub base_seed: u64,
    /// Seed of the planted target (matrix_fit) or clean-signal basis (toy_denoise).
    pub target_seed: u64,
    /// Rank of the planted task component in matrix_fit.
    pub r_true: usize,
    /// Scale of the planted tail in matrix_fit.
    pub tail_scale: f64,
    pub tail_rank: usize,
    /// Width `k1 = k2` of the matrix_fit layer.
    pub dim: usize,
    /// Tokens per sample.
    pub tokens: usize,
    /// Denoising steps T.
    pub timesteps: usize,
    /// Samples used to capture frozen masks after training.
    pub calib_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::MatrixFit,
            rank: 8,
            transform: Transform::Dct,
            axis: Axis::Embedding,
            gate_mode: Some(GateMode::Soft),
            steps: 2000,
            lr: 1e-3,
            batch: 4,
            seed: 0,
            lambda_entropy: adapter::DEFAULT_ENTROPY_WEIGHT,
            alpha: 1.0,
            optimizer: OptimizerKind::Adam,
            threshold: adapter::DEFAULT_THRESHOLD,
            gate_bias: 0.0,
            gate_init_std: 0.02,
            base_seed: 0,
            target_seed: 1,
            r_true: 2,
            tail_scale: 0.05,
            tail_rank: 6,
            dim: 32,
            tokens: 16,
            timesteps: 20,
            calib_batch: 16,
        }
    }
}

impl TrainConfig {
    /// Checks ranges; errors name the offending field (line 0).
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(FouraError::config(0, field, msg));
        if self.steps < 1 {
            return bad("steps", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.rank < 1 {
            return bad("rank", "must be at least 1");
        }
        if self.batch < 1 {
            return bad("batch", "must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.alpha) {
            return bad("alpha", "must lie in [0, 2]");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        if !(self.lambda_entropy >= 0.0 && self.lambda_entropy.is_finite()) {
            return bad("lambda_entropy", "must be non-negative");
        }
        if !self.gate_bias.is_finite() || !(self.gate_init_std >= 0.0) {
            return bad("gate_bias", "gate initialization must be finite");
        }
        if self.transform == Transform::None && self.gate_mode.is_some() {
            return bad("gate_mode", "transform = none (LoRA) takes no gate");
        }
        if self.tokens < 1 || self.calib_batch < 1 {
            return bad("tokens", "must be at least 1");
        }
        match self.task {
            Task::MatrixFit => {
                if self.dim < 2 {
                    return bad("dim", "must be at least 2");
                }
                if self.rank > self.dim {
                    return bad("rank", "cannot exceed dim");
                }
                if self.r_true > self.dim || self.tail_rank > self.dim {
                    return bad("r_true", "planted ranks cannot exceed dim");
                }
                if !(self.tail_scale >= 0.0 && self.tail_scale.is_finite()) {
                    return bad("tail_scale", "must be non-negative");
                }
            }
            Task::ToyDenoise => {
                if self.timesteps < 1 {
                    return bad("timesteps", "must be at least 1");
                }
                if self.rank > denoise::SIGNAL_DIM {
                    return bad("rank", "cannot exceed the signal width 16");
                }
            }
        }
        Ok(())
    }
}

/// One evaluation record of the toy denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepRecord {
    pub timestep: usize,
    pub layer: usize,
    pub effective_rank: usize,
    pub soft_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    /// `[step][layer]`: effective rank of the batch-majority hard mask.
    pub effective_ranks: Vec<Vec<usize>>,
    /// `[step][layer]`: soft-mask mean over the batch.
    pub soft_means: Vec<Vec<f64>>,
    /// Per-timestep evaluation records (toy_denoise only).
    pub timestep_ranks: Vec<TimestepRecord>,
    pub final_layers: Vec<AdapterLayer>,
    /// Calibrated frozen mask per layer (all-ones when ungated).
    pub frozen_masks: Vec<Vec<bool>>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Trained layers with their gates frozen on the calibrated masks.
    pub fn frozen_layers(&self) -> Result<Vec<AdapterLayer>> {
        self.final_layers
            .iter()
            .zip(&self.frozen_masks)
            .map(|(l, m)| l.frozen_with(m))
            .collect()
    }
}

// Independent PRNG streams derived from the run seeds.
pub(crate) const STREAM_BASE: u64 = 1;
pub(crate) const STREAM_TARGET: u64 = 2;
pub(crate) const STREAM_INIT: u64 = 3;
pub(crate) const STREAM_DATA: u64 = 4;
pub(crate) const STREAM_CALIB: u64 = 5;
pub(crate) const STREAM_EVAL: u64 = 6;

/// Fresh adapter on `w0`: `A ~ N(0, 1/k1)`, `B = 0`, gate per config.
pub(crate) fn init_adapter(cfg: &TrainConfig, w0: Matrix, rng: &mut Rng) -> Result<AdapterLayer> {
    let (k1, k2) = w0.shape();
    let r = cfg.rank;
    let a = rng.gaussian_matrix(r, k1, 1.0 / (k1 as f64).sqrt());
    let b = Matrix::zeros(k2, r);
    let gate = cfg.gate_mode.map(|mode| {
        let mut g = GateState::init(r, mode, rng, cfg.gate_init_std, cfg.gate_bias);
        g.threshold = cfg.threshold;
        g.entropy_weight = cfg.lambda_entropy;
        g
    });
    let layer = AdapterLayer {
        w0,
        a,
        b,
        alpha: cfg.alpha,
        transform: cfg.transform,
        axis: cfg.axis,
        gate,
    };
    layer.validate()?;
    Ok(layer)
}

/// Calibrated frozen mask for each layer.
pub(crate) fn calibrate_all(layers: &[AdapterLayer], inputs: &[Vec<Matrix>]) -> Result<Vec<Vec<bool>>> {
    layers
        .iter()
        .zip(inputs)
        .map(|(l, batch)| adapter::calibrate_frozen_mask(l, batch))
        .collect()
}

// ---------------------------------------------------------------------------
// Layers on the tape

struct GateVars {
    g1: Var,
    g2: Var,
    b1: Var,
    b2: Var,
}

/// Tape handles for a layer's trainable tensors.
pub(crate) struct LayerVars {
    a: Var,
    b: Var,
    gate: Option<GateVars>,
}

pub(crate) struct LayerNode {
    pub out: Var,
    /// Soft mask node when the gate is trainable.
    pub soft: Option<Var>,
}

fn gate_trainable(layer: &AdapterLayer) -> bool {
    layer
        .gate
        .as_ref()
        .is_some_and(|g| g.mode != GateMode::Frozen)
}

pub(crate) fn register_layer(tape: &mut Tape, layer: &AdapterLayer) -> LayerVars {
    let a = tape.param(layer.a.clone());
    let b = tape.param(layer.b.clone());
    let gate = match &layer.gate {
        Some(g) if gate_trainable(layer) => Some(GateVars {
            g1: tape.param(g.g1.clone()),
            g2: tape.param(g.g2.clone()),
            b1: tape.param(Matrix::row_vector(&g.b1)),
            b2: tape.param(Matrix::row_vector(&g.b2)),
        }),
        _ => None,
    };
    LayerVars { a, b, gate }
}

/// Records the layer's forward pass on `z` (`d × k1`).
pub(crate) fn layer_graph(tape: &mut Tape, layer: &AdapterLayer, vars: &LayerVars, z: Var) -> Result<LayerNode> {
    let r = layer.rank();
    let w0 = tape.constant(layer.w0.clone());
    let base = tape.matmul(z, w0)?;
    let at = tape.transpose(vars.a);
    let bt = tape.transpose(vars.b);
    let kind = layer.transform.kind();
    let (re, im) = match kind {
        None => (z, None),
        Some(k) => {
            let re = tape.spectral_forward(z, k, layer.axis, Part::Re)?;
            let im = match k {
                TransformKind::Dft => Some(tape.spectral_forward(z, k, layer.axis, Part::Im)?),
                TransformKind::Dct => None,
            };
            (re, im)
        }
    };
    let lr_re = tape.matmul(re, at)?;
    let lr_im = im.map(|i| tape.matmul(i, at)).transpose()?;

    let (mask, soft) = match (&layer.gate, &vars.gate) {
        (Some(g), Some(gv)) => {
            let v = tape.mean_rows(lr_re);
            let g1t = tape.transpose(gv.g1);
            let g2t = tape.transpose(gv.g2);
            let pre = tape.matmul(v, g1t)?;
            let pre = tape.add_row(pre, gv.b1)?;
            let h = tape.tanh(pre);
            let u = tape.matmul(h, g2t)?;
            let u = tape.add_row(u, gv.b2)?;
            let soft = tape.sigmoid(u);
            let mask = match g.mode {
                GateMode::HardAdaptive => tape.straight_through(soft, g.threshold),
                _ => soft,
            };
            (mask, Some(soft))
        }
        (Some(g), None) => {
            let bits = g
                .frozen_mask
                .as_ref()
                .ok_or_else(|| FouraError::InvalidGateState("frozen mode requires a frozen mask".into()))?;
            let m: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            (tape.constant(Matrix::row_vector(&m)), None)
        }
        (None, _) => (tape.constant(Matrix::row_vector(&vec![1.0; r])), None),
    };
    let scale = tape.scale(mask, layer.alpha);

    let scaled_re = tape.mul_columns(lr_re, scale)?;
    let out_re = tape.matmul(scaled_re, bt)?;
    let out_im = match lr_im {
        Some(i) => {
            let s = tape.mul_columns(i, scale)?;
            Some(tape.matmul(s, bt)?)
        }
        None => None,
    };
    let branch = match kind {
        None => out_re,
        Some(k) => tape.spectral_inverse(out_re, out_im, k, layer.axis)?,
    };
    let out = tape.add(base, branch)?;
    Ok(LayerNode { out, soft })
}

/// Gradients of the layer's trainable tensors, in [`param_slices`] order.
pub(crate) fn layer_grads(grads: &Gradients, vars: &LayerVars, layer: &AdapterLayer) -> Vec<Matrix> {
    let mut out = vec![
        grads.get_or_zeros(vars.a, &layer.a),
        grads.get_or_zeros(vars.b, &layer.b),
    ];
    if let (Some(gv), Some(g)) = (&vars.gate, &layer.gate) {
        out.push(grads.get_or_zeros(gv.g1, &g.g1));
        out.push(grads.get_or_zeros(gv.g2, &g.g2));
        out.push(grads.get_or_zeros(gv.b1, &Matrix::row_vector(&g.b1)));
        out.push(grads.get_or_zeros(gv.b2, &Matrix::row_vector(&g.b2)));
    }
    out
}

/// Mutable views of a layer's trainable tensors.
pub(crate) fn param_slices(layer: &mut AdapterLayer) -> Vec<&mut [f64]> {
    let trainable = gate_trainable(layer);
    let mut out: Vec<&mut [f64]> = vec![layer.a.data_mut(), layer.b.data_mut()];
    if let Some(g) = layer.gate.as_mut().filter(|_| trainable) {
        out.push(g.g1.data_mut());
        out.push(g.g2.data_mut());
        out.push(&mut g.b1);
        out.push(&mut g.b2);
    }
    out
}

const PARAM_NAMES: [&str; 6] = ["a", "b", "g1", "g2", "b1", "b2"];

/// Applies one optimizer step to a set of layers from per-layer gradients.
pub(crate) fn apply_step(
    layers: &mut [AdapterLayer],
    grads: &[Vec<Matrix>],
    state: &mut OptimizerState,
    lr: f64,
    step: usize,
) -> Result<()> {
    let flat_grads: Vec<&[f64]> = grads.iter().flatten().map(|m| m.data()).collect();
    let mut flat_params: Vec<&mut [f64]> = layers.iter_mut().flat_map(param_slices).collect();
    optimizer_step(&mut flat_params, &flat_grads, state, lr, step)
}

/// Batch-majority hard mask and mean soft value from per-sample soft masks.
pub(crate) fn summarize_masks(softs: &[Vec<f64>], threshold: f64, rank: usize) -> (usize, f64) {
    if softs.is_empty() {
        return (rank, 1.0);
    }
    let n = softs.len();
    let mut votes = vec![0usize; rank];
    let mut total = 0.0;
    for s in softs {
        for (v, &m) in votes.iter_mut().zip(s) {
            *v += usize::from(m > threshold);
            total += m;
        }
    }
    let eff = votes.iter().filter(|&&v| 2 * v > n).count();
    (eff, total / (n * rank) as f64)
}

/// Effective rank and soft mean for layers that are not trained through a gate.
pub(crate) fn static_mask_summary(layer: &AdapterLayer) -> (usize, f64) {
    match &layer.gate {
        Some(g) if g.mode == GateMode::Frozen => {
            let m = g.frozen_mask.as_deref().unwrap_or(&[]);
            let on = m.iter().filter(|&&b| b).count();
            (on, on as f64 / layer.rank() as f64)
        }
        _ => (layer.rank(), 1.0),
    }
}

// ---------------------------------------------------------------------------
// Gradient check

pub const GRAD_CHECK_TOL: f64 = 1e-5;

/// Denominator floor of the relative error, so entries whose true gradient is
/// (numerically) zero are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name of the scalar with the largest error, e.g. `b[3,1]`.
    pub worst: String,
    pub n_scalars: usize,
}

/// Max relative error between tape gradients and central differences of
/// `‖forward(z)‖²/2` over every trainable scalar.
pub fn grad_check(layer: &AdapterLayer, z_in: &Matrix, eps: f64) -> Result<f64> {
    Ok(grad_check_report(layer, z_in, eps, false)?.max_rel_err)
}

/// [`grad_check`] with details. `corrupt` perturbs one tape gradient, for
/// exercising the failure path.
pub fn grad_check_report(layer: &AdapterLayer, z_in: &Matrix, eps: f64, corrupt: bool) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(FouraError::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    layer.validate()?;
    if let Some(g) = &layer.gate {
        if g.mode == GateMode::HardAdaptive {
            return Err(FouraError::NonDifferentiable(g.mode.as_str().into()));
        }
    }
    let mut tape = Tape::new();
    let vars = register_layer(&mut tape, layer);
    let z = tape.constant(z_in.clone());
    let node = layer_graph(&mut tape, layer, &vars, z)?;
    let loss = tape.half_sum_squares(node.out);
    let grads = tape.backward(loss)?;
    let mut analytic = layer_grads(&grads, &vars, layer);
    if corrupt {
        let g = &mut analytic[0];
        let v = g.get(0, 0);
        g.set(0, 0, v * 1.5 + 1.0);
    }

    let objective = |l: &AdapterLayer| -> Result<f64> {
        let (out, _) = adapter::forward(l, z_in)?;
        Ok(0.5 * out.sum_squares())
    };

    let mut probe = layer.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        n_scalars: 0,
    };
    for (t, tape_grad) in analytic.iter().enumerate() {
        let cols = tape_grad.cols();
        for idx in 0..tape_grad.data().len() {
            let orig = param_slices(&mut probe)[t][idx];
            param_slices(&mut probe)[t][idx] = orig + eps;
            let up = objective(&probe)?;
            param_slices(&mut probe)[t][idx] = orig - eps;
            let down = objective(&probe)?;
            param_slices(&mut probe)[t][idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = tape_grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.n_scalars += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = format!("{}[{},{}]", PARAM_NAMES[t], idx / cols, idx % cols);
            }
        }
    }
    Ok(report)
}
