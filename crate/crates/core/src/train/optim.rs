//! SGD and Adam over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{FouraError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd|adam)")),
        }
    }
}

/// Optimizer state: Adam moments per parameter tensor and the step count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// One update of every parameter tensor in place. `step` is only used to
/// label a divergence error.
pub fn optimizer_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    step: usize,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(FouraError::shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(FouraError::shape("parameter and gradient lengths differ"));
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(FouraError::TrainingDiverged {
                step,
                reason: format!("non-finite gradient {bad}"),
            });
        }
    }
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (x, &d) in p.iter_mut().zip(g.iter()) {
                    *x -= lr * d;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                state.v = state.m.clone();
            }
            if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
                return Err(FouraError::shape("optimizer state does not match parameters"));
            }
            state.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let (m, v) = (&mut state.m[k], &mut state.v[k]);
                for i in 0..g.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}
