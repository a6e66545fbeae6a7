//! Training-free adapter combination.
//!
//! Gated adapters are merged on their frozen masks: an input-dependent gate
//! has no single owner once several branches share a forward pass.

use serde::{Deserialize, Serialize};

use crate::adapter::{materialize_delta_w, AdapterLayer};
use crate::analysis::projection_norm;
use crate::error::{FouraError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    OutputSum,
    EpsilonCompose,
}

#[derive(Debug, Clone)]
pub struct MergeSpec<'a> {
    /// Adapters with their merge strengths `αₙ`.
    pub adapters: Vec<(&'a AdapterLayer, f64)>,
    pub mode: MergeMode,
    /// Per-adapter concept weights `wₙ` (epsilon mode only).
    pub weights: Vec<f64>,
}

impl<'a> MergeSpec<'a> {
    pub fn output_sum(adapters: Vec<(&'a AdapterLayer, f64)>) -> Self {
        Self {
            adapters,
            mode: MergeMode::OutputSum,
            weights: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(FouraError::invalid("merge needs at least one adapter"));
        }
        if let Some((_, s)) = self.adapters.iter().find(|(_, s)| !s.is_finite()) {
            return Err(FouraError::invalid(format!("merge strength {s} is not finite")));
        }
        match self.mode {
            MergeMode::OutputSum => Ok(()),
            MergeMode::EpsilonCompose if self.weights.len() != self.adapters.len() => {
                Err(FouraError::invalid(format!(
                    "{} concept weights for {} adapters",
                    self.weights.len(),
                    self.adapters.len()
                )))
            }
            MergeMode::EpsilonCompose => {
                if self.weights.iter().all(|w| w.is_finite()) {
                    Ok(())
                } else {
                    Err(FouraError::invalid("concept weights must be finite"))
                }
            }
        }
    }
}

fn check_shared_base(layers: &[&AdapterLayer]) -> Result<()> {
    let first = layers[0];
    for (n, l) in layers.iter().enumerate().skip(1) {
        if l.w0.shape() != first.w0.shape() {
            return Err(FouraError::IncompatibleAdapters(format!(
                "adapter {n} has W0 {:?}, adapter 0 has {:?}",
                l.w0.shape(),
                first.w0.shape()
            )));
        }
        if l.w0 != first.w0 {
            return Err(FouraError::IncompatibleAdapters(format!(
                "adapter {n} was trained on a different W0"
            )));
        }
    }
    Ok(())
}

/// Adapter branch on its frozen mask at the layer's own α.
pub fn frozen_branch(layer: &AdapterLayer, z_in: &Matrix) -> Result<Matrix> {
    layer.validate()?;
    let scale: Vec<f64> = layer
        .static_mask()?
        .into_iter()
        .map(|on| if on { layer.alpha } else { 0.0 })
        .collect();
    layer.branch_with_scale(z_in, &scale)
}

/// `base(z) + Σₙ αₙ·branchₙ(z)`.
pub fn merge_outputs(spec: &MergeSpec<'_>, z_in: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    if spec.mode != MergeMode::OutputSum {
        return Err(FouraError::invalid("merge_outputs requires output_sum mode"));
    }
    let layers: Vec<&AdapterLayer> = spec.adapters.iter().map(|(l, _)| *l).collect();
    check_shared_base(&layers)?;
    let mut out = layers[0].base_forward(z_in)?;
    for (layer, strength) in &spec.adapters {
        let branch = frozen_branch(layer, z_in)?;
        out.axpy(*strength, &branch)?;
    }
    Ok(out)
}

/// `ε(x) + Σₙ wₙ·(ε_pos,n − ε_neg,n)`.
pub fn compose_epsilon(base_eps: &Matrix, concept_deltas: &[(Matrix, Matrix, f64)]) -> Result<Matrix> {
    let mut out = base_eps.clone();
    for (n, (pos, neg, w)) in concept_deltas.iter().enumerate() {
        if pos.shape() != base_eps.shape() || neg.shape() != base_eps.shape() {
            return Err(FouraError::shape(format!(
                "concept {n}: {:?} / {:?} against base {:?}",
                pos.shape(),
                neg.shape(),
                base_eps.shape()
            )));
        }
        out.axpy(*w, &pos.sub(neg)?)?;
    }
    Ok(out)
}

/// Normalized projection of `ΔW₁` onto the top-`r` subspaces of `ΔW₂`.
/// Lower means the two updates interfere less when summed.
pub fn merge_compatibility(a1: &AdapterLayer, a2: &AdapterLayer, r: usize) -> Result<f64> {
    if a1.w0.shape() != a2.w0.shape() {
        return Err(FouraError::IncompatibleAdapters(format!(
            "W0 shapes {:?} and {:?}",
            a1.w0.shape(),
            a2.w0.shape()
        )));
    }
    let dw1 = materialize_delta_w(a1, &a1.static_mask()?)?;
    let dw2 = materialize_delta_w(a2, &a2.static_mask()?)?;
    Ok(projection_norm(&dw1, &dw2, r)?.normalized)
}
