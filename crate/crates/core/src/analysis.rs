//! Spectral and subspace diagnostics of materialized adapter updates.

use serde::Serialize;

use crate::error::{FouraError, Result};
use crate::linalg::{self, NormKind};
use crate::matrix::Matrix;
use crate::train::TrainTrace;

/// Descending singular values of a weight update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpreadReport {
    pub sigmas: Vec<f64>,
}

impl SpreadReport {
    /// `Σ_{i>r} σᵢ² / Σ σᵢ²`; zero for a zero matrix.
    pub fn tail_energy_ratio(&self, r: usize) -> f64 {
        tail_energy_ratio(&self.sigmas, r)
    }

    /// Best rank-`r` approximation error, `1 ≤ r < len`.
    pub fn top_r_error(&self, r: usize, norm: NormKind) -> Result<f64> {
        let n = self.sigmas.len();
        if r < 1 || r >= n {
            return Err(FouraError::InvalidRank {
                rank: r,
                constraint: format!("1 <= r < {n}"),
            });
        }
        Ok(linalg::tail_norm(&self.sigmas, r, norm))
    }
}

pub fn tail_energy_ratio(sigmas: &[f64], r: usize) -> f64 {
    let total: f64 = sigmas.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0.0;
    }
    let tail: f64 = sigmas.iter().skip(r).map(|s| s * s).sum();
    tail / total
}

pub fn spread_report(delta_w: &Matrix) -> Result<SpreadReport> {
    let s = linalg::svd(delta_w)?;
    Ok(SpreadReport { sigmas: s.sigma })
}

/// Inputs of the stability-based generalization bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundParams {
    pub c: f64,
    pub rho: f64,
    pub lambda_min: f64,
    /// Effective-rank ratio; sparsity is `1 − p`.
    pub p: f64,
    pub n: usize,
    pub delta: f64,
    pub r_hat: f64,
}

/// `R̂ + sqrt((C² + 24Cρ²/(λ_min + 2(1−p))) / (2nδ))`.
pub fn generalization_bound(bp: &BoundParams) -> Result<f64> {
    let finite = [bp.c, bp.rho, bp.lambda_min, bp.p, bp.delta, bp.r_hat]
        .iter()
        .all(|x| x.is_finite());
    if !finite {
        return Err(FouraError::invalid("bound parameters must be finite"));
    }
    if !(bp.c > 0.0) || bp.rho < 0.0 || bp.lambda_min < 0.0 || bp.r_hat < 0.0 {
        return Err(FouraError::invalid(
            "need C > 0, rho >= 0, lambda_min >= 0, r_hat >= 0",
        ));
    }
    if !(bp.p > 0.0 && bp.p <= 1.0) {
        return Err(FouraError::invalid(format!("p = {} outside (0, 1]", bp.p)));
    }
    if bp.n < 1 || !(bp.delta > 0.0 && bp.delta < 1.0) {
        return Err(FouraError::invalid("need n >= 1 and 0 < delta < 1"));
    }
    let denominator = bp.lambda_min + 2.0 * (1.0 - bp.p);
    if denominator <= 0.0 {
        return Err(FouraError::DegenerateBound { denominator });
    }
    let numerator = bp.c * bp.c + 24.0 * bp.c * bp.rho * bp.rho / denominator;
    Ok(bp.r_hat + (numerator / (2.0 * bp.n as f64 * bp.delta)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Amplification {
    pub dw_norm: f64,
    pub proj_norm: f64,
    pub factor: f64,
}

fn check_rank(r: usize, m: &Matrix) -> Result<()> {
    let n = m.rows().min(m.cols());
    if r < 1 || r > n {
        return Err(FouraError::InvalidRank {
            rank: r,
            constraint: format!("1 <= r <= {n}"),
        });
    }
    Ok(())
}

/// `‖ΔW‖_F / ‖U_rᵀ·W0·V_r‖_F` with `U_r, V_r` the top-`r` singular vectors of `ΔW`.
pub fn amplification_factor(w0: &Matrix, delta_w: &Matrix, r: usize) -> Result<Amplification> {
    if w0.shape() != delta_w.shape() {
        return Err(FouraError::shape(format!(
            "W0 is {:?} but delta W is {:?}",
            w0.shape(),
            delta_w.shape()
        )));
    }
    check_rank(r, delta_w)?;
    if !w0.is_finite() || !delta_w.is_finite() {
        return Err(FouraError::invalid("non-finite weights"));
    }
    let s = linalg::svd(delta_w)?;
    let proj = s.u_top(r).transpose().matmul(w0)?.matmul(&s.v_top(r))?;
    let proj_norm = proj.sum_squares().sqrt();
    if proj_norm < 1e-12 {
        return Err(FouraError::DegenerateProjection(proj_norm));
    }
    let dw_norm = delta_w.sum_squares().sqrt();
    Ok(Amplification {
        dw_norm,
        proj_norm,
        factor: dw_norm / proj_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectionNorm {
    /// `‖U₂ᵀ·ΔW₁·V₂‖_F`.
    pub raw: f64,
    /// `raw / ‖ΔW₁‖_F` (zero when `ΔW₁ = 0`).
    pub normalized: f64,
}

/// Overlap of `delta_w1` with the top-`r` singular subspaces of `delta_w2`.
pub fn projection_norm(delta_w1: &Matrix, delta_w2: &Matrix, r: usize) -> Result<ProjectionNorm> {
    if delta_w1.shape() != delta_w2.shape() {
        return Err(FouraError::shape(format!(
            "cannot project {:?} onto {:?}",
            delta_w1.shape(),
            delta_w2.shape()
        )));
    }
    check_rank(r, delta_w2)?;
    if !delta_w1.is_finite() || !delta_w2.is_finite() {
        return Err(FouraError::invalid("non-finite weight update"));
    }
    let s = linalg::svd(delta_w2)?;
    if s.sigma[0] == 0.0 {
        return Err(FouraError::DegenerateSubspace);
    }
    let p = s.u_top(r).transpose().matmul(delta_w1)?.matmul(&s.v_top(r))?;
    let raw = p.sum_squares().sqrt();
    let n1 = delta_w1.sum_squares().sqrt();
    Ok(ProjectionNorm {
        raw,
        normalized: if n1 > 0.0 { raw / n1 } else { 0.0 },
    })
}

/// Terms of `R = z(W0+ΔW)(W0+ΔW)ᵀzᵀ` (token × token).
#[derive(Debug, Clone, PartialEq)]
pub struct Autocorrelation {
    /// `z·W0·W0ᵀ·zᵀ`.
    pub base_term: Matrix,
    /// `z·ΔW·ΔWᵀ·zᵀ`.
    pub adapter_term: Matrix,
    /// `z·W0·ΔWᵀ·zᵀ + z·ΔW·W0ᵀ·zᵀ`.
    pub cross_term: Matrix,
    /// `‖offdiag(adapter_term)‖_F / ‖adapter_term‖_F` (zero if the term vanishes).
    pub off_diag_ratio: f64,
}

pub fn autocorrelation_decomposition(w0: &Matrix, delta_w: &Matrix, z_in: &Matrix) -> Result<Autocorrelation> {
    if w0.shape() != delta_w.shape() {
        return Err(FouraError::shape("W0 and delta W differ in shape"));
    }
    let zb = z_in.matmul(w0)?;
    let za = z_in.matmul(delta_w)?;
    let base_term = zb.matmul(&zb.transpose())?;
    let adapter_term = za.matmul(&za.transpose())?;
    let ab = zb.matmul(&za.transpose())?;
    let cross_term = ab.add(&ab.transpose())?;
    let total = adapter_term.sum_squares();
    let diag: f64 = (0..adapter_term.rows()).map(|i| adapter_term.get(i, i).powi(2)).sum();
    let off_diag_ratio = if total > 0.0 {
        ((total - diag).max(0.0) / total).sqrt()
    } else {
        0.0
    };
    Ok(Autocorrelation {
        base_term,
        adapter_term,
        cross_term,
        off_diag_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceIndex {
    Step,
    Timestep,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub index: usize,
    pub layer: usize,
    pub effective_rank: usize,
    pub soft_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTable {
    pub index: TraceIndex,
    pub rows: Vec<RankRow>,
}

/// Effective-rank rows: per timestep for denoiser traces, else per step.
pub fn effective_rank_trace(trace: &TrainTrace) -> Result<RankTable> {
    if !trace.timestep_ranks.is_empty() {
        let rows = trace
            .timestep_ranks
            .iter()
            .map(|r| RankRow {
                index: r.timestep,
                layer: r.layer,
                effective_rank: r.effective_rank,
                soft_mean: r.soft_mean,
            })
            .collect();
        return Ok(RankTable {
            index: TraceIndex::Timestep,
            rows,
        });
    }
    if trace.effective_ranks.is_empty() {
        return Err(FouraError::invalid("trace has no effective-rank records"));
    }
    let mut rows = Vec::new();
    for (step, (ranks, means)) in trace.effective_ranks.iter().zip(&trace.soft_means).enumerate() {
        for (layer, (&effective_rank, &soft_mean)) in ranks.iter().zip(means).enumerate() {
            rows.push(RankRow {
                index: step,
                layer,
                effective_rank,
                soft_mean,
            });
        }
    }
    Ok(RankTable {
        index: TraceIndex::Step,
        rows,
    })
}
