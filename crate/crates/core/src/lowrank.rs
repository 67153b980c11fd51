//! Training-free low-rank compensation of weight quantization error.
//!
//! Alternating optimization: re-quantize the corrected weight, fit a rank-r
//! truncated SVD to the new residual, repeat. The objective is
//! `|| w_s - dequant(q) - b·aᵀ ||_F` with `a` (C x r) and `b` (N x r) kept in
//! full precision; the best iterate by residual is returned.

use crate::error::{Error, Result};
use crate::quant::{self, QuantizedTensor};
use crate::smooth::SmoothingFactor;
use crate::tensor::{self, Tensor};

/// Relative improvement below which the iteration stops early.
const EARLY_STOP_REL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CompensationConfig {
    /// Rank of the side path; clamped to `min(N, C)`.
    pub rank: usize,
    /// Number of alternating iterations.
    pub iterations: usize,
    /// Weight bitwidth in `[2, 8]`.
    pub weight_bits: u8,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            iterations: 10,
            weight_bits: 4,
        }
    }
}

/// Quantized weight plus the low-rank factors that compensate its error.
#[derive(Debug, Clone)]
pub struct CompensatedWeight {
    /// Per-input-channel quantized smoothed weight, `N x C`.
    pub q_w: QuantizedTensor,
    /// Right factor times singular values, `C x r`.
    pub a: Tensor,
    /// Left factor, `N x r`.
    pub b: Tensor,
    /// Objective value after every iteration that ran.
    pub residual_history: Vec<f64>,
    /// Factor the weight was smoothed with; deployment divides activations
    /// by it (or relies on a folded producer).
    pub smoothing: SmoothingFactor,
    /// Set when the requested rank exceeded `min(N, C)` and was clamped.
    pub rank_clamped: bool,
}

impl CompensatedWeight {
    /// Best (smallest) residual over the history.
    pub fn final_residual(&self) -> f64 {
        self.residual_history
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Materialized correction `b·aᵀ` in weight space (`N x C`).
    pub fn low_rank_term(&self) -> Tensor {
        tensor::matmul_nt(&self.b, &self.a).expect("factor shapes agree by construction")
    }
}

/// Alternates re-quantization of the corrected weight with rank-r SVD fits
/// of the residual. `w_s` is the already-smoothed weight `diag(s)·w`; the
/// factor that produced it rides along for deployment.
pub fn alternating_optimize(
    w_s: &Tensor,
    smoothing: SmoothingFactor,
    cfg: &CompensationConfig,
) -> Result<CompensatedWeight> {
    if !w_s.is_matrix() {
        return Err(Error::shape(format!(
            "compensation expects an N x C weight, got {:?}",
            w_s.shape()
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::arg("compensation needs at least one iteration"));
    }
    if cfg.rank == 0 {
        return Err(Error::arg("compensation rank must be at least 1"));
    }
    let (n, c) = (w_s.rows(), w_s.cols());
    if smoothing.channels() != c {
        return Err(Error::shape(format!(
            "smoothing factor covers {} channels, weight has {c}",
            smoothing.channels()
        )));
    }
    let rank = cfg.rank.min(n).min(c);
    let rank_clamped = rank < cfg.rank;

    let mut a = Tensor::zeros(vec![c, rank]);
    let mut b = Tensor::zeros(vec![n, rank]);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, QuantizedTensor, Tensor, Tensor)> = None;
    let mut prev = f64::INFINITY;

    for _ in 0..cfg.iterations {
        let correction = tensor::matmul_nt(&b, &a)?;
        let target = tensor::sub(w_s, &correction)?;
        let q = quant::quantize_weight_per_input_channel(&target, cfg.weight_bits)?;
        let residual = tensor::sub(w_s, &q.dequantize())?;
        let svd = tensor::truncated_svd(&residual, rank)?;
        a = tensor::scale_columns(&svd.v, &svd.singular_values)?;
        b = svd.u;
        let objective =
            tensor::frobenius_norm(&tensor::sub(&residual, &tensor::matmul_nt(&b, &a)?)?);
        history.push(objective);
        if best.as_ref().map_or(true, |(r, ..)| objective < *r) {
            best = Some((objective, q, a.clone(), b.clone()));
        }
        if objective == 0.0 {
            break;
        }
        if prev - objective < EARLY_STOP_REL * prev.min(f64::MAX) && prev.is_finite() {
            break;
        }
        prev = objective;
    }

    let (_, q_w, a, b) = best.expect("at least one iteration ran");
    Ok(CompensatedWeight {
        q_w,
        a,
        b,
        residual_history: history,
        smoothing,
        rank_clamped,
    })
}

/// Forward pass through a compensated layer.
///
/// The raw activation is divided by the smoothing factor, quantized
/// dynamically (skipped when `act_bits >= 32`), then sent through both the
/// dequantized weight and the factored side path `(x·a)·bᵀ`; the bias is
/// added in full precision.
pub fn compensated_forward(
    x: &Tensor,
    cw: &CompensatedWeight,
    act_bits: u8,
    bias: Option<&[f64]>,
) -> Result<Tensor> {
    let x_s = tensor::div_columns(x, cw.smoothing.values())?;
    let x_q = if act_bits >= 32 {
        x_s
    } else {
        quant::fake_quant_activation(&x_s, act_bits)?
    };
    let w = cw.q_w.dequantize();
    let mut y = tensor::matmul_nt(&x_q, &w)?;
    let side = tensor::matmul_nt(&tensor::matmul(&x_q, &cw.a)?, &cw.b)?;
    tensor::add_assign(&mut y, &side)?;
    match bias {
        Some(bias) => tensor::add_bias(&y, bias),
        None => Ok(y),
    }
}
