//! Layer-wise grid search of the migration exponent.
//!
//! Each candidate alpha builds a smoothing factor from the layer's aggregate
//! statistics and is scored by the summed squared error between the
//! quantized and full-precision layer outputs across every calibration
//! sample and timestep. The exhaustive argmin wins; ties keep the smallest
//! alpha.

use crate::error::{Error, Result};
use crate::lowrank::{self, CompensationConfig};
use crate::par;
use crate::quant;
use crate::smooth::{self, ActivationTrace, SmoothingFactor};
use crate::tensor::{self, Tensor};

/// Bitwidths at or above this value disable quantization (full-precision
/// passthrough); the quantizer itself only accepts `[2, 8]`.
pub const PASSTHROUGH_BITS: u8 = 32;

#[derive(Debug, Clone)]
pub struct GridSearchConfig {
    /// Number of grid points spanning `[0, 1]` inclusive; spacing is
    /// `1 / (grid_points - 1)`.
    pub grid_points: usize,
    pub weight_bits: u8,
    pub act_bits: u8,
    /// When set, the low-rank correction participates in loss evaluation
    /// (fitted fresh for every candidate factor).
    pub use_compensation: bool,
    /// Low-rank settings used when `use_compensation` is on.
    pub compensation: CompensationConfig,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            grid_points: 21,
            weight_bits: 4,
            act_bits: 8,
            use_compensation: false,
            compensation: CompensationConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub layer_id: usize,
    pub best_alpha: f64,
    pub best_factor: SmoothingFactor,
    /// `(alpha, loss)` for every grid point, in grid order.
    pub loss_curve: Vec<(f64, f64)>,
}

impl GridSearchResult {
    /// Loss at the returned alpha.
    pub fn best_loss(&self) -> f64 {
        self.loss_curve
            .iter()
            .map(|&(_, l)| l)
            .fold(f64::INFINITY, f64::min)
    }
}

/// One layer's calibration inputs for a model-wide search.
#[derive(Debug, Clone, Copy)]
pub struct LayerInput<'a> {
    pub trace: &'a ActivationTrace,
    pub weight: &'a Tensor,
    pub bias: Option<&'a [f64]>,
}

/// Summed squared output error of the quantized layer under factor `s`.
///
/// Per sample and timestep: the smoothed activation slice is quantized with
/// dynamic per-tensor parameters, the smoothed weight with per-input-channel
/// parameters, and `||y_q - y_ref||_F^2` accumulates over the whole trace
/// with `y_ref = x·wᵀ + bias` in full precision.
pub fn layer_loss(
    trace: &ActivationTrace,
    w: &Tensor,
    bias: Option<&[f64]>,
    s: &SmoothingFactor,
    cfg: &GridSearchConfig,
) -> Result<f64> {
    check_layer_shapes(trace, w, bias, Some(s))?;

    let w_s = tensor::scale_columns(w, s.values())?;
    let quantize_weights = cfg.weight_bits < PASSTHROUGH_BITS;
    let compensation = if quantize_weights && cfg.use_compensation {
        let mut comp_cfg = cfg.compensation.clone();
        comp_cfg.weight_bits = cfg.weight_bits;
        Some(lowrank::alternating_optimize(&w_s, s.clone(), &comp_cfg)?)
    } else {
        None
    };
    let w_deq = if let Some(comp) = &compensation {
        comp.q_w.dequantize()
    } else if quantize_weights {
        quant::quantize_weight_per_input_channel(&w_s, cfg.weight_bits)?.dequantize()
    } else {
        w_s
    };
    let lowrank_factors = compensation.map(|c| (c.a, c.b));

    let timesteps = trace.timesteps();
    let batch = trace.batch();
    let partials = par::map_indexed(timesteps, |t| -> Result<f64> {
        let mut acc = 0.0;
        for b in 0..batch {
            let x = trace.slice(b, t);
            let x_s = tensor::div_columns(&x, s.values())?;
            let x_q = if cfg.act_bits >= PASSTHROUGH_BITS {
                x_s
            } else {
                quant::fake_quant_activation(&x_s, cfg.act_bits)?
            };
            let mut y_q = tensor::matmul_nt(&x_q, &w_deq)?;
            if let Some((a, b_factor)) = &lowrank_factors {
                let side = tensor::matmul_nt(&tensor::matmul(&x_q, a)?, b_factor)?;
                tensor::add_assign(&mut y_q, &side)?;
            }
            let mut y_ref = tensor::matmul_nt(&x, w)?;
            if let Some(bias) = bias {
                y_q = tensor::add_bias(&y_q, bias)?;
                y_ref = tensor::add_bias(&y_ref, bias)?;
            }
            let diff = tensor::sub(&y_q, &y_ref)?;
            acc += diff.data().iter().map(|&d| d * d).sum::<f64>();
        }
        Ok(acc)
    });
    let mut loss = 0.0;
    for p in partials {
        loss += p?;
    }
    Ok(loss)
}

/// Exhaustive search over the alpha grid for one layer.
pub fn grid_search_layer(
    trace: &ActivationTrace,
    w: &Tensor,
    bias: Option<&[f64]>,
    cfg: &GridSearchConfig,
) -> Result<GridSearchResult> {
    if cfg.grid_points < 2 {
        return Err(Error::arg(format!(
            "grid needs at least 2 points to span [0, 1], got {}",
            cfg.grid_points
        )));
    }
    check_layer_shapes(trace, w, bias, None)?;
    let act_stats = trace.per_channel_absmax();
    let weight_stats = smooth::weight_absmax(w)?;

    let denom = (cfg.grid_points - 1) as f64;
    let evaluated = par::map_indexed(cfg.grid_points, |m| -> Result<(f64, SmoothingFactor, f64)> {
        let alpha = m as f64 / denom;
        let factor = smooth::compute_tas_factor(act_stats, &weight_stats, alpha)?;
        let loss = layer_loss(trace, w, bias, &factor, cfg)?;
        Ok((alpha, factor, loss))
    });

    let mut best: Option<(f64, SmoothingFactor, f64)> = None;
    let mut curve = Vec::with_capacity(cfg.grid_points);
    for point in evaluated {
        let (alpha, factor, loss) = point?;
        curve.push((alpha, loss));
        // strict comparison keeps the smallest alpha on ties
        if best.as_ref().map_or(true, |(_, _, l)| loss < *l) {
            best = Some((alpha, factor, loss));
        }
    }
    let (best_alpha, best_factor, _) = best.expect("grid has at least two points");
    Ok(GridSearchResult {
        layer_id: trace.layer_id(),
        best_alpha,
        best_factor,
        loss_curve: curve,
    })
}

/// Independent per-layer searches; result order matches input order and any
/// failure carries the offending layer's id.
pub fn grid_search_model(
    layers: &[LayerInput<'_>],
    cfg: &GridSearchConfig,
) -> Result<Vec<GridSearchResult>> {
    if layers.is_empty() {
        return Err(Error::arg("grid search needs at least one layer"));
    }
    par::map_indexed(layers.len(), |i| {
        let layer = &layers[i];
        grid_search_layer(layer.trace, layer.weight, layer.bias, cfg)
            .map_err(|e| e.with_layer(layer.trace.layer_id()))
    })
    .into_iter()
    .collect()
}

fn check_layer_shapes(
    trace: &ActivationTrace,
    w: &Tensor,
    bias: Option<&[f64]>,
    s: Option<&SmoothingFactor>,
) -> Result<()> {
    if !w.is_matrix() {
        return Err(Error::shape(format!(
            "layer weight must be N x C, got {:?}",
            w.shape()
        )));
    }
    if trace.channels() != w.cols() {
        return Err(Error::shape(format!(
            "trace has {} channels, weight consumes {}",
            trace.channels(),
            w.cols()
        )));
    }
    if let Some(s) = s {
        if s.channels() != w.cols() {
            return Err(Error::shape(format!(
                "smoothing factor covers {} channels, weight consumes {}",
                s.channels(),
                w.cols()
            )));
        }
    }
    if let Some(bias) = bias {
        if bias.len() != w.rows() {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                w.rows()
            )));
        }
    }
    Ok(())
}
