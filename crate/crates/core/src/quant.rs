//! Asymmetric affine integer quantization.
//!
//! Values map to codes through `clamp(round(x/s) + z, 0, 2^b - 1)` and back
//! through `s * (code - z)`. Parameters are fit to the data's min/max:
//! per-tensor (recomputed dynamically for activations) or per input channel
//! (one grid per weight column).

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Floor applied to the scale when a value range degenerates to a point.
pub const SCALE_EPS: f64 = 1e-8;

/// Parameters of one affine quantization grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Grid step; always positive.
    pub scale: f64,
    /// Code of real zero, clamped into `[0, 2^bits - 1]`.
    pub zero_point: u8,
    /// Bit width in `[2, 8]`.
    pub bits: u8,
}

impl QuantParams {
    /// Largest representable code, `2^bits - 1`.
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    /// Dequantized value of a code: `scale * (code - zero_point)`.
    pub fn value_of(&self, code: u8) -> f64 {
        self.scale * (code as f64 - self.zero_point as f64)
    }

    fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::arg(format!(
                "quantization scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if self.zero_point > self.max_code() {
            return Err(Error::arg(format!(
                "zero point {} exceeds max code {}",
                self.zero_point,
                self.max_code()
            )));
        }
        Ok(())
    }
}

/// One `QuantParams` per input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQuantParams {
    pub per_channel: Vec<QuantParams>,
}

/// Whether codes share one grid or carry one grid per channel along an axis.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantScheme {
    PerTensor(QuantParams),
    PerChannel {
        params: ChannelQuantParams,
        axis: usize,
    },
}

/// Integer codes plus the parameters needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<u8>,
    pub shape: Vec<usize>,
    pub scheme: QuantScheme,
}

impl QuantizedTensor {
    /// Maps every code back to its real value.
    pub fn dequantize(&self) -> Tensor {
        let data = match &self.scheme {
            QuantScheme::PerTensor(p) => self.codes.iter().map(|&c| p.value_of(c)).collect(),
            QuantScheme::PerChannel { params, axis } => {
                let stride: usize = self.shape[axis + 1..].iter().product();
                let dim = self.shape[*axis];
                self.codes
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| params.per_channel[(i / stride) % dim].value_of(c))
                    .collect()
            }
        };
        Tensor::new(self.shape.clone(), data).expect("codes carry a valid shape")
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::arg(format!("bitwidth must be in [2, 8], got {bits}")));
    }
    Ok(())
}

/// Rounds a scale to 45 significant bits.
///
/// Such a scale multiplies exactly with any code value (codes and code sums
/// stay below 2^8), so dequantized grids survive re-quantization bit-exactly.
/// Rounding the dropped bits keeps the scale within 2^-46 of the raw value.
fn truncate_scale(s: f64) -> f64 {
    let bits = s.to_bits();
    let up = if bits & 0x80 != 0 { 0x100 } else { 0 };
    // mantissa carry rolls into the exponent, which is the correct rounding
    f64::from_bits((bits & !0xff).wrapping_add(up))
}

/// Fits scale and zero point to the values' min/max.
///
/// `scale = (max - min) / (2^bits - 1)` floored at [`SCALE_EPS`];
/// `zero_point = clamp(round(-min / scale), 0, 2^bits - 1)` with
/// half-away-from-zero rounding.
pub fn compute_params(values: &[f64], bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::arg("cannot fit quantization parameters to no values"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::arg(format!("non-finite value {v} in quantizer input")));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let q = ((1u16 << bits) - 1) as f64;
    let scale = truncate_scale((max - min) / q).max(SCALE_EPS);
    let zero_point = (-min / scale).round().clamp(0.0, q) as u8;
    let params = QuantParams {
        scale,
        zero_point,
        bits,
    };
    params.validate()?;
    Ok(params)
}

fn encode(v: f64, p: &QuantParams) -> u8 {
    let q = p.max_code() as f64;
    ((v / p.scale).round() + p.zero_point as f64).clamp(0.0, q) as u8
}

/// Quantizes a tensor with one shared grid. Out-of-range values saturate.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<QuantizedTensor> {
    p.validate()?;
    let codes = x.data().iter().map(|&v| encode(v, p)).collect();
    Ok(QuantizedTensor {
        codes,
        shape: x.shape().to_vec(),
        scheme: QuantScheme::PerTensor(*p),
    })
}

/// Quantizes an `N x C` weight with an independent grid per input channel
/// (column).
pub fn quantize_weight_per_input_channel(w: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if !w.is_matrix() {
        return Err(Error::shape(format!(
            "per-input-channel quantization needs a 2-D weight, got {:?}",
            w.shape()
        )));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let data = w.data();
    let per_channel = par::map_indexed(cols, |c| {
        let column: Vec<f64> = (0..rows).map(|r| data[r * cols + c]).collect();
        compute_params(&column, bits)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut codes = vec![0u8; rows * cols];
    {
        // chunk rows through a f64 scratch buffer so the helper applies;
        // codes are written from it afterwards
        let mut scratch = vec![0.0f64; rows * cols];
        let params = &per_channel;
        par::for_each_chunk(&mut scratch, cols, |r, out| {
            let row = &data[r * cols..(r + 1) * cols];
            for (c, (o, &v)) in out.iter_mut().zip(row).enumerate() {
                *o = encode(v, &params[c]) as f64;
            }
        });
        for (dst, &v) in codes.iter_mut().zip(&scratch) {
            *dst = v as u8;
        }
    }
    Ok(QuantizedTensor {
        codes,
        shape: w.shape().to_vec(),
        scheme: QuantScheme::PerChannel {
            params: ChannelQuantParams { per_channel },
            axis: 1,
        },
    })
}

/// Quantize-dequantize with parameters fit to the tensor itself.
///
/// This is the dynamic per-tensor activation path: the returned tensor lies
/// on the grid the input induced.
pub fn fake_quant_activation(x: &Tensor, bits: u8) -> Result<Tensor> {
    let params = compute_params(x.data(), bits)?;
    Ok(quantize(x, &params)?.dequantize())
}
