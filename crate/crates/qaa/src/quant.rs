//! Uniform affine fake quantization with surrogate gradients.
//!
//! A tensor value `x` is mapped to an integer grid via
//! `clamp(round((x - bias) / scale), grid_min, grid_max)` and reconstructed
//! as `scale * grid + bias`. Rounding is round-to-nearest with ties away
//! from zero (the stdlib `round`), chosen so independent implementations can
//! agree bit for bit. The backward pass treats rounding as the identity
//! inside the clamp range (straight-through estimator) and routes residual
//! sensitivity into the scale and bias as in LSQ-style trainable quantizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorBase};

/// Lower bound on the quantization scale.
pub const SCALE_FLOOR: f32 = 1e-8;

/// Sentinel bitwidth meaning "no quantization"; all operations become
/// identities / pass-throughs.
pub const PASSTHROUGH_BITS: u8 = 32;

/// Per-tensor quantization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// Bitwidth in `[1, 8]`, or 32 as the pass-through sentinel.
    pub bits: u8,
    /// Grid step; at least [`SCALE_FLOOR`].
    pub scale: f32,
    /// Grid origin.
    pub bias: f32,
    /// Signed grids are used for weights, unsigned for post-ReLU activations.
    pub signed: bool,
}

impl QuantParams {
    pub fn new(bits: u8, scale: f32, bias: f32, signed: bool) -> Result<Self> {
        let p = QuantParams {
            bits,
            scale,
            bias,
            signed,
        };
        p.validate()?;
        Ok(p)
    }

    /// The identity parameter set (bitwidth sentinel 32).
    pub fn passthrough() -> Self {
        QuantParams {
            bits: PASSTHROUGH_BITS,
            scale: 1.0,
            bias: 0.0,
            signed: false,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits != PASSTHROUGH_BITS && !(1..=8).contains(&self.bits) {
            return Err(Error::InvalidQuantParams(format!(
                "bitwidth {} outside [1, 8] and not the sentinel 32",
                self.bits
            )));
        }
        if !self.scale.is_finite() || self.scale < SCALE_FLOOR {
            return Err(Error::InvalidQuantParams(format!(
                "scale {} below floor {}",
                self.scale, SCALE_FLOOR
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::InvalidQuantParams("bias is not finite".into()));
        }
        Ok(())
    }

    /// Smallest grid integer: 0 unsigned, `-2^(q-1)` signed.
    pub fn grid_min(&self) -> i32 {
        if self.signed {
            -(1i32 << (self.bits - 1))
        } else {
            0
        }
    }

    /// Largest grid integer: `2^q - 1` unsigned, `2^(q-1) - 1` signed.
    pub fn grid_max(&self) -> i32 {
        if self.signed {
            (1i32 << (self.bits - 1)) - 1
        } else {
            (1i32 << self.bits) - 1
        }
    }
}

#[inline]
fn grid_bounds<S: Scalar>(p: &QuantParams) -> (S, S) {
    (
        S::from_f64(p.grid_min() as f64),
        S::from_f64(p.grid_max() as f64),
    )
}

/// Maps one value onto the integer grid (returned as a float-valued integer).
#[inline]
pub fn quantize_scalar<S: Scalar>(x: S, p: &QuantParams) -> S {
    if p.is_passthrough() {
        return x;
    }
    let (lo, hi) = grid_bounds::<S>(p);
    let v = (x - S::from_f32(p.bias)) / S::from_f32(p.scale);
    let k = v.round();
    if k < lo {
        lo
    } else if k > hi {
        hi
    } else {
        k
    }
}

/// Quantize-then-reconstruct: `scale * quantize(x) + bias`.
///
/// Exactly idempotent, monotone, and an identity for the bitwidth-32
/// sentinel (early return, bit-exact bypass).
#[inline]
pub fn fake_quantize_scalar<S: Scalar>(x: S, p: &QuantParams) -> S {
    if p.is_passthrough() {
        return x;
    }
    let k = quantize_scalar(x, p);
    S::from_f32(p.scale) * k + S::from_f32(p.bias)
}

/// Tensor version of [`quantize_scalar`]. For the sentinel the input is
/// returned unchanged; callers can detect that with
/// [`QuantParams::is_passthrough`].
pub fn quantize<S: Scalar>(x: &TensorBase<S>, p: &QuantParams) -> TensorBase<S> {
    if p.is_passthrough() {
        return x.clone();
    }
    let data = x.data().iter().map(|&v| quantize_scalar(v, p)).collect();
    TensorBase::from_vec(x.shape(), data).expect("shape preserved")
}

/// Tensor version of [`fake_quantize_scalar`].
pub fn fake_quantize<S: Scalar>(x: &TensorBase<S>, p: &QuantParams) -> TensorBase<S> {
    if p.is_passthrough() {
        return x.clone();
    }
    let data = x
        .data()
        .iter()
        .map(|&v| fake_quantize_scalar(v, p))
        .collect();
    TensorBase::from_vec(x.shape(), data).expect("shape preserved")
}

/// Gradients emitted by the quantizer backward pass.
///
/// `scale` and `bias` are the summed per-tensor parameter gradients; the
/// elementwise contributions are:
///
/// * inside the grid range (`grid_min <= (x-b)/s <= grid_max`):
///   `d/dx = g`, `d/ds = g * (round(v) - v)`, `d/db = 0`;
/// * clamped below/above: `d/dx = 0`, `d/ds = g * grid_endpoint`,
///   `d/db = g`.
#[derive(Clone, Debug)]
pub struct SteGrads<S> {
    pub input: TensorBase<S>,
    pub scale: S,
    pub bias: S,
}

/// Straight-through surrogate backward for [`fake_quantize`].
pub fn ste_backward<S: Scalar>(
    grad_out: &TensorBase<S>,
    x: &TensorBase<S>,
    p: &QuantParams,
) -> SteGrads<S> {
    debug_assert_eq!(grad_out.shape(), x.shape());
    if p.is_passthrough() {
        return SteGrads {
            input: grad_out.clone(),
            scale: S::zero(),
            bias: S::zero(),
        };
    }
    let (lo, hi) = grid_bounds::<S>(p);
    let s = S::from_f32(p.scale);
    let b = S::from_f32(p.bias);
    let mut grad_x = TensorBase::zeros(x.shape());
    let mut grad_s = S::zero();
    let mut grad_b = S::zero();
    for ((gx, &g), &xv) in grad_x
        .data_mut()
        .iter_mut()
        .zip(grad_out.data().iter())
        .zip(x.data().iter())
    {
        let v = (xv - b) / s;
        if v < lo {
            grad_s = grad_s + g * lo;
            grad_b = grad_b + g;
        } else if v > hi {
            grad_s = grad_s + g * hi;
            grad_b = grad_b + g;
        } else {
            *gx = g;
            grad_s = grad_s + g * (v.round() - v);
        }
    }
    SteGrads {
        input: grad_x,
        scale: grad_s,
        bias: grad_b,
    }
}

/// Min/max range calibration.
///
/// Unsigned grids anchor the bias at the sample minimum with
/// `scale = (max - min) / (2^q - 1)`; signed grids are symmetric around
/// zero with the scale derived from `max |x|`. Degenerate all-equal samples
/// produce the floor scale with the bias at that constant (unsigned).
pub fn calibrate_minmax(samples: &[f32], bits: u8, signed: bool) -> Result<QuantParams> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "calibration requires a non-empty sample set".into(),
        ));
    }
    if bits == PASSTHROUGH_BITS {
        return Ok(QuantParams::passthrough());
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in samples {
        if !v.is_finite() {
            return Err(Error::NumericFault {
                context: "calibration samples".into(),
            });
        }
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    let (scale, bias) = if signed {
        let m = min.abs().max(max.abs());
        let denom = ((1i32 << (bits - 1)) - 1).max(1) as f32;
        ((m / denom).max(SCALE_FLOOR), 0.0)
    } else {
        let levels = ((1i64 << bits) - 1) as f32;
        (((max - min) / levels).max(SCALE_FLOOR), min)
    };
    QuantParams::new(bits, scale, bias, signed)
}

/// Reconstruction-error calibration.
///
/// Searches a `grid_size x grid_size` candidate grid — scales spanning
/// `[0.2, 1.2]` times the min/max scale and biases spanning the sample
/// range — for the pair minimizing the mean squared fake-quantization
/// error. Ties break toward the smaller scale.
pub fn calibrate_mse(
    samples: &[f32],
    bits: u8,
    signed: bool,
    grid_size: usize,
) -> Result<QuantParams> {
    if grid_size < 2 {
        return Err(Error::InvalidArgument(
            "calibrate_mse requires grid_size >= 2".into(),
        ));
    }
    let base = calibrate_minmax(samples, bits, signed)?;
    if base.is_passthrough() {
        return Ok(base);
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in samples {
        min = min.min(v);
        max = max.max(v);
    }
    let steps = (grid_size - 1) as f32;
    let mut best: Option<(f64, QuantParams)> = None;
    for i in 0..grid_size {
        let factor = 0.2 + (i as f32) * (1.0 / steps);
        let scale = (factor * base.scale).max(SCALE_FLOOR);
        for j in 0..grid_size {
            let bias = min + (j as f32) * ((max - min) / steps);
            let cand = QuantParams::new(bits, scale, bias, signed)?;
            let mut err = 0.0f64;
            for &v in samples {
                let d = (fake_quantize_scalar(v, &cand) - v) as f64;
                err += d * d;
            }
            let mse = err / samples.len() as f64;
            if best.as_ref().map_or(true, |(b, _)| mse < *b) {
                best = Some((mse, cand));
            }
        }
    }
    Ok(best.expect("candidate grid is non-empty").1)
}
