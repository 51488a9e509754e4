//! Emulated reduced-precision arithmetic.
//!
//! Values are computed in `f64` and rounded after every primitive to the
//! nearest number representable with the configured mantissa width and
//! exponent range (round half to even). Overflow saturates to infinity,
//! which is how emulated fp16 runs go non-finite.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionMode {
    /// Explicit fraction bits (52 for `f64`, 10 for IEEE half).
    pub mantissa_bits: u32,
    /// Smallest normal binary exponent.
    pub exponent_min: i32,
    /// Largest finite binary exponent.
    pub exponent_max: i32,
    pub flush_subnormals: bool,
}

impl PrecisionMode {
    pub const EXACT: PrecisionMode = PrecisionMode {
        mantissa_bits: 52,
        exponent_min: -1022,
        exponent_max: 1023,
        flush_subnormals: false,
    };

    pub const FP16: PrecisionMode = PrecisionMode {
        mantissa_bits: 10,
        exponent_min: -14,
        exponent_max: 15,
        flush_subnormals: false,
    };

    pub const BF16: PrecisionMode = PrecisionMode {
        mantissa_bits: 7,
        exponent_min: -126,
        exponent_max: 127,
        flush_subnormals: false,
    };

    pub fn exact() -> Self {
        Self::EXACT
    }

    pub fn fp16() -> Self {
        Self::FP16
    }

    /// Look up a mode by its conventional name (`exact`, `f64`, `fp16`, `bf16`).
    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "exact" | "f64" | "fp64" | "double" => Some(Self::EXACT),
            "fp16" | "f16" | "half" => Some(Self::FP16),
            "bf16" | "bfloat16" => Some(Self::BF16),
            _ => None,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.mantissa_bits >= 52
            && self.exponent_min <= -1022
            && self.exponent_max >= 1023
            && !self.flush_subnormals
    }

    /// Largest finite representable magnitude.
    pub fn max_finite(&self) -> f64 {
        let m = self.mantissa_bits.min(52) as i32;
        (2.0 - exp2i(-m)) * exp2i(self.exponent_max.min(1023))
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        if self.is_exact() || !x.is_finite() || x == 0.0 {
            return x;
        }
        let m = self.mantissa_bits.min(52) as i32;
        let e = binary_exponent(x);
        if e > self.exponent_max {
            return f64::INFINITY.copysign(x);
        }
        let quantum_exp = if e < self.exponent_min {
            if self.flush_subnormals {
                return 0.0f64.copysign(x);
            }
            self.exponent_min - m
        } else {
            e - m
        };
        let rounded = if quantum_exp < -1074 {
            // Finer than f64 itself can resolve; nothing to round.
            x
        } else {
            let q = exp2i(quantum_exp);
            (x / q).round_ties_even() * q
        };
        if rounded.abs() > self.max_finite() {
            f64::INFINITY.copysign(x)
        } else if rounded == 0.0 {
            0.0f64.copysign(x)
        } else {
            rounded
        }
    }

    pub fn quantize_slice(&self, values: &mut [f64]) {
        if self.is_exact() {
            return;
        }
        for v in values {
            *v = self.quantize_value(*v);
        }
    }
}

impl Default for PrecisionMode {
    fn default() -> Self {
        Self::EXACT
    }
}

/// Round every element of `x` under `mode`; the result's contamination flag
/// reflects any non-finite values after rounding.
pub fn quantize(x: &Tensor, mode: PrecisionMode) -> Tensor {
    if mode.is_exact() {
        return x.clone();
    }
    x.map(|v| mode.quantize_value(v))
}

/// floor(log2(|x|)) for finite non-zero `x`, read from the bit pattern.
fn binary_exponent(x: f64) -> i32 {
    let bits = x.abs().to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        let mantissa = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mantissa.leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

/// 2^k for k in [-1074, 1023], built directly from bits.
fn exp2i(k: i32) -> f64 {
    if k > 1023 {
        f64::INFINITY
    } else if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else if k >= -1074 {
        f64::from_bits(1u64 << (k + 1074))
    } else {
        0.0
    }
}
