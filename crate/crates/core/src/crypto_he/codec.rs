use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};

pub const DEFAULT_SCALE: u64 = 1 << 24;

/// Maps reals to `Z_n` by fixed-point scaling, negatives wrapping to `n - |r|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointCodec {
    scale: u64,
    n: BigUint,
}

impl FixedPointCodec {
    pub fn new(n: BigUint, scale: u64) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Parameter("codec scale must be positive".into()));
        }
        if n <= BigUint::from(2u32) {
            return Err(Error::Parameter("codec modulus too small".into()));
        }
        Ok(FixedPointCodec { scale, n })
    }

    pub fn with_default_scale(n: BigUint) -> Result<Self> {
        FixedPointCodec::new(n, DEFAULT_SCALE)
    }

    pub fn scale(&self) -> u64 {
        self.scale
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn encode(&self, x: f64) -> Result<BigUint> {
        if !x.is_finite() {
            return Err(Error::Overflow(format!("cannot encode {x}")));
        }
        let r = (x.abs() * self.scale as f64).round();
        if r >= 2f64.powi(127) {
            return Err(Error::Overflow(format!("{x} exceeds the codec range")));
        }
        let r = BigUint::from(r as u128);
        if (&r << 1u32) >= self.n {
            return Err(Error::Overflow(format!("{x} exceeds the codec range")));
        }
        if x < 0.0 && !r.is_zero() {
            Ok(&self.n - r)
        } else {
            Ok(r)
        }
    }

    /// Inverse of [`encode`](Self::encode). Inputs at or above `n` are
    /// reduced first.
    pub fn decode(&self, m: &BigUint) -> f64 {
        let m = if m >= &self.n { m % &self.n } else { m.clone() };
        let scale = self.scale as f64;
        if (&m << 1u32) < self.n {
            big_to_f64(&m) / scale
        } else {
            -big_to_f64(&(&self.n - m)) / scale
        }
    }
}

fn big_to_f64(v: &BigUint) -> f64 {
    v.to_f64().unwrap_or(f64::INFINITY)
}
