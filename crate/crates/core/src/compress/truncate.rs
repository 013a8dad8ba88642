use std::str::FromStr;

use crate::error::{Error, Result};

/// Bits used to transmit each kept value.
///
/// `Bits16` keeps the sign, the exponent and 7 mantissa bits (the bfloat16
/// layout), `Bits32` keeps 23 mantissa bits, `Bits64` is lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum PayloadWidth {
    #[default]
    Bits16,
    Bits32,
    Bits64,
}

impl PayloadWidth {
    pub fn mantissa_bits(self) -> u32 {
        match self {
            Self::Bits16 => 7,
            Self::Bits32 => 23,
            Self::Bits64 => 52,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::Bits16 => 2,
            Self::Bits32 => 4,
            Self::Bits64 => 8,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes() as u32 * 8
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(Self::Bits16),
            32 => Ok(Self::Bits32),
            64 => Ok(Self::Bits64),
            other => Err(Error::InvalidParameter(format!(
                "payload width must be 16, 32 or 64 bits, got {other}"
            ))),
        }
    }
}

impl FromStr for PayloadWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .parse::<u32>()
            .map_err(|_| Error::Config(format!("payload width {s:?} is not an integer")))?;
        Self::from_bits(bits)
    }
}

/// Zeroes the low-order mantissa bits of `x`, truncating toward zero.
///
/// Sign and exponent are untouched, so `|truncate_bits(x) - x| < 2^-k |x|`
/// where `k` is the kept mantissa width.
pub fn truncate_bits(x: f64, width: PayloadWidth) -> f64 {
    let dropped = 52 - width.mantissa_bits();
    if dropped == 0 {
        return x;
    }
    let mask = !((1u64 << dropped) - 1);
    f64::from_bits(x.to_bits() & mask)
}
