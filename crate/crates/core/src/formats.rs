//! Parametric numeric formats and bit-field extraction.
//!
//! Every format encodes values as integer code words. Fixed-point codes are
//! `n`-bit integers (two's complement when signed) scaled by `2^scale`.
//! Float codes are `[sign][exponent t][fraction n-1]` with an implicit leading
//! mantissa bit for normal numbers; the all-ones exponent is reserved (IEEE
//! style) and never produced by quantization.
//!
//! All conversions into a format go through [`NumericFormat::encode_scaled`],
//! which rounds an exact value `a * 2^exp` (`a: i128`) with a single rounding
//! step and saturates at the format extremes.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::rounder::StochasticRounder;
use crate::error::{Error, Result};

/// A code word. Every supported format is at most 32 bits wide.
pub type Code = u32;

/// `beta(|I|) = ceil(log2 |I|)`: bits needed to index a set of `cardinality` elements.
pub fn beta(cardinality: u128) -> Result<u32> {
    if cardinality == 0 {
        return Err(Error::Domain("cardinality must be at least 1".into()));
    }
    Ok(128 - (cardinality - 1).leading_zeros())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundMode {
    NearestEven,
    /// Toward negative infinity.
    Floor,
}

#[derive(Clone, Copy)]
enum MagRound {
    NearestEven,
    Down,
    Up,
}

/// `round(mag / 2^shift)` on a magnitude.
fn div_pow2(mag: u128, shift: u32, mode: MagRound) -> u128 {
    if shift == 0 {
        return mag;
    }
    if shift >= 128 {
        return match mode {
            MagRound::Up if mag != 0 => 1,
            _ => 0,
        };
    }
    let q = mag >> shift;
    let rem = mag & ((1u128 << shift) - 1);
    match mode {
        MagRound::Down => q,
        MagRound::Up => q + (rem != 0) as u128,
        MagRound::NearestEven => {
            let half = 1u128 << (shift - 1);
            if rem > half || (rem == half && q & 1 == 1) {
                q + 1
            } else {
                q
            }
        }
    }
}

fn mag_mode(mode: RoundMode, negative: bool) -> MagRound {
    match mode {
        RoundMode::NearestEven => MagRound::NearestEven,
        RoundMode::Floor if negative => MagRound::Up,
        RoundMode::Floor => MagRound::Down,
    }
}

/// Exact decomposition of a finite f64 into `a * 2^exp`.
pub(crate) fn decompose_f64(v: f64) -> (i128, i32) {
    let bits = v.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i128;
    let (m, e) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1i128 << 52), exp_field - 1075)
    };
    if v.is_sign_negative() {
        (-m, e)
    } else {
        (m, e)
    }
}

/// Rounds `v` to the nearest multiple of `2^exp` (ties to even), as an integer count.
pub fn round_to_grid(v: f64, exp: i32) -> Result<i128> {
    if !v.is_finite() {
        return Err(Error::Domain(format!("non-finite value {v}")));
    }
    let (a, e) = decompose_f64(v);
    let neg = a < 0;
    let mag = a.unsigned_abs();
    let shift = exp as i64 - e as i64;
    let q = if shift <= 0 {
        let s = (-shift) as u32;
        if mag != 0 && (s >= 127 || mag.leading_zeros() <= s + 1) {
            return Err(Error::Domain(format!("{v} overflows the 2^{exp} grid")));
        }
        mag << s
    } else {
        div_pow2(mag, shift.min(200) as u32, MagRound::NearestEven)
    };
    let q = q as i128;
    Ok(if neg { -q } else { q })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    bits: u32,
    signed: bool,
    scale: i32,
}

impl FixedFormat {
    pub const MAX_BITS: u32 = 32;

    pub fn new(bits: u32, signed: bool, scale: i32) -> Result<Self> {
        if bits == 0 || bits > Self::MAX_BITS {
            return Err(Error::Domain(format!(
                "fixed-point width must be in 1..=32, got {bits}"
            )));
        }
        Ok(FixedFormat {
            bits,
            signed,
            scale,
        })
    }

    /// Unsigned `bits`-bit fraction in `[0, 1)`: scale `2^-bits`.
    pub fn unsigned(bits: u32) -> Self {
        Self::new(bits, false, -(bits as i32)).expect("valid width")
    }

    /// Signed `bits`-bit fraction in `[-1, 1)`: scale `2^-(bits-1)`.
    pub fn signed(bits: u32) -> Self {
        Self::new(bits, true, 1 - bits as i32).expect("valid width")
    }

    /// Power-of-two scale chosen so `max_abs` maps to (at most) the top code.
    pub fn calibrated(bits: u32, signed: bool, max_abs: f64) -> Result<Self> {
        let top = Self::new(bits, signed, 0)?.max_int();
        if !(max_abs.is_finite() && max_abs > 0.0) || top == 0 {
            return Self::new(bits, signed, 0);
        }
        let mut scale = (max_abs / top as f64).log2().ceil() as i32;
        // log2 can land one step off near exact powers of two
        while (top as f64) * 2f64.powi(scale - 1) >= max_abs {
            scale -= 1;
        }
        while (top as f64) * 2f64.powi(scale) < max_abs {
            scale += 1;
        }
        Self::new(bits, signed, scale)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn scale(&self) -> i32 {
        self.scale
    }

    pub fn mask(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    pub fn min_int(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn max_int(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            ((1u64 << self.bits) - 1) as i64
        }
    }

    /// Integer value of a code (sign-extended for signed formats).
    pub fn to_int(&self, code: Code) -> i64 {
        let c = code as u64 & self.mask();
        if self.signed && c >> (self.bits - 1) & 1 == 1 {
            c as i64 - (1i64 << self.bits)
        } else {
            c as i64
        }
    }

    pub fn from_int(&self, v: i64) -> Code {
        (v as u64 & self.mask()) as Code
    }

    pub fn value(&self, code: Code) -> f64 {
        self.to_int(code) as f64 * 2f64.powi(self.scale)
    }

    /// Same grid restricted to nonnegative values (drops the sign bit).
    pub fn nonnegative(&self) -> FixedFormat {
        if self.signed && self.bits > 1 {
            FixedFormat {
                bits: self.bits - 1,
                signed: false,
                scale: self.scale,
            }
        } else {
            FixedFormat {
                signed: false,
                ..*self
            }
        }
    }

    fn encode_scaled(&self, a: i128, exp: i32, mode: RoundMode) -> Code {
        let neg = a < 0;
        let mag = a.unsigned_abs();
        let shift = self.scale as i64 - exp as i64;
        let q: Option<u128> = if shift <= 0 {
            let s = (-shift) as u32;
            if mag == 0 {
                Some(0)
            } else if s >= 127 || mag.leading_zeros() <= s {
                None
            } else {
                Some(mag << s)
            }
        } else {
            Some(div_pow2(mag, shift.min(200) as u32, mag_mode(mode, neg)))
        };
        let v = match q {
            Some(q) if q <= i64::MAX as u128 => {
                if neg {
                    -(q as i64)
                } else {
                    q as i64
                }
            }
            _ => {
                if neg {
                    i64::MIN
                } else {
                    i64::MAX
                }
            }
        };
        self.from_int(v.clamp(self.min_int(), self.max_int()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FloatFormat {
    mantissa_bits: u32,
    exponent_bits: u32,
    has_sign: bool,
    bias: i32,
}

impl FloatFormat {
    /// IEEE 754 binary16.
    pub const BINARY16: FloatFormat = FloatFormat {
        mantissa_bits: 11,
        exponent_bits: 5,
        has_sign: true,
        bias: 15,
    };

    /// `mantissa_bits` counts the implicit leading bit.
    pub fn new(mantissa_bits: u32, exponent_bits: u32, has_sign: bool, bias: i32) -> Result<Self> {
        if mantissa_bits < 2 || exponent_bits < 1 {
            return Err(Error::Domain(format!(
                "float format needs n >= 2 and t >= 1 (got n={mantissa_bits}, t={exponent_bits})"
            )));
        }
        let f = FloatFormat {
            mantissa_bits,
            exponent_bits,
            has_sign,
            bias,
        };
        if f.width() > 32 || exponent_bits > 8 {
            return Err(Error::Domain(format!("float format too wide: {f}")));
        }
        Ok(f)
    }

    /// IEEE-style bias `2^(t-1) - 1`.
    pub fn ieee_like(mantissa_bits: u32, exponent_bits: u32, has_sign: bool) -> Result<Self> {
        Self::new(
            mantissa_bits,
            exponent_bits,
            has_sign,
            (1i32 << (exponent_bits.saturating_sub(1))) - 1,
        )
    }

    pub fn mantissa_bits(&self) -> u32 {
        self.mantissa_bits
    }

    pub fn exponent_bits(&self) -> u32 {
        self.exponent_bits
    }

    pub fn has_sign(&self) -> bool {
        self.has_sign
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    pub fn frac_bits(&self) -> u32 {
        self.mantissa_bits - 1
    }

    pub fn width(&self) -> u32 {
        self.has_sign as u32 + self.exponent_bits + self.mantissa_bits - 1
    }

    pub fn exponent_mask(&self) -> u32 {
        (1u32 << self.exponent_bits) - 1
    }

    /// Largest exponent field of a finite value.
    pub fn max_exponent_field(&self) -> u32 {
        self.exponent_mask() - 1
    }

    /// Exponent of the smallest subnormal step; every finite value is an
    /// integer multiple of `2^unit_exp`.
    pub fn unit_exp(&self) -> i32 {
        1 - self.bias - self.frac_bits() as i32
    }

    pub fn sign_of(&self, code: Code) -> u32 {
        if self.has_sign {
            code >> (self.width() - 1) & 1
        } else {
            0
        }
    }

    pub fn exponent_of(&self, code: Code) -> u32 {
        code >> self.frac_bits() & self.exponent_mask()
    }

    pub fn fraction_of(&self, code: Code) -> u32 {
        code & ((1u32 << self.frac_bits()) - 1)
    }

    /// Mantissa with the implicit bit materialized (zero for subnormals).
    pub fn mantissa_of(&self, code: Code) -> u32 {
        let hidden = (self.exponent_of(code) != 0) as u32;
        self.fraction_of(code) | hidden << self.frac_bits()
    }

    pub fn is_finite_code(&self, code: Code) -> bool {
        code as u64 >> self.width() == 0 && self.exponent_of(code) != self.exponent_mask()
    }

    /// Value as an integer multiple of `2^unit_exp`. Caller ensures the code is finite.
    pub fn unit_int(&self, code: Code) -> i128 {
        let e_eff = self.exponent_of(code).max(1);
        let mag = (self.mantissa_of(code) as i128) << (e_eff - 1);
        if self.sign_of(code) == 1 {
            -mag
        } else {
            mag
        }
    }

    pub fn value(&self, code: Code) -> f64 {
        self.unit_int(code) as f64 * 2f64.powi(self.unit_exp())
    }

    pub fn max_finite_code(&self) -> Code {
        let frac = (1u32 << self.frac_bits()) - 1;
        self.max_exponent_field() << self.frac_bits() | frac
    }

    pub fn nonnegative(&self) -> FloatFormat {
        FloatFormat {
            has_sign: false,
            ..*self
        }
    }

    fn encode_scaled(&self, a: i128, exp: i32, mode: RoundMode) -> Code {
        let neg = a < 0;
        let mag = a.unsigned_abs();
        if mag == 0 {
            return 0;
        }
        if neg && !self.has_sign {
            return 0;
        }
        let sign_bit = if neg { 1u32 << (self.width() - 1) } else { 0 };
        let n = self.mantissa_bits;
        let frac_bits = self.frac_bits();
        let top = 127 - mag.leading_zeros() as i64;
        let e_field = top + exp as i64 + self.bias as i64;
        let max_e = self.max_exponent_field() as i64;
        if e_field > max_e {
            return sign_bit | self.max_finite_code();
        }
        let mut e_eff = e_field.max(1);
        let quantum = e_eff - self.bias as i64 - frac_bits as i64;
        let shift = quantum - exp as i64;
        let mut mant = if shift >= 0 {
            div_pow2(mag, shift.min(200) as u32, mag_mode(mode, neg))
        } else {
            mag << ((-shift) as u32)
        };
        if mant >> n != 0 {
            mant >>= 1;
            e_eff += 1;
            if e_eff > max_e {
                return sign_bit | self.max_finite_code();
            }
        }
        if mant == 0 {
            return 0;
        }
        let field = if mant >> frac_bits != 0 { e_eff as u32 } else { 0 };
        sign_bit | field << frac_bits | (mant as u32 & ((1u32 << frac_bits) - 1))
    }
}

/// A fixed-point or floating-point scalar encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NumericFormat {
    Fixed(FixedFormat),
    Float(FloatFormat),
}

impl NumericFormat {
    pub fn binary16() -> Self {
        NumericFormat::Float(FloatFormat::BINARY16)
    }

    pub fn width(&self) -> u32 {
        match self {
            NumericFormat::Fixed(f) => f.bits(),
            NumericFormat::Float(f) => f.width(),
        }
    }

    /// Every representable value is an integer multiple of `2^unit_exp`.
    pub fn unit_exp(&self) -> i32 {
        match self {
            NumericFormat::Fixed(f) => f.scale(),
            NumericFormat::Float(f) => f.unit_exp(),
        }
    }

    pub fn is_signed(&self) -> bool {
        match self {
            NumericFormat::Fixed(f) => f.is_signed(),
            NumericFormat::Float(f) => f.has_sign(),
        }
    }

    pub fn nonnegative(&self) -> NumericFormat {
        match self {
            NumericFormat::Fixed(f) => NumericFormat::Fixed(f.nonnegative()),
            NumericFormat::Float(f) => NumericFormat::Float(f.nonnegative()),
        }
    }

    pub fn is_valid_code(&self, code: Code) -> bool {
        match self {
            NumericFormat::Fixed(f) => code as u64 >> f.bits() == 0,
            NumericFormat::Float(f) => f.is_finite_code(code),
        }
    }

    /// Value of a code as an integer multiple of `2^unit_exp`.
    pub fn code_int(&self, code: Code) -> i128 {
        match self {
            NumericFormat::Fixed(f) => f.to_int(code) as i128,
            NumericFormat::Float(f) => f.unit_int(code),
        }
    }

    pub fn value(&self, code: Code) -> f64 {
        match self {
            NumericFormat::Fixed(f) => f.value(code),
            NumericFormat::Float(f) => f.value(code),
        }
    }

    pub fn dequantize(&self, code: Code) -> f64 {
        self.value(code)
    }

    pub fn zero_code(&self) -> Code {
        0
    }

    /// Rounds the exact value `a * 2^exp` into this format (single rounding, saturating).
    pub fn encode_scaled(&self, a: i128, exp: i32, mode: RoundMode) -> Code {
        match self {
            NumericFormat::Fixed(f) => f.encode_scaled(a, exp, mode),
            NumericFormat::Float(f) => f.encode_scaled(a, exp, mode),
        }
    }

    /// Quantizes a real value; saturates at the format extremes.
    pub fn quantize(&self, value: f64, rounding: Rounding<'_>) -> Result<Code> {
        if value.is_nan() {
            return Err(Error::Domain("cannot quantize NaN".into()));
        }
        let (a, e) = if value.is_infinite() {
            (if value > 0.0 { 1 } else { -1 }, 4096)
        } else {
            decompose_f64(value)
        };
        match rounding {
            Rounding::NearestEven => Ok(self.encode_scaled(a, e, RoundMode::NearestEven)),
            Rounding::Stochastic(unit) => {
                let lo = self.encode_scaled(a, e, RoundMode::Floor);
                let lo_v = self.value(lo);
                // every access consumes one counter step
                if lo_v >= value {
                    unit.draw_up(0.0);
                    return Ok(lo);
                }
                let Some(hi) = self.next_up(lo) else {
                    unit.note_saturation();
                    unit.draw_up(0.0);
                    return Ok(lo);
                };
                let hi_v = self.value(hi);
                if value >= hi_v {
                    unit.draw_up(1.0);
                    return Ok(hi);
                }
                let frac = (value - lo_v) / (hi_v - lo_v);
                Ok(if unit.draw_up(frac) { hi } else { lo })
            }
        }
    }

    /// The next representable code above `code`, if any.
    pub fn next_up(&self, code: Code) -> Option<Code> {
        match self {
            NumericFormat::Fixed(f) => {
                let v = f.to_int(code);
                (v < f.max_int()).then(|| f.from_int(v + 1))
            }
            NumericFormat::Float(f) => {
                let sign_mask = if f.has_sign() { 1u32 << (f.width() - 1) } else { 0 };
                if f.sign_of(code) == 1 {
                    let mag = code & !sign_mask;
                    Some(if mag <= 1 { 0 } else { sign_mask | (mag - 1) })
                } else if code >= f.max_finite_code() {
                    None
                } else {
                    Some(code + 1)
                }
            }
        }
    }

    /// Orders two codes by the values they encode.
    pub fn cmp_codes(&self, a: Code, b: Code) -> Ordering {
        self.order_key(a).cmp(&self.order_key(b))
    }

    /// Monotone integer key: `key(a) < key(b)` iff `value(a) < value(b)`.
    pub fn order_key(&self, code: Code) -> i64 {
        match self {
            NumericFormat::Fixed(f) => f.to_int(code),
            NumericFormat::Float(f) => {
                let mag = (code & !(f.sign_of(code) << (f.width() - 1).min(31))) as i64;
                if f.sign_of(code) == 1 {
                    -mag
                } else {
                    mag
                }
            }
        }
    }

    /// Number of mantissa (float) or integer (fixed) bitplanes.
    pub fn plane_count(&self) -> u32 {
        match self {
            NumericFormat::Fixed(f) => f.bits(),
            NumericFormat::Float(f) => f.mantissa_bits(),
        }
    }

    /// All valid codes in increasing code-word order (small formats only).
    pub fn codes(&self) -> impl Iterator<Item = Code> + '_ {
        let limit = 1u64 << self.width();
        (0..limit)
            .map(|c| c as Code)
            .filter(move |&c| self.is_valid_code(c))
    }

    pub fn as_fixed(&self) -> Option<&FixedFormat> {
        match self {
            NumericFormat::Fixed(f) => Some(f),
            NumericFormat::Float(_) => None,
        }
    }

    pub fn as_float(&self) -> Option<&FloatFormat> {
        match self {
            NumericFormat::Float(f) => Some(f),
            NumericFormat::Fixed(_) => None,
        }
    }
}

/// Rounding rule for [`NumericFormat::quantize`].
pub enum Rounding<'a> {
    NearestEven,
    Stochastic(&'a mut StochasticRounder),
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.signed { 's' } else { 'u' };
        let default_scale = if self.signed {
            1 - self.bits as i32
        } else {
            -(self.bits as i32)
        };
        if self.scale == default_scale {
            write!(f, "{prefix}{}", self.bits)
        } else {
            write!(f, "{prefix}{}@{}", self.bits, self.scale)
        }
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = if self.with_sign() == FloatFormat::BINARY16 {
            "binary16".to_string()
        } else {
            let mut s = format!("e{}m{}", self.exponent_bits, self.frac_bits());
            let ieee_bias = (1i32 << (self.exponent_bits - 1)) - 1;
            if self.bias != ieee_bias {
                s.push_str(&format!("b{}", self.bias));
            }
            s
        };
        if self.has_sign {
            write!(f, "{base}")
        } else {
            write!(f, "{base}+")
        }
    }
}

impl FloatFormat {
    fn with_sign(&self) -> FloatFormat {
        FloatFormat {
            has_sign: true,
            ..*self
        }
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericFormat::Fixed(x) => x.fmt(f),
            NumericFormat::Float(x) => x.fmt(f),
        }
    }
}

/// Format names:
/// `u<N>` / `s<N>` fixed point with default scale (`u8@0` overrides the scale),
/// `binary16`, `e<t>m<f>` floats (`f` stored fraction bits, optional `b<bias>`),
/// `minifloat-e4m3-style`; a trailing `+` drops the sign bit of a float.
impl FromStr for NumericFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown numeric format '{s}'"));
        let name = s.trim();
        let (body, unsigned_float) = match name.strip_suffix('+') {
            Some(b) => (b, true),
            None => (name, false),
        };
        if let Some(rest) = body.strip_prefix('u').or_else(|| body.strip_prefix('s')) {
            if unsigned_float {
                return Err(bad());
            }
            let signed = body.starts_with('s');
            let (bits, scale) = match rest.split_once('@') {
                Some((b, sc)) => (
                    b.parse::<u32>().map_err(|_| bad())?,
                    Some(sc.parse::<i32>().map_err(|_| bad())?),
                ),
                None => (rest.parse::<u32>().map_err(|_| bad())?, None),
            };
            let default_scale = if signed {
                1 - bits as i32
            } else {
                -(bits as i32)
            };
            return Ok(NumericFormat::Fixed(FixedFormat::new(
                bits,
                signed,
                scale.unwrap_or(default_scale),
            )?));
        }
        let base = match body {
            "binary16" | "half" | "fp16" => FloatFormat::BINARY16,
            "minifloat-e4m3-style" => FloatFormat::ieee_like(4, 4, true)?,
            _ => {
                let rest = body.strip_prefix('e').ok_or_else(bad)?;
                let (t, rest) = rest.split_once('m').ok_or_else(bad)?;
                let (frac, bias) = match rest.split_once('b') {
                    Some((m, b)) => (m, Some(b.parse::<i32>().map_err(|_| bad())?)),
                    None => (rest, None),
                };
                let t: u32 = t.parse().map_err(|_| bad())?;
                let frac: u32 = frac.parse().map_err(|_| bad())?;
                match bias {
                    Some(b) => FloatFormat::new(frac + 1, t, true, b)?,
                    None => FloatFormat::ieee_like(frac + 1, t, true)?,
                }
            }
        };
        Ok(NumericFormat::Float(if unsigned_float {
            base.nonnegative()
        } else {
            base
        }))
    }
}

impl Serialize for FormatName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for FormatName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(FormatName).map_err(serde::de::Error::custom)
    }
}

/// A format serialized by name (for human-edited config files).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FormatName(pub NumericFormat);

/// Row-major tensor of code words in one format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    format: NumericFormat,
    codes: Vec<Code>,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, format: NumericFormat, codes: Vec<Code>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != codes.len() {
            return Err(Error::Domain(format!(
                "shape {shape:?} needs {len} codes, got {}",
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| !format.is_valid_code(c)) {
            return Err(Error::Domain(format!(
                "code {bad:#x} is not a valid {format} code word"
            )));
        }
        Ok(QuantizedTensor {
            shape,
            format,
            codes,
        })
    }

    /// Quantizes real values with round-to-nearest-even.
    pub fn from_values(shape: Vec<usize>, format: NumericFormat, values: &[f64]) -> Result<Self> {
        let codes = values
            .iter()
            .map(|&v| format.quantize(v, Rounding::NearestEven))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, format, codes)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn format(&self) -> NumericFormat {
        self.format
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn into_codes(self) -> Vec<Code> {
        self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.format.value(c)).collect()
    }

    /// Total index bits of the tensor viewed as one LUT input: element count times width.
    pub fn beta(&self) -> u64 {
        self.codes.len() as u64 * self.format.width() as u64
    }
}

/// Bit `j` of every element: integer bit for fixed point, mantissa plane for
/// floats (plane `n-1` is the materialized implicit bit).
pub fn bitplane(tensor: &QuantizedTensor, j: u32) -> Result<Vec<u8>> {
    let fmt = tensor.format();
    let planes = fmt.plane_count();
    if j >= planes {
        return Err(Error::Index {
            index: j as u64,
            limit: planes as u64,
        });
    }
    Ok(tensor
        .codes()
        .iter()
        .map(|&c| match fmt {
            NumericFormat::Fixed(_) => (c >> j & 1) as u8,
            NumericFormat::Float(f) => (f.mantissa_of(c) >> j & 1) as u8,
        })
        .collect())
}

/// Splits an `n`-bit two's-complement word into its low `n-1` bits and the MSB,
/// so that `value = x_b - msb * 2^(n-1)`.
pub fn split_signed(code: Code, n: u32) -> (Code, u8) {
    debug_assert!((1..=32).contains(&n));
    let low_mask = ((1u64 << (n - 1)) - 1) as Code;
    (code & low_mask, (code >> (n - 1) & 1) as u8)
}

/// Sign, exponent field and mantissa planes of a float code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FloatFields {
    pub sign: u8,
    pub exponent: u32,
    /// Most significant plane first; the first plane is the implicit bit.
    pub mantissa_planes: Vec<u8>,
}

impl FloatFields {
    pub fn reassemble(&self, format: &FloatFormat) -> Code {
        let frac_bits = format.frac_bits();
        let fraction = self
            .mantissa_planes
            .iter()
            .skip(1)
            .fold(0u32, |acc, &b| acc << 1 | b as u32);
        let sign = if format.has_sign() {
            (self.sign as u32) << (format.width() - 1)
        } else {
            0
        };
        sign | self.exponent << frac_bits | fraction
    }
}

pub fn float_fields(code: Code, format: &FloatFormat) -> FloatFields {
    let mant = format.mantissa_of(code);
    let n = format.mantissa_bits();
    FloatFields {
        sign: format.sign_of(code) as u8,
        exponent: format.exponent_of(code),
        mantissa_planes: (0..n).rev().map(|j| (mant >> j & 1) as u8).collect(),
    }
}

/// Weights snapped to a per-tensor power-of-two grid: `w ≈ ints[i] * 2^exp`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnappedWeights {
    pub ints: Vec<i64>,
    pub exp: i32,
}

/// Snaps weights to signed `weight_bits`-bit integers with a shared
/// power-of-two scale fitted to the largest magnitude.
pub fn snap_weights(weights: &[f32], weight_bits: u32) -> Result<SnappedWeights> {
    if !(2..=32).contains(&weight_bits) {
        return Err(Error::Domain(format!(
            "weight_bits must be in 2..=32, got {weight_bits}"
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::Compile(format!("non-finite weight {w}")));
    }
    let max_abs = weights.iter().fold(0f64, |m, &w| m.max((w as f64).abs()));
    let fmt = FixedFormat::calibrated(weight_bits, true, max_abs)?;
    let ints = weights
        .iter()
        .map(|&w| {
            let (a, e) = decompose_f64(w as f64);
            fmt.to_int(fmt.encode_scaled(a, e, RoundMode::NearestEven))
        })
        .collect();
    Ok(SnappedWeights {
        ints,
        exp: fmt.scale(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u(bits: u32, scale: i32) -> NumericFormat {
        NumericFormat::Fixed(FixedFormat::new(bits, false, scale).unwrap())
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta(256).unwrap(), 8);
        assert_eq!(beta(1).unwrap(), 0);
        assert_eq!(beta(1000).unwrap(), 10);
        assert_eq!(beta(2).unwrap(), 1);
        assert_eq!(beta(257).unwrap(), 9);
        assert!(matches!(beta(0), Err(Error::Domain(_))));
    }

    #[test]
    fn quantize_examples() {
        let b16 = NumericFormat::binary16();
        assert_eq!(b16.quantize(0.0, Rounding::NearestEven).unwrap(), 0);
        assert_eq!(b16.quantize(1.0, Rounding::NearestEven).unwrap(), 0x3C00);
        let u3 = u(3, -3);
        assert_eq!(u3.quantize(0.0, Rounding::NearestEven).unwrap(), 0);
        // enumerate all 8 codes and pick the nearest to 0.3
        let best = (0..8u32)
            .min_by(|&a, &b| {
                (u3.value(a) - 0.3)
                    .abs()
                    .partial_cmp(&(u3.value(b) - 0.3).abs())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, 2);
        assert_eq!(u3.quantize(0.3, Rounding::NearestEven).unwrap(), 2);
        assert!(matches!(
            u3.quantize(f64::NAN, Rounding::NearestEven),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn quantize_saturates() {
        let u3 = u(3, -3);
        assert_eq!(u3.quantize(5.0, Rounding::NearestEven).unwrap(), 7);
        assert_eq!(u3.quantize(-5.0, Rounding::NearestEven).unwrap(), 0);
        let s4 = NumericFormat::Fixed(FixedFormat::signed(4));
        assert_eq!(s4.quantize(-9.0, Rounding::NearestEven).unwrap(), 0b1000);
        assert_eq!(s4.quantize(f64::INFINITY, Rounding::NearestEven).unwrap(), 0b0111);
        let b16 = NumericFormat::binary16();
        assert_eq!(b16.quantize(1e9, Rounding::NearestEven).unwrap(), 0x7BFF);
        assert_eq!(b16.quantize(-1e9, Rounding::NearestEven).unwrap(), 0xFBFF);
        assert_eq!(b16.nonnegative().quantize(-3.0, Rounding::NearestEven).unwrap(), 0);
    }

    #[test]
    fn ties_go_to_even() {
        let u3 = u(3, 0);
        assert_eq!(u3.quantize(2.5, Rounding::NearestEven).unwrap(), 2);
        assert_eq!(u3.quantize(3.5, Rounding::NearestEven).unwrap(), 4);
        let b16 = NumericFormat::binary16();
        // 1 + 2^-11 is halfway between 1 and 1 + 2^-10
        assert_eq!(b16.quantize(1.0 + 2f64.powi(-11), Rounding::NearestEven).unwrap(), 0x3C00);
        assert_eq!(
            b16.quantize(1.0 + 3.0 * 2f64.powi(-11), Rounding::NearestEven).unwrap(),
            0x3C02
        );
    }

    #[test]
    fn bitplane_examples() {
        let t = QuantizedTensor::new(vec![3], u(3, 0), vec![5, 3, 0]).unwrap();
        assert_eq!(bitplane(&t, 0).unwrap(), vec![1, 1, 0]);
        assert_eq!(bitplane(&t, 2).unwrap(), vec![1, 0, 0]);
        assert!(matches!(bitplane(&t, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn split_signed_examples() {
        assert_eq!(split_signed(0b0101, 4), (0b101, 0));
        assert_eq!(split_signed(0b1101, 4), (0b101, 1));
        let s4 = FixedFormat::signed(4);
        for code in 0..16u32 {
            let (xb, msb) = split_signed(code, 4);
            assert_eq!(xb as i64 - ((msb as i64) << 3), s4.to_int(code));
        }
    }

    #[test]
    fn signed_decomposition_exhaustive() {
        for n in 2..=12u32 {
            let f = FixedFormat::new(n, true, 0).unwrap();
            for code in 0..(1u32 << n) {
                let (xb, msb) = split_signed(code, n);
                assert_eq!(xb as i64 - ((msb as i64) << (n - 1)), f.to_int(code));
            }
        }
    }

    #[test]
    fn float_fields_examples() {
        let f = FloatFormat::BINARY16;
        let one = float_fields(0x3C00, &f);
        assert_eq!(one.sign, 0);
        assert_eq!(one.exponent, 15);
        let mut planes = vec![1u8];
        planes.extend([0u8; 10]);
        assert_eq!(one.mantissa_planes, planes);
        let zero = float_fields(0, &f);
        assert_eq!(zero.sign, 0);
        assert_eq!(zero.exponent, 0);
        assert!(zero.mantissa_planes.iter().all(|&b| b == 0));
        // subnormal: implicit plane is zero
        let sub = float_fields(0x0001, &f);
        assert_eq!(sub.mantissa_planes[0], 0);
        assert_eq!(*sub.mantissa_planes.last().unwrap(), 1);
        for code in [0x0000, 0x0001, 0x3C00, 0x7BFF, 0xBC01, 0x8001] {
            assert_eq!(float_fields(code, &f).reassemble(&f), code);
        }
    }

    #[test]
    fn round_trip_all_small_codes() {
        let formats = [
            u(3, -3),
            u(8, 0),
            NumericFormat::Fixed(FixedFormat::signed(5)),
            "e4m3".parse().unwrap(),
            "e3m2+".parse().unwrap(),
            NumericFormat::binary16(),
        ];
        for fmt in formats {
            for c in fmt.codes() {
                let v = fmt.dequantize(c);
                let back = fmt.quantize(v, Rounding::NearestEven).unwrap();
                // -0 maps to +0
                if v == 0.0 {
                    assert_eq!(fmt.value(back), 0.0);
                } else {
                    assert_eq!(back, c, "{fmt} code {c:#x}");
                }
            }
        }
    }

    #[test]
    fn unsigned_fixed_dequantize_is_monotone() {
        for bits in 1..=10 {
            let f = FixedFormat::new(bits, false, -3).unwrap();
            let vals: Vec<f64> = (0..(1u32 << bits)).map(|c| f.value(c)).collect();
            assert!(vals.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn format_names_round_trip() {
        for name in ["u3", "u8", "s4", "u8@0", "s16@-4", "binary16", "binary16+", "e4m3", "e4m3+", "e5m2b9"] {
            let f: NumericFormat = name.parse().unwrap();
            assert_eq!(f.to_string(), name);
        }
        let e4m3: NumericFormat = "minifloat-e4m3-style".parse().unwrap();
        assert_eq!(e4m3.to_string(), "e4m3");
        assert!("q7".parse::<NumericFormat>().is_err());
        assert!("u0".parse::<NumericFormat>().is_err());
        assert!("u33".parse::<NumericFormat>().is_err());
    }

    #[test]
    fn binary16_matches_half_crate() {
        let b16 = NumericFormat::binary16();
        for bits in 0..=u16::MAX {
            let h = half::f16::from_bits(bits);
            if !h.is_finite() {
                assert!(!b16.is_valid_code(bits as u32));
                continue;
            }
            assert_eq!(b16.value(bits as u32), h.to_f64(), "{bits:#x}");
        }
    }

    #[test]
    fn calibrated_scale_maps_max_to_top_code() {
        let f = FixedFormat::calibrated(8, false, 1.0).unwrap();
        assert_eq!(f.scale(), -7);
        assert!(f.max_int() as f64 * 2f64.powi(f.scale()) >= 1.0);
        let g = FixedFormat::calibrated(4, true, 0.75).unwrap();
        assert!(g.max_int() as f64 * 2f64.powi(g.scale()) >= 0.75);
        assert!(g.max_int() as f64 * 2f64.powi(g.scale() - 1) < 0.75);
    }

    #[test]
    fn snap_weights_uses_shared_power_of_two() {
        let s = snap_weights(&[0.5, -0.25, 0.125, 0.0], 8).unwrap();
        for (i, w) in [0.5, -0.25, 0.125, 0.0].iter().enumerate() {
            assert_eq!(s.ints[i] as f64 * 2f64.powi(s.exp), *w);
        }
        assert!(snap_weights(&[f32::NAN], 8).is_err());
        let z = snap_weights(&[0.0, 0.0], 16).unwrap();
        assert!(z.ints.iter().all(|&v| v == 0));
    }

    proptest! {
        #[test]
        fn bitplanes_reassemble_codes(codes in proptest::collection::vec(0u32..256, 1..64)) {
            let t = QuantizedTensor::new(vec![codes.len()], u(8, 0), codes.clone()).unwrap();
            let mut acc = vec![0u32; codes.len()];
            for j in 0..8 {
                for (a, b) in acc.iter_mut().zip(bitplane(&t, j).unwrap()) {
                    *a += (b as u32) << j;
                }
            }
            prop_assert_eq!(acc, codes);
        }

        #[test]
        fn binary16_quantize_matches_half(v in -70000.0f64..70000.0) {
            let b16 = NumericFormat::binary16();
            let ours = b16.quantize(v, Rounding::NearestEven).unwrap();
            let h = half::f16::from_f64(v);
            if h.is_finite() {
                prop_assert_eq!(b16.value(ours), h.to_f64());
            } else {
                prop_assert_eq!(ours & 0x7FFF, 0x7BFF);
            }
        }

        #[test]
        fn binary16_quantize_matches_half_small(v in -1e-3f64..1e-3) {
            let b16 = NumericFormat::binary16();
            let ours = b16.quantize(v, Rounding::NearestEven).unwrap();
            prop_assert_eq!(b16.value(ours), half::f16::from_f64(v).to_f64());
        }

        #[test]
        fn float_reconstruction_matches_decoder(bits in 0u16..0x7C00, neg in any::<bool>()) {
            let f = FloatFormat::BINARY16;
            let code = bits as u32 | if neg { 0x8000 } else { 0 };
            let fields = float_fields(code, &f);
            let m = fields.mantissa_planes.iter().fold(0i64, |a, &b| a << 1 | b as i64);
            let e = fields.exponent.max(1) as i32;
            let v = if fields.sign == 1 { -1.0 } else { 1.0 } * m as f64 * 2f64.powi(e - 15 - 10);
            prop_assert_eq!(v, half::f16::from_bits(code as u16).to_f64());
            prop_assert_eq!(fields.reassemble(&f), code);
        }

        #[test]
        fn encode_scaled_is_exact_nearest(a in -1_000_000i128..1_000_000, exp in -40i32..10) {
            // compare against f64 nearest-even on values f64 represents exactly
            let b16 = NumericFormat::binary16();
            let v = a as f64 * 2f64.powi(exp);
            let ours = b16.encode_scaled(a, exp, RoundMode::NearestEven);
            let h = half::f16::from_f64(v);
            if h.is_finite() {
                prop_assert_eq!(b16.value(ours), h.to_f64());
            }
        }
    }
}
