//! Counter-indexed stochastic rounding.
//!
//! The unit is a table `f(x, i)` over input codes `x` and a counter `i` that
//! advances modulo `R` on every access. With thresholds `r(i)` in `[0, 1)`,
//! `f(x, i) = floor(x)` when `r(i) <= 1 + (floor(x) - x) / eps`, otherwise
//! `floor(x) + eps`, where `floor` and `eps` refer to the output grid.

use rand::{Rng, SeedableRng};
use rand_xorshift::XorShiftRng;

use crate::error::{Error, Result};
use crate::formats::{decompose_f64, Code, NumericFormat, RoundMode, Rounding};
use crate::lut::{tabulate_codes, Caps, Lut};

pub const DEFAULT_R: usize = 64;
pub const DEFAULT_SEED: u64 = 0x5EED_1234_ABCD_0001;

/// Rounding-unit thresholds and tables, with a mutable access counter.
///
/// One instance per worker; batch code resets the counter per sample so
/// results do not depend on scheduling.
#[derive(Clone, Debug)]
pub struct StochasticRounder {
    r: Vec<f64>,
    counter: usize,
    saturations: u64,
    tables: Option<RounderTables>,
}

#[derive(Clone, Debug)]
struct RounderTables {
    input: NumericFormat,
    output: NumericFormat,
    luts: Vec<Lut>,
}

/// `R * 2^beta_in * beta_out` bits.
pub fn rounder_size_bits(r: u64, beta_in: u32, beta_out: u32) -> u128 {
    r as u128 * (1u128 << beta_in) * beta_out as u128
}

impl StochasticRounder {
    /// `r_count` thresholds drawn uniformly from `[0, 1)` with a seeded xorshift generator.
    pub fn seeded(r_count: usize, seed: u64) -> Result<Self> {
        if r_count == 0 {
            return Err(Error::Domain("R must be at least 1".into()));
        }
        let mut rng = XorShiftRng::seed_from_u64(seed);
        Ok(Self::from_thresholds(
            (0..r_count).map(|_| rng.random::<f64>()).collect(),
        ))
    }

    /// Van der Corput (bit-reversal) dither: an evenly spread 1-D sequence.
    pub fn dithered(r_count: usize) -> Result<Self> {
        if r_count == 0 {
            return Err(Error::Domain("R must be at least 1".into()));
        }
        let vdc = |mut i: usize| {
            let (mut v, mut denom) = (0.0, 1.0);
            while i > 0 {
                denom *= 2.0;
                if i & 1 == 1 {
                    v += 1.0 / denom;
                }
                i >>= 1;
            }
            v
        };
        Ok(Self::from_thresholds((0..r_count).map(vdc).collect()))
    }

    pub fn from_thresholds(r: Vec<f64>) -> Self {
        assert!(!r.is_empty() && r.iter().all(|v| (0.0..1.0).contains(v)));
        StochasticRounder {
            r,
            counter: 0,
            saturations: 0,
            tables: None,
        }
    }

    /// Freezes the `(x, i)` table for rounding codes of `input` into `output`.
    pub fn with_tables(mut self, input: NumericFormat, output: NumericFormat) -> Result<Self> {
        let caps = Caps::default();
        let mut luts = Vec::with_capacity(self.r.len());
        for &threshold in &self.r {
            luts.push(tabulate_codes(
                |x| round_with(output, input.value(x), threshold).0,
                input.width(),
                output,
                &caps,
            )?);
        }
        self.tables = Some(RounderTables {
            input,
            output,
            luts,
        });
        Ok(self)
    }

    pub fn r_count(&self) -> usize {
        self.r.len()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.r
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn reset(&mut self) {
        self.counter = 0;
    }

    /// Number of accesses where `floor(x) + eps` was not representable.
    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    pub fn note_saturation(&mut self) {
        self.saturations += 1;
    }

    fn advance(&mut self) -> f64 {
        let r = self.r[self.counter];
        self.counter += 1;
        if self.counter == self.r.len() {
            self.counter = 0;
        }
        r
    }

    /// Consumes one threshold: rounds up iff `r(i) > 1 - frac`.
    pub fn draw_up(&mut self, frac: f64) -> bool {
        let r = self.advance();
        r > 1.0 - frac
    }

    /// Table bits: `R * 2^beta(I) * beta(O)`, or 0 before tables are frozen.
    pub fn size_bits(&self) -> u128 {
        self.tables
            .as_ref()
            .map_or(0, |t| t.luts.iter().map(Lut::size_bits).sum())
    }

    pub fn output_format(&self) -> Option<NumericFormat> {
        self.tables.as_ref().map(|t| t.output)
    }

    /// Table lookup `f(x, i)`, then `i <- (i + 1) mod R`.
    pub fn round_code(&mut self, x: Code) -> Result<Code> {
        let t = self
            .tables
            .as_ref()
            .ok_or_else(|| Error::Contract("rounder tables were not frozen".into()))?;
        let mut raw = [0u64];
        t.luts[self.counter].lookup_raw(x as u64, &mut raw)?;
        if t.output.next_up(raw[0] as Code).is_none() {
            let v = t.input.value(x);
            if v > t.output.value(raw[0] as Code) {
                self.saturations += 1;
            }
        }
        self.advance();
        Ok(raw[0] as Code)
    }

    /// Raw lookup without bookkeeping other than the counter (engine hot path).
    #[inline]
    pub(crate) fn lookup_fast(&mut self, x: u64) -> u64 {
        let t = self.tables.as_ref().expect("rounder tables");
        let mut raw = [0u64];
        t.luts[self.counter].lookup_raw(x, &mut raw).expect("rounder index in range");
        self.advance();
        raw[0]
    }
}

/// `f(x, i)` for one threshold; the flag reports saturation.
fn round_with(output: NumericFormat, x: f64, threshold: f64) -> (Code, bool) {
    if x.is_nan() {
        return (output.zero_code(), false);
    }
    let (a, e) = decompose_f64(x);
    let lo = output.encode_scaled(a, e, RoundMode::Floor);
    let lo_v = output.value(lo);
    if lo_v >= x {
        return (lo, false);
    }
    let Some(hi) = output.next_up(lo) else {
        return (lo, true);
    };
    let eps = output.value(hi) - lo_v;
    if threshold <= 1.0 + (lo_v - x) / eps {
        (lo, false)
    } else {
        (hi, false)
    }
}

/// Rounds a real value with the unit's formula, advancing the counter.
pub fn stochastic_round(x: f64, output: NumericFormat, unit: &mut StochasticRounder) -> Result<Code> {
    output.quantize(x, Rounding::Stochastic(unit))
}
