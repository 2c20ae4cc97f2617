//! Immutable look-up tables.
//!
//! A [`Lut`] stores `2^index_bits` entries, each a small tensor of elements
//! bit-packed little-endian into a byte stream, so `size_bits` is exactly the
//! number of payload bits. Elements are either code words of a
//! [`NumericFormat`] or two's-complement integers (accumulator units).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::formats::{FixedFormat, FloatFormat, NumericFormat, Rounding};

/// Materialization limits. Configurations beyond them can still be costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub max_index_bits: u32,
    pub max_bank_bits: u128,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            max_index_bits: 26,
            // 2 GiB of table payload
            max_bank_bits: 1u128 << 34,
        }
    }
}

impl Caps {
    pub fn check_index_bits(&self, index_bits: u32) -> Result<()> {
        if index_bits > self.max_index_bits {
            return Err(Error::Capacity(format!(
                "table index width {index_bits} bits exceeds the cap of {} bits",
                self.max_index_bits
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryLayout {
    /// Code words of a numeric format.
    Codes(NumericFormat),
    /// Two's-complement integers `bits` wide.
    Signed { bits: u32 },
}

impl EntryLayout {
    pub fn element_bits(&self) -> u32 {
        match self {
            EntryLayout::Codes(f) => f.width(),
            EntryLayout::Signed { bits } => *bits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lut {
    index_bits: u32,
    entry_shape: Vec<usize>,
    layout: EntryLayout,
    #[serde(with = "byte_buf")]
    storage: Vec<u8>,
}

/// Serializes table payloads as one byte string instead of a sequence.
mod byte_buf {
    use serde::de::{Error, SeqAccess, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bytes(v)
    }

    struct Bytes;

    impl<'de> Visitor<'de> for Bytes {
        type Value = Vec<u8>;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a byte string")
        }

        fn visit_bytes<E: Error>(self, v: &[u8]) -> Result<Vec<u8>, E> {
            Ok(v.to_vec())
        }

        fn visit_byte_buf<E: Error>(self, v: Vec<u8>) -> Result<Vec<u8>, E> {
            Ok(v)
        }

        fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Vec<u8>, A::Error> {
            let mut out = Vec::with_capacity(seq.size_hint().unwrap_or(0).min(1 << 20));
            while let Some(b) = seq.next_element()? {
                out.push(b);
            }
            Ok(out)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        d.deserialize_byte_buf(Bytes)
    }
}

fn payload_bytes(index_bits: u32, entry_bits: u64) -> Result<usize> {
    let bits = (1u128 << index_bits) * entry_bits as u128;
    usize::try_from(bits.div_ceil(8))
        .map_err(|_| Error::Capacity(format!("{bits} bits do not fit in memory")))
}

#[inline]
fn write_bits(buf: &mut [u8], pos: u64, width: u32, value: u64) {
    let mut pos = pos as usize;
    let mut left = width;
    let mut v = value;
    while left > 0 {
        let byte = pos >> 3;
        let off = (pos & 7) as u32;
        let take = (8 - off).min(left);
        let mask = ((1u16 << take) - 1) as u8;
        buf[byte] |= ((v as u8) & mask) << off;
        v = if take == 64 { 0 } else { v >> take };
        left -= take;
        pos += take as usize;
    }
}

#[inline]
fn read_bits(buf: &[u8], pos: u64, width: u32) -> u64 {
    let byte = (pos >> 3) as usize;
    let off = (pos & 7) as u32;
    let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    if byte + 16 <= buf.len() {
        let w = u128::from_le_bytes(buf[byte..byte + 16].try_into().unwrap());
        return (w >> off) as u64 & mask;
    }
    let mut v: u128 = 0;
    let end = (byte + 9).min(buf.len());
    for (k, &b) in buf[byte..end].iter().enumerate() {
        v |= (b as u128) << (8 * k);
    }
    (v >> off) as u64 & mask
}

#[inline]
fn sign_extend(v: u64, bits: u32) -> i64 {
    if bits == 64 {
        v as i64
    } else {
        let shift = 64 - bits;
        ((v << shift) as i64) >> shift
    }
}

/// Width of the narrowest two's-complement type holding every value in `[lo, hi]`.
pub fn signed_width(lo: i64, hi: i64) -> u32 {
    let need = |v: i64| {
        if v >= 0 {
            65 - v.leading_zeros()
        } else {
            65 - (!v).leading_zeros()
        }
    };
    need(lo).max(need(hi)).clamp(1, 64)
}

impl Lut {
    /// All-zero table.
    pub fn zeroed(index_bits: u32, entry_shape: Vec<usize>, layout: EntryLayout) -> Result<Self> {
        let len: usize = entry_shape.iter().product();
        let bytes = payload_bytes(index_bits, len as u64 * layout.element_bits() as u64)?;
        Ok(Lut {
            index_bits,
            entry_shape,
            layout,
            storage: vec![0; bytes],
        })
    }

    pub fn index_bits(&self) -> u32 {
        self.index_bits
    }

    pub fn entry_shape(&self) -> &[usize] {
        &self.entry_shape
    }

    pub fn layout(&self) -> EntryLayout {
        self.layout
    }

    pub fn entry_len(&self) -> usize {
        self.entry_shape.iter().product()
    }

    pub fn element_bits(&self) -> u32 {
        self.layout.element_bits()
    }

    pub fn entry_bits(&self) -> u64 {
        self.entry_len() as u64 * self.element_bits() as u64
    }

    pub fn entry_count(&self) -> u64 {
        1u64 << self.index_bits
    }

    /// `2^index_bits * entry_bits`.
    pub fn size_bits(&self) -> u128 {
        (self.entry_count() as u128) * self.entry_bits() as u128
    }

    pub fn storage(&self) -> &[u8] {
        &self.storage
    }

    fn check_index(&self, index: u64) -> Result<()> {
        if index >> self.index_bits != 0 {
            return Err(Error::Index {
                index,
                limit: self.entry_count(),
            });
        }
        Ok(())
    }

    /// Raw element bits of one entry.
    pub fn lookup_raw(&self, index: u64, out: &mut [u64]) -> Result<()> {
        self.check_index(index)?;
        let w = self.element_bits();
        let base = index * self.entry_bits();
        for (k, o) in out.iter_mut().take(self.entry_len()).enumerate() {
            *o = read_bits(&self.storage, base + k as u64 * w as u64, w);
        }
        Ok(())
    }

    /// Signed elements of one entry; `out.len()` must equal `entry_len`.
    /// Code-word layouts return their integer value in units of `2^unit_exp`.
    #[inline]
    pub fn lookup_into(&self, index: u64, out: &mut [i64]) -> Result<()> {
        self.check_index(index)?;
        let w = self.element_bits();
        let mut pos = index * self.entry_bits();
        match self.layout {
            EntryLayout::Signed { bits } => {
                for o in out.iter_mut() {
                    *o = sign_extend(read_bits(&self.storage, pos, w), bits);
                    pos += w as u64;
                }
            }
            EntryLayout::Codes(f) => {
                for o in out.iter_mut() {
                    *o = f.code_int(read_bits(&self.storage, pos, w) as u32) as i64;
                    pos += w as u64;
                }
            }
        }
        Ok(())
    }

    /// Decoded entry as real values.
    pub fn lookup(&self, index: u64) -> Result<Vec<f64>> {
        let mut raw = vec![0u64; self.entry_len()];
        self.lookup_raw(index, &mut raw)?;
        Ok(raw
            .into_iter()
            .map(|r| match self.layout {
                EntryLayout::Codes(f) => f.value(r as u32),
                EntryLayout::Signed { bits } => sign_extend(r, bits) as f64,
            })
            .collect())
    }

    /// Packs entries produced block by block. `fill(first_index, values)` writes
    /// `values.len() / entry_len` consecutive entries as raw element bits.
    fn pack<F>(&mut self, policy: ExecPolicy, fill: F)
    where
        F: Fn(u64, &mut [u64]) + Sync + Send,
    {
        let len = self.entry_len();
        let w = self.element_bits();
        let entry_bits = self.entry_bits();
        let entries = self.entry_count();
        // 8 entries always end on a byte boundary
        let block_entries: u64 = (8192u64).min(entries.max(1)).next_multiple_of(8);
        let block_bytes = ((block_entries * entry_bits) / 8).max(1) as usize;
        exec::fill_chunks(policy, &mut self.storage, block_bytes, |b, bytes| {
            let first = b as u64 * block_entries;
            let count = block_entries.min(entries - first) as usize;
            let mut vals = vec![0u64; count * len];
            fill(first, &mut vals);
            for (k, &v) in vals.iter().enumerate() {
                write_bits(bytes, k as u64 * w as u64, w, v);
            }
        });
        debug_assert_eq!(self.storage.len() as u128 * 8, self.size_bits().next_multiple_of(8));
    }
}

/// Tabulates a real-valued function over every index word, quantizing each
/// output element to `format` (round to nearest even, saturating).
pub fn tabulate<F>(
    f: F,
    index_bits: u32,
    entry_shape: Vec<usize>,
    format: NumericFormat,
    caps: &Caps,
) -> Result<Lut>
where
    F: Fn(u64, &mut [f64]) + Sync + Send,
{
    caps.check_index_bits(index_bits)?;
    let mut lut = Lut::zeroed(index_bits, entry_shape, EntryLayout::Codes(format))?;
    let len = lut.entry_len();
    lut.pack(ExecPolicy::Parallel, |first, vals| {
        let mut out = vec![0f64; len];
        for (k, chunk) in vals.chunks_mut(len.max(1)).enumerate() {
            f(first + k as u64, &mut out);
            for (c, &v) in chunk.iter_mut().zip(&out) {
                *c = format
                    .quantize(v, Rounding::NearestEven)
                    .unwrap_or_else(|_| format.zero_code()) as u64;
            }
        }
    });
    Ok(lut)
}

/// Tabulates a code-to-code function over every index word (scalar entries).
pub fn tabulate_codes<F>(f: F, index_bits: u32, format: NumericFormat, caps: &Caps) -> Result<Lut>
where
    F: Fn(u32) -> u32 + Sync + Send,
{
    caps.check_index_bits(index_bits)?;
    let mut lut = Lut::zeroed(index_bits, vec![1], EntryLayout::Codes(format))?;
    lut.pack(ExecPolicy::Parallel, |first, vals| {
        for (k, v) in vals.iter_mut().enumerate() {
            *v = f((first + k as u64) as u32) as u64;
        }
    });
    Ok(lut)
}

/// Tabulates an exact integer function. The element width is `bits` when
/// given (entries that do not fit are a capacity error), otherwise the
/// narrowest width holding every entry.
pub fn tabulate_signed<F>(
    f: F,
    index_bits: u32,
    entry_shape: Vec<usize>,
    bits: Option<u32>,
    caps: &Caps,
    policy: ExecPolicy,
) -> Result<Lut>
where
    F: Fn(u64, &mut [i64]) + Sync + Send,
{
    caps.check_index_bits(index_bits)?;
    let len: usize = entry_shape.iter().product();
    let entries = 1u64 << index_bits;
    let block = 4096u64;
    let blocks = entries.div_ceil(block) as usize;
    let ranges = exec::map_range(policy, blocks, |b| {
        let mut out = vec![0i64; len];
        let (mut lo, mut hi) = (0i64, 0i64);
        let start = b as u64 * block;
        for i in start..(start + block).min(entries) {
            f(i, &mut out);
            for &v in &out {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    });
    let (lo, hi) = ranges
        .into_iter()
        .fold((0i64, 0i64), |(a, b), (c, d)| (a.min(c), b.max(d)));
    let needed = signed_width(lo, hi);
    let width = match bits {
        Some(b) if b < needed => {
            return Err(Error::Capacity(format!(
                "table entries span [{lo}, {hi}] and need {needed} bits, but entry width is fixed at {b}"
            )))
        }
        Some(b) => b,
        None => needed,
    };
    let mut lut = Lut::zeroed(index_bits, entry_shape, EntryLayout::Signed { bits: width })?;
    let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    lut.pack(policy, |first, vals| {
        let mut out = vec![0i64; len];
        for (k, chunk) in vals.chunks_mut(len.max(1)).enumerate() {
            f(first + k as u64, &mut out);
            for (c, &v) in chunk.iter_mut().zip(&out) {
                *c = v as u64 & mask;
            }
        }
    });
    Ok(lut)
}

/// Physical tables plus a many-to-one map from logical table ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LutBank {
    tables: Vec<Lut>,
    logical: Vec<u32>,
}

impl LutBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a physical table and returns its physical id.
    pub fn add_table(&mut self, lut: Lut) -> u32 {
        self.tables.push(lut);
        (self.tables.len() - 1) as u32
    }

    /// Adds a logical id resolving to `physical`.
    pub fn add_logical(&mut self, physical: u32) -> Result<u32> {
        if physical as usize >= self.tables.len() {
            return Err(Error::Index {
                index: physical as u64,
                limit: self.tables.len() as u64,
            });
        }
        self.logical.push(physical);
        Ok((self.logical.len() - 1) as u32)
    }

    pub fn physical_id(&self, logical: u32) -> Option<u32> {
        self.logical.get(logical as usize).copied()
    }

    pub fn resolve(&self, logical: u32) -> Result<&Lut> {
        let p = self.physical_id(logical).ok_or(Error::Index {
            index: logical as u64,
            limit: self.logical.len() as u64,
        })?;
        Ok(&self.tables[p as usize])
    }

    #[inline]
    pub(crate) fn resolve_unchecked(&self, logical: u32) -> &Lut {
        &self.tables[self.logical[logical as usize] as usize]
    }

    pub fn tables(&self) -> &[Lut] {
        &self.tables
    }

    pub fn physical_count(&self) -> usize {
        self.tables.len()
    }

    pub fn logical_count(&self) -> usize {
        self.logical.len()
    }

    /// Sum over distinct physical tables.
    pub fn size_bits(&self) -> u128 {
        self.tables.iter().map(Lut::size_bits).sum()
    }
}

const LUT_MAGIC: &[u8; 4] = b"LUT1";

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::parse(self.offset, "unexpected end of LUT image"))?;
        self.offset += N as u64;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
}

impl Lut {
    /// Writes the `LUT1` image: magic, index bits, entry bits, entry shape,
    /// element layout, then the packed payload.
    pub fn write_image(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(LUT_MAGIC)?;
        put_u32(w, self.index_bits)?;
        put_u32(w, self.entry_bits() as u32)?;
        put_u32(w, self.entry_shape.len() as u32)?;
        for &d in &self.entry_shape {
            put_u32(w, d as u32)?;
        }
        match self.layout {
            EntryLayout::Signed { bits } => w.write_all(&[0, bits as u8])?,
            EntryLayout::Codes(NumericFormat::Fixed(f)) => {
                w.write_all(&[1, f.bits() as u8, f.is_signed() as u8])?;
                w.write_all(&f.scale().to_le_bytes())?;
            }
            EntryLayout::Codes(NumericFormat::Float(f)) => {
                w.write_all(&[
                    2,
                    f.mantissa_bits() as u8,
                    f.exponent_bits() as u8,
                    f.has_sign() as u8,
                ])?;
                w.write_all(&f.bias().to_le_bytes())?;
            }
        }
        w.write_all(&(self.storage.len() as u64).to_le_bytes())?;
        w.write_all(&self.storage)?;
        Ok(())
    }

    pub fn read_image(r: impl Read) -> Result<Lut> {
        let mut c = Cursor { inner: r, offset: 0 };
        if &c.bytes::<4>()? != LUT_MAGIC {
            return Err(Error::parse(0, "bad LUT magic"));
        }
        let index_bits = c.u32()?;
        let entry_bits = c.u32()?;
        let rank = c.u32()?;
        if rank > 8 || index_bits > 40 {
            return Err(Error::parse(c.offset, "implausible LUT header"));
        }
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let layout_at = c.offset;
        let layout = match c.bytes::<1>()?[0] {
            0 => EntryLayout::Signed {
                bits: c.bytes::<1>()?[0] as u32,
            },
            1 => {
                let [bits, signed] = c.bytes::<2>()?;
                let scale = i32::from_le_bytes(c.bytes()?);
                EntryLayout::Codes(NumericFormat::Fixed(FixedFormat::new(
                    bits as u32,
                    signed != 0,
                    scale,
                )?))
            }
            2 => {
                let [n, t, s] = c.bytes::<3>()?;
                let bias = i32::from_le_bytes(c.bytes()?);
                EntryLayout::Codes(NumericFormat::Float(FloatFormat::new(
                    n as u32,
                    t as u32,
                    s != 0,
                    bias,
                )?))
            }
            _ => return Err(Error::parse(layout_at, "unknown entry layout")),
        };
        let mut lut = Lut::zeroed(index_bits, shape, layout)?;
        if lut.entry_bits() != entry_bits as u64 {
            return Err(Error::parse(4, "entry_bits does not match shape and layout"));
        }
        let len_at = c.offset;
        let len = u64::from_le_bytes(c.bytes()?);
        if len != lut.storage.len() as u64 {
            return Err(Error::parse(len_at, "payload length does not match header"));
        }
        c.inner
            .read_exact(&mut lut.storage)
            .map_err(|_| Error::parse(c.offset, "truncated LUT payload"))?;
        Ok(lut)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::FixedFormat;

    fn fixed(bits: u32, signed: bool, scale: i32) -> NumericFormat {
        NumericFormat::Fixed(FixedFormat::new(bits, signed, scale).unwrap())
    }

    #[test]
    fn identity_table() {
        let f = fixed(4, false, 0);
        let lut = tabulate(|i, out| out[0] = i as f64, 4, vec![1], f, &Caps::default()).unwrap();
        for i in 0..16 {
            assert_eq!(lut.lookup(i).unwrap(), vec![i as f64]);
        }
        assert_eq!(lut.size_bits(), 16 * 4);
    }

    #[test]
    fn half_precision_scalar_table_is_128_kib() {
        let b16 = NumericFormat::binary16();
        let lut = tabulate(
            |i, out| {
                let x = b16.value(i as u32 & 0xFFFF);
                out[0] = if x.is_finite() { x.tanh() } else { 0.0 };
            },
            16,
            vec![1],
            b16,
            &Caps::default(),
        )
        .unwrap();
        assert_eq!(lut.size_bits(), 1 << 20);
        assert_eq!(lut.size_bits() / 8 / 1024, 128);
        assert_eq!(lut.storage().len(), 128 * 1024);
    }

    #[test]
    fn relu_over_signed_bytes() {
        let s8 = fixed(8, true, 0);
        let FixedFormat { .. } = *s8.as_fixed().unwrap();
        let lut = tabulate(
            |i, out| out[0] = s8.value(i as u32).max(0.0),
            8,
            vec![1],
            s8,
            &Caps::default(),
        )
        .unwrap();
        for code in 0..256u64 {
            let direct = s8.value(code as u32).max(0.0);
            assert_eq!(lut.lookup(code).unwrap()[0], direct);
        }
    }

    #[test]
    fn lookup_matches_quantized_function() {
        let out_fmt = NumericFormat::binary16();
        let f = |i: u64, out: &mut [f64]| {
            out[0] = (i as f64 * 0.37).sin();
            out[1] = (i as f64).sqrt() - 3.0;
        };
        let lut = tabulate(f, 10, vec![2], out_fmt, &Caps::default()).unwrap();
        let mut expect = [0f64; 2];
        for i in 0..1024 {
            f(i, &mut expect);
            let want: Vec<f64> = expect
                .iter()
                .map(|&v| out_fmt.value(out_fmt.quantize(v, Rounding::NearestEven).unwrap()))
                .collect();
            assert_eq!(lut.lookup(i).unwrap(), want);
            // purity
            assert_eq!(lut.lookup(i).unwrap(), lut.lookup(i).unwrap());
        }
        assert!(matches!(lut.lookup(1024), Err(Error::Index { .. })));
    }

    #[test]
    fn zeroed_lookup_is_zero() {
        let lut = Lut::zeroed(3, vec![4], EntryLayout::Signed { bits: 12 }).unwrap();
        let mut out = [7i64; 4];
        lut.lookup_into(0, &mut out).unwrap();
        assert_eq!(out, [0; 4]);
    }

    #[test]
    fn signed_tabulation_round_trips() {
        let f = |i: u64, out: &mut [i64]| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = (i as i64 - 500) * (k as i64 + 1) * 1_000_003;
            }
        };
        for policy in [ExecPolicy::Sequential, ExecPolicy::Parallel] {
            let lut = tabulate_signed(f, 10, vec![3], None, &Caps::default(), policy).unwrap();
            let mut out = [0i64; 3];
            let mut want = [0i64; 3];
            for i in 0..1024 {
                lut.lookup_into(i, &mut out).unwrap();
                f(i, &mut want);
                assert_eq!(out, want);
            }
        }
        let err = tabulate_signed(f, 10, vec![3], Some(8), &Caps::default(), ExecPolicy::Sequential);
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn size_bits_examples() {
        let lut = Lut::zeroed(8, vec![10], EntryLayout::Signed { bits: 16 }).unwrap();
        assert_eq!(lut.size_bits(), 40960);

        let mut bank = LutBank::new();
        for _ in 0..784 {
            let id = bank.add_table(Lut::zeroed(1, vec![10], EntryLayout::Signed { bits: 16 }).unwrap());
            bank.add_logical(id).unwrap();
        }
        assert_eq!(bank.size_bits(), 250880);
        assert!((bank.size_bits() as f64 / 8.0 / 1024.0 - 30.6).abs() < 0.05);

        let mut shared = LutBank::new();
        let id = shared.add_table(lut.clone());
        for _ in 0..3 {
            shared.add_logical(id).unwrap();
        }
        assert_eq!(shared.logical_count(), 3);
        assert_eq!(shared.size_bits(), 40960);
        assert!(shared.add_logical(5).is_err());
    }

    #[test]
    fn splitting_two_bit_index_keeps_size() {
        let whole = Lut::zeroed(2, vec![10], EntryLayout::Signed { bits: 16 }).unwrap();
        let half = Lut::zeroed(1, vec![10], EntryLayout::Signed { bits: 16 }).unwrap();
        assert_eq!(whole.size_bits(), 2 * half.size_bits());
    }

    #[test]
    fn capacity_cap_is_enforced() {
        let caps = Caps {
            max_index_bits: 10,
            ..Caps::default()
        };
        let err = tabulate(|_, _| {}, 11, vec![1], fixed(8, false, 0), &caps).unwrap_err();
        assert!(err.to_string().contains("11 bits"));
    }

    #[test]
    fn image_round_trip_and_corruption() {
        let f = |i: u64, out: &mut [i64]| out[0] = i as i64 * 3 - 40;
        let lut = tabulate_signed(f, 6, vec![1], None, &Caps::default(), ExecPolicy::Sequential).unwrap();
        let mut buf = Vec::new();
        lut.write_image(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LUT1");
        assert_eq!(Lut::read_image(&buf[..]).unwrap(), lut);

        let coded = tabulate(|i, o| o[0] = i as f64, 4, vec![2, 1], NumericFormat::binary16(), &Caps::default()).unwrap();
        let mut buf2 = Vec::new();
        coded.write_image(&mut buf2).unwrap();
        assert_eq!(Lut::read_image(&buf2[..]).unwrap(), coded);

        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(Lut::read_image(truncated), Err(Error::Parse { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Lut::read_image(&bad[..]), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn signed_width_bounds() {
        assert_eq!(signed_width(0, 0), 1);
        assert_eq!(signed_width(-1, 0), 1);
        assert_eq!(signed_width(0, 1), 2);
        assert_eq!(signed_width(-32768, 32767), 16);
        assert_eq!(signed_width(-32769, 0), 17);
        assert_eq!(signed_width(i64::MIN, i64::MAX), 64);
    }
}
