// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Summaries and distances for fixed-length data series.
//!
//! Everything here is a pure function over immutable inputs: PAA means,
//! iSAX words over standard-normal equiprobable regions, squared Euclidean
//! distance and the squared MINDIST lower bound used for pruning.
//!
//! Symbols count regions from the bottom: a PAA value gets the number of
//! breakpoints at or below it, so a value sitting exactly on a breakpoint
//! belongs to the region above. Breakpoint tables are nested, which makes a
//! `b`-bit symbol the top `b` bits of the finest symbol.

use std::fmt;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Upper bound on the number of PAA segments (and so on `w`).
pub const MAX_SEGMENTS: usize = 16;

/// Finest cardinality supported per segment, in bits.
pub const MAX_BITS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeriesConfig {
    /// Points per series (`n`).
    pub len: usize,
    /// PAA segments per series (`w`).
    pub segments: usize,
    /// Cardinality bits of a full-resolution summary.
    pub max_bits: u8,
}

impl SeriesConfig {
    pub fn new(len: usize, segments: usize, max_bits: u8) -> Result<Self> {
        let cfg = SeriesConfig {
            len,
            segments,
            max_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.segments > MAX_SEGMENTS {
            return Err(Error::config(format!(
                "segment count must be in 1..={MAX_SEGMENTS}, got {}",
                self.segments
            )));
        }
        if self.len == 0 || self.len % self.segments != 0 {
            return Err(Error::SegmentMismatch {
                len: self.len,
                segments: self.segments,
            });
        }
        if self.max_bits == 0 || self.max_bits > MAX_BITS {
            return Err(Error::config(format!(
                "max bits must be in 1..={MAX_BITS}, got {}",
                self.max_bits
            )));
        }
        Ok(())
    }

    /// Number of root subtrees / summarization buffers, `2^w`.
    pub fn root_count(&self) -> usize {
        1 << self.segments
    }

    /// `n / w`, the weight applied to squared PAA-space distances.
    pub fn segment_weight(&self) -> f64 {
        (self.len / self.segments) as f64
    }
}

/// Per-segment means of a series.
#[derive(Clone, Copy, PartialEq)]
pub struct Paa {
    means: [f64; MAX_SEGMENTS],
    len: u8,
}

impl Paa {
    pub fn from_means(means: &[f64]) -> Self {
        assert!(means.len() <= MAX_SEGMENTS);
        let mut out = [0.0; MAX_SEGMENTS];
        out[..means.len()].copy_from_slice(means);
        Paa {
            means: out,
            len: means.len() as u8,
        }
    }

    pub fn means(&self) -> &[f64] {
        &self.means[..self.len as usize]
    }

    pub fn segments(&self) -> usize {
        self.len as usize
    }
}

impl fmt::Debug for Paa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Paa").field(&self.means()).finish()
    }
}

pub fn compute_paa(series: &[f32], segments: usize) -> Result<Paa> {
    if segments == 0 || segments > MAX_SEGMENTS || series.is_empty() || series.len() % segments != 0 {
        return Err(Error::SegmentMismatch {
            len: series.len(),
            segments,
        });
    }
    Ok(paa_unchecked(series, segments))
}

#[inline]
pub(crate) fn paa_unchecked(series: &[f32], segments: usize) -> Paa {
    let seg_len = series.len() / segments;
    let mut means = [0.0; MAX_SEGMENTS];
    for (mean, chunk) in means.iter_mut().zip(series.chunks_exact(seg_len)) {
        let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
        *mean = sum / seg_len as f64;
    }
    Paa {
        means,
        len: segments as u8,
    }
}

/// Standard-normal equiprobable breakpoints for every cardinality up to
/// [`MAX_BITS`]. Only the finest table is stored; coarser ones are strided
/// views of it, so nesting holds by construction.
#[derive(Clone, Debug)]
pub struct Breakpoints {
    finest: Vec<f64>,
}

impl Default for Breakpoints {
    fn default() -> Self {
        Self::new()
    }
}

impl Breakpoints {
    pub fn new() -> Self {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let regions = 1usize << MAX_BITS;
        let mut finest: Vec<f64> = (1..regions)
            .map(|j| normal.inverse_cdf(j as f64 / regions as f64))
            .collect();
        finest[regions / 2 - 1] = 0.0;
        Breakpoints { finest }
    }

    /// The `2^bits - 1` increasing thresholds at `bits` bits.
    pub fn thresholds(&self, bits: u8) -> Vec<f64> {
        assert!((1..=MAX_BITS).contains(&bits));
        let stride = 1usize << (MAX_BITS - bits);
        (1..(1usize << bits))
            .map(|j| self.finest[j * stride - 1])
            .collect()
    }

    #[inline]
    fn threshold(&self, bits: u8, j: usize) -> f64 {
        // j-th threshold (1-based) at `bits` bits
        self.finest[(j << (MAX_BITS - bits)) - 1]
    }

    /// Region index at the finest cardinality.
    #[inline]
    pub fn finest_symbol(&self, value: f64) -> u8 {
        self.finest.partition_point(|&t| t <= value) as u8
    }

    #[inline]
    pub fn symbol(&self, value: f64, bits: u8) -> u8 {
        self.finest_symbol(value) >> (MAX_BITS - bits)
    }

    /// Lower and upper edge of a region; the outermost regions are unbounded.
    #[inline]
    pub fn region(&self, bits: u8, symbol: u8) -> (f64, f64) {
        let symbol = symbol as usize;
        let top = (1usize << bits) - 1;
        let lower = if symbol == 0 {
            f64::NEG_INFINITY
        } else {
            self.threshold(bits, symbol)
        };
        let upper = if symbol >= top {
            f64::INFINITY
        } else {
            self.threshold(bits, symbol + 1)
        };
        (lower, upper)
    }

    /// Squared distance from `value` to the nearest point of a region.
    #[inline]
    pub fn gap_sq(&self, value: f64, bits: u8, symbol: u8) -> f64 {
        let (lower, upper) = self.region(bits, symbol);
        let d = if value < lower {
            lower - value
        } else if value > upper {
            value - upper
        } else {
            0.0
        };
        d * d
    }
}

/// An iSAX word with per-segment cardinality.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct IsaxWord {
    symbols: [u8; MAX_SEGMENTS],
    bits: [u8; MAX_SEGMENTS],
    len: u8,
}

impl IsaxWord {
    pub fn new(symbols: &[u8], bits: &[u8]) -> Result<Self> {
        if symbols.len() != bits.len() {
            return Err(Error::LengthMismatch {
                left: symbols.len(),
                right: bits.len(),
            });
        }
        if symbols.is_empty() || symbols.len() > MAX_SEGMENTS {
            return Err(Error::config(format!(
                "word must have 1..={MAX_SEGMENTS} segments"
            )));
        }
        let mut word = IsaxWord {
            symbols: [0; MAX_SEGMENTS],
            bits: [0; MAX_SEGMENTS],
            len: symbols.len() as u8,
        };
        for (i, (&s, &b)) in symbols.iter().zip(bits).enumerate() {
            if b == 0 || b > MAX_BITS {
                return Err(Error::config(format!("segment {i} has {b} bits")));
            }
            if (s as u16) >= (1u16 << b) {
                return Err(Error::config(format!(
                    "symbol {s} does not fit in {b} bits (segment {i})"
                )));
            }
            word.symbols[i] = s;
            word.bits[i] = b;
        }
        Ok(word)
    }

    /// The 1-bit-per-segment word of root subtree `index`.
    pub fn root(index: usize, segments: usize) -> Self {
        let mut word = IsaxWord {
            symbols: [0; MAX_SEGMENTS],
            bits: [0; MAX_SEGMENTS],
            len: segments as u8,
        };
        for i in 0..segments {
            word.symbols[i] = ((index >> (segments - 1 - i)) & 1) as u8;
            word.bits[i] = 1;
        }
        word
    }

    pub fn segments(&self) -> usize {
        self.len as usize
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols[..self.len as usize]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits[..self.len as usize]
    }

    pub fn is_max_cardinality(&self, max_bits: u8) -> bool {
        self.bits().iter().all(|&b| b >= max_bits)
    }

    /// Segment refined on split: fewest bits first, ties to the lowest index.
    pub fn split_segment(&self, max_bits: u8) -> Option<usize> {
        self.bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b < max_bits)
            .min_by_key(|(i, &b)| (b, *i))
            .map(|(i, _)| i)
    }

    /// Child word with one more bit on `segment`, the new low bit set to `bit`.
    pub fn refine(&self, segment: usize, bit: u8) -> Self {
        let mut child = *self;
        child.symbols[segment] = (self.symbols[segment] << 1) | (bit & 1);
        child.bits[segment] += 1;
        child
    }

    /// Whether a full-resolution key falls under this word.
    pub fn covers(&self, key: &SaxKey, max_bits: u8) -> bool {
        self.symbols()
            .iter()
            .zip(self.bits())
            .enumerate()
            .all(|(i, (&s, &b))| key.symbol_at(i, b, max_bits) == s)
    }
}

impl fmt::Debug for IsaxWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IsaxWord({self})")
    }
}

impl fmt::Display for IsaxWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (&s, &b)) in self.symbols().iter().zip(self.bits()).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{:0width$b}", s, width = b as usize)?;
        }
        Ok(())
    }
}

/// A full-resolution iSAX summary (every segment at `max_bits`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SaxKey(pub [u8; MAX_SEGMENTS]);

impl SaxKey {
    #[inline]
    pub fn symbol_at(&self, segment: usize, bits: u8, max_bits: u8) -> u8 {
        self.0[segment] >> (max_bits - bits)
    }

    pub fn word(&self, segments: usize, max_bits: u8) -> IsaxWord {
        let mut word = IsaxWord {
            symbols: self.0,
            bits: [0; MAX_SEGMENTS],
            len: segments as u8,
        };
        word.bits[..segments].fill(max_bits);
        word.symbols[segments..].fill(0);
        word
    }

    /// Root buffer index: the leading bit of every segment, segment 0 first.
    #[inline]
    pub fn root_index(&self, segments: usize, max_bits: u8) -> usize {
        self.0[..segments]
            .iter()
            .fold(0, |acc, &s| (acc << 1) | (s >> (max_bits - 1)) as usize)
    }
}

#[inline]
pub(crate) fn sax_key(paa: &Paa, table: &Breakpoints, max_bits: u8) -> SaxKey {
    let mut key = [0u8; MAX_SEGMENTS];
    for (k, &m) in key.iter_mut().zip(paa.means()) {
        *k = table.symbol(m, max_bits);
    }
    SaxKey(key)
}

pub fn compute_isax(paa: &Paa, bits: &[u8], table: &Breakpoints) -> Result<IsaxWord> {
    if bits.len() != paa.segments() {
        return Err(Error::LengthMismatch {
            left: paa.segments(),
            right: bits.len(),
        });
    }
    let symbols: Vec<u8> = paa
        .means()
        .iter()
        .zip(bits)
        .map(|(&m, &b)| {
            if b == 0 || b > MAX_BITS {
                Err(Error::config(format!("{b} bits is outside the breakpoint table")))
            } else {
                Ok(table.symbol(m, b))
            }
        })
        .collect::<Result<_>>()?;
    IsaxWord::new(&symbols, bits)
}

/// Concatenation of the most significant bit of each segment's symbol.
pub fn root_buffer_index(word: &IsaxWord) -> usize {
    word.symbols()
        .iter()
        .zip(word.bits())
        .fold(0, |acc, (&s, &b)| (acc << 1) | (s >> (b - 1)) as usize)
}

pub fn euclidean_distance_sq(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(distance_sq(a, b))
}

#[inline]
pub(crate) fn distance_sq(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] as f64 - y[l] as f64;
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = *x as f64 - *y as f64;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Squared distance with early abandoning: once the partial sum reaches
/// `limit` the partial sum is returned.
#[inline]
pub(crate) fn distance_sq_bounded(a: &[f32], b: &[f32], limit: f64) -> f64 {
    const BLOCK: usize = 32;
    let mut total = 0.0;
    for (x, y) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        total += distance_sq(x, y);
        if total >= limit {
            return total;
        }
    }
    total
}

/// Squared lower-bound distance between a query's PAA and an iSAX word.
pub fn mindist_sq(paa: &Paa, word: &IsaxWord, len: usize, table: &Breakpoints) -> f64 {
    let weight = len as f64 / word.segments() as f64;
    let sum: f64 = paa
        .means()
        .iter()
        .zip(word.symbols().iter().zip(word.bits()))
        .map(|(&m, (&s, &b))| table.gap_sq(m, b, s))
        .sum();
    weight * sum
}

/// Per-query lookup table that turns full-resolution MINDIST into `w`
/// table reads.
#[derive(Clone, Debug)]
pub struct QueryBounds {
    paa: Paa,
    weight: f64,
    regions: usize,
    gaps: Vec<f64>,
}

impl QueryBounds {
    pub fn new(paa: Paa, cfg: &SeriesConfig, table: &Breakpoints) -> Self {
        let regions = 1usize << cfg.max_bits;
        let mut gaps = Vec::with_capacity(regions * paa.segments());
        for &m in paa.means() {
            for s in 0..regions {
                gaps.push(table.gap_sq(m, cfg.max_bits, s as u8));
            }
        }
        QueryBounds {
            paa,
            weight: cfg.segment_weight(),
            regions,
            gaps,
        }
    }

    pub fn paa(&self) -> &Paa {
        &self.paa
    }

    #[inline]
    pub fn key_mindist_sq(&self, key: &SaxKey) -> f64 {
        let mut sum = 0.0;
        for (i, &s) in key.0[..self.paa.segments()].iter().enumerate() {
            sum += self.gaps[i * self.regions + s as usize];
        }
        self.weight * sum
    }

    #[inline]
    pub fn word_mindist_sq(&self, word: &IsaxWord, table: &Breakpoints) -> f64 {
        let sum: f64 = self
            .paa
            .means()
            .iter()
            .zip(word.symbols().iter().zip(word.bits()))
            .map(|(&m, (&s, &b))| table.gap_sq(m, b, s))
            .sum();
        self.weight * sum
    }
}

/// Flags inputs that are far from z-normalized; the breakpoints assume
/// roughly standard-normal PAA values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationWarning {
    pub mean: f64,
    pub stdev: f64,
}

impl fmt::Display for NormalizationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "series does not look z-normalized (mean {:.3}, stdev {:.3})",
            self.mean, self.stdev
        )
    }
}

pub fn check_normalization(series: &[f32]) -> Option<NormalizationWarning> {
    if series.is_empty() {
        return None;
    }
    let n = series.len() as f64;
    let mean = series.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = series
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let stdev = var.sqrt();
    if mean.abs() > 0.5 || !(0.5..=2.0).contains(&stdev) {
        Some(NormalizationWarning { mean, stdev })
    } else {
        None
    }
}
