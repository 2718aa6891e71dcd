// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Dataset files and synthetic workloads.
//!
//! Files hold little-endian `f32` values, `n` per series, after a 16-byte
//! header: the magic `FRSH`, then version, `n` and series count as
//! little-endian `u32`. Headerless ("raw") files carry only the values.
//!
//! Series are generated with ChaCha8 seeded by the caller: each series is a
//! running sum of standard normal steps, then z-normalized in `f64`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FRSH";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Values of `count` series of length `n`, stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub values: Vec<f32>,
}

impl Dataset {
    pub fn count(&self) -> usize {
        self.values.len().checked_div(self.n).unwrap_or(0)
    }

    pub fn series(&self, i: usize) -> &[f32] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.n)
    }

    /// Encodes with the header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads a file with a header. `expect_n`, when given, must match it.
    pub fn read(path: &Path, expect_n: Option<usize>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(bad("missing FRSH magic (use --raw for headerless files)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (version, n, count) = (word(4), word(8), word(12));
        if version != FORMAT_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        if n == 0 {
            return Err(bad("series length 0".into()));
        }
        if let Some(want) = expect_n.filter(|&w| w != n) {
            return Err(bad(format!("series length {n}, expected {want}")));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != n * count * 4 {
            return Err(bad(format!(
                "header promises {count} series of length {n} but the body has {} bytes",
                body.len()
            )));
        }
        Ok(Dataset {
            n,
            values: decode_values(body),
        })
    }

    /// Reads a headerless file of series of length `n`.
    pub fn read_raw(path: &Path, n: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        if n == 0 || bytes.len() % (n * 4) != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("{} bytes is not a whole number of series of length {n}", bytes.len()),
            });
        }
        Ok(Dataset {
            n,
            values: decode_values(&bytes),
        })
    }
}

fn decode_values(body: &[u8]) -> Vec<f32> {
    body.chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect()
}

/// Shifts and scales to mean 0 and standard deviation 1. Constant input
/// becomes all zeros.
pub fn z_normalize(series: &[f64], out: &mut Vec<f32>) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
    out.extend(series.iter().map(|v| ((v - mean) * scale) as f32));
}

/// `count` z-normalized random walks of length `n`.
pub fn generate_dataset(count: usize, n: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || n == 0 {
        return Err(Error::config("dataset generation needs positive count and length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(count * n);
    let mut walk = vec![0.0f64; n];
    for _ in 0..count {
        let mut x = 0.0;
        for v in walk.iter_mut() {
            x += rng.sample::<f64, _>(StandardNormal);
            *v = x;
        }
        z_normalize(&walk, &mut values);
    }
    Ok(Dataset { n, values })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QueryKind {
    /// Dataset series plus Gaussian noise, re-normalized.
    #[default]
    Noisy,
    /// Fresh random walks, independent of the dataset.
    Walk,
}

impl QueryKind {
    pub fn name(self) -> &'static str {
        match self {
            QueryKind::Noisy => "noisy",
            QueryKind::Walk => "walk",
        }
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(QueryKind::Noisy),
            "walk" => Ok(QueryKind::Walk),
            _ => Err(Error::config(format!("unknown query kind `{s}` (expected noisy or walk)"))),
        }
    }
}

/// `count` queries, each a uniformly chosen dataset series with
/// `N(0, sigma^2)` noise added per point and re-normalized. With
/// `sigma == 0` the queries are exact copies.
pub fn generate_queries(data: &Dataset, count: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::config(format!("noise sigma {sigma} is outside [0, 1]")));
    }
    if data.count() == 0 {
        return Err(Error::EmptyIndex);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    let mut values = Vec::with_capacity(count * data.n);
    let mut buf = vec![0.0f64; data.n];
    for _ in 0..count {
        let src = data.series(rng.random_range(0..data.count()));
        if sigma == 0.0 {
            values.extend_from_slice(src);
            continue;
        }
        for (b, &v) in buf.iter_mut().zip(src) {
            *b = v as f64 + rng.sample(noise);
        }
        z_normalize(&buf, &mut values);
    }
    Ok(Dataset { n: data.n, values })
}

/// Queries of the given kind. Walk queries use their own seed stream, so
/// they never coincide with dataset series built from the same seed.
pub fn make_queries(kind: QueryKind, data: &Dataset, count: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    match kind {
        QueryKind::Noisy => generate_queries(data, count, sigma, seed),
        QueryKind::Walk if count == 0 => Ok(Dataset {
            n: data.n,
            values: Vec::new(),
        }),
        QueryKind::Walk => generate_dataset(count, data.n, seed ^ 0x9e37_79b9_7f4a_7c15),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(s: &[f32]) -> (f64, f64) {
        let n = s.len() as f64;
        let mean = s.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn one_series_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        generate_dataset(1, 256, 42).unwrap().write(&path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 256 * 4 + 16);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(50, 64, 7).unwrap().to_bytes();
        let b = generate_dataset(50, 64, 7).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(50, 64, 8).unwrap().to_bytes());
    }

    #[test]
    fn generated_series_are_normalized() {
        let d = generate_dataset(10_000, 256, 1).unwrap();
        for s in d.iter() {
            let (mean, sd) = moments(s);
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((sd - 1.0).abs() < 1e-6, "sd {sd}");
        }
    }

    #[test]
    fn header_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let d = generate_dataset(5, 32, 3).unwrap();
        d.write(&path).unwrap();
        assert_eq!(Dataset::read(&path, Some(32)).unwrap(), d);
        assert!(matches!(Dataset::read(&path, Some(64)), Err(Error::Format { .. })));
        let raw = dir.path().join("r.bin");
        fs::write(&raw, &d.to_bytes()[HEADER_LEN..]).unwrap();
        assert_eq!(Dataset::read_raw(&raw, 32).unwrap(), d);
        assert!(matches!(Dataset::read(&raw, None), Err(Error::Format { .. })));
        assert!(Dataset::read_raw(&raw, 33).is_err());
        let mut truncated = d.to_bytes();
        truncated.pop();
        fs::write(&path, truncated).unwrap();
        assert!(Dataset::read(&path, None).is_err());
    }

    #[test]
    fn zero_noise_queries_are_copies() {
        let d = generate_dataset(100, 64, 5).unwrap();
        let q = generate_queries(&d, 20, 0.0, 6).unwrap();
        for s in q.iter() {
            assert!(d.iter().any(|t| t == s));
        }
    }

    #[test]
    fn query_generation_is_deterministic_and_checked() {
        let d = generate_dataset(100, 64, 5).unwrap();
        assert_eq!(
            generate_queries(&d, 10, 0.05, 1).unwrap(),
            generate_queries(&d, 10, 0.05, 1).unwrap()
        );
        assert!(generate_queries(&d, 10, 1.5, 1).is_err());
        assert!(generate_queries(&d, 10, -0.1, 1).is_err());
        let empty = Dataset { n: 64, values: vec![] };
        assert!(generate_queries(&empty, 1, 0.1, 1).is_err());
    }

    #[test]
    fn noisy_queries_stay_normalized() {
        let d = generate_dataset(100, 128, 5).unwrap();
        let q = generate_queries(&d, 10, 0.1, 2).unwrap();
        for s in q.iter() {
            let (mean, sd) = moments(s);
            assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn more_noise_means_farther_neighbors() {
        let d = generate_dataset(2000, 64, 8).unwrap();
        let mean_nn = |sigma: f64| {
            let q = generate_queries(&d, 50, sigma, 9).unwrap();
            q.iter()
                .map(|q| {
                    d.iter()
                        .map(|s| s.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .sum::<f64>()
                / 50.0
        };
        let (low, high) = (mean_nn(0.01), mean_nn(0.1));
        assert!(low < high, "{low} vs {high}");
    }

    #[test]
    fn query_kind_names_round_trip() {
        for k in [QueryKind::Noisy, QueryKind::Walk] {
            assert_eq!(k.name().parse::<QueryKind>().unwrap(), k);
        }
    }
}
