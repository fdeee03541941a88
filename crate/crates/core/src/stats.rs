//! Paired permutation tests and Bonferroni correction.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricSeries;

/// Permutations drawn from one generator stream.
const BLOCK: u64 = 4096;

pub const DEFAULT_PERMUTATIONS: u64 = 100_000;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Paired observations keyed by (query id, iteration).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pairs: BTreeMap<(String, u32), (f64, f64)>,
}

impl PairedSample {
    pub fn new<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((String, u32), (f64, f64))>,
    {
        let mut map = BTreeMap::new();
        for (key, (a, b)) in pairs {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value for ({}, {})",
                    key.0, key.1
                )));
            }
            if let Some(_) = map.insert(key.clone(), (a, b)) {
                return Err(Error::Validation(format!(
                    "duplicate pair key ({}, {})",
                    key.0, key.1
                )));
            }
        }
        if map.is_empty() {
            return Err(Error::precondition("paired sample is empty"));
        }
        Ok(PairedSample { pairs: map })
    }

    /// Pairs two series on their shared (query, iteration) keys. Keys present
    /// in only one series are an error.
    pub fn from_series(a: &MetricSeries, b: &MetricSeries) -> Result<Self> {
        if let Some(k) = a.values.keys().find(|k| !b.values.contains_key(*k)) {
            return Err(Error::Validation(format!(
                "`{}` has ({}, {}) but `{}` does not",
                a.name, k.0, k.1, b.name
            )));
        }
        if let Some(k) = b.values.keys().find(|k| !a.values.contains_key(*k)) {
            return Err(Error::Validation(format!(
                "`{}` has ({}, {}) but `{}` does not",
                b.name, k.0, k.1, a.name
            )));
        }
        PairedSample::new(
            a.values
                .iter()
                .map(|(k, va)| (k.clone(), (*va, b.values[k]))),
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.pairs.values().map(|(a, b)| a - b).collect()
    }

    pub fn mean_difference(&self) -> f64 {
        self.differences().iter().sum::<f64>() / self.len() as f64
    }

    /// The same pairs with sides exchanged.
    pub fn swapped(&self) -> Self {
        PairedSample {
            pairs: self.pairs.iter().map(|(k, (a, b))| (k.clone(), (*b, *a))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationOutcome {
    pub p_value: f64,
    pub observed: f64,
    pub n_permutations: u64,
    /// Sampled permutations at least as extreme as the observed statistic.
    pub exceed: u64,
}

fn tolerance(diffs: &[f64]) -> f64 {
    let scale: f64 = diffs.iter().map(|d| d.abs()).sum();
    1e-12 * scale.max(1.0)
}

fn count_block(diffs: &[f64], observed_sum: f64, tol: f64, seed: u64, block: u64, count: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    let mut exceed = 0;
    for _ in 0..count {
        let mut sum = 0.0;
        for chunk in diffs.chunks(64) {
            let bits = rng.next_u64();
            for (i, d) in chunk.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    sum -= d;
                } else {
                    sum += d;
                }
            }
        }
        if sum.abs() >= observed_sum - tol {
            exceed += 1;
        }
    }
    exceed
}

fn blocks(n_permutations: u64) -> impl Iterator<Item = (u64, u64)> + Clone {
    let n_blocks = n_permutations.div_ceil(BLOCK);
    (0..n_blocks).map(move |b| (b, BLOCK.min(n_permutations - b * BLOCK)))
}

fn permutation_test_with<F>(sample: &PairedSample, n_permutations: u64, count: F) -> Result<PermutationOutcome>
where
    F: FnOnce(&[f64], f64, f64) -> u64,
{
    if n_permutations < 1 {
        return Err(Error::precondition("n_permutations must be at least 1"));
    }
    if sample.is_empty() {
        return Err(Error::precondition("paired sample is empty"));
    }
    let diffs = sample.differences();
    let observed_sum = diffs.iter().sum::<f64>().abs();
    let exceed = count(&diffs, observed_sum, tolerance(&diffs));
    Ok(PermutationOutcome {
        p_value: (1 + exceed) as f64 / (1 + n_permutations) as f64,
        observed: observed_sum / diffs.len() as f64,
        n_permutations,
        exceed,
    })
}

/// Two-sided sign-flip test on |mean(a − b)| with add-one smoothing.
///
/// Permutations are drawn in fixed-size blocks, each from its own stream of a
/// generator seeded with `seed`, and blocks are evaluated in parallel. The
/// result equals [`paired_permutation_test_sequential`] for the same seed.
pub fn paired_permutation_test(
    sample: &PairedSample,
    n_permutations: u64,
    seed: u64,
) -> Result<PermutationOutcome> {
    permutation_test_with(sample, n_permutations, |diffs, obs, tol| {
        blocks(n_permutations)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(b, c)| count_block(diffs, obs, tol, seed, b, c))
            .sum()
    })
}

pub fn paired_permutation_test_sequential(
    sample: &PairedSample,
    n_permutations: u64,
    seed: u64,
) -> Result<PermutationOutcome> {
    permutation_test_with(sample, n_permutations, |diffs, obs, tol| {
        blocks(n_permutations)
            .map(|(b, c)| count_block(diffs, obs, tol, seed, b, c))
            .sum()
    })
}

/// Multiplies each p-value by `m` (default: the list length), capped at 1.
pub fn bonferroni(p_values: &[f64], m: Option<usize>) -> Vec<f64> {
    let m = m.unwrap_or(p_values.len()).max(1) as f64;
    p_values.iter().map(|p| (p * m).min(1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub comparison: String,
    pub n_pairs: usize,
    pub mean_diff: f64,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub significant: bool,
    pub n_permutations: u64,
    pub seed: u64,
}

/// Tests every named comparison with the same seed and Bonferroni-adjusts
/// over the number of comparisons.
pub fn significance_report(
    comparisons: &[(String, PairedSample)],
    n_permutations: u64,
    seed: u64,
) -> Result<Vec<SignificanceResult>> {
    let outcomes = comparisons
        .iter()
        .map(|(_, s)| paired_permutation_test(s, n_permutations, seed))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = outcomes.iter().map(|o| o.p_value).collect();
    let adjusted = bonferroni(&raw, None);
    Ok(comparisons
        .iter()
        .zip(&outcomes)
        .zip(adjusted)
        .map(|(((name, sample), o), adj)| SignificanceResult {
            comparison: name.clone(),
            n_pairs: sample.len(),
            mean_diff: sample.mean_difference(),
            raw_p: o.p_value,
            adjusted_p: adj,
            significant: adj < SIGNIFICANCE_LEVEL,
            n_permutations,
            seed,
        })
        .collect())
}
