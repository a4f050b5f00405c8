//! Token mask plans.
//!
//! Four strategies partition `0..n` into masked and visible indices:
//! isometric (equal segments, same count masked at random inside each),
//! random (uniform over the whole sequence), periodic (first `r·s` slots of
//! every segment) and continuous (a masked suffix).

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Isometric,
    Random,
    Periodic,
    Continuous,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::Isometric,
        MaskStrategy::Random,
        MaskStrategy::Periodic,
        MaskStrategy::Continuous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Isometric => "isometric",
            MaskStrategy::Random => "random",
            MaskStrategy::Periodic => "periodic",
            MaskStrategy::Continuous => "continuous",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    fn from_masked(n: usize, mut masked: Vec<usize>, strategy: MaskStrategy, ratio: f64, seed: u64) -> Self {
        masked.sort_unstable();
        let mut is_masked = vec![false; n];
        masked.iter().for_each(|&i| is_masked[i] = true);
        let visible = (0..n).filter(|&i| !is_masked[i]).collect();
        MaskPlan {
            n_tokens: n,
            masked,
            visible,
            strategy,
            ratio,
            seed,
        }
    }

    /// A plan with every token visible. Only meaningful for autoencoding passes.
    pub fn unmasked(n: usize) -> Self {
        MaskPlan::from_masked(n, Vec::new(), MaskStrategy::Random, 0.0, 0)
    }

    /// Longest run of consecutive masked indices.
    pub fn max_masked_run(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        let mut prev: Option<usize> = None;
        for &i in &self.masked {
            run = if prev.is_some_and(|p| p + 1 == i) { run + 1 } else { 1 };
            best = best.max(run);
            prev = Some(i);
        }
        best
    }
}

/// `round()` with ties away from zero.
pub fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}

fn integral(x: f64) -> Option<usize> {
    let r = x.round();
    ((x - r).abs() < 1e-9).then_some(r as usize)
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("mask ratio {r} must lie strictly between 0 and 1")));
    }
    Ok(())
}

const MAX_SEGMENT: usize = 1000;

/// Segment length for the segment-based strategies: `round(1/(1-r))`, moved
/// up to the first length `s` for which `r·s` is a whole number.
pub fn segment_length(r: f64) -> Result<usize> {
    check_ratio(r)?;
    let s0 = round_half_away(1.0 / (1.0 - r)).max(2);
    (s0..=MAX_SEGMENT)
        .find(|&s| integral(r * s as f64).is_some())
        .ok_or_else(|| {
            let near = round_half_away(r * s0 as f64).clamp(1, s0 - 1) as f64 / s0 as f64;
            Error::Config(format!(
                "mask ratio {r} gives no whole number of masked tokens per segment; nearest valid ratio is {near}"
            ))
        })
}

/// Valid ratio closest to `r` whose segment length divides `n`.
pub fn nearest_valid_ratio(n: usize, r: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for s in 2..=n.min(MAX_SEGMENT) {
        if n % s != 0 {
            continue;
        }
        for k in 1..s {
            let cand = k as f64 / s as f64;
            if segment_length(cand).ok() == Some(s) && best.is_none_or(|b| (cand - r).abs() < (b - r).abs()) {
                best = Some(cand);
            }
        }
    }
    best
}

fn segmented(n: usize, r: f64) -> Result<(usize, usize)> {
    segmented_with(n, r, segment_length(r)?)
}

fn segmented_with(n: usize, r: f64, s: usize) -> Result<(usize, usize)> {
    check_ratio(r)?;
    let Some(k) = integral(r * s as f64).filter(|&k| k >= 1 && k < s) else {
        let near = round_half_away(r * s as f64).clamp(1, s.max(2) - 1) as f64 / s as f64;
        return Err(Error::Config(format!(
            "ratio {r} does not mask a whole number of tokens per segment of {s}; nearest valid ratio is {near}"
        )));
    };
    if n == 0 || s == 0 || n % s != 0 {
        let hint = nearest_valid_ratio(n, r)
            .map(|v| format!("; nearest valid ratio for {n} tokens is {v}"))
            .unwrap_or_default();
        return Err(Error::Config(format!(
            "{n} tokens cannot be split into segments of {s} (ratio {r}){hint}"
        )));
    }
    Ok((s, k))
}

pub fn isometric_mask(n: usize, r: f64, seed: u64) -> Result<MaskPlan> {
    isometric_mask_with_segment(n, r, segment_length(r)?, seed)
}

/// Isometric masking with an explicit segment length.
pub fn isometric_mask_with_segment(n: usize, r: f64, s: usize, seed: u64) -> Result<MaskPlan> {
    let (s, k) = segmented_with(n, r, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = Vec::with_capacity(n / s * k);
    for seg in 0..n / s {
        masked.extend(sample(&mut rng, s, k).into_iter().map(|i| seg * s + i));
    }
    Ok(MaskPlan::from_masked(n, masked, MaskStrategy::Isometric, r, seed))
}

pub fn random_mask(n: usize, r: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(r)?;
    let k = round_half_away(r * n as f64);
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "ratio {r} over {n} tokens masks {k}, leaving no masked or no visible token"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = sample(&mut rng, n, k).into_vec();
    Ok(MaskPlan::from_masked(n, masked, MaskStrategy::Random, r, seed))
}

pub fn periodic_mask(n: usize, r: f64) -> Result<MaskPlan> {
    periodic_mask_with_segment(n, r, segment_length(r)?)
}

/// Periodic masking with an explicit segment length.
pub fn periodic_mask_with_segment(n: usize, r: f64, s: usize) -> Result<MaskPlan> {
    let (s, k) = segmented_with(n, r, s)?;
    let masked = (0..n).filter(|i| i % s < k).collect();
    Ok(MaskPlan::from_masked(n, masked, MaskStrategy::Periodic, r, 0))
}

pub fn continuous_mask(n: usize, r: f64) -> Result<MaskPlan> {
    check_ratio(r)?;
    let k = round_half_away(r * n as f64);
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "ratio {r} over {n} tokens masks {k}, leaving no masked or no visible token"
        )));
    }
    Ok(MaskPlan::from_masked(n, (n - k..n).collect(), MaskStrategy::Continuous, r, 0))
}

pub fn make_plan(strategy: MaskStrategy, n: usize, r: f64, seed: u64) -> Result<MaskPlan> {
    match strategy {
        MaskStrategy::Isometric => isometric_mask(n, r, seed),
        MaskStrategy::Random => random_mask(n, r, seed),
        MaskStrategy::Periodic => periodic_mask(n, r),
        MaskStrategy::Continuous => continuous_mask(n, r),
    }
}

/// One plan per batch entry, each with its own derived seed.
pub fn plan_batch(strategy: MaskStrategy, n: usize, r: f64, seed: u64, batch: usize) -> Result<Vec<MaskPlan>> {
    (0..batch as u64)
        .map(|b| make_plan(strategy, n, r, seed.wrapping_mul(1_000_003).wrapping_add(b)))
        .collect()
}

/// Count of masked tokens each strategy promises for `(n, r)`.
pub fn expected_masked(strategy: MaskStrategy, n: usize, r: f64) -> Result<usize> {
    match strategy {
        MaskStrategy::Isometric | MaskStrategy::Periodic => {
            let (s, k) = segmented(n, r)?;
            Ok(n / s * k)
        }
        MaskStrategy::Random | MaskStrategy::Continuous => Ok(round_half_away(r * n as f64)),
    }
}
