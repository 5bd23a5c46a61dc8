//! Percentile bootstrap over the prediction table.
//!
//! Replicate `r` draws from a ChaCha stream selected by `(seed, r)`, so the
//! interval does not depend on how rayon schedules replicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Resample within each stratum, preserving stratum sizes.
    pub stratified: bool,
    /// Redraws allowed for a replicate on which the statistic is undefined.
    pub max_retries: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 5000,
            level: 0.95,
            seed: 0,
            stratified: true,
            max_retries: 10,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resamples == 0 {
            return Err(Error::InvalidParameter("resamples must be >= 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "confidence level {} outside (0, 1)",
                self.level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub significant: bool,
    /// Replicates on which the statistic stayed undefined after all retries.
    pub excluded: usize,
}

/// True iff zero lies outside the closed interval.
pub fn significance(ci: &BootstrapCI) -> bool {
    excludes_zero(ci.lower, ci.upper)
}

fn excludes_zero(lower: f64, upper: f64) -> bool {
    !(lower <= 0.0 && 0.0 <= upper)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn draw(strata: &[Vec<usize>], rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
    out.clear();
    for s in strata {
        for _ in 0..s.len() {
            out.push(s[rng.random_range(0..s.len())]);
        }
    }
}

/// Deterministic RNG for replicate `r`: same seed and index, same stream.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Percentile bootstrap CI of `statistic`, which maps a sample of record
/// indices (with repeats) to a value or `None` when undefined on it.
///
/// `strata` partitions the records; with `stratified = false` they are pooled
/// into one stratum. The point estimate uses every record once.
pub fn bootstrap_ci<F>(
    strata: &[Vec<usize>],
    statistic: F,
    config: &BootstrapConfig,
) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    config.validate()?;
    let mut all: Vec<usize> = strata.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::Empty("bootstrap data"));
    }
    all.sort_unstable();
    let point = statistic(&all).ok_or(Error::UndefinedStatistic)?;

    let pooled;
    let strata = if config.stratified {
        strata
    } else {
        pooled = [all];
        &pooled[..]
    };

    let replicates: Vec<Option<f64>> = (0..config.resamples)
        .into_par_iter()
        .map_init(Vec::new, |buf, r| {
            let mut rng = replicate_rng(config.seed, r as u64);
            (0..=config.max_retries).find_map(|_| {
                draw(strata, &mut rng, buf);
                statistic(buf)
            })
        })
        .collect();

    let mut values: Vec<f64> = replicates.iter().flatten().copied().collect();
    let excluded = replicates.len() - values.len();
    if values.is_empty() {
        return Err(Error::UndefinedStatistic);
    }
    values.sort_by(f64::total_cmp);
    let alpha = 1.0 - config.level;
    let lower = quantile(&values, alpha / 2.0);
    let upper = quantile(&values, 1.0 - alpha / 2.0);
    Ok(BootstrapCI {
        point,
        lower,
        upper,
        level: config.level,
        significant: excludes_zero(lower, upper),
        excluded,
    })
}
