//! Outcome proportions, Max Skew, harm rates, and directional bias.

use serde::{Deserialize, Serialize};

use crate::embedding_store::{dot, Attribute, EmbeddingMatrix, GroupIndex};
use crate::error::{Error, Result};
use crate::num::{mean, pairwise_sum, std_dev};
use crate::stats::BootstrapCI;
use crate::zeroshot::Prediction;

/// Per-group event counts and proportions `p_g(E)` for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub attribute: Attribute,
    pub groups: Vec<String>,
    pub events: Vec<String>,
    /// `|D_g|` per group.
    pub counts: Vec<usize>,
    /// `hits[g][e]`: images of group `g` whose top-1 lands in event `e`.
    pub hits: Vec<Vec<usize>>,
}

impl OutcomeTable {
    pub fn proportion(&self, group: usize, event: usize) -> f64 {
        self.hits[group][event] as f64 / self.counts[group] as f64
    }

    /// Add-one smoothed proportion, `(k + 1) / (|D_g| + 2)`.
    pub fn smoothed_proportion(&self, group: usize, event: usize) -> f64 {
        (self.hits[group][event] as f64 + 1.0) / (self.counts[group] as f64 + 2.0)
    }

    pub fn proportions(&self) -> Vec<Vec<f64>> {
        (0..self.groups.len())
            .map(|g| (0..self.events.len()).map(|e| self.proportion(g, e)).collect())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Tallies events over `sample` (record indices, repeats allowed).
/// Records without a group for this attribute are skipped.
pub fn tally(
    events: &[Option<usize>],
    event_names: &[String],
    groups: &GroupIndex,
    sample: impl IntoIterator<Item = usize>,
) -> Result<OutcomeTable> {
    let n_groups = groups.groups().len();
    let mut counts = vec![0usize; n_groups];
    let mut hits = vec![vec![0usize; event_names.len()]; n_groups];
    for i in sample {
        let Some(g) = groups.group_of(i) else { continue };
        counts[g] += 1;
        if let Some(e) = events[i] {
            hits[g][e] += 1;
        }
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(groups.groups()[g].clone()));
    }
    Ok(OutcomeTable {
        attribute: groups.attribute(),
        groups: groups.groups().to_vec(),
        events: event_names.to_vec(),
        counts,
        hits,
    })
}

pub fn outcome_proportions(
    predictions: &[Prediction],
    groups: &GroupIndex,
    event_names: &[String],
) -> Result<OutcomeTable> {
    if predictions.len() != groups.len() {
        return Err(Error::CountMismatch {
            matrix: predictions.len(),
            manifest: groups.len(),
        });
    }
    let events: Vec<Option<usize>> = predictions.iter().map(|p| p.event).collect();
    tally(&events, event_names, groups, 0..events.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairSkew {
    Value(f64),
    /// Exactly one proportion is zero; the relative gap is undefined.
    Excluded,
}

impl PairSkew {
    pub fn value(self) -> Option<f64> {
        match self {
            PairSkew::Value(v) => Some(v),
            PairSkew::Excluded => None,
        }
    }
}

pub fn pairwise_max_skew(p_a: f64, p_b: f64) -> PairSkew {
    match (p_a == 0.0, p_b == 0.0) {
        (true, true) => PairSkew::Value(0.0),
        (true, false) | (false, true) => PairSkew::Excluded,
        // max(|a-b|/b, |b-a|/a) == hi/lo - 1, with a single rounding in the ratio
        (false, false) => PairSkew::Value(p_a.max(p_b) / p_a.min(p_b) - 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SkewOptions {
    /// Use add-one smoothed proportions so no pair is excluded.
    pub smoothing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCell {
    pub group_a: String,
    pub group_b: String,
    pub event: String,
    /// `None` when the cell was excluded.
    pub skew: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub attribute: Attribute,
    pub task: String,
    pub pairs: Vec<PairCell>,
    /// Mean over included cells; `None` when every cell was excluded.
    pub mean: Option<f64>,
    pub excluded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<BootstrapCI>,
}

impl SkewReport {
    /// A report carrying only a published mean value.
    pub fn from_value(attribute: Attribute, task: impl Into<String>, mean: f64) -> Self {
        SkewReport {
            attribute,
            task: task.into(),
            pairs: Vec::new(),
            mean: Some(mean),
            excluded: 0,
            ci: None,
        }
    }
}

/// Mean Max Skew over every unordered group pair and event. Excluded cells
/// are left out of the mean and counted.
pub fn mean_max_skew(
    table: &OutcomeTable,
    task: &str,
    options: SkewOptions,
) -> Result<SkewReport> {
    let n = table.groups.len();
    if n < 2 {
        return Err(Error::TooFewGroups(n));
    }
    let prop = |g: usize, e: usize| {
        if options.smoothing {
            table.smoothed_proportion(g, e)
        } else {
            table.proportion(g, e)
        }
    };
    let mut pairs = Vec::with_capacity(table.events.len() * n * (n - 1) / 2);
    for (e, event) in table.events.iter().enumerate() {
        for a in 0..n {
            for b in a + 1..n {
                pairs.push(PairCell {
                    group_a: table.groups[a].clone(),
                    group_b: table.groups[b].clone(),
                    event: event.clone(),
                    skew: pairwise_max_skew(prop(a, e), prop(b, e)).value(),
                });
            }
        }
    }
    let included: Vec<f64> = pairs.iter().filter_map(|p| p.skew).collect();
    Ok(SkewReport {
        attribute: table.attribute,
        task: task.to_string(),
        excluded: pairs.len() - included.len(),
        mean: mean(&included),
        pairs,
        ci: None,
    })
}

/// Fraction of the corpus whose top-1 prediction falls in `event`.
pub fn harm_rate(events: &[Option<usize>], event: usize) -> Result<f64> {
    harm_rate_over(events, event, 0..events.len())
}

pub fn harm_rate_over(
    events: &[Option<usize>],
    event: usize,
    sample: impl IntoIterator<Item = usize>,
) -> Result<f64> {
    let (mut total, mut hit) = (0usize, 0usize);
    for i in sample {
        total += 1;
        if events[i] == Some(event) {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmEntry {
    pub event: String,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<BootstrapCI>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmReport {
    pub total: usize,
    pub rates: Vec<HarmEntry>,
}

pub fn harm_report(events: &[Option<usize>], event_names: &[String]) -> Result<HarmReport> {
    let rates = event_names
        .iter()
        .enumerate()
        .map(|(e, name)| {
            Ok(HarmEntry {
                event: name.clone(),
                rate: harm_rate(events, e)?,
                ci: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(HarmReport {
        total: events.len(),
        rates,
    })
}

/// Per-image `mean cos(pos family) - mean cos(neg family)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalBias {
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl DirectionalBias {
    pub fn from_values(per_image: Vec<f64>) -> Result<Self> {
        let mean = mean(&per_image).ok_or(Error::Empty("image set"))?;
        let sd = std_dev(&per_image).unwrap_or(0.0);
        Ok(DirectionalBias {
            per_image,
            mean,
            sd,
        })
    }

    pub fn mean_abs(&self) -> f64 {
        let abs: Vec<f64> = self.per_image.iter().map(|d| d.abs()).collect();
        mean(&abs).unwrap_or(0.0)
    }
}

fn mean_cosine(v: &[f32], family: &EmbeddingMatrix) -> f64 {
    let sims: Vec<f64> = family.iter_rows().map(|p| dot(v, p)).collect();
    pairwise_sum(&sims) / sims.len() as f64
}

pub fn directional_bias(
    images: &EmbeddingMatrix,
    positive: &EmbeddingMatrix,
    negative: &EmbeddingMatrix,
) -> Result<DirectionalBias> {
    if positive.rows() == 0 || negative.rows() == 0 {
        return Err(Error::Empty("prompt family"));
    }
    for fam in [positive, negative] {
        if fam.dim() != images.dim() {
            return Err(Error::DimensionMismatch {
                expected: images.dim(),
                actual: fam.dim(),
            });
        }
    }
    let per_image = images
        .iter_rows()
        .map(|v| mean_cosine(v, positive) - mean_cosine(v, negative))
        .collect();
    DirectionalBias::from_values(per_image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewDelta {
    pub attribute: Attribute,
    pub task: String,
    pub first: Option<f64>,
    pub second: Option<f64>,
    /// `first - second`; `None` if either side is undefined.
    pub delta: Option<f64>,
}

pub fn factor_deltas(first: &SkewReport, second: &SkewReport) -> Result<SkewDelta> {
    if first.attribute != second.attribute || first.task != second.task {
        return Err(Error::Mismatch(format!(
            "cannot compare {}/{} with {}/{}",
            first.attribute, first.task, second.attribute, second.task
        )));
    }
    Ok(SkewDelta {
        attribute: first.attribute,
        task: first.task.clone(),
        first: first.mean,
        second: second.mean,
        delta: first.mean.zip(second.mean).map(|(a, b)| a - b),
    })
}
