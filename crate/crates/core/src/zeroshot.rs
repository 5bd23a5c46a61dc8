//! Zero-shot classification of image embeddings against prompt embeddings.
//!
//! Metrics consume only the top-1 prediction, which does not depend on the
//! temperature; [`softmax_with_temperature`] exists for probability reports.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Pooling, ProbeSpec};
use crate::embedding_store::{dot, EmbeddingMatrix, Record};
use crate::error::{Error, Result};

/// Row-major `n_images x n_prompts` cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_images: usize,
    n_prompts: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(n_images: usize, n_prompts: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_images * n_prompts {
            return Err(Error::DimensionMismatch {
                expected: n_images * n_prompts,
                actual: values.len(),
            });
        }
        Ok(SimilarityMatrix {
            n_images,
            n_prompts,
            values,
        })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn get(&self, image: usize, prompt: usize) -> f64 {
        self.values[image * self.n_prompts + prompt]
    }

    pub fn row(&self, image: usize) -> &[f64] {
        &self.values[image * self.n_prompts..(image + 1) * self.n_prompts]
    }
}

pub fn cosine_similarity_matrix(
    images: &EmbeddingMatrix,
    prompts: &EmbeddingMatrix,
) -> Result<SimilarityMatrix> {
    if images.dim() != prompts.dim() {
        return Err(Error::DimensionMismatch {
            expected: images.dim(),
            actual: prompts.dim(),
        });
    }
    let n_prompts = prompts.rows();
    let values: Vec<f64> = (0..images.rows())
        .into_par_iter()
        .flat_map_iter(|i| {
            let v = images.row(i);
            (0..n_prompts).map(move |k| dot(v, prompts.row(k)))
        })
        .collect();
    SimilarityMatrix::from_values(images.rows(), n_prompts, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureParam(f64);

impl TemperatureParam {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(TemperatureParam(tau))
        } else {
            Err(Error::InvalidTemperature(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// `softmax(scores / tau)`, evaluated with max subtraction.
pub fn softmax_with_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    let tau = TemperatureParam::new(tau)?.get();
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite score {bad}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Column positions of each prompt set inside a prompt matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptLayout {
    sets: BTreeMap<String, Vec<usize>>,
}

impl PromptLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_set(mut self, set_id: impl Into<String>, columns: Vec<usize>) -> Self {
        self.sets.insert(set_id.into(), columns);
        self
    }

    /// Groups prompt rows by their `set_id`, keeping file order within each set.
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let mut sets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let set_id = r.set_id.as_ref().ok_or_else(|| {
                Error::Manifest(format!("prompt record {:?} has no set_id", r.id))
            })?;
            sets.entry(set_id.clone()).or_default().push(i);
        }
        Ok(PromptLayout { sets })
    }

    pub fn columns(&self, set_id: &str) -> Option<&[usize]> {
        self.sets.get(set_id).map(Vec::as_slice)
    }

    pub fn set_ids(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    /// First candidate set that is absent or empty, if any.
    pub fn missing_set<'a>(&self, probe: &'a ProbeSpec) -> Option<&'a str> {
        probe
            .candidate_sets
            .iter()
            .find(|s| self.columns(s).is_none_or(|c| c.is_empty()))
            .map(String::as_str)
    }
}

pub fn pool_scores(scores: &[f64], columns: &[usize], pooling: Pooling) -> Result<f64> {
    if columns.is_empty() {
        return Err(Error::Empty("prompt set"));
    }
    let vals = columns.iter().map(|&c| scores[c]);
    Ok(match pooling {
        Pooling::Max => vals.fold(f64::NEG_INFINITY, f64::max),
        Pooling::Mean => vals.sum::<f64>() / columns.len() as f64,
    })
}

/// Pooled score of one prompt set for every image.
pub fn pool_set_scores(
    sim: &SimilarityMatrix,
    columns: &[usize],
    pooling: Pooling,
) -> Result<Vec<f64>> {
    if columns.is_empty() {
        return Err(Error::Empty("prompt set"));
    }
    if let Some(&c) = columns.iter().find(|&&c| c >= sim.n_prompts()) {
        return Err(Error::InvalidParameter(format!(
            "prompt column {c} out of range for {} prompts",
            sim.n_prompts()
        )));
    }
    (0..sim.n_images())
        .map(|i| pool_scores(sim.row(i), columns, pooling))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// Argmax over the union of all candidate prompts.
    #[default]
    Union,
    /// Argmax over pooled per-set scores.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image: usize,
    /// Winning prompt column. In pooled mode, the best column of the winning set.
    pub top_prompt: usize,
    /// Index into `probe.candidate_sets`.
    pub top_set: usize,
    /// Pooled score per candidate set.
    pub set_scores: Vec<f64>,
    /// Index into `probe.events`.
    pub event: Option<usize>,
}

struct Resolved<'a> {
    columns: Vec<&'a [usize]>,
    /// (column, candidate set) pairs sorted by column.
    union: Vec<(usize, usize)>,
    set_events: Vec<Option<usize>>,
}

fn resolve<'a>(
    sim: &SimilarityMatrix,
    probe: &ProbeSpec,
    layout: &'a PromptLayout,
) -> Result<Resolved<'a>> {
    let mut columns = Vec::with_capacity(probe.candidate_sets.len());
    for s in &probe.candidate_sets {
        let cols = layout
            .columns(s)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::MissingPromptSet(s.clone()))?;
        if let Some(&c) = cols.iter().find(|&&c| c >= sim.n_prompts()) {
            return Err(Error::InvalidParameter(format!(
                "set {s}: prompt column {c} out of range for {} prompts",
                sim.n_prompts()
            )));
        }
        columns.push(cols);
    }
    let mut union: Vec<(usize, usize)> = columns
        .iter()
        .enumerate()
        .flat_map(|(si, cols)| cols.iter().map(move |&c| (c, si)))
        .collect();
    if union.is_empty() {
        return Err(Error::Empty("candidate prompt union"));
    }
    union.sort_unstable();
    union.dedup_by_key(|(c, _)| *c);
    let set_events = probe
        .candidate_sets
        .iter()
        .map(|s| probe.event_of_set(s))
        .collect();
    Ok(Resolved {
        columns,
        union,
        set_events,
    })
}

/// Index of the first maximum.
fn first_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Top-1 prediction per image. Ties go to the lowest prompt column (union
/// mode) or the earliest candidate set (pooled mode).
pub fn predict(
    sim: &SimilarityMatrix,
    probe: &ProbeSpec,
    layout: &PromptLayout,
    mode: PredictionMode,
) -> Result<Vec<Prediction>> {
    let r = resolve(sim, probe, layout)?;
    let out = (0..sim.n_images())
        .into_par_iter()
        .map(|i| {
            let row = sim.row(i);
            let set_scores: Vec<f64> = r
                .columns
                .iter()
                .map(|cols| pool_scores(row, cols, probe.pooling).expect("non-empty"))
                .collect();
            let (top_prompt, top_set) = match mode {
                PredictionMode::Union => {
                    let k = first_argmax(r.union.iter().map(|(c, _)| row[*c])).unwrap();
                    r.union[k]
                }
                PredictionMode::Pooled => {
                    let s = first_argmax(set_scores.iter().copied()).unwrap();
                    let cols = r.columns[s];
                    let best = first_argmax(cols.iter().map(|&c| row[c])).unwrap();
                    (cols[best], s)
                }
            };
            Prediction {
                image: i,
                top_prompt,
                top_set,
                set_scores,
                event: r.set_events[top_set],
            }
        })
        .collect();
    Ok(out)
}

/// Softmax over the union of candidate prompts for every image, in column order.
pub fn candidate_probabilities(
    sim: &SimilarityMatrix,
    probe: &ProbeSpec,
    layout: &PromptLayout,
    tau: TemperatureParam,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let r = resolve(sim, probe, layout)?;
    (0..sim.n_images())
        .map(|i| {
            let row = sim.row(i);
            let scores: Vec<f64> = r.union.iter().map(|(c, _)| row[*c]).collect();
            let probs = softmax_with_temperature(&scores, tau.get())?;
            Ok(r.union.iter().map(|(c, _)| *c).zip(probs).collect())
        })
        .collect()
}

pub fn events_of(predictions: &[Prediction]) -> Vec<Option<usize>> {
    predictions.iter().map(|p| p.event).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Event;
    use crate::embedding_store::EmbeddingKind;

    fn mat(rows: &[&[f64]], kind: EmbeddingKind) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows, "t", kind).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let imgs = mat(&[&[0.6, 0.0, 0.8], &[1.0, 0.0, 0.0]], EmbeddingKind::Image);
        let prompts = mat(&[&[0.0, 1.0, 0.0], &[0.6, 0.0, 0.8]], EmbeddingKind::Prompt);
        let s = cosine_similarity_matrix(&imgs, &prompts).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert!((s.get(0, 1) - 1.0).abs() < 1e-6);
        assert_eq!(s.get(1, 0), 0.0);
        assert!(s.row(0).iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn cosine_dim_mismatch() {
        let imgs = mat(&[&[1.0, 0.0]], EmbeddingKind::Image);
        let prompts = mat(&[&[1.0, 0.0, 0.0]], EmbeddingKind::Prompt);
        assert!(matches!(
            cosine_similarity_matrix(&imgs, &prompts),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax_with_temperature(&[0.2, 0.4], 0.1).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - 1.0 / (1.0 + e2)).abs() < 1e-12);
        assert!((p[1] - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((p[0] - 0.1192).abs() < 1e-4);

        let u = softmax_with_temperature(&[0.3; 4], 7.0).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let sharp = softmax_with_temperature(&[0.1, 0.3, 0.2], 1e-4).unwrap();
        assert!((sharp[1] - 1.0).abs() < 1e-12);

        assert!(softmax_with_temperature(&[0.1], 0.0).is_err());
        assert!(softmax_with_temperature(&[0.1], -1.0).is_err());
    }

    #[test]
    fn pooling() {
        let s = SimilarityMatrix::from_values(1, 3, vec![0.1, 0.3, 0.2]).unwrap();
        assert_eq!(pool_set_scores(&s, &[0, 1, 2], Pooling::Max).unwrap(), [0.3]);
        let mean = pool_set_scores(&s, &[0, 1, 2], Pooling::Mean).unwrap()[0];
        assert!((mean - 0.2).abs() < 1e-15);
        assert_eq!(pool_set_scores(&s, &[2], Pooling::Max).unwrap(), [0.2]);
        assert!(pool_set_scores(&s, &[], Pooling::Max).is_err());
    }

    fn two_set_probe() -> (ProbeSpec, PromptLayout) {
        let probe = ProbeSpec {
            probe_id: crate::catalog::ProbeId::CrimeNonHuman,
            candidate_sets: vec!["demo".into(), "crime".into()],
            events: vec![Event {
                name: "C".into(),
                sets: vec!["crime".into()],
            }],
            pooling: Pooling::Max,
            positive_sets: vec!["demo".into()],
            negative_sets: vec!["crime".into()],
        };
        let layout = PromptLayout::new()
            .with_set("demo", vec![0, 1])
            .with_set("crime", vec![2, 3]);
        (probe, layout)
    }

    #[test]
    fn predict_events_and_ties() {
        let (probe, layout) = two_set_probe();
        let sim = SimilarityMatrix::from_values(
            3,
            4,
            vec![
                0.1, 0.2, 0.5, 0.3, // criminal wins
                0.4, 0.1, 0.2, 0.2, // demographic wins
                0.3, 0.3, 0.3, 0.3, // all tied -> first column
            ],
        )
        .unwrap();
        let preds = predict(&sim, &probe, &layout, PredictionMode::Union).unwrap();
        assert_eq!(preds[0].top_prompt, 2);
        assert_eq!(preds[0].event, Some(0));
        assert_eq!(preds[1].event, None);
        assert_eq!(preds[2].top_prompt, 0);
        assert_eq!(preds[2].event, None);
        assert_eq!(preds[0].set_scores, vec![0.2, 0.5]);

        let pooled = predict(&sim, &probe, &layout, PredictionMode::Pooled).unwrap();
        assert_eq!(events_of(&pooled), events_of(&preds));
    }

    #[test]
    fn missing_set_is_an_error() {
        let (probe, _) = two_set_probe();
        let layout = PromptLayout::new().with_set("demo", vec![0]);
        let sim = SimilarityMatrix::from_values(1, 1, vec![0.0]).unwrap();
        assert!(matches!(
            predict(&sim, &probe, &layout, PredictionMode::Union),
            Err(Error::MissingPromptSet(s)) if s == "crime"
        ));
        assert_eq!(layout.missing_set(&probe), Some("crime"));
    }

    #[test]
    fn probabilities_keep_argmax() {
        let (probe, layout) = two_set_probe();
        let sim = SimilarityMatrix::from_values(1, 4, vec![0.1, 0.2, 0.5, 0.3]).unwrap();
        let p = candidate_probabilities(&sim, &probe, &layout, TemperatureParam::new(0.01).unwrap())
            .unwrap();
        let best = p[0]
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(best, 2);
        let total: f64 = p[0].iter().map(|(_, v)| v).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
