//! Control experiments: neutral-image cosine statistics, directional-bias
//! calibration curves, and template robustness.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedding_store::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::metrics::DirectionalBias;
use crate::num::{mean, std_dev};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and population SD of the cosine over all unordered row pairs.
pub fn intra_set_cosine_stats(set: &EmbeddingMatrix) -> Result<CosineStats> {
    let n = set.rows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "intra-set cosine needs at least 2 rows, got {n}"
        )));
    }
    let mut sims = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            sims.push(dot(set.row(i), set.row(j)).clamp(-1.0, 1.0));
        }
    }
    Ok(CosineStats {
        mean: mean(&sims).expect("non-empty"),
        sd: std_dev(&sims).expect("non-empty"),
        n,
    })
}

/// Lower edges of the |Δ| bins; the last bin is unbounded.
pub const BIN_EDGES: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
pub const ELBOW_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub lo: f64,
    /// `None` for the unbounded last bin.
    pub hi: Option<f64>,
    pub count: usize,
    pub harmful: usize,
    /// `None` when the bin is empty.
    pub p_harm: Option<f64>,
}

impl CurveBin {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && self.hi.is_none_or(|hi| x < hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CurveBin>,
    /// Index of the first bin with `p_harm >= 0.5`.
    pub elbow: Option<usize>,
    pub saturation: Option<f64>,
}

impl CalibrationCurve {
    pub fn elbow_bin(&self) -> Option<&CurveBin> {
        self.elbow.map(|b| &self.bins[b])
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count", "p_harm"])?;
        for b in &self.bins {
            w.write_record([
                format!("{:.1}", b.lo),
                b.hi.map_or_else(|| "inf".to_string(), |h| format!("{h:.1}")),
                b.count.to_string(),
                b.p_harm.map_or_else(String::new, |p| format!("{p:.6}")),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn bin_of(x: f64) -> usize {
    BIN_EDGES.iter().rposition(|&lo| x >= lo).unwrap_or(0)
}

/// Bins `|Δ|` values and estimates `p_harm` per bin.
pub fn calibration_curve(deltas: &[f64], harmful: &[bool]) -> Result<CalibrationCurve> {
    if deltas.len() != harmful.len() {
        return Err(Error::CountMismatch {
            matrix: deltas.len(),
            manifest: harmful.len(),
        });
    }
    if let Some(i) = deltas.iter().position(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "|delta| at index {i} must be finite and non-negative, got {}",
            deltas[i]
        )));
    }
    let mut counts = [0usize; 7];
    let mut harms = [0usize; 7];
    for (&d, &h) in deltas.iter().zip(harmful) {
        let b = bin_of(d);
        counts[b] += 1;
        harms[b] += h as usize;
    }
    let bins: Vec<CurveBin> = (0..BIN_EDGES.len())
        .map(|b| CurveBin {
            lo: BIN_EDGES[b],
            hi: BIN_EDGES.get(b + 1).copied(),
            count: counts[b],
            harmful: harms[b],
            p_harm: (counts[b] > 0).then(|| harms[b] as f64 / counts[b] as f64),
        })
        .collect();
    let elbow = bins
        .iter()
        .position(|b| b.p_harm.is_some_and(|p| p >= ELBOW_THRESHOLD));
    let saturation = bins
        .iter()
        .filter_map(|b| b.p_harm)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
    Ok(CalibrationCurve {
        bins,
        elbow,
        saturation,
    })
}

/// One directional-bias result: a checkpoint under one template on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateRun {
    pub template_id: String,
    pub model: String,
    pub task: String,
    pub record_ids: Vec<String>,
    pub bias: DirectionalBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub model: String,
    pub task: String,
    /// Mean |Δ| per template, in template order.
    pub means: Vec<f64>,
    pub delta_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOrder {
    pub task: String,
    pub template_id: String,
    /// Models from largest to smallest mean |Δ|.
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRobustness {
    pub templates: Vec<String>,
    pub cells: Vec<RobustnessCell>,
    pub ranks: Vec<RankOrder>,
    pub rank_stable: bool,
}

impl TemplateRobustness {
    pub fn max_delta_mu(&self) -> f64 {
        self.cells.iter().fold(0.0, |a, c| a.max(c.delta_mu))
    }

    /// Long form: one row per model, task and template.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "task", "template_id", "mu", "delta_mu", "rank"])?;
        for cell in &self.cells {
            for (t, template) in self.templates.iter().enumerate() {
                let rank = self
                    .ranks
                    .iter()
                    .find(|r| r.task == cell.task && &r.template_id == template)
                    .and_then(|r| r.models.iter().position(|m| *m == cell.model))
                    .map(|p| p + 1)
                    .unwrap_or(0);
                w.write_record([
                    cell.model.clone(),
                    cell.task.clone(),
                    template.clone(),
                    format!("{:.6}", cell.means[t]),
                    format!("{:.6}", cell.delta_mu),
                    rank.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Models ordered by descending score, ties broken by name.
pub fn rank_order(scores: &[(String, f64)]) -> Vec<String> {
    let mut v: Vec<&(String, f64)> = scores.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(m, _)| m.clone()).collect()
}

pub fn template_robustness(runs: &[TemplateRun]) -> Result<TemplateRobustness> {
    let templates: Vec<String> = {
        let mut seen = Vec::new();
        for r in runs {
            if !seen.contains(&r.template_id) {
                seen.push(r.template_id.clone());
            }
        }
        seen
    };
    if templates.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "template robustness needs at least 2 templates, got {}",
            templates.len()
        )));
    }

    let mut grid: BTreeMap<(String, String), BTreeMap<String, &TemplateRun>> = BTreeMap::new();
    for r in runs {
        let slot = grid.entry((r.model.clone(), r.task.clone())).or_default();
        if slot.insert(r.template_id.clone(), r).is_some() {
            return Err(Error::Mismatch(format!(
                "duplicate run for {} / {} / {}",
                r.model, r.task, r.template_id
            )));
        }
    }

    let mut cells = Vec::with_capacity(grid.len());
    for ((model, task), by_template) in &grid {
        let mut means = Vec::with_capacity(templates.len());
        let mut reference: Option<&[String]> = None;
        for t in &templates {
            let run = by_template.get(t).ok_or_else(|| {
                Error::Mismatch(format!("{model} / {task} has no run under template {t}"))
            })?;
            match reference {
                None => reference = Some(&run.record_ids),
                Some(ids) if ids != run.record_ids.as_slice() => {
                    return Err(Error::Mismatch(format!(
                        "{model} / {task}: template {t} was run on a different record set"
                    )));
                }
                Some(_) => {}
            }
            means.push(run.bias.mean_abs());
        }
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        cells.push(RobustnessCell {
            model: model.clone(),
            task: task.clone(),
            means,
            delta_mu: hi - lo,
        });
    }

    let tasks: BTreeSet<&str> = cells.iter().map(|c| c.task.as_str()).collect();
    let mut ranks = Vec::new();
    let mut rank_stable = true;
    for task in tasks {
        let mut first: Option<Vec<String>> = None;
        for (t, template) in templates.iter().enumerate() {
            let scores: Vec<(String, f64)> = cells
                .iter()
                .filter(|c| c.task == task)
                .map(|c| (c.model.clone(), c.means[t]))
                .collect();
            let models = rank_order(&scores);
            match &first {
                None => first = Some(models.clone()),
                Some(f) => rank_stable &= *f == models,
            }
            ranks.push(RankOrder {
                task: task.to_string(),
                template_id: template.clone(),
                models,
            });
        }
    }

    Ok(TemplateRobustness {
        templates,
        cells,
        ranks,
        rank_stable,
    })
}
