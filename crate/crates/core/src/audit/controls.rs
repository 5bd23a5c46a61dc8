//! Runs the control experiments configured alongside an audit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::AuditConfig;
use super::report::{DirectionalSummary, RunKey, Skipped};
use super::run::{debias_prompts, directional_for, load_prompts, load_run, summarize};
use crate::catalog::builtin_catalog;
use crate::controls::{
    calibration_curve, intra_set_cosine_stats, template_robustness, CalibrationCurve, CosineStats,
    TemplateRobustness, TemplateRun,
};
use crate::embedding_store::{load_embeddings_as, EmbeddingKind};
use crate::error::{Error, Result};
use crate::zeroshot::{cosine_similarity_matrix, predict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub key: RunKey,
    pub task: String,
    pub curve: CalibrationCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralEntry {
    pub model: String,
    pub cosine: CosineStats,
    pub directional: Vec<DirectionalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub dataset: String,
    pub robustness: TemplateRobustness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlsReport {
    pub seed: u64,
    pub fingerprint: String,
    pub curves: Vec<CurveEntry>,
    pub neutral: Vec<NeutralEntry>,
    pub robustness: Vec<RobustnessEntry>,
    #[serde(default)]
    pub skipped: Vec<Skipped>,
}

fn checkpoint_label(key: &RunKey) -> String {
    if key.debias == "none" {
        format!("{} {}@{}", key.model, key.size, key.data_size)
    } else {
        format!("{} {}@{} {}", key.model, key.size, key.data_size, key.debias)
    }
}

pub fn run_controls(cfg: &AuditConfig) -> Result<ControlsReport> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint()?;
    let controls = cfg.controls.clone().unwrap_or_default();
    let catalog = builtin_catalog();
    let mut curves = Vec::new();
    let mut skipped = Vec::new();
    let mut template_runs: BTreeMap<String, Vec<TemplateRun>> = BTreeMap::new();

    for run in &cfg.runs {
        let loaded = load_run(cfg, run, &catalog)?;
        let images = loaded.data.matrix();
        let probes: Vec<_> = cfg
            .probes
            .iter()
            .map(|&p| catalog.probe(p))
            .filter(|p| {
                let missing = loaded.prompts.layout.missing_set(p);
                if let Some(m) = missing {
                    skipped.push(Skipped {
                        key: loaded.key.clone(),
                        probe: Some(p.probe_id.task().to_string()),
                        attribute: None,
                        reason: format!("prompt set {m} absent from the prompt file"),
                    });
                }
                missing.is_none()
            })
            .collect();

        if controls.calibration {
            let sim = cosine_similarity_matrix(images, &loaded.prompts.matrix)
                .map_err(|e| e.in_stage("predict"))?;
            for probe in &probes {
                let preds = predict(&sim, probe, &loaded.prompts.layout, cfg.pooling)
                    .map_err(|e| e.in_stage("predict"))?;
                let harmful: Vec<bool> = preds.iter().map(|p| p.event.is_some()).collect();
                let d = directional_for(images, &loaded.prompts, probe)
                    .map_err(|e| e.in_stage("controls"))?;
                let abs: Vec<f64> = d.per_image.iter().map(|v| v.abs()).collect();
                curves.push(CurveEntry {
                    key: loaded.key.clone(),
                    task: probe.probe_id.task().to_string(),
                    curve: calibration_curve(&abs, &harmful).map_err(|e| e.in_stage("controls"))?,
                });
            }
        }

        if controls.templates && !run.templates.is_empty() {
            let ids: Vec<String> = (0..loaded.data.len())
                .map(|i| loaded.data.record(i).id.clone())
                .collect();
            let mut banks = vec![loaded.prompts.clone()];
            for (template_id, path) in &run.templates {
                let mut bank = load_prompts(&cfg.resolve(path), &catalog).map_err(|e| e.in_stage("load"))?;
                bank.template_id = template_id.clone();
                banks.push(debias_prompts(bank, loaded.projector.as_ref())?);
            }
            for bank in &banks {
                for probe in &probes {
                    let bias = directional_for(images, bank, probe).map_err(|e| e.in_stage("controls"))?;
                    template_runs
                        .entry(loaded.key.dataset.clone())
                        .or_default()
                        .push(TemplateRun {
                            template_id: bank.template_id.clone(),
                            model: checkpoint_label(&loaded.key),
                            task: probe.probe_id.task().to_string(),
                            record_ids: ids.clone(),
                            bias,
                        });
                }
            }
        }
    }

    let mut robustness = Vec::new();
    for (dataset, runs) in template_runs {
        robustness.push(RobustnessEntry {
            robustness: template_robustness(&runs).map_err(|e| e.in_stage("controls"))?,
            dataset,
        });
    }

    let mut neutral = Vec::new();
    for n in &controls.neutral {
        let images = load_embeddings_as(&cfg.resolve(&n.images), n.model.clone(), EmbeddingKind::Image)
            .map_err(|e| e.in_stage("load"))?;
        let prompts = load_prompts(&cfg.resolve(&n.prompts), &catalog).map_err(|e| e.in_stage("load"))?;
        if prompts.matrix.dim() != images.dim() {
            return Err(Error::DimensionMismatch {
                expected: images.dim(),
                actual: prompts.matrix.dim(),
            }
            .in_stage("load"));
        }
        let cosine = intra_set_cosine_stats(&images).map_err(|e| e.in_stage("controls"))?;
        let mut directional = Vec::new();
        for &p in &cfg.probes {
            let probe = catalog.probe(p);
            if prompts.layout.missing_set(probe).is_some() {
                continue;
            }
            let d = directional_for(&images, &prompts, probe).map_err(|e| e.in_stage("controls"))?;
            directional.push(summarize(p.task(), &d));
        }
        neutral.push(NeutralEntry {
            model: n.model.clone(),
            cosine,
            directional,
        });
    }

    Ok(ControlsReport {
        seed: cfg.seed,
        fingerprint,
        curves,
        neutral,
        robustness,
        skipped,
    })
}

/// Lowercase, with every run of non-alphanumerics collapsed to `_`.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

fn curve_file_name(e: &CurveEntry) -> String {
    let k = &e.key;
    format!(
        "curve_{}.csv",
        slug(&format!(
            "{} {} {} {} {} {}",
            k.dataset, k.model, k.size, k.data_size, k.debias, e.task
        ))
    )
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `controls.json`, one `curve_*.csv` per curve, one
/// `robustness_*.csv` per dataset, and `neutral.csv`.
pub fn emit_controls(report: &ControlsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    written.push(write(dir.join("controls.json"), json.as_bytes())?);
    for c in &report.curves {
        let mut buf = Vec::new();
        c.curve.write_csv(&mut buf)?;
        written.push(write(dir.join(curve_file_name(c)), &buf)?);
    }
    for r in &report.robustness {
        let mut buf = Vec::new();
        r.robustness.write_csv(&mut buf)?;
        written.push(write(
            dir.join(format!("robustness_{}.csv", slug(&r.dataset))),
            &buf,
        )?);
    }
    if !report.neutral.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "n", "cosine_mean", "cosine_sd", "task", "delta_mean", "delta_sd"])?;
        for n in &report.neutral {
            for d in &n.directional {
                w.write_record([
                    n.model.clone(),
                    n.cosine.n.to_string(),
                    format!("{:.6}", n.cosine.mean),
                    format!("{:.6}", n.cosine.sd),
                    d.task.clone(),
                    format!("{:.6}", d.mean),
                    format!("{:.6}", d.sd),
                ])?;
            }
        }
        let buf = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
        written.push(write(dir.join("neutral.csv"), &buf)?);
    }
    Ok(written)
}
