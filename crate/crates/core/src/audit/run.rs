//! The audit pipeline: load, debias, predict, measure, bootstrap.

use std::path::Path;

use super::config::{AuditConfig, DebiasConfig, RunConfig};
use super::report::{AuditReport, DirectionalSummary, ReportRow, RunKey, Skipped};
use crate::catalog::{builtin_catalog, Catalog, ProbeSpec, TemplateId};
use crate::debias::{apply_projection, load_projector, ProjectionMatrix};
use crate::embedding_store::{
    load_dataset, load_embeddings_as, manifest_path, AlignedDataset, Attribute, EmbeddingKind,
    EmbeddingMatrix, GroupIndex, RecordManifest,
};
use crate::error::{Error, Result};
use crate::metrics::{
    directional_bias, harm_rate, harm_rate_over, mean_max_skew, tally, DirectionalBias,
    HarmEntry, SkewOptions, SkewReport,
};
use crate::stats::{bootstrap_ci, BootstrapConfig};
use crate::zeroshot::{cosine_similarity_matrix, events_of, predict, PromptLayout};

/// A prompt matrix with its set layout.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub matrix: EmbeddingMatrix,
    pub layout: PromptLayout,
    pub template_id: String,
}

impl PromptBank {
    pub fn family(&self, sets: &[String]) -> Result<EmbeddingMatrix> {
        let mut cols = Vec::new();
        for s in sets {
            let c = self
                .layout
                .columns(s)
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::MissingPromptSet(s.clone()))?;
            cols.extend_from_slice(c);
        }
        Ok(self.matrix.select(&cols))
    }

    pub fn with_matrix(&self, matrix: EmbeddingMatrix) -> Self {
        PromptBank {
            matrix,
            layout: self.layout.clone(),
            template_id: self.template_id.clone(),
        }
    }
}

/// Loads prompt embeddings. Without a manifest, the file must hold the
/// catalog prompts of one template in catalog order.
pub fn load_prompts(path: &Path, catalog: &Catalog) -> Result<PromptBank> {
    let mp = manifest_path(path);
    if mp.is_file() {
        let manifest = RecordManifest::load(&mp)?;
        if manifest.kind != EmbeddingKind::Prompt {
            return Err(Error::Manifest(format!(
                "{} is an image manifest, expected prompts",
                mp.display()
            )));
        }
        let matrix = load_embeddings_as(path, manifest.source_id.clone(), EmbeddingKind::Prompt)?;
        if matrix.rows() != manifest.records.len() {
            return Err(Error::CountMismatch {
                matrix: matrix.rows(),
                manifest: manifest.records.len(),
            });
        }
        let layout = PromptLayout::from_records(&manifest.records)?;
        let template_id = manifest
            .records
            .first()
            .and_then(|r| r.template_id.clone())
            .unwrap_or_else(|| TemplateId::Orig.as_str().to_string());
        return Ok(PromptBank {
            matrix,
            layout,
            template_id,
        });
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let matrix = load_embeddings_as(path, stem, EmbeddingKind::Prompt)?;
    let order = catalog.render_all(&TemplateId::Orig.template());
    if matrix.rows() != order.len() {
        return Err(Error::Manifest(format!(
            "{} has {} rows and no manifest; expected the {} catalog prompts",
            path.display(),
            matrix.rows(),
            order.len()
        )));
    }
    let mut layout = PromptLayout::new();
    let mut sets: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, p) in order.iter().enumerate() {
        match sets.iter_mut().find(|(s, _)| *s == p.set_id) {
            Some((_, v)) => v.push(i),
            None => sets.push((p.set_id.clone(), vec![i])),
        }
    }
    for (s, cols) in sets {
        layout = layout.with_set(s, cols);
    }
    Ok(PromptBank {
        matrix,
        layout,
        template_id: TemplateId::Orig.as_str().to_string(),
    })
}

pub(crate) struct LoadedRun {
    pub key: RunKey,
    pub data: AlignedDataset,
    pub prompts: PromptBank,
    pub projector: Option<ProjectionMatrix>,
}

pub(crate) fn run_key(run: &RunConfig, data: &AlignedDataset) -> RunKey {
    let dataset = run.dataset.clone().unwrap_or_else(|| {
        data.manifest()
            .dataset
            .map(|d| d.to_string())
            .unwrap_or_default()
    });
    RunKey::new(dataset, &run.model, &run.size, &run.data_size, run.debias.label())
}

pub(crate) fn load_run(cfg: &AuditConfig, run: &RunConfig, catalog: &Catalog) -> Result<LoadedRun> {
    let (data, prompts) = (|| {
        let data = load_dataset(&cfg.resolve(&run.images))?;
        let prompts = load_prompts(&cfg.resolve(&run.prompts), catalog)?;
        if prompts.matrix.dim() != data.matrix().dim() {
            return Err(Error::DimensionMismatch {
                expected: data.matrix().dim(),
                actual: prompts.matrix.dim(),
            });
        }
        Ok((data, prompts))
    })()
    .map_err(|e| e.in_stage("load"))?;
    let key = run_key(run, &data);
    let projector = match &run.debias {
        DebiasConfig::Projection { projector } => {
            Some(load_projector(&cfg.resolve(projector)).map_err(|e| e.in_stage("debias"))?)
        }
        _ => None,
    };
    let prompts = debias_prompts(prompts, projector.as_ref())?;
    Ok(LoadedRun {
        key,
        data,
        prompts,
        projector,
    })
}

pub(crate) fn debias_prompts(bank: PromptBank, projector: Option<&ProjectionMatrix>) -> Result<PromptBank> {
    match projector {
        None => Ok(bank),
        Some(p) => {
            let m = apply_projection(p, &bank.matrix).map_err(|e| e.in_stage("debias"))?;
            Ok(bank.with_matrix(m))
        }
    }
}

fn skew_with_ci(
    events: &[Option<usize>],
    names: &[String],
    groups: &GroupIndex,
    task: &str,
    options: SkewOptions,
    strata: &[Vec<usize>],
    boot: Option<&BootstrapConfig>,
) -> Result<SkewReport> {
    let table = tally(events, names, groups, 0..events.len())?;
    let mut report = mean_max_skew(&table, task, options)?;
    if let (Some(b), Some(_)) = (boot, report.mean) {
        let stat = |sample: &[usize]| {
            let t = tally(events, names, groups, sample.iter().copied()).ok()?;
            mean_max_skew(&t, task, options).ok()?.mean
        };
        match bootstrap_ci(strata, stat, b) {
            Ok(ci) => report.ci = Some(ci),
            Err(Error::UndefinedStatistic) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

fn harm_with_ci(
    events: &[Option<usize>],
    names: &[String],
    strata: &[Vec<usize>],
    boot: Option<&BootstrapConfig>,
) -> Result<Vec<HarmEntry>> {
    names
        .iter()
        .enumerate()
        .map(|(e, name)| {
            let rate = harm_rate(events, e)?;
            let ci = match boot {
                Some(b) => Some(bootstrap_ci(
                    strata,
                    |s: &[usize]| harm_rate_over(events, e, s.iter().copied()).ok(),
                    b,
                )?),
                None => None,
            };
            Ok(HarmEntry {
                event: name.clone(),
                rate,
                ci,
            })
        })
        .collect()
}

pub(crate) fn directional_for(
    images: &EmbeddingMatrix,
    prompts: &PromptBank,
    probe: &ProbeSpec,
) -> Result<DirectionalBias> {
    let pos = prompts.family(&probe.positive_sets)?;
    let neg = prompts.family(&probe.negative_sets)?;
    directional_bias(images, &pos, &neg)
}

pub(crate) fn summarize(task: &str, d: &DirectionalBias) -> DirectionalSummary {
    DirectionalSummary {
        task: task.to_string(),
        mean: d.mean,
        sd: d.sd,
        mean_abs: d.mean_abs(),
    }
}

fn skip(key: &RunKey, probe: Option<&str>, attribute: Option<Attribute>, reason: String) -> Skipped {
    Skipped {
        key: key.clone(),
        probe: probe.map(str::to_string),
        attribute,
        reason,
    }
}

fn audit_run(
    cfg: &AuditConfig,
    run: &LoadedRun,
    catalog: &Catalog,
    boot: Option<&BootstrapConfig>,
    skipped: &mut Vec<Skipped>,
) -> Result<Option<ReportRow>> {
    let images = run.data.matrix();
    let sim = cosine_similarity_matrix(images, &run.prompts.matrix).map_err(|e| e.in_stage("predict"))?;
    let strata = run.data.joint_strata();
    let options = SkewOptions {
        smoothing: cfg.smoothing,
    };
    let mut row = ReportRow {
        key: run.key.clone(),
        images: images.rows(),
        skews: Vec::new(),
        harm: Vec::new(),
        directional: Vec::new(),
        projector: run.projector.as_ref().map(ProjectionMatrix::sidecar),
    };
    let mut evaluated = false;
    for &probe_id in &cfg.probes {
        let probe = catalog.probe(probe_id);
        let task = probe_id.task();
        if let Some(missing) = run.prompts.layout.missing_set(probe) {
            skipped.push(skip(
                &run.key,
                Some(task),
                None,
                format!("prompt set {missing} absent from the prompt file"),
            ));
            continue;
        }
        evaluated = true;
        let preds = predict(&sim, probe, &run.prompts.layout, cfg.pooling)
            .map_err(|e| e.in_stage("predict"))?;
        let events = events_of(&preds);
        let names: Vec<String> = probe.event_names().into_iter().map(String::from).collect();
        for &attribute in &cfg.attributes {
            let groups = match run.data.group_index(attribute) {
                Some(g) if g.groups().len() >= 2 => g,
                Some(g) => {
                    skipped.push(skip(
                        &run.key,
                        Some(task),
                        Some(attribute),
                        format!("only {} {attribute} group(s) present", g.groups().len()),
                    ));
                    continue;
                }
                None => {
                    skipped.push(skip(
                        &run.key,
                        Some(task),
                        Some(attribute),
                        format!("images carry no {attribute} labels"),
                    ));
                    continue;
                }
            };
            let report = skew_with_ci(&events, &names, groups, task, options, &strata, boot)
                .map_err(|e| e.in_stage("metrics"))?;
            row.skews.push(report);
        }
        row.harm
            .extend(harm_with_ci(&events, &names, &strata, boot).map_err(|e| e.in_stage("stats"))?);
        let d = directional_for(images, &run.prompts, probe).map_err(|e| e.in_stage("metrics"))?;
        row.directional.push(summarize(task, &d));
    }
    Ok(evaluated.then_some(row))
}

/// Runs every configured probe and attribute over every run.
pub fn run_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint()?;
    let catalog = builtin_catalog();
    let boot = cfg.bootstrap_config();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for run in &cfg.runs {
        let loaded = load_run(cfg, run, &catalog)?;
        if let Some(row) = audit_run(cfg, &loaded, &catalog, boot.as_ref(), &mut skipped)? {
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(AuditReport {
        seed: cfg.seed,
        fingerprint,
        resamples: boot.map(|b| b.resamples),
        rows,
        skipped,
    })
}
