//! Audit configuration: one JSON document, paths relative to its own location.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::ProbeId;
use crate::embedding_store::{manifest_path, sidecar_path, Attribute};
use crate::error::{Error, Result};
use crate::stats::BootstrapConfig;
use crate::zeroshot::PredictionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DebiasConfig {
    None,
    /// Apply a stored projector to the prompt embeddings.
    Projection { projector: PathBuf },
    /// The prompt file already holds embeddings from an external method.
    ExternalPrompts { method: String },
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig::None
    }
}

impl DebiasConfig {
    pub fn label(&self) -> String {
        match self {
            DebiasConfig::None => "none".into(),
            DebiasConfig::Projection { .. } => "projection".into(),
            DebiasConfig::ExternalPrompts { method } => method.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Report label; defaults to the image manifest's dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub model: String,
    pub size: String,
    pub data_size: String,
    pub images: PathBuf,
    pub prompts: PathBuf,
    /// Extra prompt files keyed by template id, used by the template control.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub debias: DebiasConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeutralConfig {
    pub model: String,
    pub images: PathBuf,
    pub prompts: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlsConfig {
    pub neutral: Vec<NeutralConfig>,
    pub calibration: bool,
    pub templates: bool,
}

impl Default for ControlsConfig {
    fn default() -> Self {
        ControlsConfig {
            neutral: Vec::new(),
            calibration: true,
            templates: true,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_probes() -> Vec<ProbeId> {
    ProbeId::ALL.to_vec()
}

fn default_attributes() -> Vec<Attribute> {
    vec![Attribute::Gender, Attribute::Race]
}

fn default_bootstrap() -> Option<BootstrapConfig> {
    Some(BootstrapConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_probes")]
    pub probes: Vec<ProbeId>,
    #[serde(default = "default_attributes")]
    pub attributes: Vec<Attribute>,
    #[serde(default)]
    pub pooling: PredictionMode,
    #[serde(default)]
    pub smoothing: bool,
    /// `null` disables confidence intervals. The top-level seed always wins.
    #[serde(default = "default_bootstrap")]
    pub bootstrap: Option<BootstrapConfig>,
    pub runs: Vec<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<ControlsConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl AuditConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: AuditConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn bootstrap_config(&self) -> Option<BootstrapConfig> {
        self.bootstrap.map(|b| BootstrapConfig {
            seed: self.seed,
            ..b
        })
    }

    /// Every input file, in config order, without duplicates.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = Vec::new();
        let mut push = |p: &Path| {
            let p = p.to_path_buf();
            if !out.contains(&p) {
                out.push(p);
            }
        };
        for r in &self.runs {
            push(&r.images);
            push(&r.prompts);
            for p in r.templates.values() {
                push(p);
            }
            if let DebiasConfig::Projection { projector } = &r.debias {
                push(projector);
            }
        }
        if let Some(c) = &self.controls {
            for n in &c.neutral {
                push(&n.images);
                push(&n.prompts);
            }
        }
        out
    }

    /// Checks that referenced files exist and parameters are in range.
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bootstrap_config() {
            b.validate()
                .map_err(|e| Error::Config(format!("bootstrap: {e}")))?;
        }
        let mut seen_probe = Vec::new();
        for p in &self.probes {
            if seen_probe.contains(p) {
                return Err(Error::Config(format!("probe {p} listed twice")));
            }
            seen_probe.push(*p);
        }
        for r in &self.runs {
            let required: Vec<PathBuf> = match &r.debias {
                DebiasConfig::Projection { projector } => vec![
                    projector.clone(),
                    sidecar_path(projector, "projector"),
                ],
                _ => Vec::new(),
            };
            for f in [r.images.clone(), manifest_path(&r.images), r.prompts.clone()]
                .into_iter()
                .chain(r.templates.values().cloned())
                .chain(required)
            {
                let full = self.resolve(&f);
                if !full.is_file() {
                    return Err(Error::Config(format!(
                        "run {} {} {}: missing file {}",
                        r.model,
                        r.size,
                        r.data_size,
                        full.display()
                    )));
                }
            }
        }
        if let Some(c) = &self.controls {
            for n in &c.neutral {
                for f in [&n.images, &n.prompts] {
                    let full = self.resolve(f);
                    if !full.is_file() {
                        return Err(Error::Config(format!(
                            "neutral control {}: missing file {}",
                            n.model,
                            full.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical config JSON and the bytes of every input file.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        for f in self.input_files() {
            let full = self.resolve(&f);
            h.update(f.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&full).map_err(|e| Error::io(&full, e))?);
            for side in [manifest_path(&full), sidecar_path(&full, "projector")] {
                if side.is_file() {
                    h.update(fs::read(&side).map_err(|e| Error::io(&side, e))?);
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "runs": [{"model": "CLIP", "size": "B/32", "data_size": "400M",
                  "images": "img.vlbe", "prompts": "p.vlbe"}]
    }"#;

    #[test]
    fn defaults() {
        let c = AuditConfig::from_json(MINIMAL, "/base").unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.probes, ProbeId::ALL.to_vec());
        assert_eq!(c.attributes, vec![Attribute::Gender, Attribute::Race]);
        assert_eq!(c.pooling, PredictionMode::Union);
        assert_eq!(c.runs[0].debias, DebiasConfig::None);
        assert_eq!(c.bootstrap, Some(BootstrapConfig::default()));
        assert_eq!(c.resolve(Path::new("x")), PathBuf::from("/base/x"));
        assert_eq!(c.output_path(), PathBuf::from("/base/out"));
    }

    #[test]
    fn debias_modes_and_probe_names() {
        let text = r#"{
            "seed": 9, "probes": ["crime", "Agency"], "attributes": ["race"],
            "pooling": "pooled", "bootstrap": null,
            "runs": [
              {"model": "CLIP", "size": "B/32", "data_size": "400M", "images": "i", "prompts": "p",
               "debias": {"mode": "projection", "projector": "proj.vlbe"}},
              {"model": "OpenCLIP", "size": "B/32", "data_size": "2B", "images": "i", "prompts": "q",
               "debias": {"mode": "external-prompts", "method": "saner"}}
            ]
        }"#;
        let c = AuditConfig::from_json(text, "").unwrap();
        assert_eq!(c.probes, vec![ProbeId::CrimeNonHuman, ProbeId::Agency]);
        assert_eq!(c.bootstrap_config(), None);
        assert_eq!(c.runs[0].debias.label(), "projection");
        assert_eq!(c.runs[1].debias.label(), "saner");
        assert_eq!(
            c.input_files(),
            vec![PathBuf::from("i"), PathBuf::from("p"), PathBuf::from("proj.vlbe"), PathBuf::from("q")]
        );
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let e = AuditConfig::from_json(r#"{"runs": [], "probes": ["weather"]}"#, "").unwrap_err();
        assert!(e.is_config());
        let e = AuditConfig::from_json(r#"{"runs": [], "typo": 1}"#, "").unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn missing_files_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let c = AuditConfig::from_json(MINIMAL, dir.path()).unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("img.vlbe"));
    }

    #[test]
    fn seed_overrides_bootstrap_seed() {
        let text = r#"{"seed": 5, "bootstrap": {"seed": 99, "resamples": 10}, "runs": []}"#;
        let c = AuditConfig::from_json(text, "").unwrap();
        let b = c.bootstrap_config().unwrap();
        assert_eq!((b.seed, b.resamples), (5, 10));
    }
}
