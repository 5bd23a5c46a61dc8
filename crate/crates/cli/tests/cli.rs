use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;
use vlaudit::catalog::{builtin_catalog, TemplateId};
use vlaudit::embedding_store::{
    manifest_path, save_embeddings, Dataset, EmbeddingKind, EmbeddingMatrix, Gender, Record,
    RecordManifest,
};

const D: usize = 48;

fn vlaudit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlaudit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn one_hot(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; D];
    v[k] = 1.0;
    v
}

fn save(path: &Path, rows: &[Vec<f64>], kind: EmbeddingKind, manifest: Option<RecordManifest>) {
    let m = EmbeddingMatrix::from_rows(rows, "t", kind).unwrap();
    save_embeddings(path, &m).unwrap();
    if let Some(man) = manifest {
        man.save(&manifest_path(path)).unwrap();
    }
}

/// Prompts one-hot in catalog order; half the men land on crime prompts.
fn fixture(dir: &Path) {
    let prompts = builtin_catalog().render_all(&TemplateId::Orig.template());
    let crime = prompts.iter().position(|p| p.set_id == "crime").unwrap();
    let rows: Vec<Vec<f64>> = (0..prompts.len()).map(one_hot).collect();
    let records = prompts
        .iter()
        .map(|p| {
            let mut r = Record::new(p.id.clone());
            r.set_id = Some(p.set_id.clone());
            r
        })
        .collect();
    save(
        &dir.join("prompts.vlbe"),
        &rows,
        EmbeddingKind::Prompt,
        Some(RecordManifest {
            dataset: None,
            source_id: "p".into(),
            kind: EmbeddingKind::Prompt,
            temperature: Some(0.01),
            records,
        }),
    );
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for i in 0..20 {
        let male = i % 2 == 0;
        rows.push(one_hot(if male && i % 4 == 0 { crime } else { 0 }));
        let mut r = Record::new(format!("i{i}"));
        r.gender = Some(if male { Gender::Male } else { Gender::Female });
        r.race = Some(if i < 10 { "A" } else { "B" }.into());
        records.push(r);
    }
    save(
        &dir.join("images.vlbe"),
        &rows,
        EmbeddingKind::Image,
        Some(RecordManifest {
            dataset: Some(Dataset::Synthetic),
            source_id: "img".into(),
            kind: EmbeddingKind::Image,
            temperature: None,
            records,
        }),
    );
    let cfg = json!({
        "bootstrap": {"resamples": 50},
        "runs": [{"model": "CLIP", "size": "B/32", "data_size": "400M",
                  "images": "images.vlbe", "prompts": "prompts.vlbe"}]
    });
    fs::write(dir.join("audit.json"), cfg.to_string()).unwrap();
}

#[test]
fn audit_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = vlaudit(&["audit", "audit.json", "--seed", "9", "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("res/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("Synthetic,CLIP,B/32,400M,none,"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("res/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);

    let cmp = vlaudit(&["compare", "res/report.json", "res/report.json"], dir.path());
    assert!(cmp.status.success());
    let text = String::from_utf8(cmp.stdout).unwrap();
    assert!(text.starts_with("factor,dataset,controlled,pair,attribute,crime,comm,agency,average\n"));
    assert!(text.contains("+0.0000"));
}

#[test]
fn csv_only_format() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = vlaudit(&["audit", "audit.json", "--format", "csv", "--resamples", "0", "--out", "r"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("r/table.csv").exists());
    assert!(!dir.path().join("r/report.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vlaudit(&["audit", "missing.json"], dir.path()).status.code(), Some(2));
    fixture(dir.path());
    assert_eq!(vlaudit(&["audit", "audit.json", "--format", "xml"], dir.path()).status.code(), Some(2));
    // prompts in a different dimension from the images is a data error
    let rows: Vec<Vec<f64>> = (0..45).map(|k| {
        let mut v = vec![0.0; D + 2];
        v[k] = 1.0;
        v
    }).collect();
    save(&dir.path().join("prompts.vlbe"), &rows, EmbeddingKind::Prompt, None);
    fs::remove_file(dir.path().join("prompts.manifest.json")).unwrap();
    let out = vlaudit(&["audit", "audit.json"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn build_projector_and_audit_with_it() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    save(&dir.path().join("attr.vlbe"), &[one_hot(D - 1)], EmbeddingKind::Prompt, None);
    save(&dir.path().join("pairs.vlbe"), &[one_hot(D - 2), one_hot(D - 3)], EmbeddingKind::Prompt, None);
    let out = vlaudit(
        &["debias", "build-projector", "--attributes", "attr.vlbe", "--pairs", "pairs.vlbe", "--lambda", "10", "proj.vlbe"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("proj.projector.json")).unwrap()).unwrap();
    assert_eq!(sidecar["kind"], "calibrated");
    assert_eq!(sidecar["lambda"], 10.0);
    assert_eq!(sidecar["dim"], D);

    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("audit.json")).unwrap()).unwrap();
    cfg["runs"][0]["debias"] = json!({"mode": "projection", "projector": "proj.vlbe"});
    fs::write(dir.path().join("audit.json"), cfg.to_string()).unwrap();
    let out = vlaudit(&["audit", "audit.json", "--out", "d"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("d/table.csv")).unwrap();
    assert!(table.contains(",projection,"));
}

#[test]
fn catalog_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlaudit(&["catalog", "export", "--out", "cat/catalog.json"], dir.path());
    assert!(out.status.success());
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cat/catalog.json")).unwrap()).unwrap();
    assert_eq!(doc["prompts"].as_array().unwrap().len(), 3 * 45);
    assert_eq!(doc["prompts"][0]["text"], "a photo of a white man");
    let stdout = vlaudit(&["catalog", "export"], dir.path()).stdout;
    assert_eq!(stdout, fs::read(dir.path().join("cat/catalog.json")).unwrap());
}
