#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vlaudit::catalog::{builtin_catalog, TemplateId};
use vlaudit::embedding_store::{
    manifest_path, save_embeddings, Dataset, EmbeddingKind, EmbeddingMatrix, Gender, Record,
    RecordManifest,
};

pub const N_PROMPTS: usize = 45;

pub fn one_hot(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = 1.0;
    v
}

/// Catalog order: row `k` of a prompt file is prompt `k` of this list.
pub fn prompt_records(template: TemplateId) -> Vec<Record> {
    builtin_catalog()
        .render_all(&template.template())
        .into_iter()
        .map(|p| {
            let mut r = Record::new(p.id);
            r.set_id = Some(p.set_id);
            r.template_id = Some(template.as_str().to_string());
            r
        })
        .collect()
}

/// First column of set `set_id` in catalog order.
pub fn first_column(set_id: &str) -> usize {
    prompt_records(TemplateId::Orig)
        .iter()
        .position(|r| r.set_id.as_deref() == Some(set_id))
        .unwrap()
}

pub fn write_prompts(dir: &Path, name: &str, rows: &[Vec<f64>], records: Vec<Record>) -> PathBuf {
    let path = dir.join(format!("{name}.vlbe"));
    let m = EmbeddingMatrix::from_rows(rows, name, EmbeddingKind::Prompt).unwrap();
    save_embeddings(&path, &m).unwrap();
    RecordManifest {
        dataset: None,
        source_id: name.into(),
        kind: EmbeddingKind::Prompt,
        temperature: Some(0.01),
        records,
    }
    .save(&manifest_path(&path))
    .unwrap();
    path
}

/// One-hot prompts `e_0 .. e_44` in a `d`-dimensional space.
pub fn write_one_hot_prompts(dir: &Path, name: &str, d: usize) -> PathBuf {
    let rows: Vec<Vec<f64>> = (0..N_PROMPTS).map(|k| one_hot(d, k)).collect();
    write_prompts(dir, name, &rows, prompt_records(TemplateId::Orig))
}

pub fn image_record(id: String, gender: Option<Gender>, race: Option<&str>) -> Record {
    let mut r = Record::new(id);
    r.gender = gender;
    r.race = race.map(str::to_string);
    r
}

pub fn write_images(
    dir: &Path,
    name: &str,
    dataset: Dataset,
    rows: &[Vec<f64>],
    records: Vec<Record>,
) -> PathBuf {
    let path = dir.join(format!("{name}.vlbe"));
    let m = EmbeddingMatrix::from_rows(rows, name, EmbeddingKind::Image).unwrap();
    save_embeddings(&path, &m).unwrap();
    RecordManifest {
        dataset: Some(dataset),
        source_id: name.into(),
        kind: EmbeddingKind::Image,
        temperature: None,
        records,
    }
    .save(&manifest_path(&path))
    .unwrap();
    path
}

/// Ten male and ten female images placed exactly on one prompt each.
/// Males: 2 crime, 1 non-human. Females: 1 crime, 2 non-human.
pub fn write_planted_images(dir: &Path, name: &str, d: usize) -> PathBuf {
    let demo = first_column("demographic");
    let crime = first_column("crime");
    let animal = first_column("non_human");
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (gender, n_crime, n_animal) in [(Gender::Male, 2, 1), (Gender::Female, 1, 2)] {
        for i in 0..10 {
            let col = if i < n_crime {
                crime
            } else if i < n_crime + n_animal {
                animal
            } else {
                demo
            };
            rows.push(one_hot(d, col));
            let race = if i % 2 == 0 { "A" } else { "B" };
            records.push(image_record(format!("{gender:?}_{i}"), Some(gender), Some(race)));
        }
    }
    write_images(dir, name, Dataset::Synthetic, &rows, records)
}

pub fn write_config(dir: &Path, value: serde_json::Value) -> PathBuf {
    let path = dir.join("audit.json");
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}
