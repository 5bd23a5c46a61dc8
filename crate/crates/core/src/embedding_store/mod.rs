//! Embedding matrices, their manifests, and demographic group indices.
//!
//! Every matrix that leaves this module has unit-L2 rows. Rows are kept in
//! file order; all downstream indices refer to that order.

mod manifest;
pub mod vlbe;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{
    manifest_path, sidecar_path, Dataset, EmbeddingKind, Gender, Record, RecordManifest,
};

/// Rows within this distance of unit norm are stored untouched, so a
/// normalized matrix survives save/load bit for bit.
const NORM_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    source_id: String,
    kind: EmbeddingKind,
}

impl EmbeddingMatrix {
    /// Builds a matrix from raw values, rejecting non-finite entries and
    /// normalizing every row to unit length.
    pub fn from_raw(
        rows: usize,
        dim: usize,
        mut data: Vec<f32>,
        source_id: impl Into<String>,
        kind: EmbeddingKind,
    ) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::PayloadMismatch {
                expected_rows: rows,
                dim,
                actual_values: data.len(),
            });
        }
        if dim == 0 && rows > 0 {
            return Err(Error::MalformedHeader("zero-dimensional embeddings".into()));
        }
        for (row, chunk) in data.chunks_exact_mut(dim.max(1)).enumerate() {
            if let Some(col) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
            normalize_row(chunk).ok_or(Error::ZeroRow { row })?;
        }
        Ok(EmbeddingMatrix {
            rows,
            dim,
            data,
            source_id: source_id.into(),
            kind,
        })
    }

    /// Builds a matrix from f64 rows (e.g. synthetic fixtures).
    pub fn from_rows<R: AsRef<[f64]>>(
        rows: &[R],
        source_id: impl Into<String>,
        kind: EmbeddingKind,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            // normalize in f64 before narrowing
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_finite() && norm > 0.0 {
                data.extend(r.iter().map(|v| (v / norm) as f32));
            } else {
                data.extend(r.iter().map(|&v| v as f32));
            }
        }
        Self::from_raw(rows.len(), dim, data, source_id, kind)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
            source_id: self.source_id.clone(),
            kind: self.kind,
        }
    }
}

/// Normalizes in place; returns `None` for an all-zero row.
fn normalize_row(row: &mut [f32]) -> Option<()> {
    let norm = row
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    if (norm - 1.0).abs() > NORM_SLACK {
        for v in row.iter_mut() {
            *v = ((*v as f64) / norm) as f32;
        }
    }
    Some(())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Reads a VLBE file. `source_id` and `kind` come from the sidecar manifest
/// when one exists; otherwise the file stem is used and the kind defaults to image.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let manifest = load_manifest_if_present(path)?;
    let (source_id, kind) = match &manifest {
        Some(m) => (m.source_id.clone(), m.kind),
        None => (
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            EmbeddingKind::Image,
        ),
    };
    load_embeddings_as(path, source_id, kind)
}

pub fn load_embeddings_as(
    path: &Path,
    source_id: impl Into<String>,
    kind: EmbeddingKind,
) -> Result<EmbeddingMatrix> {
    let raw = vlbe::read(path)?;
    EmbeddingMatrix::from_raw(raw.rows, raw.dim, raw.data, source_id, kind)
}

fn load_manifest_if_present(path: &Path) -> Result<Option<RecordManifest>> {
    let mp = manifest_path(path);
    if mp.exists() {
        RecordManifest::load(&mp).map(Some)
    } else {
        Ok(None)
    }
}

pub fn save_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    vlbe::write(path, matrix.rows, matrix.dim, &matrix.data)
}

/// Loads `path` and its `<name>.manifest.json` sidecar, then joins them.
pub fn load_dataset(path: &Path) -> Result<AlignedDataset> {
    let manifest = RecordManifest::load(&manifest_path(path))?;
    let matrix = load_embeddings_as(path, manifest.source_id.clone(), manifest.kind)?;
    join(matrix, manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Race,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Gender => "gender",
            Attribute::Race => "race",
        })
    }
}

/// Partition of (a subset of) records into the groups of one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    attribute: Attribute,
    groups: Vec<String>,
    /// Group index per record; `None` when the record lacks the attribute.
    membership: Vec<Option<usize>>,
}

impl GroupIndex {
    pub fn new(attribute: Attribute, groups: Vec<String>, membership: Vec<Option<usize>>) -> Self {
        debug_assert!(membership.iter().flatten().all(|&g| g < groups.len()));
        GroupIndex {
            attribute,
            groups,
            membership,
        }
    }

    /// Builds an index from per-record labels, ordering groups by first appearance.
    pub fn from_labels<S: AsRef<str>>(attribute: Attribute, labels: &[S]) -> Self {
        let mut groups: Vec<String> = Vec::new();
        let membership = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                Some(match groups.iter().position(|g| g == l) {
                    Some(i) => i,
                    None => {
                        groups.push(l.to_string());
                        groups.len() - 1
                    }
                })
            })
            .collect();
        GroupIndex {
            attribute,
            groups,
            membership,
        }
    }

    pub fn attribute(&self) -> Attribute {
        self.attribute
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_of(&self, record: usize) -> Option<usize> {
        self.membership[record]
    }

    pub fn membership(&self) -> &[Option<usize>] {
        &self.membership
    }

    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    /// Record indices of each group, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.groups.len()];
        for (i, g) in self.membership.iter().enumerate() {
            if let Some(g) = g {
                out[*g].push(i);
            }
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.groups.len()];
        for g in self.membership.iter().flatten() {
            out[*g] += 1;
        }
        out
    }
}

/// Matrix joined with its manifest. Immutable after construction.
#[derive(Debug, Clone)]
pub struct AlignedDataset {
    matrix: EmbeddingMatrix,
    manifest: RecordManifest,
    by_id: HashMap<String, usize>,
    gender: Option<GroupIndex>,
    race: Option<GroupIndex>,
}

pub fn join(matrix: EmbeddingMatrix, manifest: RecordManifest) -> Result<AlignedDataset> {
    if matrix.rows() != manifest.records.len() {
        return Err(Error::CountMismatch {
            matrix: matrix.rows(),
            manifest: manifest.records.len(),
        });
    }
    manifest.validate()?;
    let mut by_id = HashMap::with_capacity(manifest.records.len());
    for (i, r) in manifest.records.iter().enumerate() {
        if by_id.insert(r.id.clone(), i).is_some() {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }

    let gender = if manifest.records.iter().any(|r| r.gender.is_some()) {
        let order = [Gender::Male, Gender::Female];
        let present: Vec<Gender> = order
            .into_iter()
            .filter(|g| manifest.records.iter().any(|r| r.gender == Some(*g)))
            .collect();
        let membership = manifest
            .records
            .iter()
            .map(|r| r.gender.and_then(|g| present.iter().position(|p| *p == g)))
            .collect();
        Some(GroupIndex::new(
            Attribute::Gender,
            present.iter().map(|g| g.as_str().to_string()).collect(),
            membership,
        ))
    } else {
        None
    };

    let race = if manifest.records.iter().any(|r| r.race.is_some()) {
        let mut present: Vec<String> = match manifest.dataset.and_then(|d| d.race_categories()) {
            Some(cats) => cats
                .iter()
                .filter(|c| manifest.records.iter().any(|r| r.race.as_deref() == Some(**c)))
                .map(|c| c.to_string())
                .collect(),
            None => manifest.records.iter().filter_map(|r| r.race.clone()).collect(),
        };
        if manifest.dataset.and_then(|d| d.race_categories()).is_none() {
            present.sort();
            present.dedup();
        }
        let membership = manifest
            .records
            .iter()
            .map(|r| {
                r.race
                    .as_ref()
                    .and_then(|race| present.iter().position(|p| p == race))
            })
            .collect();
        Some(GroupIndex::new(Attribute::Race, present, membership))
    } else {
        None
    };

    Ok(AlignedDataset {
        matrix,
        manifest,
        by_id,
        gender,
        race,
    })
}

impl AlignedDataset {
    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn manifest(&self) -> &RecordManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.manifest.records[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn group_index(&self, attribute: Attribute) -> Option<&GroupIndex> {
        match attribute {
            Attribute::Gender => self.gender.as_ref(),
            Attribute::Race => self.race.as_ref(),
        }
    }

    /// Joint (gender, race) cell of every record, for stratified resampling.
    pub fn joint_strata(&self) -> Vec<Vec<usize>> {
        let mut cells: Vec<((Option<usize>, Option<usize>), Vec<usize>)> = Vec::new();
        for i in 0..self.len() {
            let key = (
                self.gender.as_ref().and_then(|g| g.group_of(i)),
                self.race.as_ref().and_then(|g| g.group_of(i)),
            );
            match cells.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(i),
                None => cells.push((key, vec![i])),
            }
        }
        cells.sort_by_key(|(k, _)| *k);
        cells.into_iter().map(|(_, v)| v).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(records: Vec<Record>) -> RecordManifest {
        RecordManifest {
            dataset: Some(Dataset::FairFace),
            source_id: "t".into(),
            kind: EmbeddingKind::Image,
            temperature: None,
            records,
        }
    }

    #[test]
    fn normalizes_three_four_five() {
        let m = EmbeddingMatrix::from_raw(
            2,
            3,
            vec![3.0, 0.0, 4.0, 0.0, 1.0, 0.0],
            "t",
            EmbeddingKind::Image,
        )
        .unwrap();
        assert_eq!(m.row(0), &[0.6f32, 0.0, 0.8]);
        assert_eq!(m.row(1), &[0.0f32, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_reports_row() {
        let err = EmbeddingMatrix::from_raw(
            2,
            2,
            vec![1.0, 0.0, f32::NAN, 1.0],
            "t",
            EmbeddingKind::Image,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 0 }));
    }

    #[test]
    fn zero_row_rejected() {
        let err =
            EmbeddingMatrix::from_raw(1, 2, vec![0.0, 0.0], "t", EmbeddingKind::Image).unwrap_err();
        assert!(matches!(err, Error::ZeroRow { row: 0 }));
    }

    #[test]
    fn join_builds_gender_index() {
        let m = EmbeddingMatrix::from_rows(
            &[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]],
            "t",
            EmbeddingKind::Image,
        )
        .unwrap();
        let genders = [Gender::Male, Gender::Female, Gender::Male, Gender::Female];
        let records = genders
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut r = Record::new(format!("img_{i}"));
                r.gender = Some(*g);
                r
            })
            .collect();
        let ds = join(m, manifest(records)).unwrap();
        let gi = ds.group_index(Attribute::Gender).unwrap();
        assert_eq!(gi.groups(), &["Male".to_string(), "Female".to_string()]);
        assert_eq!(gi.members(), vec![vec![0, 2], vec![1, 3]]);
        assert!(ds.group_index(Attribute::Race).is_none());
        assert_eq!(ds.index_of("img_2"), Some(2));
    }

    #[test]
    fn join_errors() {
        let m = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]], "t", EmbeddingKind::Image)
            .unwrap();
        let err = join(m.clone(), manifest(vec![Record::new("a")])).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { matrix: 2, manifest: 1 }));

        let err = join(
            m.clone(),
            manifest(vec![Record::new("img_7"), Record::new("img_7")]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(_)));

        let mut r = Record::new("b");
        r.race = Some("Martian".into());
        let err = join(m, manifest(vec![Record::new("a"), r])).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { .. }));
    }

    #[test]
    fn race_groups_follow_canonical_order() {
        let m = EmbeddingMatrix::from_rows(
            &[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            "t",
            EmbeddingKind::Image,
        )
        .unwrap();
        let records = ["Indian", "White", "Indian"]
            .iter()
            .enumerate()
            .map(|(i, race)| {
                let mut r = Record::new(i.to_string());
                r.race = Some(race.to_string());
                r
            })
            .collect();
        let ds = join(m, manifest(records)).unwrap();
        let gi = ds.group_index(Attribute::Race).unwrap();
        assert_eq!(gi.groups(), &["White".to_string(), "Indian".to_string()]);
        assert_eq!(gi.sizes(), vec![1, 2]);
    }
}
