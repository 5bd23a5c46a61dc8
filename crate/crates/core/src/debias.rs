//! Projection debiasing of prompt embeddings.
//!
//! The raw projector removes the span of attribute-prompt embeddings,
//! `P0 = I - A (A^T A)^-1 A^T`, built from a QR factorization of `A`.
//! Calibration minimizes `|P - P0|_F^2 + lambda * sum_k |P d_k|^2` over
//! pair differences `d_k`, whose stationary point is
//! `P* = P0 (I + lambda * sum_k d_k d_k^T)^-1`.
//!
//! Image embeddings are never projected.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{sidecar_path, vlbe, EmbeddingKind, EmbeddingMatrix};
use crate::error::{Error, Result};

/// `|R_kk|` below this marks column `k` as dependent on earlier columns.
pub const RANK_TOLERANCE: f64 = 1e-8;
/// Projected rows shorter than this are rejected.
pub const MIN_PROJECTED_NORM: f64 = 1e-8;
/// Condition-number bound beyond which the calibration solve is ridge-regularized.
pub const CONDITION_LIMIT: f64 = 1e12;
pub const DEFAULT_LAMBDA: f64 = 500.0;

/// Attribute prompts and their unit embeddings as the columns of `A` (d x m).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpec {
    prompts: Vec<String>,
    matrix: DMatrix<f64>,
}

impl AttributeSpec {
    /// One column per row of `embeddings`.
    pub fn new(prompts: Vec<String>, embeddings: &EmbeddingMatrix) -> Result<Self> {
        if prompts.len() != embeddings.rows() {
            return Err(Error::CountMismatch {
                matrix: embeddings.rows(),
                manifest: prompts.len(),
            });
        }
        let d = embeddings.dim();
        let m = embeddings.rows();
        let matrix = DMatrix::from_fn(d, m, |i, j| embeddings.row(j)[i] as f64);
        Self::from_columns(prompts, matrix)
    }

    pub fn from_columns(prompts: Vec<String>, mut matrix: DMatrix<f64>) -> Result<Self> {
        let (d, m) = matrix.shape();
        if m == 0 {
            return Err(Error::Empty("attribute prompts"));
        }
        if m >= d {
            return Err(Error::InvalidParameter(format!(
                "{m} attribute prompts must be fewer than the embedding dimension {d}"
            )));
        }
        if prompts.len() != m {
            return Err(Error::CountMismatch {
                matrix: m,
                manifest: prompts.len(),
            });
        }
        for (j, mut col) in matrix.column_iter_mut().enumerate() {
            let n = col.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::RankDeficient { columns: vec![j] });
            }
            col /= n;
        }
        Ok(AttributeSpec { prompts, matrix })
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    Raw,
    Calibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub matrix: DMatrix<f64>,
    pub kind: ProjectorKind,
    pub lambda: Option<f64>,
    pub attribute_prompts: Vec<String>,
    pub calibration_pairs: Vec<(String, String)>,
}

impl ProjectionMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }
}

/// Caption pairs that should coincide after projection, with strength `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPairs {
    labels: Vec<(String, String)>,
    diffs: Vec<DVector<f64>>,
    lambda: f64,
}

impl CalibrationPairs {
    pub fn new(
        labels: Vec<(String, String)>,
        embeddings: Vec<(DVector<f64>, DVector<f64>)>,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "calibration strength must be finite and >= 0, got {lambda}"
            )));
        }
        if labels.len() != embeddings.len() {
            return Err(Error::CountMismatch {
                matrix: embeddings.len(),
                manifest: labels.len(),
            });
        }
        let mut diffs = Vec::with_capacity(embeddings.len());
        for (k, (a, b)) in embeddings.into_iter().enumerate() {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.len(),
                    actual: b.len(),
                });
            }
            let d = a - b;
            if d.norm() == 0.0 {
                log::warn!("calibration pair {k} is degenerate (identical embeddings)");
            }
            diffs.push(d);
        }
        Ok(CalibrationPairs {
            labels,
            diffs,
            lambda,
        })
    }

    /// Pairs from consecutive rows `(2k, 2k + 1)` of a prompt matrix.
    pub fn from_consecutive_rows(
        labels: Vec<(String, String)>,
        embeddings: &EmbeddingMatrix,
        lambda: f64,
    ) -> Result<Self> {
        if embeddings.rows() % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "pair file has an odd number of rows ({})",
                embeddings.rows()
            )));
        }
        let vecs = (0..embeddings.rows() / 2)
            .map(|k| {
                (
                    DVector::from_vec(embeddings.row_f64(2 * k)),
                    DVector::from_vec(embeddings.row_f64(2 * k + 1)),
                )
            })
            .collect();
        Self::new(labels, vecs, lambda)
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "calibration strength must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(CalibrationPairs {
            lambda,
            ..self.clone()
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn diffs(&self) -> &[DVector<f64>] {
        &self.diffs
    }

    pub fn labels(&self) -> &[(String, String)] {
        &self.labels
    }
}

pub fn orthogonal_projector(spec: &AttributeSpec) -> Result<ProjectionMatrix> {
    let a = spec.matrix();
    let d = a.nrows();
    let qr = a.clone().qr();
    let r = qr.r();
    let dependent: Vec<usize> = (0..r.ncols())
        .filter(|&k| r[(k, k)].abs() < RANK_TOLERANCE)
        .collect();
    if !dependent.is_empty() {
        return Err(Error::RankDeficient { columns: dependent });
    }
    let q = qr.q();
    let mut p = DMatrix::<f64>::identity(d, d);
    p -= &q * q.transpose();
    // exact symmetry
    let p = (&p + p.transpose()) * 0.5;
    Ok(ProjectionMatrix {
        matrix: p,
        kind: ProjectorKind::Raw,
        lambda: None,
        attribute_prompts: spec.prompts().to_vec(),
        calibration_pairs: Vec::new(),
    })
}

pub fn calibrated_projector(
    raw: &ProjectionMatrix,
    pairs: &CalibrationPairs,
) -> Result<ProjectionMatrix> {
    let d = raw.dim();
    if let Some(bad) = pairs.diffs().iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let lambda = pairs.lambda();
    let mut out = ProjectionMatrix {
        matrix: raw.matrix.clone(),
        kind: ProjectorKind::Calibrated,
        lambda: Some(lambda),
        attribute_prompts: raw.attribute_prompts.clone(),
        calibration_pairs: pairs.labels().to_vec(),
    };
    if lambda == 0.0 || pairs.diffs().is_empty() {
        return Ok(out);
    }

    let mut system = DMatrix::<f64>::identity(d, d);
    let mut trace = 0.0;
    for diff in pairs.diffs() {
        system.ger(lambda, diff, diff, 1.0);
        trace += diff.norm_squared();
    }
    // eigenvalues of the system lie in [1, 1 + lambda * trace]
    let cond_bound = 1.0 + lambda * trace;
    if cond_bound > CONDITION_LIMIT {
        let ridge = cond_bound / CONDITION_LIMIT;
        log::warn!(
            "calibration system condition bound {cond_bound:e} exceeds {CONDITION_LIMIT:e}; adding ridge {ridge:e}"
        );
        for i in 0..d {
            system[(i, i)] += ridge;
        }
    }
    let chol = system
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("calibration system is not positive definite".into()))?;
    // system is symmetric: P* = P0 S^-1 = (S^-1 P0^T)^T
    let solved = chol.solve(&raw.matrix.transpose());
    out.matrix = solved.transpose();
    Ok(out)
}

/// Maps every prompt row through `projector` and renormalizes it.
pub fn apply_projection(
    projector: &ProjectionMatrix,
    prompts: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    if prompts.kind() != EmbeddingKind::Prompt {
        return Err(Error::InvalidParameter(
            "projection applies to prompt embeddings only".into(),
        ));
    }
    let d = projector.dim();
    if prompts.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: prompts.dim(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..prompts.rows())
        .into_par_iter()
        .map(|i| {
            let v = DVector::from_vec(prompts.row_f64(i));
            let y = &projector.matrix * v;
            let norm = y.norm();
            if norm < MIN_PROJECTED_NORM {
                Err(Error::AnnihilatedRow { row: i, norm })
            } else {
                Ok((y / norm).as_slice().to_vec())
            }
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(prompts.clone());
    }
    EmbeddingMatrix::from_rows(&rows, prompts.source_id(), EmbeddingKind::Prompt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSidecar {
    pub kind: ProjectorKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub attribute_prompts: Vec<String>,
    #[serde(default)]
    pub calibration_pairs: Vec<(String, String)>,
}

impl ProjectionMatrix {
    pub fn sidecar(&self) -> ProjectorSidecar {
        ProjectorSidecar {
            kind: self.kind,
            dim: self.dim(),
            lambda: self.lambda,
            attribute_prompts: self.attribute_prompts.clone(),
            calibration_pairs: self.calibration_pairs.clone(),
        }
    }
}

/// Writes the projector as a `d x d` VLBE matrix plus `<name>.projector.json`.
pub fn save_projector(path: &Path, projector: &ProjectionMatrix) -> Result<()> {
    let d = projector.dim();
    // VLBE is row-major
    let data: Vec<f32> = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| projector.matrix[(i, j)] as f32)
        .collect();
    vlbe::write(path, d, d, &data)?;
    let side = sidecar_path(path, "projector");
    let text = serde_json::to_string_pretty(&projector.sidecar())?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_projector(path: &Path) -> Result<ProjectionMatrix> {
    let side = sidecar_path(path, "projector");
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: ProjectorSidecar = serde_json::from_str(&text)?;
    let raw = vlbe::read(path)?;
    if raw.rows != raw.dim || raw.dim != meta.dim {
        return Err(Error::Mismatch(format!(
            "projector file is {}x{}, sidecar declares dim {}",
            raw.rows, raw.dim, meta.dim
        )));
    }
    if let Some((i, _)) = raw.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i / raw.dim,
            col: i % raw.dim,
        });
    }
    let matrix = DMatrix::from_row_iterator(raw.rows, raw.dim, raw.data.iter().map(|&v| v as f64));
    Ok(ProjectionMatrix {
        matrix,
        kind: meta.kind,
        lambda: meta.lambda,
        attribute_prompts: meta.attribute_prompts,
        calibration_pairs: meta.calibration_pairs,
    })
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(d: usize, m: usize, seed: u64) -> AttributeSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, m, |_, _| rng.random_range(-1.0..1.0));
        AttributeSpec::from_columns((0..m).map(|j| format!("attr{j}")).collect(), a).unwrap()
    }

    fn unit(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    #[test]
    fn rank_one_projector() {
        let d = 4;
        let a = DMatrix::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let spec = AttributeSpec::from_columns(vec!["e1".into()], a).unwrap();
        let p = orthogonal_projector(&spec).unwrap();
        let mut expected = DMatrix::<f64>::identity(d, d);
        expected[(0, 0)] = 0.0;
        assert!(max_abs(&(&p.matrix - &expected)) < 1e-15);
        assert!(p.apply(&unit(d, 0)).norm() < 1e-15);
        let v = unit(d, 2);
        assert!((p.apply(&v) - &v).norm() < 1e-15);
    }

    #[test]
    fn random_projector_is_idempotent_and_annihilates() {
        let spec = random_spec(16, 3, 11);
        let p = orthogonal_projector(&spec).unwrap();
        let m = &p.matrix;
        assert!(max_abs(&(m * m - m)) < 1e-10);
        assert!(max_abs(&(m - m.transpose())) < 1e-15);
        assert!(max_abs(&(m * spec.matrix())) < 1e-10);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let d = 6;
        let mut a = DMatrix::zeros(d, 3);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        a[(0, 2)] = 2.0; // parallel to column 0
        let spec = AttributeSpec::from_columns(vec!["a".into(), "b".into(), "c".into()], a).unwrap();
        match orthogonal_projector(&spec) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec![2]),
            other => panic!("unexpected {other:?}"),
        }
        let wide = DMatrix::zeros(2, 2);
        assert!(AttributeSpec::from_columns(vec!["a".into(), "b".into()], wide).is_err());
    }

    #[test]
    fn zero_lambda_keeps_raw() {
        let spec = random_spec(12, 2, 3);
        let p0 = orthogonal_projector(&spec).unwrap();
        let pairs = CalibrationPairs::new(
            vec![("a".into(), "b".into())],
            vec![(unit(12, 0), unit(12, 1))],
            0.0,
        )
        .unwrap();
        let ps = calibrated_projector(&p0, &pairs).unwrap();
        assert_eq!(ps.matrix, p0.matrix);
        assert_eq!(ps.kind, ProjectorKind::Calibrated);
    }

    #[test]
    fn orthogonal_pair_shrinks_by_one_plus_lambda() {
        let d = 8;
        let a = DMatrix::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let spec = AttributeSpec::from_columns(vec!["e1".into()], a).unwrap();
        let p0 = orthogonal_projector(&spec).unwrap();
        // unit difference along e3, orthogonal to span(A)
        let e_i = unit(d, 3);
        let e_j = DVector::zeros(d);
        let diff = &e_i - &e_j;
        for lambda in [1.0, 10.0, 1e6] {
            let pairs = CalibrationPairs::new(
                vec![("i".into(), "j".into())],
                vec![(e_i.clone(), e_j.clone())],
                lambda,
            )
            .unwrap();
            let ps = calibrated_projector(&p0, &pairs).unwrap();
            let got = (&ps.matrix * &diff).norm();
            assert!((got - 1.0 / (1.0 + lambda)).abs() < 1e-12, "{lambda}: {got}");
        }
    }

    #[test]
    fn pair_inside_attribute_span_is_a_no_op() {
        let d = 8;
        let spec = AttributeSpec::from_columns(
            vec!["e1".into()],
            DMatrix::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        )
        .unwrap();
        let p0 = orthogonal_projector(&spec).unwrap();
        let pairs = CalibrationPairs::new(
            vec![("i".into(), "j".into())],
            vec![(unit(d, 0) * 0.5, unit(d, 0) * -0.5)],
            1e3,
        )
        .unwrap();
        let ps = calibrated_projector(&p0, &pairs).unwrap();
        assert!(max_abs(&(&ps.matrix - &p0.matrix)) < 1e-12);
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(CalibrationPairs::new(vec![], vec![], -1.0).is_err());
        assert!(CalibrationPairs::new(vec![], vec![], f64::NAN).is_err());
    }

    #[test]
    fn apply_cases() {
        let d = 4;
        let spec = AttributeSpec::from_columns(
            vec!["e1".into()],
            DMatrix::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        )
        .unwrap();
        let p0 = orthogonal_projector(&spec).unwrap();

        let ortho =
            EmbeddingMatrix::from_rows(&[[0.0, 0.6, 0.8, 0.0]], "p", EmbeddingKind::Prompt).unwrap();
        let out = apply_projection(&p0, &ortho).unwrap();
        assert_eq!(out.row(0), ortho.row(0));

        let inside =
            EmbeddingMatrix::from_rows(&[[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]], "p", EmbeddingKind::Prompt)
                .unwrap();
        assert!(matches!(
            apply_projection(&p0, &inside),
            Err(Error::AnnihilatedRow { row: 1, .. })
        ));

        // e = (a + b)/|a + b| with a in span(A), b orthogonal -> b/|b|
        let mixed =
            EmbeddingMatrix::from_rows(&[[0.7, 0.0, 0.3, 0.4]], "p", EmbeddingKind::Prompt).unwrap();
        let out = apply_projection(&p0, &mixed).unwrap();
        let expected = [0.0f32, 0.0, 0.6, 0.8];
        for (g, e) in out.row(0).iter().zip(expected) {
            assert!((g - e).abs() < 1e-6);
        }

        let image =
            EmbeddingMatrix::from_rows(&[[0.0, 1.0, 0.0, 0.0]], "i", EmbeddingKind::Image).unwrap();
        assert!(apply_projection(&p0, &image).is_err());
    }

    #[test]
    fn projector_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.vlbe");
        let spec = random_spec(10, 2, 5);
        let p0 = orthogonal_projector(&spec).unwrap();
        save_projector(&path, &p0).unwrap();
        assert!(dir.path().join("proj.projector.json").exists());
        let back = load_projector(&path).unwrap();
        assert_eq!(back.kind, ProjectorKind::Raw);
        assert_eq!(back.attribute_prompts, p0.attribute_prompts);
        assert!(max_abs(&(&back.matrix - &p0.matrix)) < 1e-6);
    }
}
