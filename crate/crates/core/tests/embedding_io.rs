use proptest::prelude::*;

use vlaudit::embedding_store::{
    load_dataset, load_embeddings, manifest_path, save_embeddings, vlbe, Attribute, Dataset,
    EmbeddingKind, EmbeddingMatrix, Gender, Record, RecordManifest,
};
use vlaudit::Error;

fn manifest(n: usize) -> RecordManifest {
    RecordManifest {
        dataset: Some(Dataset::FairFace),
        source_id: "clip-b32".into(),
        kind: EmbeddingKind::Image,
        temperature: Some(0.01),
        records: (0..n)
            .map(|i| {
                let mut r = Record::new(format!("ff_{i}"));
                r.gender = Some(if i % 2 == 0 { Gender::Male } else { Gender::Female });
                r.race = Some(["White", "Black", "Indian"][i % 3].into());
                r
            })
            .collect(),
    }
}

#[test]
fn dataset_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ff.vlbe");
    vlbe::write(&path, 6, 3, &[3.0, 4.0, 0.0].repeat(6)).unwrap();
    manifest(6).save(&manifest_path(&path)).unwrap();
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.matrix().row(0), &[0.6, 0.8, 0.0]);
    assert_eq!(ds.matrix().source_id(), "clip-b32");
    let race = ds.group_index(Attribute::Race).unwrap();
    // canonical FairFace order
    assert_eq!(race.groups(), &["White", "Black", "Indian"]);
    assert_eq!(ds.index_of("ff_4"), Some(4));
}

#[test]
fn manifest_row_count_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ff.vlbe");
    vlbe::write(&path, 5, 2, &[1.0; 10]).unwrap();
    manifest(6).save(&manifest_path(&path)).unwrap();
    assert!(matches!(
        load_dataset(&path),
        Err(Error::CountMismatch { matrix: 5, manifest: 6 })
    ));
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.vlbe");
    vlbe::write(&path, 2, 4, &[1.0; 8]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_embeddings(&path), Err(Error::PayloadMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_matrices_round_trip_exactly(
        rows in 1usize..6,
        dim in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..dim).map(|_| rng.random_range(0.1..1.0)).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(&data, "p", EmbeddingKind::Image).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vlbe");
        save_embeddings(&path, &m).unwrap();
        let back = load_embeddings(&path).unwrap();
        prop_assert_eq!(back.as_slice(), m.as_slice());
        for r in back.iter_rows() {
            let n: f64 = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn vlbe_bytes_round_trip(rows in 0usize..5, dim in 0usize..5, fill in -10.0f32..10.0) {
        let data = vec![fill; rows * dim];
        let bytes = vlbe::encode(rows, dim, &data).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * rows * dim);
        let raw = vlbe::decode(&bytes).unwrap();
        prop_assert_eq!((raw.rows, raw.dim), (rows, dim));
        prop_assert_eq!(raw.data, data);
    }
}
