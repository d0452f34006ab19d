use std::fs;

use factorial_flow::data::Encoding;
use factorial_flow::synthetic::{FactorShape, SyntheticSpec};
use factorial_flow::{load_dataset, save_dataset, Error};
use ndarray::{Array2, Axis};

#[test]
fn cell_covariance_matches_linear_model() {
    let spec = SyntheticSpec::random(
        8,
        &[FactorShape::new("a", 2, 3), FactorShape::new("b", 2, 2)],
        2.0,
        (0.1, 0.5),
        5,
    )
    .unwrap();
    let data = spec.generate(10_000, 0).unwrap();
    let expected = spec.cell_covariance();
    // First cell: every factor at class 0.
    let rows: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels(0)[i] == 0 && data.labels(1)[i] == 0)
        .collect();
    assert_eq!(rows.len(), 10_000);
    let x = data.features().select(Axis(0), &rows);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centred = &x - &mean;
    let cov: Array2<f64> = centred.t().dot(&centred) / (rows.len() - 1) as f64;
    let diff = (&cov - &expected).mapv(|v| v * v).sum().sqrt();
    let norm = expected.mapv(|v| v * v).sum().sqrt();
    assert!(diff / norm < 0.1, "relative Frobenius error {}", diff / norm);
}

#[test]
fn thousand_sample_round_trip_is_bit_identical() {
    let spec = SyntheticSpec::random(
        16,
        &[FactorShape::new("phone", 5, 4), FactorShape::new("speaker", 4, 4)],
        2.0,
        (0.1, 0.5),
        9,
    )
    .unwrap();
    let data = spec.generate(50, 0).unwrap();
    assert_eq!(data.len(), 1000);
    let dir = tempfile::tempdir().unwrap();
    for enc in [Encoding::Text, Encoding::Binary] {
        let path = dir.path().join(format!("{enc:?}.txt"));
        data.save(&path, enc).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, data);
        let bits = |d: &factorial_flow::LabeledDataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&data));
    }
}

#[test]
fn corrupted_label_names_the_row() {
    let spec = SyntheticSpec::desk_scale(1).unwrap();
    let data = spec.generate(1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    save_dataset(&data, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[2] = "9";
    lines[3] = fields.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_dataset(&path).unwrap_err() {
        Error::FileLabelOutOfRange { row, factor, label, .. } => {
            assert_eq!(row, 4);
            assert_eq!(factor, "speaker");
            assert_eq!(label, 9);
        }
        e => panic!("unexpected {e}"),
    }
}
