mod common;

use std::fs;

use pouf_core::data::*;
use pouf_core::eval::argmax_rows;
use pouf_core::model::{predict_raw, ModelParams};
use pouf_core::{Error, Tensor};
use proptest::prelude::*;

fn f32_tensor(rows: usize, cols: usize, values: Vec<f32>) -> Tensor {
    Tensor::new(vec![rows, cols], values.into_iter().map(f64::from).collect()).unwrap()
}

fn matrix_strategy() -> impl Strategy<Value = Tensor> {
    (0usize..6, 1usize..6)
        .prop_flat_map(|(r, c)| prop::collection::vec(-1e6f32..1e6f32, r * c).prop_map(move |v| f32_tensor(r, c, v)))
}

proptest! {
    #[test]
    fn embeddings_round_trip_bitwise(m in matrix_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pouf");
        write_embeddings(&path, &m).unwrap();
        let back = read_embeddings(&path).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.data().iter().zip(m.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        let bytes = fs::read(&path).unwrap();
        write_embeddings(&path, &back).unwrap();
        prop_assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn labels_round_trip(labels in prop::collection::vec(-1i64..1000, 0..50)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        write_labels(&path, &labels).unwrap();
        prop_assert_eq!(read_labels(&path).unwrap(), labels);
    }
}

#[test]
fn header_layout() {
    let m =
        Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0], vec![0.5, -0.5, 0.25, 0.0]]).unwrap();
    let bytes = encode_embeddings(&m).unwrap();
    assert_eq!(&bytes[..4], b"POUF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1);
    assert_eq!(bytes.len(), 28 + 3 * 4 * 4);
    assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.0);
    assert_eq!(decode_embeddings(&bytes, "x".as_ref()).unwrap(), m);
}

fn format_offset(err: Error) -> u64 {
    match err {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn corrupted_headers() {
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let good = encode_embeddings(&m).unwrap();
    let p = std::path::Path::new("m.pouf");

    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XOUF");
    assert_eq!(format_offset(decode_embeddings(&bad, p).unwrap_err()), 0);

    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(format_offset(decode_embeddings(&bad, p).unwrap_err()), 4);

    let mut bad = good.clone();
    bad[24] = 7;
    assert_eq!(format_offset(decode_embeddings(&bad, p).unwrap_err()), 24);

    let mut bad = good.clone();
    bad[8] = 3;
    match decode_embeddings(&bad, p).unwrap_err() {
        Error::Truncated { expected, actual, .. } => {
            assert_eq!(expected, 3 * 2 * 4);
            assert_eq!(actual, 2 * 2 * 4);
        }
        other => panic!("expected truncation, got {other}"),
    }
    let msg = decode_embeddings(&good[..good.len() - 1], p).unwrap_err().to_string();
    assert!(msg.contains("expected 16 bytes") && msg.contains("found 15"), "{msg}");

    assert_eq!(format_offset(decode_embeddings(&good[..10], p).unwrap_err()), 10);
    let mut long = good.clone();
    long.push(0);
    assert_eq!(format_offset(decode_embeddings(&long, p).unwrap_err()), 28 + 16);
}

#[test]
fn label_parsing() {
    let p = std::path::Path::new("labels.txt");
    assert_eq!(parse_labels("0\n1\n-1\n", p).unwrap(), vec![0, 1, -1]);
    match parse_labels("0\nx\n2\n", p).unwrap_err() {
        Error::Line { line, .. } => assert_eq!(line, 2),
        other => panic!("expected a line error, got {other}"),
    }
}

#[test]
fn proportions_are_respected() {
    let spec = SyntheticSpec {
        classes: 3,
        samples: 10_000,
        class_proportions: Some(vec![0.6, 0.3, 0.1]),
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    for (c, p) in [0.6, 0.3, 0.1].into_iter().enumerate() {
        let frac = data.labels.iter().filter(|&&y| y == c).count() as f64 / 10_000.0;
        assert!((frac - p).abs() <= 0.02, "class {c}: {frac}");
    }
}

#[test]
fn unshifted_noiseless_benchmark_is_solved_zero_shot() {
    let spec = SyntheticSpec {
        cluster_spread: 0.0,
        rotation_angle_scale: 0.0,
        bias_scale: 0.0,
        proto_noise: 0.0,
        samples: 300,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let params = ModelParams::init(spec.dim, spec.classes, 0.01).unwrap();
    let pred = argmax_rows(&predict_raw(&data.features, &data.prototypes, &params).unwrap());
    assert_eq!(pred, data.labels);
}

#[test]
fn generation_is_deterministic_and_validated() {
    let spec = SyntheticSpec { samples: 200, seed: 9, ..Default::default() };
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    let other = generate_synthetic(&SyntheticSpec { seed: 10, ..spec.clone() }).unwrap();
    assert_ne!(generate_synthetic(&spec).unwrap().features, other.features);

    assert!(generate_synthetic(&SyntheticSpec { class_proportions: Some(vec![0.1; 9]), ..spec.clone() }).is_err());
    assert!(generate_synthetic(&SyntheticSpec { cluster_spread: -1.0, ..spec.clone() }).is_err());
    assert!(generate_synthetic(&SyntheticSpec { classes: 300, ..spec.clone() }).is_err());
    // Many mutually dissimilar directions cannot fit in two dimensions.
    let crowded = SyntheticSpec { classes: 20, dim: 2, samples: 100, ..Default::default() };
    assert!(generate_synthetic(&crowded).unwrap_err().to_string().contains("could not place"));
}

#[test]
fn class_means_are_spread_out() {
    let spec = SyntheticSpec { cluster_spread: 0.0, samples: 500, ..Default::default() };
    let data = generate_synthetic(&spec).unwrap();
    let mut means: Vec<Option<Vec<f64>>> = vec![None; spec.classes];
    for (i, &y) in data.labels.iter().enumerate() {
        means[y].get_or_insert_with(|| data.features.row(i).to_vec());
    }
    let means: Vec<Vec<f64>> = means.into_iter().flatten().collect();
    for a in 0..means.len() {
        let na: f64 = means[a].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((na - 1.0).abs() < 1e-12);
        for b in a + 1..means.len() {
            let cos: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| x * y).sum();
            assert!(cos < 0.5);
        }
    }
}

#[test]
fn dataset_directory_validation() {
    let dir = tempfile::tempdir().unwrap();
    let data: Dataset = generate_synthetic(&SyntheticSpec { samples: 50, ..Default::default() }).unwrap().into();
    write_dataset(dir.path(), &data).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.class_names, data.class_names);

    write_labels(dir.path().join(LABELS_FILE), &[0, 1]).unwrap();
    assert!(read_dataset(dir.path()).is_err());
    let mut labels = data.labels.clone().unwrap();
    labels[0] = 10;
    write_labels(dir.path().join(LABELS_FILE), &labels).unwrap();
    assert!(read_dataset(dir.path()).is_err());
    labels[0] = -1;
    write_labels(dir.path().join(LABELS_FILE), &labels).unwrap();
    let partial = read_dataset(dir.path()).unwrap();
    assert!(partial.class_labels().is_none());

    fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
    assert!(read_dataset(dir.path()).unwrap().labels.is_none());

    write_embeddings(dir.path().join(PROTOTYPES_FILE), &Tensor::zeros(&[10, 3])).unwrap();
    assert!(read_dataset(dir.path()).is_err());
}
