use std::path::PathBuf;

use fusionhead::features::{DatasetManifest, FeatureTable, Image, ManifestEntry, SourceTag};
use fusionhead::io::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_feature_csv, read_manifest,
    read_ppm, save_checkpoint, to_json_checked, write_feature_csv, write_manifest, write_ppm,
    ModelBundle, CHECKPOINT_VERSION,
};
use fusionhead::mlp::{MlpModel, MlpSpec};
use fusionhead::numeric::{Matrix, RandomStream};
use fusionhead::pca::pca_fit;
use fusionhead::Error;
use proptest::prelude::*;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fh-io-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut s = RandomStream::new(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| s.next_gaussian()).collect()).unwrap()
}

fn bundle(seed: u64) -> ModelBundle {
    let pca = pca_fit(&gaussian(30, 6, seed), 0.9).unwrap();
    let spec = MlpSpec::with_hidden(pca.k, &[(5, 0.2), (4, 0.0)], 3);
    let mlp = MlpModel::init(&spec, &mut RandomStream::new(seed ^ 7)).unwrap();
    let labels = vec!["x".into(), "y".into(), "z".into()];
    ModelBundle::new(labels, vec![("a".into(), 4), ("b".into(), 2)], pca, mlp, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn feature_csv_round_trips_exactly(rows in 1usize..12, cols in 1usize..6, seed in any::<u64>()) {
        let mut s = RandomStream::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| s.next_gaussian() * 10f64.powi((s.next_uniform() * 20.0) as i32 - 10)).collect();
        let table = FeatureTable::new(
            (0..rows).map(|i| format!("id{i}")).collect(),
            (0..rows).map(|i| i % 2).collect(),
            vec!["neg".into(), "pos".into()],
            Matrix::from_vec(rows, cols, data).unwrap(),
        ).unwrap();
        let path = scratch("csv-prop").join(format!("{seed}.csv"));
        write_feature_csv(&path, &table).unwrap();
        let back = read_feature_csv(&path, Some(&table.class_names)).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(back, table);
    }

    #[test]
    fn checkpoint_predictions_are_bitwise_identical(seed in any::<u64>()) {
        let b = bundle(seed);
        let back = decode_checkpoint(&encode_checkpoint(&b)).unwrap();
        let x = gaussian(7, 6, seed ^ 3);
        prop_assert_eq!(back.predict_fused(&x).unwrap(), b.predict_fused(&x).unwrap());
        prop_assert_eq!(back, b);
    }
}

#[test]
fn ragged_csv_row_names_its_line() {
    let path = scratch("ragged").join("f.csv");
    std::fs::write(&path, "id,label,f0,f1\na,x,1.0,2.0\nb,y,3.0\n").unwrap();
    match read_feature_csv(&path, None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_numeric_and_empty_csv_are_rejected() {
    let dir = scratch("bad");
    std::fs::write(dir.join("n.csv"), "id,label,f0\na,x,one\n").unwrap();
    assert!(matches!(read_feature_csv(&dir.join("n.csv"), None), Err(Error::Parse { line: 2, .. })));
    std::fs::write(dir.join("e.csv"), "").unwrap();
    assert!(read_feature_csv(&dir.join("e.csv"), None).is_err());
    assert!(read_feature_csv(&dir.join("missing.csv"), None).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let path = scratch("ckpt").join("m.fhc");
    let b = bundle(5);
    save_checkpoint(&path, &b).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), b);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&bundle(9));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4..6].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedVersion { .. })));
    for cut in [3, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::UnexpectedEnd(_))), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());
}

#[test]
fn broken_layer_chain_is_rejected() {
    let mut b = bundle(2);
    b.labels.push("w".into());
    assert!(matches!(b.validate(), Err(Error::DimChain(_))));
    assert!(matches!(decode_checkpoint(&encode_checkpoint(&b)), Err(Error::DimChain(_))));
    let mut b = bundle(2);
    b.extractors[0].1 += 1;
    assert!(matches!(b.validate(), Err(Error::DimChain(_))));
}

#[test]
fn manifest_round_trip_keeps_paths_and_labels() {
    let dir = scratch("manifest");
    let mut entries = Vec::new();
    for (i, label) in ["cat", "dog", "cat"].into_iter().enumerate() {
        let path = dir.join("img").join(format!("{i}.ppm"));
        write_ppm(&path, &Image::filled(4, 3, [i as u8, 2, 3])).unwrap();
        let source = if i == 1 { SourceTag::Webcam } else { SourceTag::Public };
        entries.push(ManifestEntry { id: format!("e{i}"), path, label: label.into(), source });
    }
    let m = DatasetManifest::from_entries(entries).unwrap();
    write_manifest(&dir.join("manifest.csv"), &m).unwrap();
    let back = read_manifest(&dir.join("manifest.csv")).unwrap();
    assert_eq!(back.labels(), m.labels());
    for (a, b) in back.entries().iter().zip(m.entries()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.source, b.source);
        assert_eq!(read_ppm(&a.path).unwrap(), read_ppm(&b.path).unwrap());
    }
}

#[test]
fn ppm_round_trip() {
    let mut img = Image::filled(5, 2, [1, 2, 3]);
    img.put_pixel(4, 1, [255, 0, 128]);
    let path = scratch("ppm").join("p.ppm");
    write_ppm(&path, &img).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), img);
}

#[test]
fn json_refuses_non_finite_numbers() {
    assert!(to_json_checked(&serde_json::json!({"a": [1.0, 2.5]})).is_ok());
    assert!(to_json_checked(&vec![1.0, f64::NAN]).is_err());
    assert!(to_json_checked(&vec![f64::INFINITY]).is_err());
}
