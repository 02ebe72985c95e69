use fusionhead::features::{
    apply_affine, build_feature_table, default_branches, fuse, fused_features, l2_normalize,
    AffineDraw, AugmentParams, DatasetManifest, FeatureVector, Image, ManifestEntry, SourceTag,
};
use fusionhead::io::write_ppm;
use fusionhead::numeric::{matmul_tn, Matrix, RandomStream};
use fusionhead::pca::{pca_fit, pca_inverse, pca_transform};
use proptest::prelude::*;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut s = RandomStream::new(seed);
    // Anisotropic columns so the spectrum is spread out.
    let data = (0..rows * cols)
        .map(|i| s.next_gaussian() * (1.0 + (i % cols) as f64))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l2_is_unit_and_scale_invariant(
        v in prop::collection::vec(-100.0f64..100.0, 1..40),
        scale in 0.01f64..1000.0,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let a = l2_normalize(&FeatureVector(v.clone())).unwrap();
        let b = l2_normalize(&FeatureVector(v.iter().map(|x| x * scale).collect())).unwrap();
        prop_assert!((a.norm() - 1.0).abs() < 1e-12);
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_preserves_both_parts(
        a in prop::collection::vec(-1.0f64..1.0, 0..10),
        b in prop::collection::vec(-1.0f64..1.0, 0..10),
    ) {
        let f = fuse(&FeatureVector(a.clone()), &FeatureVector(b.clone()));
        prop_assert_eq!(f.dim(), a.len() + b.len());
        prop_assert_eq!(&f.values()[..a.len()], &a[..]);
        prop_assert_eq!(&f.values()[a.len()..], &b[..]);
    }

    #[test]
    fn pca_basis_and_spectrum(rows in 3usize..40, cols in 1usize..12, seed in any::<u64>(), t in 0.5f64..1.0) {
        let x = random_matrix(rows, cols, seed);
        let m = pca_fit(&x, t).unwrap();
        let gram = matmul_tn(&m.basis, &m.basis).unwrap();
        for i in 0..m.k {
            for j in 0..m.k {
                let expect = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram.get(i, j) - expect).abs() < 1e-9);
            }
        }
        let ratios = m.explained_ratios();
        prop_assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(ratios.windows(2).all(|w| w[0] >= w[1] - 1e-15));
        prop_assert!(m.retained_ratio() >= t - 1e-9);
        if m.k > 1 {
            let without_last: f64 = ratios[..m.k - 1].iter().sum();
            prop_assert!(without_last < t + 1e-12);
        }
    }

    #[test]
    fn full_basis_is_an_isometry(rows in 3usize..30, cols in 1usize..8, seed in any::<u64>()) {
        let x = random_matrix(rows, cols, seed);
        let m = pca_fit(&x, 1.0).unwrap();
        prop_assume!(m.k == cols);
        let z = pca_transform(&m, &x).unwrap();
        let back = pca_inverse(&m, &z).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
        }
        let dist = |m: &Matrix, i: usize, j: usize| -> f64 {
            m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        prop_assert!((dist(&z, 0, rows - 1) - dist(&x, 0, rows - 1)).abs() < 1e-8 * (1.0 + dist(&x, 0, rows - 1)));
    }
}

#[test]
fn identity_affine_leaves_images_unchanged() {
    let mut img = Image::filled(9, 7, [10, 20, 30]);
    img.put_pixel(3, 2, [200, 100, 50]);
    assert_eq!(apply_affine(&img, &AffineDraw::IDENTITY), img);
}

#[test]
fn augmentation_draws_stay_in_range() {
    let p = AugmentParams::default();
    let mut s = RandomStream::new(3);
    for _ in 0..1000 {
        let d = p.sample(&mut s);
        assert!(d.rotation_deg.abs() <= 30.0);
        assert!(d.shift_x.abs() <= 0.1 && d.shift_y.abs() <= 0.1);
        assert!((0.8..=1.2).contains(&d.zoom));
    }
}

#[test]
fn feature_table_rows_labels_and_determinism() {
    let dir = std::env::temp_dir().join(format!("fh-table-{}", std::process::id()));
    let mut entries = Vec::new();
    for (i, (label, rgb)) in [("b", [200, 10, 10]), ("a", [10, 200, 10]), ("b", [180, 30, 0])]
        .into_iter()
        .enumerate()
    {
        let mut img = Image::filled(16, 16, rgb);
        img.put_pixel(i, i, [255, 255, 255]);
        let path = dir.join(format!("{i}.ppm"));
        write_ppm(&path, &img).unwrap();
        entries.push(ManifestEntry {
            id: format!("s{i}"),
            path,
            label: label.into(),
            source: SourceTag::Public,
        });
    }
    let manifest = DatasetManifest::from_entries(entries).unwrap();
    let (a, b) = default_branches();
    let params = AugmentParams::default();
    let plain = build_feature_table(&manifest, a.as_ref(), b.as_ref(), 0, &params, &mut RandomStream::new(1)).unwrap();
    assert_eq!(plain.len(), 3);
    assert_eq!(plain.class_names, vec!["a", "b"]);
    assert_eq!(plain.labels, vec![1, 0, 1]);
    let doubled = build_feature_table(&manifest, a.as_ref(), b.as_ref(), 1, &params, &mut RandomStream::new(1)).unwrap();
    assert_eq!(doubled.len(), 6);
    assert_eq!(doubled.labels, vec![1, 1, 0, 0, 1, 1]);
    assert_eq!(doubled.ids[1], "s0#aug1");
    let again = build_feature_table(&manifest, a.as_ref(), b.as_ref(), 1, &params, &mut RandomStream::new(1)).unwrap();
    assert_eq!(doubled, again);
    for row in doubled.features.iter_rows() {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    let img = fusionhead::io::read_ppm(&dir.join("0.ppm")).unwrap();
    assert_eq!(fused_features(&img, a.as_ref(), b.as_ref()).unwrap().0, plain.features.row(0));
    std::fs::remove_dir_all(dir).ok();
}
