use fusionhead::numeric::{matmul, matmul_nt, matmul_tn, symmetric_eig, Matrix, RandomStream};
use proptest::prelude::*;

fn random_symmetric(n: usize, seed: u64) -> Matrix {
    let mut s = RandomStream::new(seed);
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = s.uniform_in(-1.0, 1.0);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn eigen_reconstructs_and_is_orthonormal(n in 1usize..=64, seed in any::<u64>()) {
        let s = random_symmetric(n, seed);
        let eig = symmetric_eig(&s).unwrap();
        let v = &eig.vectors;
        let mut vl = v.clone();
        for r in 0..n {
            for c in 0..n {
                vl.set(r, c, v.get(r, c) * eig.values[c]);
            }
        }
        let rebuilt = matmul_nt(&vl, v).unwrap();
        let scale = s.frobenius_norm().max(1.0);
        prop_assert!(max_abs_diff(&rebuilt, &s) <= 1e-9 * scale);
        let gram = matmul_tn(v, v).unwrap();
        prop_assert!(max_abs_diff(&gram, &Matrix::identity(n)) <= 1e-9);
        prop_assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        for c in 0..n {
            let col = v.column(c);
            let big = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            prop_assert!(big > 0.0);
        }
    }

    #[test]
    fn transposed_products_agree(r in 1usize..12, k in 1usize..12, c in 1usize..12, seed in any::<u64>()) {
        let mut s = RandomStream::new(seed);
        let a = Matrix::from_vec(r, k, (0..r * k).map(|_| s.next_gaussian()).collect()).unwrap();
        let b = Matrix::from_vec(k, c, (0..k * c).map(|_| s.next_gaussian()).collect()).unwrap();
        let ab = matmul(&a, &b).unwrap();
        prop_assert!(max_abs_diff(&ab, &matmul_tn(&a.transpose(), &b).unwrap()) < 1e-12);
        prop_assert!(max_abs_diff(&ab, &matmul_nt(&a, &b.transpose()).unwrap()) < 1e-12);
    }
}

#[test]
fn large_products_match_the_small_path() {
    // Big enough to take the parallel route; compare with a per-row product.
    let mut s = RandomStream::new(5);
    let a = Matrix::from_vec(64, 80, (0..64 * 80).map(|_| s.next_gaussian()).collect()).unwrap();
    let b = Matrix::from_vec(80, 48, (0..80 * 48).map(|_| s.next_gaussian()).collect()).unwrap();
    let full = matmul(&a, &b).unwrap();
    for r in 0..64 {
        let row = Matrix::from_vec(1, 80, a.row(r).to_vec()).unwrap();
        assert_eq!(matmul(&row, &b).unwrap().row(0), full.row(r));
    }
}

#[test]
fn streams_are_reproducible() {
    let draw = |seed| {
        let mut s = RandomStream::new(seed);
        (0..100).map(|_| s.next_gaussian()).collect::<Vec<_>>()
    };
    assert_eq!(draw(11), draw(11));
    assert_ne!(draw(11), draw(12));
}
