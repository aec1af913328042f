use proptest::prelude::*;

use adapterfuse::numerics::rng::{self, derive_seed};
use adapterfuse::numerics::{attention_normalize, row_softmax, Matrix, ParamStore, Tape};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..7, 1usize..7)
}

fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.row(i)[k] * b.row(k)[j]).sum())
}

fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(m in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c, 1e3))) {
        let s = row_softmax(&m);
        prop_assert!(s.is_finite());
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            for (a, b) in s.row(i).iter().zip(naive_softmax(m.row(i))) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(m in matrix(3, 5, 10.0), shift in -50.0f64..50.0) {
        let a = row_softmax(&m);
        let b = row_softmax(&m.map(|x| x + shift));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_normalize_scales_by_root_width(m in matrix(4, 4, 3.0), d in 1usize..40) {
        let got = attention_normalize(&m, d);
        let want = row_softmax(&m.scale(1.0 / (d as f64).sqrt()));
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matmul_matches_naive_and_associates(
        (a, b, c) in (dims(), 1usize..7).prop_flat_map(|((n, k, m), p)| (matrix(n, k, 1.0), matrix(k, m, 1.0), matrix(m, p, 1.0)))
    ) {
        let ab = a.matmul(&b).unwrap();
        prop_assert!(ab.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let left = ab.matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
        prop_assert!(a.matmul_t(&b.transpose()).unwrap().max_abs_diff(&ab) < 1e-12);
        prop_assert!(a.transpose().t_matmul(&b).unwrap().max_abs_diff(&ab) < 1e-12);
    }

    #[test]
    fn f32_tracks_f64(a in matrix(3, 4, 1.0), b in matrix(4, 2, 1.0)) {
        let wide = a.matmul(&b).unwrap();
        let narrow = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap().cast::<f64>();
        prop_assert!(wide.max_abs_diff(&narrow) < 1e-5);
    }

    #[test]
    fn sum_of_product_gradient(a in matrix(3, 4, 1.0), b in matrix(4, 2, 1.0)) {
        // d/dA sum(AB) = 1 Bᵀ, d/dB sum(AB) = Aᵀ 1
        let mut store = ParamStore::new();
        let ia = store.add("a", a.clone()).unwrap();
        let ib = store.add("b", b.clone()).unwrap();
        let mut tape = Tape::new(&store);
        let (na, nb) = (tape.param(ia), tape.param(ib));
        let p = tape.matmul(na, nb).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        let ga = Matrix::from_fn(3, 4, |_, k| b.row(k).iter().sum());
        let gb = Matrix::from_fn(4, 2, |k, _| (0..3).map(|i| a.row(i)[k]).sum());
        prop_assert!(grads.get(ia).unwrap().max_abs_diff(&ga) < 1e-12);
        prop_assert!(grads.get(ib).unwrap().max_abs_diff(&gb) < 1e-12);
    }

    #[test]
    fn seeds_are_label_separated(seed in any::<u64>()) {
        prop_assert_eq!(derive_seed(seed, "model"), derive_seed(seed, "model"));
        prop_assert_ne!(derive_seed(seed, "model"), derive_seed(seed, "train"));
    }
}

#[test]
fn seed_derivation_is_pinned() {
    // FNV-1a("") is the offset basis, so the empty label reduces to SplitMix64.
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    assert_eq!(derive_seed(5, ""), mix(5 ^ mix(0xcbf2_9ce4_8422_2325)));
    let a: Matrix<f64> = rng::uniform(&mut rng::rng(1, "x"), 4, 4, 1.0);
    let b: Matrix<f64> = rng::uniform(&mut rng::rng(1, "x"), 4, 4, 1.0);
    assert!(a.bit_eq(&b));
    assert!(a.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn extreme_logits_stay_finite() {
    let m: Matrix<f64> = Matrix::from_rows(&[&[1e308, -1e308, 0.0], &[-745.0, -745.0, -745.0]]);
    let s = row_softmax(&m);
    assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
    assert!((s.row(1)[0] - 1.0 / 3.0).abs() < 1e-15);
}
