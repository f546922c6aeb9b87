use bgnn_core::bitcore::*;
use bgnn_core::graph::{knn_from_scores, knn_hamming, knn_score_matmul};
use bgnn_core::ops::{batch_norm, BatchNormParams};
use bgnn_core::training::{latent_weight_maintenance, ste_sign_backward};
use bgnn_core::DenseTensor;
use proptest::prelude::*;

fn pm1_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseTensor> {
    proptest::collection::vec(any::<bool>(), rows * cols).prop_map(move |b| {
        DenseTensor::matrix(rows, cols, b.into_iter().map(|p| if p { 1.0 } else { -1.0 }).collect()).unwrap()
    })
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..12, 1usize..12, 1usize..200)
}

fn gemm_case() -> impl Strategy<Value = (DenseTensor, DenseTensor, Vec<f64>)> {
    dims().prop_flat_map(|(m, n, d)| {
        (
            pm1_matrix(m, d),
            pm1_matrix(n, d),
            proptest::collection::vec((-64i32..64).prop_map(|v| v as f64 / 16.0), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_gemm_equals_dense_product((a, b, g) in gemm_case()) {
        let out = binary_gemm(&BitMatrix::pack(&a).unwrap(), &BitMatrix::pack(&b).unwrap(), &RescaleTensor::ChannelWise(g.clone())).unwrap();
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let s: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                prop_assert_eq!(out.at(i, j), s * g[j]);
            }
        }
    }

    #[test]
    fn hamming_matches_bit_count_and_dot_identity(x in (1usize..20, 1usize..300).prop_flat_map(|(n, d)| pm1_matrix(n, d))) {
        let bits = BitMatrix::pack(&x).unwrap();
        let h = pairwise_hamming(&bits);
        let (n, d) = (x.rows(), x.cols());
        for i in 0..n {
            for j in 0..n {
                let naive = (0..d).filter(|&k| x.at(i, k) != x.at(j, k)).count() as u32;
                prop_assert_eq!(h[i * n + j], naive);
                let dot = xnor_dot(bits.row(i), bits.row(j)).unwrap();
                prop_assert_eq!(2 * naive as i64, d as i64 - dot);
                let half: f64 = 0.5 * (0..d).map(|k| 1.0 - x.at(i, k) * x.at(j, k)).sum::<f64>();
                prop_assert_eq!(half, naive as f64);
                prop_assert_eq!(hamming_distance(bits.row(i), bits.row(j)).unwrap(), naive);
            }
        }
    }

    #[test]
    fn matmul_score_orders_like_hamming(x in (5usize..40, 1usize..100).prop_flat_map(|(n, d)| pm1_matrix(n, d)), k in 1usize..5) {
        let n = x.rows();
        let s = knn_score_matmul(&x, true).unwrap();
        let a = knn_from_scores(s.data(), n, k).unwrap();
        let b = knn_hamming(&BitMatrix::pack(&x).unwrap(), k).unwrap();
        prop_assert_eq!(a.edges(), b.edges());
    }

    #[test]
    fn pack_unpack_roundtrip(x in (1usize..8, 1usize..200).prop_flat_map(|(n, d)| pm1_matrix(n, d))) {
        prop_assert_eq!(BitMatrix::pack(&x).unwrap().unpack(), x);
    }

    #[test]
    fn ste_passes_gradient_only_inside_window(v in proptest::collection::vec(-3.0f64..3.0, 1..50)) {
        let g = DenseTensor::vector(vec![1.5; v.len()]);
        let out = ste_sign_backward(&g, &DenseTensor::vector(v.clone())).unwrap();
        for (o, x) in out.data().iter().zip(&v) {
            prop_assert_eq!(*o, if x.abs() <= 1.0 { 1.5 } else { 0.0 });
        }
    }

    #[test]
    fn maintained_latents_stay_in_unit_box(v in proptest::collection::vec(-4.0f64..4.0, 12)) {
        let w = DenseTensor::matrix(3, 4, v).unwrap();
        let m = latent_weight_maintenance(&w).unwrap();
        prop_assert!(m.data().iter().all(|x| x.abs() <= 1.0));
        let again = latent_weight_maintenance(&m).unwrap();
        prop_assert!(again.data().iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn batch_norm_train_output_is_standardized(v in proptest::collection::vec(-10.0f64..10.0, 8..40)) {
        let rows = v.len() / 2;
        let x = DenseTensor::matrix(rows, 2, v[..rows * 2].to_vec()).unwrap();
        let mut bn = BatchNormParams::new(2);
        let y = batch_norm(&x, &mut bn, true).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..rows).map(|r| y.at(r, c)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
