use candle_core::{Tensor, D};
use ndarray::Array2;
use plmcast::dataset::{denormalize, instance_normalize, window_count};
use plmcast::evaluation::cka::linear_cka;
use plmcast::evaluation::pearson::pearson_corr_map;
use plmcast::nn::{to_f64_vec, DEVICE};
use plmcast::plm_branch::global_correlation_map;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
}

fn rows_sum_to_one(t: &Tensor) -> bool {
    let n = t.dim(D::Minus1).unwrap();
    to_f64_vec(t)
        .unwrap()
        .chunks(n)
        .all(|r| r.iter().all(|v| *v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-5)
}

proptest! {
    #[test]
    fn global_map_is_row_stochastic(c in 1usize..5, d in 1usize..9, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rand::Rng::random_range(&mut rng, -30.0..30.0)).collect() };
        let e_f = Tensor::from_vec(draw(c * d), (c, d), &DEVICE).unwrap();
        let e = Tensor::from_vec(draw(c * d), (c, d), &DEVICE).unwrap();
        prop_assert!(rows_sum_to_one(&global_correlation_map(&e_f, &e).unwrap()));
    }

    #[test]
    fn blended_map_is_row_stochastic(a in matrix(3, 3), b in matrix(3, 3), eps in 0.0f64..=1.0) {
        let sm = |v: &[f64]| plmcast::nn::softmax_last(&Tensor::from_vec(v.to_vec(), (3, 3), &DEVICE).unwrap()).unwrap();
        let blended = ((sm(&a) * eps).unwrap() + (sm(&b) * (1.0 - eps)).unwrap()).unwrap();
        prop_assert!(rows_sum_to_one(&blended));
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(-1e3f64..1e3, 2 * 24)) {
        let (norm, stats) = instance_normalize(&values, 2);
        let back = denormalize(&norm, &stats);
        for (x, y) in values.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn window_count_formula(rows in 0usize..500, t in 1usize..100, f in 1usize..100, stride in 1usize..5) {
        let want = if rows < t + f { 0 } else { (rows - t - f) / stride + 1 };
        prop_assert_eq!(window_count(rows, t, f, stride), want);
    }

    #[test]
    fn pearson_map_is_symmetric_and_bounded(v in matrix(3, 40)) {
        let m = pearson_corr_map(&Array2::from_shape_vec((3, 40), v).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((m[(i, j)] - m[(j, i)]).abs() < 1e-12);
                prop_assert!(m[(i, j)].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn cka_is_symmetric(x in matrix(30, 4), y in matrix(30, 3)) {
        let x = Array2::from_shape_vec((30, 4), x).unwrap();
        let y = Array2::from_shape_vec((30, 3), y).unwrap();
        if let (Ok(a), Ok(b)) = (linear_cka(&x, &y), linear_cka(&y, &x)) {
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
        }
    }
}
