mod common;

use common::structure;
use proptest::prelude::*;
use tad_core::mamr::shrink_address;

#[test]
fn shapes_for_zero_one_and_five_objects() {
    for n in [0, 1, 5] {
        structure::check_shapes(n);
    }
}

#[test]
fn reordering_objects_reorders_every_output() {
    structure::check_permutation_equivariance();
}

#[test]
fn attention_rows_are_distributions() {
    structure::check_rows_sum_to_one();
}

#[test]
fn shrinkage_support_shrinks_with_lambda() {
    structure::check_sparsity_monotone(100);
}

#[test]
fn zero_threshold_read_is_softmax_attention() {
    structure::check_lambda_zero_is_softmax();
}

proptest! {
    #[test]
    fn shrunk_rows_are_distributions(
        row in prop::collection::vec(0.0f64..1.0, 1..50),
        lambda in 0.0f64..0.5,
    ) {
        let s: f64 = row.iter().sum();
        prop_assume!(s > 0.0);
        let row: Vec<f64> = row.iter().map(|v| v / s).collect();
        let (w, fallback) = shrink_address(&row, lambda, 1e-12);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(fallback, row.iter().all(|&a| a <= lambda));
        for (a, b) in row.iter().zip(&w) {
            if !fallback && *a <= lambda {
                prop_assert_eq!(*b, 0.0);
            }
        }
    }
}
