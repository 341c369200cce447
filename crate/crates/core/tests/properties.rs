mod common;

use proptest::prelude::*;

proptest! {
    #[test]
    fn fisher_round_trip(r in common::correlation()) {
        common::fisher_round_trip(r)?;
    }

    #[test]
    fn shrinkage_is_convex_and_monotone(case in common::shrinkage_case()) {
        common::shrinkage_convex_monotone(case)?;
    }

    #[test]
    fn lambda_grows_with_noise(case in common::lambda_case()) {
        common::lambda_monotone(case)?;
    }

    #[test]
    fn gamma_averages_to_one(case in common::differences_case()) {
        common::gamma_mean_is_one(case)?;
    }

    #[test]
    fn signal_variance_is_nonnegative(case in common::differences_case()) {
        common::signal_nonnegative(case)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noiseless_blocks_are_recovered(case in common::block_case()) {
        common::noiseless_blocks_recovered(case)?;
    }
}

#[test]
fn partition_counts_are_bell_numbers() {
    let bell = [1, 2, 5, 15, 52, 203, 877, 4140];
    for (n, &b) in bell.iter().enumerate() {
        assert_eq!(common::set_partitions(n + 1).len(), b);
    }
}

#[test]
fn dice_matches_pair_counting_on_all_small_partitions() {
    let checked = common::dice_matches_brute_force(6, 40).unwrap();
    assert!(checked > 40_000);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    common::thread_count_determinism(11).unwrap();
}
