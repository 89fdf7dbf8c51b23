//! Property-based invariant suites, 1000 cases each.

mod props;

const CASES: u32 = 1000;

macro_rules! property_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = props::$name(CASES) {
                    panic!("{e}");
                }
            }
        )*
    };
}

property_tests!(
    policy_normalization,
    log_prob_grad_matches_finite_differences,
    tabular_grad_sums_to_zero,
    snapshot_immutability,
    sampling_determinism,
    vocab_well_formed,
    verify_is_pure,
    reward_monotone_in_passed_set,
    feedback_sound_and_complete,
    grammar_proof_reward_range,
    render_feedback_order_free_and_bounded,
    fap_layout_and_parse_back,
    step_batch_partition_and_budget,
    advantages_zero_sum,
    reweight_analytics,
    clip_selector_brute_force,
    reweight_scoping,
    ecc_on_policy_nullity,
    loss_report_shape,
    rates_bounded_and_final_below_macro,
    macro_below_micro_for_equal_counts,
    tier_rates_aggregate,
    budget_and_update_parity,
    constant_rewards_leave_policy_fixed,
);

#[test]
fn every_registered_property_has_a_test() {
    assert_eq!(props::ALL.len(), 24);
}
