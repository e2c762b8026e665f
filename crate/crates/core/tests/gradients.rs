mod common;

use common::{kink_free_seeds, max_gradient_error, objective_variants, random_case};

#[test]
fn every_loss_matches_finite_differences() {
    for seed in kink_free_seeds(24) {
        let case = random_case(seed);
        for (name, s) in objective_variants(&case) {
            let err = max_gradient_error(&case, &s);
            assert!(
                err < 1e-4,
                "seed {seed} {name} op {:?} dp {}: relative error {err:e}",
                case.pair_op,
                case.dp_on
            );
        }
    }
}
