mod common;

use common::suites::{self, GRAD_TOL};

macro_rules! gradient_tests {
    ($($name:ident),* $(,)?) => {$(
        #[test]
        fn $name() {
            let err = suites::$name();
            assert!(err < GRAD_TOL, "{err}");
        }
    )*};
}

gradient_tests!(
    adversarial_gradients,
    generator_contrastive_gradients,
    discriminator_contrastive_gradients,
    distance_consistency_gradients,
    ewc_gradients,
    generator_contrastive_gradient_through_generator_parameters,
    adversarial_gradient_through_discriminator_parameters,
    fisher_matches_per_sample_finite_differences,
);
