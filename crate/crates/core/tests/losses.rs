mod common;

use common::random_matrix;
use dcl_core::losses::{
    discriminator_contrastive_loss, generator_contrastive_loss, generator_contrastive_loss_with, NegativeSetup,
    DEFAULT_TAU,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn contrastive_losses_match_enumeration_on_random_instances() {
    let err = common::suites::loss_oracle(100, 11);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn single_sample_generator_loss_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = random_matrix(&mut rng, 1, 5);
    let s = random_matrix(&mut rng, 1, 5);
    assert_eq!(generator_contrastive_loss(&t, &s, DEFAULT_TAU).unwrap().value, 0.0);
}

#[test]
fn identical_features_give_log_n() {
    let t = Array2::from_elem((4, 3), 1.0);
    let v = generator_contrastive_loss(&t, &t, DEFAULT_TAU).unwrap().value;
    assert!((v - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn target_side_negatives_use_target_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_matrix(&mut rng, 4, 6);
    let s = random_matrix(&mut rng, 4, 6);
    let tau = 0.3;
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| a.dot(&b) / (a.dot(&a) * b.dot(&b)).sqrt();
    let expected: f64 = (0..4)
        .map(|i| {
            let pos = (cos(t.row(i), s.row(i)) / tau).exp();
            let neg: f64 = (0..4).filter(|&j| j != i).map(|j| (cos(t.row(i), t.row(j)) / tau).exp()).sum();
            -(pos / (pos + neg)).ln()
        })
        .sum::<f64>()
        / 4.0;
    let got = generator_contrastive_loss_with(&t, &s, tau, NegativeSetup::TargetSide).unwrap().value;
    assert!((got - expected).abs() < 1e-12);
}

fn features(n: usize, c: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-3.0f64..3.0, n * c)
        .prop_filter("rows must be non-zero", move |v| v.chunks(c).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
        .prop_map(move |v| Array2::from_shape_vec((n, c), v).unwrap())
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>, Vec<usize>, Vec<f64>)> {
    (1usize..=6, 1usize..=6, 1usize..=8).prop_flat_map(|(n, m, c)| {
        (
            features(n, c),
            features(n, c),
            features(m, c),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            proptest::collection::vec(0.1f64..10.0, n),
        )
    })
}

fn permute(a: &Array2<f64>, p: &[usize]) -> Array2<f64> {
    a.select(ndarray::Axis(0), p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_permutation_equivariant((t, s, r, p, _) in instance()) {
        let g = generator_contrastive_loss(&t, &s, DEFAULT_TAU).unwrap().value;
        let gp = generator_contrastive_loss(&permute(&t, &p), &permute(&s, &p), DEFAULT_TAU).unwrap().value;
        prop_assert!((g - gp).abs() < 1e-9);
        let d = discriminator_contrastive_loss(&t, &s, &r, DEFAULT_TAU).unwrap().value;
        let rp: Vec<usize> = (0..r.nrows()).rev().collect();
        let dp = discriminator_contrastive_loss(&permute(&t, &p), &permute(&s, &p), &permute(&r, &rp), DEFAULT_TAU).unwrap().value;
        prop_assert!((d - dp).abs() < 1e-9);
    }

    #[test]
    fn losses_ignore_feature_scale((t, s, r, _, k) in instance()) {
        let scale = |a: &Array2<f64>| {
            let mut b = a.clone();
            for (mut row, f) in b.rows_mut().into_iter().zip(k.iter().cycle()) {
                row *= *f;
            }
            b
        };
        let g = generator_contrastive_loss(&t, &s, DEFAULT_TAU).unwrap().value;
        prop_assert!((g - generator_contrastive_loss(&scale(&t), &scale(&s), DEFAULT_TAU).unwrap().value).abs() < 1e-9);
        let d = discriminator_contrastive_loss(&t, &s, &r, DEFAULT_TAU).unwrap().value;
        let ds = discriminator_contrastive_loss(&scale(&t), &s, &scale(&r), DEFAULT_TAU).unwrap().value;
        prop_assert!((d - ds).abs() < 1e-9);
    }

    #[test]
    fn generator_loss_bounds((t, s, _, _, _) in instance()) {
        let n = t.nrows() as f64;
        let v = generator_contrastive_loss(&t, &s, DEFAULT_TAU).unwrap().value;
        prop_assert!(v >= 0.0);
        prop_assert!(n.ln() - v <= n.ln());
        // each positive is at worst exp(-2/τ) times the strongest negative
        prop_assert!(v <= (1.0 + (n - 1.0) * (2.0 / DEFAULT_TAU).exp()).ln() + 1e-9);
    }
}
