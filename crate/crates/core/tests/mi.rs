use dcl_core::mi::{
    capacity_sweep, duplicate_floor, evaluate_bound, exact_mi, verify_bound, BoundCheckConfig, Critic,
    ToyJointDistribution, CAPACITY_LEVELS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick() -> BoundCheckConfig {
    BoundCheckConfig { trials: 100, train_steps: 600, ..BoundCheckConfig::default() }
}

#[test]
fn independent_joint_bound_stays_near_zero() {
    let j = ToyJointDistribution::independent(16);
    for n in [2, 4, 8] {
        let (r, _) = verify_bound(&j, n, &quick()).unwrap();
        assert!(r.holds, "{}", r.to_text());
        assert!(r.bound_value <= r.epsilon);
    }
}

#[test]
fn untrained_critic_bound_holds() {
    for j in [ToyJointDistribution::deterministic(16), ToyJointDistribution::gaussian(0.9, 2).unwrap()] {
        let critic = Critic::new(&j, 16, 8, 3);
        let r = evaluate_bound(&j, 4, &critic, 200, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.holds, "{}", r.to_text());
    }
}

#[test]
fn bound_never_exceeds_log_n() {
    let j = ToyJointDistribution::deterministic(4);
    for n in [2, 3, 8] {
        let (r, _) = verify_bound(&j, n, &quick()).unwrap();
        assert!(r.bound_value <= (n as f64).ln() + 1e-12);
        assert!(r.mean_loss >= 0.0);
    }
}

#[test]
fn trained_critic_approaches_the_duplicate_floor() {
    let j = ToyJointDistribution::deterministic(16);
    let (r, _) = verify_bound(&j, 4, &quick()).unwrap();
    let floor = duplicate_floor(16, 4);
    assert!(r.mean_loss >= floor - 3.0 * r.std_error);
    assert!(r.mean_loss < floor + 0.1, "{}", r.to_text());
}

#[test]
fn more_critic_capacity_never_lowers_the_best_bound() {
    let j = ToyJointDistribution::deterministic(16);
    let reports = capacity_sweep(&j, 8, &CAPACITY_LEVELS, 2, &quick()).unwrap();
    for w in reports.windows(2) {
        assert!(w[1].bound_value >= w[0].bound_value, "{} then {}", w[0].bound_value, w[1].bound_value);
    }
}

#[test]
fn report_formats() {
    let j = ToyJointDistribution::gaussian(0.5, 1).unwrap();
    let (r, _) = verify_bound(&j, 2, &BoundCheckConfig { trials: 10, train_steps: 5, ..Default::default() }).unwrap();
    assert!((r.exact_mi - exact_mi(&j).unwrap()).abs() < 1e-15);
    assert!(r.to_text().contains("holds: "));
    assert_eq!(r.csv_row().split(',').count(), dcl_core::mi::BoundReport::CSV_HEADER.split(',').count());
    assert_eq!(verify_bound(&j, 1, &Default::default()).unwrap_err().class(), "config");
}
