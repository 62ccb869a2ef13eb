//! Oracle checks shared by the integration tests and the acceptance
//! harness. Each returns its worst observed error.

use std::collections::BTreeMap;

use dcl_core::adapt::estimate_fisher;
use dcl_core::losses::{
    adversarial_loss, cdc_distance_loss, discriminator_contrastive_loss, ewc_penalty, generator_contrastive_loss,
    Side, DEFAULT_TAU,
};
use dcl_core::metrics::{intra_lpips, PairBudget};
use dcl_core::models::{DiscriminatorModel, FeatureNet, GeneratorModel, Head, ImageBatch, LatentBatch, Provenance};
use dcl_core::nn::{global_avg_pool, global_avg_pool_backward};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    brute_discriminator_cl, brute_generator_cl, brute_intra_lpips, fd_max_error, numeric_derivative, random_coords,
    random_matrix, relative_error, set_param, tiny_model,
};

pub const GRAD_TOL: f64 = 1e-4;
const COORDS: usize = 20;

/// Largest |loss − enumeration| over `instances` random draws with
/// N ≤ 8, M ≤ 10, C ≤ 16.
pub fn loss_oracle(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=10);
        let c = rng.random_range(1..=16);
        let tau = if rng.random_bool(0.5) { DEFAULT_TAU } else { rng.random_range(0.05..2.0) };
        let t = random_matrix(&mut rng, n, c);
        let s = random_matrix(&mut rng, n, c);
        let r = random_matrix(&mut rng, m, c);
        let g = generator_contrastive_loss(&t, &s, tau).unwrap().value;
        let d = discriminator_contrastive_loss(&t, &s, &r, tau).unwrap().value;
        worst = worst.max((g - brute_generator_cl(&t, &s, tau)).abs());
        worst = worst.max((d - brute_discriminator_cl(&t, &s, &r, tau)).abs());
    }
    worst
}

/// Every gradient check by name.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("adv", adversarial_gradients()),
        ("adv/d-params", adversarial_gradient_through_discriminator_parameters()),
        ("cl1", generator_contrastive_gradients()),
        ("cl1/g-params", generator_contrastive_gradient_through_generator_parameters()),
        ("cl2", discriminator_contrastive_gradients()),
        ("cdc", distance_consistency_gradients()),
        ("ewc", ewc_gradients()),
        ("ewc/fisher", fisher_matches_per_sample_finite_differences()),
    ]
}

fn mat(v: &[f64], rows: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, v.len() / rows), v.to_vec()).unwrap()
}

pub fn adversarial_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let real: Vec<f64> = (0..12).map(|_| rng.random_range(-4.0..4.0)).collect();
    let fake: Vec<f64> = (0..12).map(|_| rng.random_range(-4.0..4.0)).collect();
    let both: Vec<f64> = real.iter().chain(&fake).copied().collect();
    let mut worst = 0.0f64;
    for side in [Side::Discriminator, Side::Generator] {
        let l = adversarial_loss(Array1::from(real.clone()).view(), Array1::from(fake.clone()).view(), side).unwrap();
        let grad: Vec<f64> = l.grad_real.iter().chain(&l.grad_fake).copied().collect();
        let f = |x: &[f64]| {
            adversarial_loss(Array1::from(x[..12].to_vec()).view(), Array1::from(x[12..].to_vec()).view(), side)
                .unwrap()
                .value
        };
        let coords = random_coords(&mut rng, 24, COORDS);
        let err = fd_max_error(&f, &both, &grad, &coords);
        worst = worst.max(err);
    }
    worst
}

pub fn generator_contrastive_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c) = (6, 10);
    let t = random_matrix(&mut rng, n, c);
    let s = random_matrix(&mut rng, n, c);
    let l = generator_contrastive_loss(&t, &s, DEFAULT_TAU).unwrap();
    let x: Vec<f64> = t.iter().chain(s.iter()).copied().collect();
    let grad: Vec<f64> = l.grad_anchor.iter().chain(l.grad_positive.iter()).copied().collect();
    let f = |x: &[f64]| generator_contrastive_loss(&mat(&x[..n * c], n), &mat(&x[n * c..], n), DEFAULT_TAU).unwrap().value;
    let err = fd_max_error(&f, &x, &grad, &random_coords(&mut rng, x.len(), COORDS));
    err
}

pub fn discriminator_contrastive_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, m, c) = (4, 7, 9);
    let a = random_matrix(&mut rng, n, c);
    let p = random_matrix(&mut rng, n, c);
    let r = random_matrix(&mut rng, m, c);
    let l = discriminator_contrastive_loss(&a, &p, &r, DEFAULT_TAU).unwrap();
    let x: Vec<f64> = a.iter().chain(p.iter()).chain(r.iter()).copied().collect();
    let grad: Vec<f64> =
        l.grad_anchor.iter().chain(l.grad_positive.iter()).chain(l.grad_negative.iter()).copied().collect();
    let f = |x: &[f64]| {
        let k = n * c;
        discriminator_contrastive_loss(&mat(&x[..k], n), &mat(&x[k..2 * k], n), &mat(&x[2 * k..], m), DEFAULT_TAU)
            .unwrap()
            .value
    };
    let err = fd_max_error(&f, &x, &grad, &random_coords(&mut rng, x.len(), COORDS));
    err
}

pub fn distance_consistency_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c) = (5, 8);
    let t = random_matrix(&mut rng, n, c);
    let s = random_matrix(&mut rng, n, c);
    let (_, grad) = cdc_distance_loss(&t, &s).unwrap();
    let f = |x: &[f64]| cdc_distance_loss(&mat(x, n), &s).unwrap().0;
    let x = t.iter().copied().collect::<Vec<_>>();
    let err = fd_max_error(&f, &x, grad.as_slice().unwrap(), &random_coords(&mut rng, x.len(), COORDS));
    err
}

pub fn ewc_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cur: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let anchor: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fisher: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..2.0)).collect();
    let (_, grad) = ewc_penalty(&cur, &anchor, &fisher, 5e2).unwrap();
    let f = |x: &[f64]| ewc_penalty(x, &anchor, &fisher, 5e2).unwrap().0;
    let err = fd_max_error(&f, &cur, &grad, &random_coords(&mut rng, 50, COORDS));
    err
}

pub fn generator_contrastive_gradient_through_generator_parameters() -> f64 {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = GeneratorModel::new(&model, &mut rng).unwrap();
    let src = GeneratorModel::new(&model, &mut rng).unwrap().clone_frozen();
    let z = LatentBatch::sample(&mut rng, 3, model.z_dim);
    let tap = 1;
    let s_feat = global_avg_pool(src.forward(&z, &[tap]).unwrap().1.get(tap).unwrap());
    let loss = |g: &GeneratorModel| {
        let f = g.forward_raw(&z, &[tap], true).unwrap();
        let t = global_avg_pool(&f.taps[&tap]);
        (generator_contrastive_loss(&t, &s_feat, DEFAULT_TAU).unwrap(), f)
    };
    let (l, f) = loss(&g);
    let tap_grad = global_avg_pool_backward(&l.grad_anchor, f.taps[&tap].dim());
    let grads = g.backward(f.trace.as_ref().unwrap(), None, &BTreeMap::from([(tap, tap_grad)]));
    let grad: Vec<f64> = grads.flat().collect();
    let params = g.net.flat_params();
    // coordinates of the first two blocks, which feed the tapped layer
    let fed: usize = g.net.params().iter().take(4).map(|p| p.values.len()).sum();
    let f = |x: &[f64]| {
        let mut h = g.clone();
        for (k, (v, old)) in x.iter().zip(&params).enumerate() {
            if v != old {
                set_param(h.net_mut().unwrap(), k, *v);
            }
        }
        loss(&h).0.value
    };
    let err = fd_max_error(&f, &params, &grad, &random_coords(&mut rng, fed, COORDS));
    err
}

pub fn adversarial_gradient_through_discriminator_parameters() -> f64 {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = DiscriminatorModel::new(&model, &mut rng).unwrap();
    let real = ImageBatch::new(random_matrix(&mut rng, 2, 768).mapv(|v| (v * 0.4).tanh()).into_shape_with_order((2, 3, 16, 16)).unwrap(), Provenance::RealTarget).unwrap();
    let fake = ImageBatch::new(random_matrix(&mut rng, 2, 768).mapv(|v| (v * 0.4).tanh()).into_shape_with_order((2, 3, 16, 16)).unwrap(), Provenance::GeneratedTarget).unwrap();
    let value = |d: &DiscriminatorModel| {
        let r = d.forward(&real, &[], Head::Image).unwrap().0;
        let f = d.forward(&fake, &[], Head::Image).unwrap().0;
        adversarial_loss(Array1::from_iter(r.iter().copied()).view(), Array1::from_iter(f.iter().copied()).view(), Side::Discriminator)
            .unwrap()
    };
    let l = value(&d);
    let mut grad = vec![0.0; d.trunk.param_count() + d.image_head.param_count()];
    for (batch, g) in [(&real, &l.grad_real), (&fake, &l.grad_fake)] {
        let fw = d.forward_raw(batch, &[], Head::Image, true).unwrap();
        let gl = g.clone().into_shape_with_order((2, 1, 1, 1)).unwrap();
        let (_, gt, gh) = d.backward(&fw, Some(&gl), &BTreeMap::new(), true);
        for (acc, v) in grad.iter_mut().zip(gt.flat().chain(gh.flat())) {
            *acc += v;
        }
    }
    let nt = d.trunk.param_count();
    let x: Vec<f64> = d.trunk.flat_params().into_iter().chain(d.image_head.flat_params()).collect();
    let f = |x: &[f64]| {
        let mut h = d.clone();
        for k in 0..x.len() {
            if k < nt {
                set_param(&mut h.trunk, k, x[k]);
            } else {
                set_param(&mut h.image_head, k - nt, x[k]);
            }
        }
        value(&h).value
    };
    let err = fd_max_error(&f, &x, &grad, &random_coords(&mut rng, x.len(), COORDS));
    err
}

pub fn fisher_matches_per_sample_finite_differences() -> f64 {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = GeneratorModel::new(&model, &mut rng).unwrap();
    let d = DiscriminatorModel::new(&model, &mut rng).unwrap();
    let z = LatentBatch::sample(&mut rng, 3, model.z_dim);
    let fisher = estimate_fisher(&g, &d, &z).unwrap();
    let params = g.net.flat_params();
    let per_sample = |i: usize, x: &[f64]| {
        let mut h = g.clone();
        for (k, (v, old)) in x.iter().zip(&params).enumerate() {
            if v != old {
                set_param(h.net_mut().unwrap(), k, *v);
            }
        }
        let img = h.forward(&z.select(&[i]), &[]).unwrap().0;
        let logit = d.forward(&img, &[], Head::Image).unwrap().0;
        adversarial_loss(Array1::zeros(0).view(), Array1::from_iter(logit.iter().copied()).view(), Side::Generator)
            .unwrap()
            .value
    };
    let mut worst = 0.0f64;
    for &k in &random_coords(&mut rng, params.len(), COORDS) {
        let mut sq = 0.0;
        for i in 0..z.len() {
            let mut probe = |v: f64| {
                let mut y = params.clone();
                y[k] = v;
                per_sample(i, &y)
            };
            sq += numeric_derivative(&mut probe, params[k], 1e-4).powi(2);
        }
        let oracle = sq / z.len() as f64;
        if (fisher[k] - oracle).abs() >= 1e-12 {
            worst = worst.max(relative_error(fisher[k], oracle));
        }
    }
    worst
}

fn lpips_net() -> FeatureNet {
    FeatureNet::random(&tiny_model(), &mut ChaCha8Rng::seed_from_u64(21))
}

fn pattern(kind: usize, shift: f64) -> Array4<f64> {
    Array4::from_shape_fn((1, 3, 16, 16), |(_, c, y, x)| {
        let v = match kind {
            0 => ((x as f64) / 8.0 - 1.0) * 0.8,
            1 => if (x / 4 + y / 4) % 2 == 0 { 0.7 } else { -0.7 },
            2 => ((y as f64) / 8.0 - 1.0) * 0.6,
            _ => 0.3 * (c as f64 - 1.0),
        };
        (v + shift).clamp(-1.0, 1.0)
    })
}

fn batch(parts: &[Array4<f64>]) -> ImageBatch {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ImageBatch::new(ndarray::concatenate(ndarray::Axis(0), &views).unwrap(), Provenance::GeneratedTarget).unwrap()
}

/// (implementation, exhaustive oracle) on handcrafted six-image,
/// two-target cases.
pub fn intra_lpips_cases() -> Vec<(f64, f64)> {
    let net = lpips_net();
    let targets = batch(&[pattern(0, 0.0), pattern(1, 0.0)]);
    let cases = [
        vec![pattern(0, 0.1), pattern(0, -0.2), pattern(1, 0.05), pattern(1, 0.3), pattern(2, 0.0), pattern(3, 0.1)],
        vec![pattern(0, 0.0), pattern(0, 0.4), pattern(0, -0.4), pattern(2, 0.2), pattern(2, -0.1), pattern(0, 0.05)],
        vec![pattern(1, 0.0), pattern(1, 0.1), pattern(1, -0.1), pattern(1, 0.2), pattern(1, -0.2), pattern(3, 0.0)],
    ];
    cases
        .iter()
        .map(|gen| {
            let g = batch(gen);
            (intra_lpips(&g, &targets, PairBudget::All, &net, 0).unwrap().mean, brute_intra_lpips(&g, &targets, &net))
        })
        .collect()
}

/// Intra-cluster distance when every generated image replicates a target.
pub fn replicated_intra_lpips() -> f64 {
    let targets = batch(&[pattern(0, 0.0), pattern(1, 0.0)]);
    let g = batch(&[pattern(0, 0.0), pattern(1, 0.0), pattern(0, 0.0), pattern(1, 0.0), pattern(0, 0.0), pattern(1, 0.0)]);
    intra_lpips(&g, &targets, PairBudget::All, &lpips_net(), 0).unwrap().mean
}
