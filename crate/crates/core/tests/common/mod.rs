//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

pub mod suites;

use dcl_core::adapt::{pretrain, PretrainConfig, SourceModels};
use dcl_core::data::{synthesize_toy_domains, Dataset};
use dcl_core::metrics::ClassifierTraining;
use dcl_core::models::{perceptual_distance, FeatureNet, ImageBatch, ModelConfig};
use dcl_core::nn::Network;
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn tiny_model() -> ModelConfig {
    ModelConfig { resolution: 16, channels: 3, z_dim: 8, g_width: 16, d_width: 8 }
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

fn cos(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

/// Direct evaluation of the generator-feature loss: the mean over `i` of
/// −log(e(t_i, s_i) / Σ_j e(t_i, s_j)), e(u, v) = exp(cos(u, v) / τ).
pub fn brute_generator_cl(t: &Array2<f64>, s: &Array2<f64>, tau: f64) -> f64 {
    let n = t.nrows();
    let e = |i: usize, j: usize| (cos(t.row(i), s.row(j)) / tau).exp();
    (0..n).map(|i| -(e(i, i) / (0..n).map(|j| e(i, j)).sum::<f64>()).ln()).sum::<f64>() / n as f64
}

/// Direct evaluation of the discriminator-feature loss: anchor f_i, positive
/// p_i, negatives every row of `real`.
pub fn brute_discriminator_cl(f: &Array2<f64>, p: &Array2<f64>, real: &Array2<f64>, tau: f64) -> f64 {
    let n = f.nrows();
    (0..n)
        .map(|i| {
            let pos = (cos(f.row(i), p.row(i)) / tau).exp();
            let neg: f64 = real.rows().into_iter().map(|r| (cos(f.row(i), r) / tau).exp()).sum();
            -(pos / (pos + neg)).ln()
        })
        .sum::<f64>()
        / n as f64
}

/// Central difference refined by one Richardson step.
pub fn numeric_derivative(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let d1 = d(f, h);
    let d2 = d(f, h / 2.0);
    (4.0 * d2 - d1) / 3.0
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `grad` and finite differences of `f` at
/// the given flat coordinates of `x`.
pub fn fd_max_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize]) -> f64 {
    coords
        .iter()
        .map(|&k| {
            let mut probe = |v: f64| {
                let mut y = x.to_vec();
                y[k] = v;
                f(&y)
            };
            relative_error(grad[k], numeric_derivative(&mut probe, x[k], 1e-4))
        })
        .fold(0.0, f64::max)
}

pub fn random_coords<R: Rng>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

/// Overwrites flat parameter `k` of `net`.
pub fn set_param(net: &mut Network, k: usize, v: f64) {
    let mut k = k;
    for (slot, _) in net.params_mut() {
        if k < slot.len() {
            slot[k] = v;
            return;
        }
        k -= slot.len();
    }
    panic!("parameter index out of range");
}

/// Exhaustive intra-cluster distance from pairwise perceptual distances:
/// nearest target per generated image (first minimum), all within-cluster
/// pairs, uniform mean over clusters with at least two members.
pub fn brute_intra_lpips(generated: &ImageBatch, targets: &ImageBatch, net: &FeatureNet) -> f64 {
    let d = |a: &ImageBatch, i: usize, b: &ImageBatch, j: usize| {
        perceptual_distance(net, &a.select(&[i]), &b.select(&[j])).unwrap()[0]
    };
    let mut clusters = vec![Vec::new(); targets.len()];
    for i in 0..generated.len() {
        let dists: Vec<f64> = (0..targets.len()).map(|c| d(generated, i, targets, c)).collect();
        let mut best = 0;
        for c in 1..dists.len() {
            if dists[c] < dists[best] {
                best = c;
            }
        }
        clusters[best].push(i);
    }
    let means: Vec<f64> = clusters
        .iter()
        .filter(|m| m.len() >= 2)
        .map(|m| {
            let mut s = 0.0;
            let mut n = 0;
            for a in 0..m.len() {
                for b in a + 1..m.len() {
                    s += d(generated, m[a], generated, m[b]);
                    n += 1;
                }
            }
            s / n as f64
        })
        .collect();
    if means.is_empty() {
        0.0
    } else {
        means.iter().sum::<f64>() / means.len() as f64
    }
}

/// Matrix square root by the Denman–Beavers iteration.
pub fn denman_beavers_sqrt(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = Array2::<f64>::eye(n);
    for _ in 0..100 {
        let yi = invert(&y);
        let zi = invert(&z);
        let ny = (&y + &zi) * 0.5;
        let nz = (&z + &yi) * 0.5;
        let delta = (&ny - &y).mapv(f64::abs).sum();
        y = ny;
        z = nz;
        if delta < 1e-14 {
            break;
        }
    }
    y
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn invert(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = ndarray::concatenate(Axis(1), &[a.view(), Array2::<f64>::eye(n).view()]).unwrap();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
        for k in 0..2 * n {
            m.swap([c, k], [p, k]);
        }
        let piv = m[[c, c]];
        m.row_mut(c).mapv_inplace(|v| v / piv);
        for r in 0..n {
            if r != c {
                let f = m[[r, c]];
                let row_c = m.row(c).to_owned();
                m.row_mut(r).zip_mut_with(&row_c, |v, w| *v -= f * w);
            }
        }
    }
    m.slice(ndarray::s![.., n..]).to_owned()
}

/// Fréchet distance of two Gaussians with the trace term computed as
/// Tr sqrt(Σa Σb) via Denman–Beavers on the (non-symmetric) product.
pub fn oracle_frechet(x: &Array2<f64>, y: &Array2<f64>, eps: f64) -> f64 {
    let stats = |v: &Array2<f64>| {
        let mu = v.mean_axis(Axis(0)).unwrap();
        let c = v - &mu;
        let mut cov = c.t().dot(&c) / (v.nrows() as f64 - 1.0);
        cov.diag_mut().mapv_inplace(|d| d + eps);
        (mu, cov)
    };
    let (ma, ca) = stats(x);
    let (mb, cb) = stats(y);
    let diff = &ma - &mb;
    let cross = denman_beavers_sqrt(&ca.dot(&cb));
    diff.dot(&diff) + ca.diag().sum() + cb.diag().sum() - 2.0 * cross.diag().sum()
}

/// Small source models: procedural domains, a short pretraining run and
/// lightly trained feature net and classifier.
pub fn tiny_source(iterations: usize) -> (SourceModels, Dataset, Dataset) {
    let model = tiny_model();
    let (s, t) = synthesize_toy_domains(3, (1000, 120), model.resolution, model.channels);
    let s = Dataset::load(&s).unwrap();
    let t = Dataset::load(&t).unwrap();
    let cfg = PretrainConfig {
        iterations,
        batch_size: 8,
        eval_samples: 16,
        classifier: ClassifierTraining { epochs: 2, batch_size: 16, lr: 1e-3, seed: 1 },
        feature_net: ClassifierTraining { epochs: 1, batch_size: 16, lr: 1e-3, seed: 2 },
        ..PretrainConfig::default()
    };
    let (src, _) = pretrain(&cfg, &model, &s, &t).unwrap();
    (src, s, t)
}
