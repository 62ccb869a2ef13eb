//! Quality and diversity analysis: the realisticness probe, intra-cluster
//! and standard perceptual distances, and a Fréchet feature distance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, input_err, Result};
use crate::models::{
    sigmoid, ClassifierModel, FeatureNet, GeneratorModel, ImageBatch, LatentBatch, ModelConfig, PerceptualEmbedding,
};
use crate::nn::{global_avg_pool, Adam, Block, Layer, Network};

/// Covariance regularization added to both Fréchet covariances.
pub const FRECHET_EPS: f64 = 1e-6;

/// Default per-cluster pair budget for intra-cluster distances.
pub const DEFAULT_PAIR_BUDGET: usize = 100;

/// How many pairs to average over. Serialized as a count, 0 meaning all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "usize", into = "usize")]
pub enum PairBudget {
    All,
    /// All pairs when there are at most this many, otherwise a seeded sample
    /// of this many distinct pairs.
    AtMost(usize),
}

impl Default for PairBudget {
    fn default() -> Self {
        PairBudget::AtMost(DEFAULT_PAIR_BUDGET)
    }
}

impl From<usize> for PairBudget {
    fn from(n: usize) -> Self {
        if n == 0 {
            PairBudget::All
        } else {
            PairBudget::AtMost(n)
        }
    }
}

impl From<PairBudget> for usize {
    fn from(b: PairBudget) -> usize {
        match b {
            PairBudget::All => 0,
            PairBudget::AtMost(n) => n,
        }
    }
}

fn pair_from_index(k: usize, n: usize) -> (usize, usize) {
    // row-major enumeration of the strict upper triangle
    let mut i = 0;
    let mut rem = k;
    while rem >= n - 1 - i {
        rem -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + rem)
}

fn select_pairs(n: usize, budget: PairBudget, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    let picks: Vec<usize> = match budget {
        PairBudget::AtMost(b) if total > b => {
            let mut v = index::sample(rng, total, b).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };
    picks.into_iter().map(|k| pair_from_index(k, n)).collect()
}

/// Nearest-centre assignment of generated images to target samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// Target index per generated image.
    pub cluster_of: Vec<usize>,
    /// Generated-image indices per target.
    pub members: Vec<Vec<usize>>,
    /// Mean pairwise distance per cluster (0 for clusters with fewer than
    /// two members).
    pub mean_distance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntraLpips {
    pub mean: f64,
    pub per_cluster: Array1<f64>,
    pub assignment: ClusterAssignment,
}

/// Assigns each generated image to its perceptually closest target (ties go
/// to the lowest target index), then averages pairwise distances within
/// each cluster and uniformly over clusters with at least two members.
pub fn intra_lpips(
    generated: &ImageBatch,
    targets: &ImageBatch,
    budget: PairBudget,
    feat_net: &FeatureNet,
    seed: u64,
) -> Result<IntraLpips> {
    if generated.is_empty() {
        return Err(input_err("intra-cluster distance needs at least one generated image"));
    }
    if targets.is_empty() {
        return Err(input_err("intra-cluster distance needs at least one target image"));
    }
    if generated.image_dim() != targets.image_dim() {
        return Err(input_err("generated and target images differ in shape"));
    }
    let eg = feat_net.embed(generated)?;
    let et = feat_net.embed(targets)?;
    intra_from_embeddings(&eg, &et, budget, seed)
}

fn intra_from_embeddings(
    eg: &PerceptualEmbedding,
    et: &PerceptualEmbedding,
    budget: PairBudget,
    seed: u64,
) -> Result<IntraLpips> {
    let m = et.len();
    let mut members = vec![Vec::new(); m];
    let mut cluster_of = Vec::with_capacity(eg.len());
    for i in 0..eg.len() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..m {
            let d = eg.distance_to(i, et, c);
            if d < best.0 {
                best = (d, c);
            }
        }
        cluster_of.push(best.1);
        members[best.1].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean_distance = vec![0.0; m];
    let mut total = 0.0;
    let mut counted = 0usize;
    for (c, mem) in members.iter().enumerate() {
        if mem.len() < 2 {
            continue;
        }
        let pairs = select_pairs(mem.len(), budget, &mut rng);
        let s: f64 = pairs.iter().map(|&(a, b)| eg.distance(mem[a], mem[b])).sum();
        mean_distance[c] = s / pairs.len() as f64;
        total += mean_distance[c];
        counted += 1;
    }
    let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok(IntraLpips {
        mean,
        per_cluster: Array1::from(mean_distance.clone()),
        assignment: ClusterAssignment { cluster_of, members, mean_distance },
    })
}

fn content_key(img: ndarray::ArrayView3<f64>) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in img.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Mean perceptual distance over `pair_count` seeded random pairs of
/// distinct images. Images are put in a content-defined order first, so the
/// result does not depend on input order.
pub fn standard_lpips(generated: &ImageBatch, pair_count: usize, feat_net: &FeatureNet, seed: u64) -> Result<f64> {
    let n = generated.len();
    if n < 2 {
        return Err(input_err("standard perceptual distance needs at least two images"));
    }
    if pair_count == 0 {
        return Err(config_err("pair count must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let keys: Vec<[u8; 32]> = generated.data().outer_iter().map(content_key).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let emb = feat_net.embed(&generated.select(&order))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = select_pairs(n, PairBudget::AtMost(pair_count), &mut rng);
    Ok(pairs.iter().map(|&(a, b)| emb.distance(a, b)).sum::<f64>() / pairs.len() as f64)
}

/// Optimization settings for the auxiliary classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self { epochs: 6, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub per_class_train: usize,
    pub per_class_held_out: usize,
    pub held_out_accuracy: f64,
}

/// Balanced source (label 0) / target (label 1) classifier.
///
/// The larger class is down-sampled to the size of the smaller one, then a
/// `held_out_fraction` of each class is set aside and only used for the
/// reported accuracy.
pub fn train_binary_classifier(
    source: &ImageBatch,
    target: &ImageBatch,
    held_out_fraction: f64,
    config: &ModelConfig,
    training: &ClassifierTraining,
) -> Result<(ClassifierModel, ClassifierReport)> {
    if source.is_empty() || target.is_empty() {
        return Err(input_err("both classes need at least one image"));
    }
    if !(0.0..1.0).contains(&held_out_fraction) {
        return Err(config_err(format!("held-out fraction {held_out_fraction} must be in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let per_class = source.len().min(target.len());
    let n_hold = ((per_class as f64) * held_out_fraction).round() as usize;
    let n_train = per_class - n_hold;
    if n_train == 0 {
        return Err(input_err("no training images left after the held-out split"));
    }
    let src_idx = index::sample(&mut rng, source.len(), per_class).into_vec();
    let tgt_idx = index::sample(&mut rng, target.len(), per_class).into_vec();
    let train_x = ImageBatch::concat(&[&source.select(&src_idx[..n_train]), &target.select(&tgt_idx[..n_train])])?;
    let train_y: Vec<f64> = (0..2 * n_train).map(|i| (i >= n_train) as u8 as f64).collect();

    let mut clf = ClassifierModel::new(config, &mut rng)?;
    clf.check_input(&train_x)?;
    fit(&mut clf.net, train_x.data(), training, &mut rng, |logits, rows| {
        // mean binary cross-entropy on logits
        let n = rows.len() as f64;
        let mut loss = 0.0;
        let mut grad = Array4::zeros(logits.dim());
        for (k, &r) in rows.iter().enumerate() {
            let l = logits[[k, 0, 0, 0]];
            let y = train_y[r];
            loss += softplus(l) - y * l;
            grad[[k, 0, 0, 0]] = (sigmoid(l) - y) / n;
        }
        (loss / n, grad)
    })?;
    clf.trained = true;

    let accuracy = if n_hold > 0 {
        let ps = clf.predict(&source.select(&src_idx[n_train..]), false)?;
        let pt = clf.predict(&target.select(&tgt_idx[n_train..]), false)?;
        let correct = ps.iter().filter(|&&p| p < 0.5).count() + pt.iter().filter(|&&p| p >= 0.5).count();
        correct as f64 / (2 * n_hold) as f64
    } else {
        f64::NAN
    };
    log::info!("classifier held-out accuracy {accuracy:.4} ({n_train} train / {n_hold} held out per class)");
    Ok((clf, ClassifierReport { per_class_train: n_train, per_class_held_out: n_hold, held_out_accuracy: accuracy }))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Minibatch Adam loop over all rows of `x`. `loss_grad` maps network
/// outputs of a minibatch (and the dataset rows it came from) to the loss
/// and the output gradient.
fn fit<F>(net: &mut Network, x: &Array4<f64>, t: &ClassifierTraining, rng: &mut ChaCha8Rng, mut loss_grad: F) -> Result<f64>
where
    F: FnMut(&Array4<f64>, &[usize]) -> (f64, Array4<f64>),
{
    let n = x.dim().0;
    let mut opt = Adam::new(t.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = f64::NAN;
    for epoch in 0..t.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for rows in order.chunks(t.batch_size.max(1)) {
            let xb = x.select(Axis(0), rows);
            let f = net.forward(&xb, &[], true)?;
            let (loss, g) = loss_grad(&f.output, rows);
            let (_, grads) = net.backward(f.trace.as_ref().expect("trace"), Some(&g), &BTreeMap::new(), true);
            opt.apply(net, &grads);
            sum += loss;
            batches += 1;
        }
        last = sum / batches as f64;
        log::debug!("epoch {epoch}: loss {last:.4}");
    }
    Ok(last)
}

/// Trains the perceptual trunk as a factor-label classifier (softmax
/// cross-entropy over `classes` labels) and returns the frozen trunk.
pub fn train_feature_net(
    images: &ImageBatch,
    labels: &[usize],
    classes: usize,
    config: &ModelConfig,
    training: &ClassifierTraining,
) -> Result<FeatureNet> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(input_err("feature-net training needs one label per image"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(input_err(format!("label {bad} out of range for {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let mut net = FeatureNet::trunk(config, &mut rng);
    let side = config.resolution / 4;
    let width = net.blocks.last().and_then(|b| b.layers.iter().rev().find_map(conv_width)).unwrap_or(1);
    net.blocks.push(Block::new("f.head", vec![Layer::dense(&mut rng, width * side * side, classes)]));
    fit(&mut net, images.data(), training, &mut rng, |out, rows| {
        let n = rows.len() as f64;
        let mut loss = 0.0;
        let mut grad = Array4::zeros(out.dim());
        for (k, &r) in rows.iter().enumerate() {
            let logits: Vec<f64> = (0..classes).map(|c| out[[k, c, 0, 0]]).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            loss += z.ln() + mx - logits[labels[r]];
            for c in 0..classes {
                let p = (logits[c] - mx).exp() / z;
                grad[[k, c, 0, 0]] = (p - (c == labels[r]) as u8 as f64) / n;
            }
        }
        (loss / n, grad)
    })?;
    net.blocks.pop();
    for b in &mut net.blocks {
        b.trainable = false;
    }
    Ok(FeatureNet::from_trunk(net, config.clone()))
}

fn conv_width(l: &Layer) -> Option<usize> {
    match l {
        Layer::Conv(c) => Some(c.weight.nrows()),
        _ => None,
    }
}

/// Mean target-class probability over images generated from the pinned
/// proxy batch.
pub fn realisticness_probe(c: &ClassifierModel, g_t: &GeneratorModel, fixed_z: &LatentBatch) -> Result<f64> {
    let imgs = g_t.generate(fixed_z, 128)?;
    let p = c.predict(&imgs, false)?;
    Ok(p.mean().unwrap_or(0.0))
}

/// Fréchet distance between two Gaussians given by their moments:
/// ‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½), with `FRECHET_EPS`
/// added to both diagonals.
pub fn frechet_from_moments(mu_a: &Array1<f64>, cov_a: &Array2<f64>, mu_b: &Array1<f64>, cov_b: &Array2<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.dim() != (d, d) || cov_b.dim() != (d, d) {
        return Err(input_err("moment dimensions disagree"));
    }
    let to_na = |m: &Array2<f64>| {
        let mut out = DMatrix::from_fn(d, d, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
        for i in 0..d {
            out[(i, i)] += FRECHET_EPS;
        }
        out
    };
    let a = to_na(cov_a);
    let b = to_na(cov_b);
    let sqrt_a = psd_sqrt(&a);
    let inner = &sqrt_a * &b * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let diff = DVector::from_iterator(d, mu_a.iter().zip(mu_b.iter()).map(|(x, y)| x - y));
    let value = diff.norm_squared() + a.trace() + b.trace() - 2.0 * tr_cross;
    Ok(value.max(0.0))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * s * eig.eigenvectors.transpose()
}

/// Sample mean and (unbiased) covariance of the rows of `x`.
pub fn moments(x: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(input_err("moments need at least two samples"));
    }
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mu;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    Ok((mu, cov))
}

/// Embedding used for the Fréchet distance: the global-average-pooled
/// activation of every feature-net layer, concatenated.
pub fn frechet_embedding(feat_net: &FeatureNet, x: &ImageBatch) -> Result<Array2<f64>> {
    let taps: Vec<usize> = (0..feat_net.trunk.block_count()).collect();
    let mut parts = Vec::new();
    let n = x.len();
    let mut start = 0;
    while start < n {
        let end = (start + 128).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let f = feat_net.trunk.forward(x.select(&rows).data(), &taps, false)?;
        let pooled: Vec<Array2<f64>> = f.taps.values().map(global_avg_pool).collect();
        let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        parts.push(ndarray::concatenate(Axis(1), &views).expect("pooled concat"));
        start = end;
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("embedding concat"))
}

pub fn frechet_feature_distance(a: &ImageBatch, b: &ImageBatch, feat_net: &FeatureNet) -> Result<f64> {
    let (ma, ca) = moments(&frechet_embedding(feat_net, a)?)?;
    let (mb, cb) = moments(&frechet_embedding(feat_net, b)?)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

/// Per-metric summary of one generator, as written to evaluation reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub intra_lpips: f64,
    pub standard_lpips: f64,
    pub frechet: f64,
    pub p_t: f64,
    pub generated: usize,
    pub per_cluster: Vec<f64>,
}

impl EvalReport {
    /// `key: value` text.
    pub fn to_text(&self) -> String {
        format!(
            "intra_lpips: {:.6}\nstandard_lpips: {:.6}\nfrechet: {:.6}\np_t: {:.6}\ngenerated: {}\n",
            self.intra_lpips, self.standard_lpips, self.frechet, self.p_t, self.generated
        )
    }

    pub fn per_cluster_csv(&self) -> String {
        let mut s = String::from("cluster,intra_lpips\n");
        for (i, v) in self.per_cluster.iter().enumerate() {
            s.push_str(&format!("{i},{v:.6}\n"));
        }
        s
    }
}

/// Counts per cluster, keyed by target index; convenience for reports.
pub fn cluster_sizes(a: &ClusterAssignment) -> BTreeMap<usize, usize> {
    a.members.iter().enumerate().map(|(i, m)| (i, m.len())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_toy_domains, Dataset};
    use crate::models::Provenance;
    use rand::Rng;

    fn feat() -> FeatureNet {
        FeatureNet::random(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3))
    }

    fn random_images(n: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_fn((n, 3, 16, 16), |_| rng.random_range(-1.0..1.0));
        ImageBatch::new(data, Provenance::GeneratedTarget).unwrap()
    }

    #[test]
    fn pair_enumeration_covers_upper_triangle() {
        let n = 6;
        let pairs: Vec<_> = (0..15).map(|k| pair_from_index(k, n)).collect();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expected.push((i, j));
            }
        }
        assert_eq!(pairs, expected);
    }

    #[test]
    fn replicated_targets_give_zero() {
        let targets = random_images(3, 1);
        let gen = targets.select(&[0, 0, 1, 2, 2, 2, 1]);
        let r = intra_lpips(&gen, &targets, PairBudget::All, &feat(), 0).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.assignment.cluster_of, vec![0, 0, 1, 2, 2, 2, 1]);
    }

    #[test]
    fn singleton_clusters_are_excluded() {
        let targets = random_images(2, 2);
        let mut gen_data = Array4::zeros((3, 3, 16, 16));
        gen_data.index_axis_mut(Axis(0), 0).assign(&targets.data().index_axis(Axis(0), 0));
        let noise = random_images(2, 9);
        for k in 0..2 {
            let mut x = targets.data().index_axis(Axis(0), 1).to_owned();
            x.zip_mut_with(&noise.data().index_axis(Axis(0), k), |a, b| *a = (*a + 0.05 * b).clamp(-1.0, 1.0));
            gen_data.index_axis_mut(Axis(0), k + 1).assign(&x);
        }
        let gen = ImageBatch::new(gen_data, Provenance::GeneratedTarget).unwrap();
        let r = intra_lpips(&gen, &targets, PairBudget::All, &feat(), 0).unwrap();
        assert_eq!(r.assignment.members[0], vec![0]);
        assert_eq!(r.per_cluster[0], 0.0);
        assert!(r.per_cluster[1] > 0.0);
        assert_eq!(r.mean, r.per_cluster[1]);
    }

    #[test]
    fn ties_go_to_lowest_target() {
        let t = random_images(1, 4);
        let targets = t.select(&[0, 0]);
        let r = intra_lpips(&random_images(4, 5), &targets, PairBudget::All, &feat(), 0).unwrap();
        assert!(r.assignment.cluster_of.iter().all(|&c| c == 0));
    }

    #[test]
    fn budget_limits_pairs_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_pairs(20, PairBudget::AtMost(100), &mut rng).len(), 100);
        assert_eq!(select_pairs(10, PairBudget::AtMost(100), &mut rng).len(), 45);
        let a = select_pairs(30, PairBudget::AtMost(50), &mut ChaCha8Rng::seed_from_u64(1));
        let b = select_pairs(30, PairBudget::AtMost(50), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn standard_lpips_identical_images_and_order_invariance() {
        let one = random_images(1, 6);
        let same = one.select(&[0, 0, 0, 0]);
        assert_eq!(standard_lpips(&same, 10, &feat(), 0).unwrap(), 0.0);
        let imgs = random_images(8, 7);
        let fwd = standard_lpips(&imgs, 10, &feat(), 3).unwrap();
        let rev = standard_lpips(&imgs.select(&[7, 6, 5, 4, 3, 2, 1, 0]), 10, &feat(), 3).unwrap();
        assert_eq!(fwd, rev);
        assert!(standard_lpips(&one, 10, &feat(), 0).is_err());
    }

    #[test]
    fn frechet_identity_shift_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((200, 4), |_| rng.random_range(-1.0..1.0));
        let (mu, cov) = moments(&x).unwrap();
        assert!(frechet_from_moments(&mu, &cov, &mu, &cov).unwrap() < 1e-5);
        let delta = Array1::from(vec![0.3, -0.2, 0.0, 0.5]);
        let shifted = &mu + &delta;
        let d = frechet_from_moments(&mu, &cov, &shifted, &cov).unwrap();
        assert!((d - delta.dot(&delta)).abs() < 1e-5, "{d}");
        let y = Array2::from_shape_fn((200, 4), |_| rng.random_range(-2.0..1.0));
        let (mu2, cov2) = moments(&y).unwrap();
        let ab = frechet_from_moments(&mu, &cov, &mu2, &cov2).unwrap();
        let ba = frechet_from_moments(&mu2, &cov2, &mu, &cov).unwrap();
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn classifier_separates_toy_domains_and_flips_with_labels() {
        let (s, t) = synthesize_toy_domains(11, (300, 300), 16, 3);
        let (s, t) = (Dataset::load(&s).unwrap(), Dataset::load(&t).unwrap());
        let cfg = ModelConfig::default();
        let tr = ClassifierTraining { epochs: 3, ..Default::default() };
        let (clf, rep) = train_binary_classifier(&s.images, &t.images, 0.2, &cfg, &tr).unwrap();
        assert_eq!(rep.per_class_train + rep.per_class_held_out, 300);
        assert!(rep.held_out_accuracy > 0.95, "{rep:?}");
        let ps = clf.predict(&s.images.select(&[0, 1, 2]), false).unwrap();
        let pt = clf.predict(&t.images.select(&[0, 1, 2]), false).unwrap();
        assert!(pt.mean().unwrap() > ps.mean().unwrap());
        let (swapped, _) = train_binary_classifier(&t.images, &s.images, 0.2, &cfg, &tr).unwrap();
        let probe = ImageBatch::concat(&[&s.images.select(&[10, 11]), &t.images.select(&[10, 11])]).unwrap();
        let a = clf.predict(&probe, false).unwrap();
        let b = swapped.predict(&probe, false).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_ne!(*x >= 0.5, *y >= 0.5);
        }
    }

    #[test]
    fn balance_downsamples_larger_class() {
        let (s, t) = synthesize_toy_domains(12, (120, 40), 16, 3);
        let (s, t) = (Dataset::load(&s).unwrap(), Dataset::load(&t).unwrap());
        let tr = ClassifierTraining { epochs: 1, ..Default::default() };
        let (_, rep) = train_binary_classifier(&s.images, &t.images, 0.25, &ModelConfig::default(), &tr).unwrap();
        assert_eq!(rep.per_class_train, 30);
        assert_eq!(rep.per_class_held_out, 10);
        let empty = s.images.select(&[]);
        assert!(train_binary_classifier(&empty, &t.images, 0.25, &ModelConfig::default(), &tr).is_err());
    }
}
