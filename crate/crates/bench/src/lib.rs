//! Deterministic inputs for the benchmarks.

use dcl_core::adapt::SourceModels;
use dcl_core::models::{
    ClassifierModel, DiscriminatorModel, FeatureNet, GeneratorModel, ImageBatch, LatentBatch, ModelConfig, Provenance,
};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal feature rows.
pub fn features(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

/// Uniform images in [-1, 1].
pub fn images(n: usize, config: &ModelConfig, seed: u64) -> ImageBatch {
    let mut r = rng(seed);
    let s = config.resolution;
    let data = Array4::from_shape_fn((n, config.channels, s, s), |_| r.random_range(-1.0..=1.0));
    ImageBatch::new(data, Provenance::RealTarget).expect("images are in range")
}

pub fn latents(n: usize, config: &ModelConfig, seed: u64) -> LatentBatch {
    LatentBatch::sample(&mut rng(seed), n, config.z_dim)
}

/// Freshly initialized source models standing in for a pretrained set.
/// The classifier is marked trained so probes run; its scores carry no
/// meaning.
pub fn untrained_source(config: &ModelConfig, seed: u64) -> SourceModels {
    let mut r = rng(seed);
    let mut classifier = ClassifierModel::new(config, &mut r).expect("valid config");
    classifier.trained = true;
    SourceModels {
        model: config.clone(),
        generator: GeneratorModel::new(config, &mut r).expect("valid config"),
        discriminator: DiscriminatorModel::new(config, &mut r).expect("valid config"),
        classifier,
        feat_net: FeatureNet::random(config, &mut r),
    }
}
