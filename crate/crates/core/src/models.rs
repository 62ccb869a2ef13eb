//! Desk-scale generator, discriminator, realisticness classifier and the
//! fixed perceptual feature network.
//!
//! All networks are small DCGAN-style conv stacks. Every block output is a
//! tap point; a [`FeaturePyramid`] holds the activations of the requested
//! taps.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::nn::{Activation, Block, Forward, Layer, Network, ParamGrads, Trace};

/// Architecture shared by every network of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square image side, a power of two and at least 8.
    pub resolution: usize,
    pub channels: usize,
    pub z_dim: usize,
    /// Generator channel width at the 4x4 stem; halves per upsampling, floor 8.
    pub g_width: usize,
    /// Discriminator channel width after the first conv; doubles per
    /// downsampling, capped at `4 * d_width`.
    pub d_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { resolution: 16, channels: 3, z_dim: 32, g_width: 32, d_width: 12 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(config_err(format!("resolution {} must be a power of two >= 8", self.resolution)));
        }
        if self.channels == 0 || self.z_dim == 0 || self.g_width == 0 || self.d_width == 0 {
            return Err(config_err("model widths must be positive"));
        }
        Ok(())
    }

    /// Number of 2x steps between 4x4 and the output resolution.
    fn doublings(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }
}

/// A batch of latent codes, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    data: Array2<f64>,
    /// Set for the pinned probing batch.
    pub proxy: bool,
}

impl LatentBatch {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, z_dim: usize) -> Self {
        let data = Array2::from_shape_simple_fn((n, z_dim), || rng.sample::<f64, _>(StandardNormal));
        Self { data, proxy: false }
    }

    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(input_err("latent batch contains non-finite values"));
        }
        Ok(Self { data, proxy: false })
    }

    pub fn into_proxy(mut self) -> Self {
        self.proxy = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn z_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { data: self.data.select(Axis(0), rows), proxy: self.proxy }
    }

    fn as_activation(&self) -> Activation {
        self.data.clone().into_shape_with_order((self.len(), self.z_dim(), 1, 1)).expect("latent reshape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    GeneratedSource,
    GeneratedTarget,
    RealTarget,
    RealSource,
}

/// Images in NCHW layout with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
    pub provenance: Provenance,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>, provenance: Provenance) -> Result<Self> {
        let (_, _, h, w) = data.dim();
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(input_err(format!("image size {h}x{w} is not a power of two")));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(input_err(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { data, provenance })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dim(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.data.dim();
        (c, h, w)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { data: self.data.select(Axis(0), rows), provenance: self.provenance }
    }

    pub fn concat(parts: &[&ImageBatch]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| input_err("nothing to concatenate"))?;
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| input_err(e.to_string()))?;
        Ok(Self { data, provenance: first.provenance })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkId {
    Generator,
    Discriminator,
    Classifier,
    FeatureNet,
}

/// Tapped activations, keyed by block index.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub entries: BTreeMap<usize, Array4<f64>>,
    pub source: NetworkId,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&Array4<f64>> {
        self.entries.get(&layer)
    }

    /// Pyramid restricted to `taps`.
    pub fn restrict(&self, taps: &[usize]) -> Self {
        Self {
            entries: self.entries.iter().filter(|(k, _)| taps.contains(k)).map(|(k, v)| (*k, v.clone())).collect(),
            source: self.source,
        }
    }
}

fn dedup_taps(taps: &[usize]) -> Vec<usize> {
    let mut t = taps.to_vec();
    t.sort_unstable();
    t.dedup();
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub net: Network,
    pub config: ModelConfig,
    frozen: bool,
}

impl GeneratorModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut width = config.g_width;
        blocks.push(Block::new(
            "g.stem",
            vec![
                Layer::dense(rng, config.z_dim, width * 16),
                Layer::Reshape { channels: width, height: 4, width: 4 },
                Layer::leaky_relu(),
            ],
        ));
        for k in 0..config.doublings() {
            let next = (width / 2).max(8);
            blocks.push(Block::new(
                format!("g.up{k}"),
                vec![Layer::Upsample2x, Layer::conv(rng, width, next, 3, 1), Layer::leaky_relu()],
            ));
            width = next;
        }
        blocks.push(Block::new("g.to_img", vec![Layer::conv(rng, width, config.channels, 3, 1), Layer::Tanh]));
        Ok(Self { net: Network::new(blocks), config: config.clone(), frozen: false })
    }

    pub fn from_network(net: Network, config: ModelConfig) -> Self {
        Self { net, config, frozen: false }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Tap indices eligible for feature extraction: every block before the
    /// image output.
    pub fn tap_registry(&self) -> Vec<usize> {
        (0..self.net.block_count() - 1).collect()
    }

    /// Mutable access for optimizers; refused on frozen snapshots.
    pub fn net_mut(&mut self) -> Result<&mut Network> {
        if self.frozen {
            return Err(config_err("attempted to mutate a frozen generator"));
        }
        Ok(&mut self.net)
    }

    pub fn forward(&self, z: &LatentBatch, taps: &[usize]) -> Result<(ImageBatch, FeaturePyramid)> {
        let f = self.forward_raw(z, taps, false)?;
        let provenance = if self.frozen { Provenance::GeneratedSource } else { Provenance::GeneratedTarget };
        Ok((
            ImageBatch { data: f.output, provenance },
            FeaturePyramid { entries: f.taps, source: NetworkId::Generator },
        ))
    }

    /// Forward pass exposing the raw trace for backpropagation.
    pub fn forward_raw(&self, z: &LatentBatch, taps: &[usize], keep_trace: bool) -> Result<Forward> {
        if z.z_dim() != self.config.z_dim {
            return Err(input_err(format!("latent dim {} != generator z_dim {}", z.z_dim(), self.config.z_dim)));
        }
        self.net.forward(&z.as_activation(), &dedup_taps(taps), keep_trace)
    }

    pub fn backward(
        &self,
        trace: &Trace,
        grad_image: Option<&Activation>,
        tap_grads: &BTreeMap<usize, Activation>,
    ) -> ParamGrads {
        self.net.backward(trace, grad_image, tap_grads, true).1
    }

    /// Inference in chunks to bound memory for large batches.
    pub fn generate(&self, z: &LatentBatch, chunk: usize) -> Result<ImageBatch> {
        let mut parts = Vec::new();
        let n = z.len();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let rows: Vec<usize> = (start..end).collect();
            parts.push(self.forward(&z.select(&rows), &[])?.0);
            start = end;
        }
        let refs: Vec<&ImageBatch> = parts.iter().collect();
        ImageBatch::concat(&refs)
    }

    /// Snapshot with identical parameters that refuses mutation.
    pub fn clone_frozen(&self) -> GeneratorModel {
        GeneratorModel { net: self.net.clone(), config: self.config.clone(), frozen: true }
    }
}

/// Which discriminator head produces realness logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Image,
    Patch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    pub trunk: Network,
    pub image_head: Network,
    pub patch_head: Network,
    pub config: ModelConfig,
}

/// Training-mode discriminator forward.
pub struct DiscForward {
    pub trunk: Forward,
    pub head: Forward,
    pub which: Head,
    input_dim: (usize, usize, usize, usize),
}

impl DiscForward {
    pub fn logits(&self) -> &Activation {
        &self.head.output
    }
}

impl DiscriminatorModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = vec![Block::new(
            "d.from_img",
            vec![Layer::conv(rng, config.channels, config.d_width, 3, 1), Layer::leaky_relu()],
        )];
        let mut width = config.d_width;
        for k in 0..config.doublings() {
            let next = (width * 2).min(config.d_width * 4);
            blocks.push(Block::new(
                format!("d.down{k}"),
                vec![Layer::conv(rng, width, next, 3, 1), Layer::leaky_relu(), Layer::AvgPool2x],
            ));
            width = next;
        }
        let trunk = Network::new(blocks);
        let image_head = Network::new(vec![Block::new("d.head_img", vec![Layer::dense(rng, width * 16, 1)])]);
        let patch_head = Network::new(vec![Block::new("d.head_patch", vec![Layer::conv(rng, width, 1, 1, 1)])]);
        Ok(Self { trunk, image_head, patch_head, config: config.clone() })
    }

    pub fn tap_registry(&self) -> Vec<usize> {
        (0..self.trunk.block_count()).collect()
    }

    pub fn head(&self, which: Head) -> &Network {
        match which {
            Head::Image => &self.image_head,
            Head::Patch => &self.patch_head,
        }
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        let (c, h, w) = x.image_dim();
        let r = self.config.resolution;
        if (c, h, w) != (self.config.channels, r, r) {
            return Err(input_err(format!("discriminator expects {}x{r}x{r} images, got {c}x{h}x{w}", self.config.channels)));
        }
        Ok(())
    }

    /// Realness logits, shape (N,1,1,1) for the image head or (N,1,4,4) for
    /// the patch head, plus the tapped trunk pyramid.
    pub fn forward(&self, x: &ImageBatch, taps: &[usize], which: Head) -> Result<(Activation, FeaturePyramid)> {
        let f = self.forward_raw(x, taps, which, false)?;
        Ok((f.head.output, FeaturePyramid { entries: f.trunk.taps, source: NetworkId::Discriminator }))
    }

    pub fn forward_raw(&self, x: &ImageBatch, taps: &[usize], which: Head, keep_trace: bool) -> Result<DiscForward> {
        self.check_input(x)?;
        let trunk = self.trunk.forward(x.data(), &dedup_taps(taps), keep_trace)?;
        let head = self.head(which).forward(&trunk.output, &[], keep_trace)?;
        Ok(DiscForward { trunk, head, which, input_dim: x.data().dim() })
    }

    /// Backpropagates logit and tap gradients. Returns the image gradient and
    /// (trunk, head) parameter gradients.
    pub fn backward(
        &self,
        f: &DiscForward,
        grad_logits: Option<&Activation>,
        tap_grads: &BTreeMap<usize, Activation>,
        want_params: bool,
    ) -> (Activation, ParamGrads, ParamGrads) {
        let head = self.head(f.which);
        let (g_trunk_out, head_grads) = match grad_logits {
            Some(g) => head.backward(f.head.trace.as_ref().expect("trace"), Some(g), &BTreeMap::new(), want_params),
            None => (None, ParamGrads::zeros_like(head)),
        };
        let (gx, trunk_grads) =
            self.trunk.backward(f.trunk.trace.as_ref().expect("trace"), g_trunk_out.as_ref(), tap_grads, want_params);
        let gx = gx.unwrap_or_else(|| Array4::zeros(f.input_dim));
        (gx, trunk_grads, head_grads)
    }
}

/// Binary source/target classifier producing target-domain probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub net: Network,
    pub config: ModelConfig,
    pub trained: bool,
}

impl ClassifierModel {
    /// Five parametric layers: three convs and two dense.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let side = config.resolution / 8;
        let net = Network::new(vec![
            Block::new("c.conv0", vec![Layer::conv(rng, c, 8, 3, 1), Layer::leaky_relu(), Layer::AvgPool2x]),
            Block::new("c.conv1", vec![Layer::conv(rng, 8, 16, 3, 1), Layer::leaky_relu(), Layer::AvgPool2x]),
            Block::new("c.conv2", vec![Layer::conv(rng, 16, 16, 3, 1), Layer::leaky_relu(), Layer::AvgPool2x]),
            Block::new("c.fc0", vec![Layer::dense(rng, 16 * side * side, 32), Layer::leaky_relu()]),
            Block::new("c.fc1", vec![Layer::dense(rng, 32, 1)]),
        ]);
        Ok(Self { net, config: config.clone(), trained: false })
    }

    pub fn check_input(&self, x: &ImageBatch) -> Result<()> {
        let (c, h, w) = x.image_dim();
        let r = self.config.resolution;
        if (c, h, w) != (self.config.channels, r, r) {
            return Err(input_err(format!("classifier expects {}x{r}x{r} images, got {c}x{h}x{w}", self.config.channels)));
        }
        Ok(())
    }

    pub fn logits(&self, x: &ImageBatch) -> Result<Array1<f64>> {
        self.check_input(x)?;
        let out = self.net.forward(x.data(), &[], false)?.output;
        Ok(out.into_shape_with_order(x.len()).expect("logit shape"))
    }

    /// Target-domain probability per image. Refuses untrained classifiers
    /// unless `allow_untrained`.
    pub fn predict(&self, x: &ImageBatch, allow_untrained: bool) -> Result<Array1<f64>> {
        if !self.trained && !allow_untrained {
            return Err(config_err("classifier has not been trained"));
        }
        Ok(self.logits(x)?.mapv(sigmoid))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Frozen conv trunk whose unit-normalized activations define the
/// perceptual distance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub trunk: Network,
    pub config: ModelConfig,
}

/// Per-image unit-normalized multi-layer features.
#[derive(Clone, Debug)]
pub struct PerceptualEmbedding {
    /// One (N, C*H*W) matrix per layer, channel vectors normalized at each
    /// spatial site, laid out (site-major, channel-minor).
    layers: Vec<Array2<f64>>,
    /// Number of spatial sites per layer.
    sites: Vec<usize>,
}

impl PerceptualEmbedding {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distance between row `i` of `self` and row `j` of `other`.
    pub fn distance_to(&self, i: usize, other: &PerceptualEmbedding, j: usize) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .zip(&self.sites)
            .map(|((a, b), &sites)| {
                let ra = a.row(i);
                let rb = b.row(j);
                let sq: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                sq / sites as f64
            })
            .sum()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distance_to(i, self, j)
    }
}

/// Small constant guarding the channel normalization.
const NORM_EPS: f64 = 1e-10;

impl FeatureNet {
    /// Trunk layout shared by the random and trained variants.
    pub fn trunk<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Network {
        Network::new(vec![
            Block::new("f.conv0", vec![Layer::conv(rng, config.channels, 8, 3, 1), Layer::leaky_relu()]),
            Block::new("f.conv1", vec![Layer::AvgPool2x, Layer::conv(rng, 8, 16, 3, 1), Layer::leaky_relu()]),
            Block::new("f.conv2", vec![Layer::AvgPool2x, Layer::conv(rng, 16, 24, 3, 1), Layer::leaky_relu()]),
        ])
    }

    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        Self { trunk: Self::trunk(config, rng), config: config.clone() }
    }

    pub fn from_trunk(trunk: Network, config: ModelConfig) -> Self {
        Self { trunk, config }
    }

    pub fn embed(&self, x: &ImageBatch) -> Result<PerceptualEmbedding> {
        let taps: Vec<usize> = (0..self.trunk.block_count()).collect();
        let mut layers: Vec<Vec<Array2<f64>>> = vec![Vec::new(); taps.len()];
        let mut sites = vec![0; taps.len()];
        // chunked to bound im2col memory
        let n = x.len();
        let mut start = 0;
        while start < n {
            let end = (start + 128).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let f = self.trunk.forward(x.select(&rows).data(), &taps, false)?;
            for (li, (_, act)) in f.taps.iter().enumerate() {
                let (b, c, h, w) = act.dim();
                sites[li] = h * w;
                let mut m = Array2::zeros((b, h * w * c));
                for bi in 0..b {
                    for s in 0..h * w {
                        let (y, xx) = (s / w, s % w);
                        let norm = (0..c).map(|ch| act[[bi, ch, y, xx]].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                        for ch in 0..c {
                            m[[bi, s * c + ch]] = act[[bi, ch, y, xx]] / norm;
                        }
                    }
                }
                layers[li].push(m);
            }
            start = end;
        }
        let layers = layers
            .into_iter()
            .map(|parts| {
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("embedding concat")
            })
            .collect();
        Ok(PerceptualEmbedding { layers, sites })
    }
}

/// Per-pair perceptual distance between aligned batches `a[i]`, `b[i]`:
/// unit-normalized channel vectors, squared differences summed over
/// channels, averaged over space, summed over layers.
pub fn perceptual_distance(net: &FeatureNet, a: &ImageBatch, b: &ImageBatch) -> Result<Array1<f64>> {
    if a.data().dim() != b.data().dim() {
        return Err(input_err(format!("shape mismatch {:?} vs {:?}", a.data().dim(), b.data().dim())));
    }
    let ea = net.embed(a)?;
    let eb = net.embed(b)?;
    Ok(Array1::from_shape_fn(a.len(), |i| ea.distance_to(i, &eb, i)))
}

/// Numeric guard used by callers that build images outside the generator.
pub fn clamp_images(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
}
