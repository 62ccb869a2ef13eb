//! Source pretraining and few-shot adaptation.
//!
//! One iteration is a discriminator step followed by a generator step on
//! fresh latent batches. The method decides which regularizers join the
//! adversarial loss:
//!
//! | method  | generator step                 | discriminator step        |
//! |---------|--------------------------------|---------------------------|
//! | tgan    | adv                            | adv                       |
//! | dcl     | adv + λ1·cl1 + λ2·cl2          | adv + λ2·cl2              |
//! | freezed | adv                            | adv, early blocks frozen  |
//! | ewc     | adv + Fisher-weighted drift    | adv                       |
//! | cdc     | adv + λ_cdc·distance KL        | adv                       |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint, RngState};
use crate::data::{Dataset, Split};
use crate::error::{config_err, input_err, Error, Result};
use crate::losses::{
    adversarial_loss, cdc_distance_loss, discriminator_contrastive_loss, ewc_penalty,
    generator_contrastive_loss_with, with_aux, LossBundle, NegativeSetup, Side, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2,
    DEFAULT_TAU,
};
use crate::metrics::{
    frechet_feature_distance, intra_lpips, realisticness_probe, train_binary_classifier, train_feature_net,
    ClassifierTraining, PairBudget,
};
use crate::models::{
    ClassifierModel, DiscForward, DiscriminatorModel, FeatureNet, GeneratorModel, Head, ImageBatch, LatentBatch,
    ModelConfig, Provenance,
};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Activation, Adam, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dcl,
    Tgan,
    FreezeD,
    Ewc,
    Cdc,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dcl, Method::Tgan, Method::FreezeD, Method::Ewc, Method::Cdc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dcl => "dcl",
            Method::Tgan => "tgan",
            Method::FreezeD => "freezed",
            Method::Ewc => "ewc",
            Method::Cdc => "cdc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            config_err(format!("unknown method '{s}'; valid methods: {}", valid.join(", ")))
        })
    }
}

/// How a tapped activation map becomes one feature vector per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureReduction {
    /// Spatial global average pool to (N, C).
    #[default]
    Pool,
    /// Flatten to (N, C·H·W).
    Flatten,
}

fn reduce(a: &Activation, r: FeatureReduction) -> Array2<f64> {
    match r {
        FeatureReduction::Pool => global_avg_pool(a),
        FeatureReduction::Flatten => {
            let n = a.dim().0;
            a.as_standard_layout().into_owned().into_shape_with_order((n, a.len() / n)).expect("flatten")
        }
    }
}

fn reduce_backward(g: &Array2<f64>, dim: (usize, usize, usize, usize), r: FeatureReduction) -> Activation {
    match r {
        FeatureReduction::Pool => global_avg_pool_backward(g, dim),
        FeatureReduction::Flatten => g.clone().into_shape_with_order(dim).expect("unflatten"),
    }
}

/// Full description of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub method: Method,
    pub shots: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub lambda_ewc: f64,
    pub lambda_cdc: f64,
    /// Generator blocks eligible for tapping; empty means the whole registry.
    pub g_layers: Vec<usize>,
    /// Discriminator trunk blocks eligible for tapping; empty means all.
    pub d_layers: Vec<usize>,
    pub taps_per_iteration: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub probe_interval: usize,
    pub proxy_size: usize,
    /// Leading discriminator blocks frozen by the freezed method.
    pub freeze_d: usize,
    pub negatives: NegativeSetup,
    pub reduction: FeatureReduction,
    /// Every `patch_every`-th iteration uses the patch head; 0 disables it.
    pub patch_every: usize,
    /// Periodic checkpoint interval; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub fisher_samples: usize,
    pub pair_budget: PairBudget,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::Dcl,
            shots: 10,
            batch_size: 4,
            iterations: 3000,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            tau: DEFAULT_TAU,
            lambda_ewc: 5e2,
            lambda_cdc: 1e3,
            g_layers: Vec::new(),
            d_layers: Vec::new(),
            taps_per_iteration: 2,
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            seed: 0,
            probe_interval: 50,
            proxy_size: 256,
            freeze_d: 2,
            negatives: NegativeSetup::SourceSide,
            reduction: FeatureReduction::Pool,
            patch_every: 0,
            checkpoint_every: 0,
            fisher_samples: 64,
            pair_budget: PairBudget::default(),
        }
    }
}

/// Loss weights actually used once the method is taken into account.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Weights {
    l1: f64,
    l2: f64,
    ewc: f64,
    cdc: f64,
    freeze: usize,
}

impl AdaptationConfig {
    pub fn for_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(config_err("batch size and iteration count must be at least 1"));
        }
        if self.shots == 0 {
            return Err(config_err("shot count must be at least 1"));
        }
        if self.taps_per_iteration == 0 {
            return Err(config_err("taps per iteration must be at least 1"));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_ewc", self.lambda_ewc),
            ("lambda_cdc", self.lambda_cdc),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(config_err(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.probe_interval == 0 || self.proxy_size == 0 {
            return Err(config_err("probe interval and proxy size must be positive"));
        }
        if self.method == Method::Cdc && self.batch_size < 2 {
            return Err(config_err("the cdc method needs a batch of at least 2"));
        }
        Ok(())
    }

    fn weights(&self) -> Weights {
        let mut w = Weights { l1: 0.0, l2: 0.0, ewc: 0.0, cdc: 0.0, freeze: 0 };
        match self.method {
            Method::Dcl => {
                w.l1 = self.lambda1;
                w.l2 = self.lambda2;
            }
            Method::Tgan => {}
            Method::FreezeD => w.freeze = self.freeze_d,
            Method::Ewc => w.ewc = self.lambda_ewc,
            Method::Cdc => w.cdc = self.lambda_cdc,
        }
        w
    }

    /// Canonical text used for the run's config hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Uniform sample of `k` distinct layers from `pool`, returned sorted.
pub fn sample_tap_layers<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(config_err(format!("cannot sample {k} taps from a pool of {}", pool.len())));
    }
    let mut out: Vec<usize> = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Number of freezable discriminator units: every trunk block plus the
/// heads as one final unit.
pub fn discriminator_layer_count(d: &DiscriminatorModel) -> usize {
    d.trunk.block_count() + 1
}

/// Marks the first `k` discriminator units (highest resolution first) as
/// non-trainable.
pub fn freeze_discriminator_layers(mut d: DiscriminatorModel, k: usize) -> Result<DiscriminatorModel> {
    let total = discriminator_layer_count(&d);
    if k > total {
        return Err(config_err(format!("cannot freeze {k} of {total} discriminator layers")));
    }
    for (i, b) in d.trunk.blocks.iter_mut().enumerate() {
        b.trainable = i >= k;
    }
    let heads_trainable = k < total;
    for head in [&mut d.image_head, &mut d.patch_head] {
        for b in &mut head.blocks {
            b.trainable = heads_trainable;
        }
    }
    Ok(d)
}

/// Parameter hash of the frozen discriminator units.
pub fn frozen_discriminator_hash(d: &DiscriminatorModel, k: usize) -> [u8; 32] {
    d.trunk.block_hash(0..k.min(d.trunk.block_count()))
}

fn logits_flat(l: &Activation) -> Array1<f64> {
    Array1::from_iter(l.iter().copied())
}

fn unflatten(g: &Array1<f64>, dim: (usize, usize, usize, usize)) -> Activation {
    Array4::from_shape_vec(dim, g.to_vec()).expect("logit grad shape")
}

/// Diagonal Fisher approximation: the mean over `z` of the squared
/// per-sample gradient of the non-saturating generator loss, aligned with
/// the generator's flat parameter order.
pub fn estimate_fisher(g: &GeneratorModel, d: &DiscriminatorModel, z: &LatentBatch) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(input_err("Fisher estimation needs at least one latent"));
    }
    let mut fisher = vec![0.0; g.net.param_count()];
    for i in 0..z.len() {
        let zi = z.select(&[i]);
        let f = g.forward_raw(&zi, &[], true)?;
        let img = ImageBatch::new(f.output.clone(), Provenance::GeneratedTarget)?;
        let df = d.forward_raw(&img, &[], Head::Image, true)?;
        let adv = adversarial_loss(Array1::zeros(0).view(), logits_flat(df.logits()).view(), Side::Generator)?;
        let (gimg, _, _) = d.backward(&df, Some(&unflatten(&adv.grad_fake, df.logits().dim())), &BTreeMap::new(), false);
        let grads = g.net.backward(f.trace.as_ref().expect("trace"), Some(&gimg), &BTreeMap::new(), true).1;
        for (acc, v) in fisher.iter_mut().zip(grads.flat()) {
            *acc += v * v;
        }
    }
    let n = z.len() as f64;
    fisher.iter_mut().for_each(|v| *v /= n);
    Ok(fisher)
}

/// One row of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub loss_adv: f64,
    pub loss_cl1: f64,
    pub loss_cl2: f64,
    pub loss_aux: f64,
    pub p_t: f64,
    pub intra_lpips: f64,
}

/// Probe-interval log of losses, realisticness and diversity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub rows: Vec<MetricRow>,
}

impl MetricSeries {
    pub const HEADER: &'static str = "iteration,loss_adv,loss_cl1,loss_cl2,loss_aux,p_t,intra_lpips";

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(input_err(format!("iteration {} after {}", row.iteration, last.iteration)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut s = MetricSeries::default();
        for row in r.deserialize() {
            s.push(row?)?;
        }
        Ok(s)
    }
}

/// Everything produced by source pretraining: the source generator and
/// discriminator plus the frozen analysis networks shared by every
/// adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceModels {
    pub model: ModelConfig,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub classifier: ClassifierModel,
    pub feat_net: FeatureNet,
}

impl SourceModels {
    pub fn config_hash(model: &ModelConfig) -> [u8; 32] {
        config_hash(&toml::to_string(model).expect("model config serializes"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::config_hash(&self.model));
        ck.meta.insert("kind".into(), "source".into());
        ck.meta.insert("model".into(), toml::to_string(&self.model).expect("model config serializes"));
        ck.meta.insert("classifier.trained".into(), self.classifier.trained.to_string());
        ck.put_network("g", &self.generator.net);
        put_discriminator(&mut ck, "d", &self.discriminator);
        ck.put_network("classifier", &self.classifier.net);
        ck.put_network("feat", &self.feat_net.trunk);
        ck
    }

    /// Rebuilds the models; the stored model config must hash to `expected`
    /// unless `force`.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&ModelConfig>, force: bool) -> Result<Self> {
        let text = ck.meta.get("model").ok_or_else(|| Error::Checkpoint("missing model config".into()))?;
        let model: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        if let Some(exp) = expected {
            ck.check_hash(&Self::config_hash(exp), force)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = GeneratorModel::new(&model, &mut rng)?;
        ck.load_network("g", generator.net_mut()?)?;
        let mut discriminator = DiscriminatorModel::new(&model, &mut rng)?;
        load_discriminator(ck, "d", &mut discriminator)?;
        let mut classifier = ClassifierModel::new(&model, &mut rng)?;
        ck.load_network("classifier", &mut classifier.net)?;
        classifier.trained = ck.meta.get("classifier.trained").map(|s| s == "true").unwrap_or(false);
        let mut trunk = FeatureNet::trunk(&model, &mut rng);
        ck.load_network("feat", &mut trunk)?;
        trunk.blocks.iter_mut().for_each(|b| b.trainable = false);
        Ok(Self { feat_net: FeatureNet::from_trunk(trunk, model.clone()), model, generator, discriminator, classifier })
    }
}

fn put_discriminator(ck: &mut Checkpoint, prefix: &str, d: &DiscriminatorModel) {
    ck.put_network(&format!("{prefix}.trunk"), &d.trunk);
    ck.put_network(&format!("{prefix}.img"), &d.image_head);
    ck.put_network(&format!("{prefix}.patch"), &d.patch_head);
}

fn load_discriminator(ck: &Checkpoint, prefix: &str, d: &mut DiscriminatorModel) -> Result<()> {
    ck.load_network(&format!("{prefix}.trunk"), &mut d.trunk)?;
    ck.load_network(&format!("{prefix}.img"), &mut d.image_head)?;
    ck.load_network(&format!("{prefix}.patch"), &mut d.patch_head)
}

/// Networks and optimizer state of one GAN training job.
struct Trainer<'a> {
    g: GeneratorModel,
    d: DiscriminatorModel,
    g_src: Option<&'a GeneratorModel>,
    opt_g: Adam,
    opt_trunk: Adam,
    opt_img: Adam,
    opt_patch: Adam,
    z_rng: ChaCha8Rng,
    tap_rng: ChaCha8Rng,
    real_rng: ChaCha8Rng,
    real: &'a ImageBatch,
    w: Weights,
    batch: usize,
    taps: usize,
    tau: f64,
    negatives: NegativeSetup,
    reduction: FeatureReduction,
    patch_every: usize,
    g_pool: Vec<usize>,
    d_pool: Vec<usize>,
    ewc: Option<(Vec<f64>, Vec<f64>)>,
}

/// Independent ChaCha stream `stream` of `seed`. Streams in use: 0 network
/// initialization, 1 latents, 2 tap layers, 3 real batches, 4 probe batch,
/// 5 Fisher latents, 6 pretraining evaluation latents, 7 untrained feature
/// net.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<'a> Trainer<'a> {
    fn head_for(&self, it: usize) -> Head {
        if self.patch_every > 0 && it % self.patch_every == self.patch_every - 1 {
            Head::Patch
        } else {
            Head::Image
        }
    }

    fn fake(&self, g: &GeneratorModel, z: &LatentBatch, taps: &[usize], trace: bool) -> Result<(ImageBatch, crate::nn::Forward)> {
        let f = g.forward_raw(z, taps, trace)?;
        let provenance = if g.is_frozen() { Provenance::GeneratedSource } else { Provenance::GeneratedTarget };
        Ok((ImageBatch::new(f.output.clone(), provenance)?, f))
    }

    /// Discriminator contrastive term for one set of forwards; accumulates
    /// tap gradients for the anchor, positive and negative passes.
    fn d_contrastive(
        &self,
        ft: &DiscForward,
        fs: &DiscForward,
        fr: &DiscForward,
        d_taps: &[usize],
        grads: (&mut BTreeMap<usize, Activation>, Option<&mut BTreeMap<usize, Activation>>, Option<&mut BTreeMap<usize, Activation>>),
    ) -> Result<f64> {
        let (ga, mut gp, mut gn) = grads;
        let scale = self.w.l2 / d_taps.len() as f64;
        let mut total = 0.0;
        for &l in d_taps {
            let (at, as_, ar) = (&ft.trunk.taps[&l], &fs.trunk.taps[&l], &fr.trunk.taps[&l]);
            let loss = discriminator_contrastive_loss(
                &reduce(at, self.reduction),
                &reduce(as_, self.reduction),
                &reduce(ar, self.reduction),
                self.tau,
            )?;
            total += loss.value / d_taps.len() as f64;
            ga.insert(l, reduce_backward(&(&loss.grad_anchor * scale), at.dim(), self.reduction));
            if let Some(gp) = gp.as_deref_mut() {
                gp.insert(l, reduce_backward(&(&loss.grad_positive * scale), as_.dim(), self.reduction));
            }
            if let Some(gn) = gn.as_deref_mut() {
                gn.insert(l, reduce_backward(&(&loss.grad_negative * scale), ar.dim(), self.reduction));
            }
        }
        Ok(total)
    }

    fn d_step(&mut self, head: Head, d_taps: &[usize]) -> Result<f64> {
        let z = LatentBatch::sample(&mut self.z_rng, self.batch, self.g.config.z_dim);
        let (fake_t, _) = self.fake(&self.g, &z, &[], false)?;
        let n_real = self.real.len();
        let pick: Vec<usize> = index::sample(&mut self.real_rng, n_real, self.batch.min(n_real)).into_vec();
        let use_cl = self.w.l2 > 0.0;

        // real pass: all shots when their features serve as negatives
        let real_in = if use_cl { self.real.clone() } else { self.real.select(&pick) };
        let rows: Vec<usize> = if use_cl { pick.clone() } else { (0..pick.len()).collect() };
        let fr = self.d.forward_raw(&real_in, d_taps, head, true)?;
        let ft = self.d.forward_raw(&fake_t, d_taps, head, true)?;

        let per = fr.logits().len() / real_in.len();
        let real_logits: Array1<f64> =
            rows.iter().flat_map(|&r| fr.logits().index_axis(Axis(0), r).iter().copied().collect::<Vec<_>>()).collect();
        let adv = adversarial_loss(real_logits.view(), logits_flat(ft.logits()).view(), Side::Discriminator)?;
        let mut g_real_logits = Array4::zeros(fr.logits().dim());
        for (k, &r) in rows.iter().enumerate() {
            for (q, v) in g_real_logits.index_axis_mut(Axis(0), r).iter_mut().enumerate() {
                *v = adv.grad_real[k * per + q];
            }
        }
        let g_fake_logits = unflatten(&adv.grad_fake, ft.logits().dim());

        let mut tg_t = BTreeMap::new();
        let mut tg_s = BTreeMap::new();
        let mut tg_r = BTreeMap::new();
        let mut cl2 = 0.0;
        let mut fs = None;
        if use_cl {
            let g_src = self.g_src.ok_or_else(|| config_err("contrastive terms need a source generator"))?;
            let (fake_s, _) = self.fake(g_src, &z, &[], false)?;
            let f = self.d.forward_raw(&fake_s, d_taps, head, true)?;
            cl2 = self.d_contrastive(&ft, &f, &fr, d_taps, (&mut tg_t, Some(&mut tg_s), Some(&mut tg_r)))?;
            fs = Some(f);
        }

        let (_, mut trunk_g, mut head_g) = self.d.backward(&ft, Some(&g_fake_logits), &tg_t, true);
        let (_, tr, hr) = self.d.backward(&fr, Some(&g_real_logits), &tg_r, true);
        trunk_g.add_assign(&tr);
        head_g.add_assign(&hr);
        if let Some(fs) = &fs {
            let (_, ts, _) = self.d.backward(fs, None, &tg_s, true);
            trunk_g.add_assign(&ts);
        }
        let loss = adv.value + self.w.l2 * cl2;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0, dump: format!("discriminator adv={} cl2={cl2}", adv.value) });
        }
        self.opt_trunk.apply(&mut self.d.trunk, &trunk_g);
        match head {
            Head::Image => self.opt_img.apply(&mut self.d.image_head, &head_g),
            Head::Patch => self.opt_patch.apply(&mut self.d.patch_head, &head_g),
        }
        Ok(loss)
    }

    fn g_step(&mut self, head: Head, g_taps: &[usize], d_taps: &[usize]) -> Result<LossBundle> {
        let z = LatentBatch::sample(&mut self.z_rng, self.batch, self.g.config.z_dim);
        let (fake_t, ft) = self.fake(&self.g, &z, g_taps, true)?;
        let need_src = self.w.l1 > 0.0 || self.w.cdc > 0.0 || self.w.l2 > 0.0;
        let src = match (need_src, self.g_src) {
            (true, Some(g)) => Some(self.fake(g, &z, g_taps, false)?),
            (true, None) => return Err(config_err("regularized methods need a source generator")),
            _ => None,
        };

        let mut g_tap_grads: BTreeMap<usize, Activation> = BTreeMap::new();
        let mut cl1 = 0.0;
        let mut aux = 0.0;
        if let Some((_, fs)) = &src {
            let k = g_taps.len() as f64;
            for &l in g_taps {
                let at = &ft.taps[&l];
                let a = reduce(at, self.reduction);
                let b = reduce(&fs.taps[&l], self.reduction);
                let mut g_l = Array2::zeros(a.dim());
                if self.w.l1 > 0.0 {
                    let loss = generator_contrastive_loss_with(&a, &b, self.tau, self.negatives)?;
                    cl1 += loss.value / k;
                    g_l.scaled_add(self.w.l1 / k, &loss.grad_anchor);
                }
                if self.w.cdc > 0.0 {
                    let (v, grad) = cdc_distance_loss(&a, &b)?;
                    aux += self.w.cdc * v / k;
                    g_l.scaled_add(self.w.cdc / k, &grad);
                }
                g_tap_grads.insert(l, reduce_backward(&g_l, at.dim(), self.reduction));
            }
        }

        let df = self.d.forward_raw(&fake_t, d_taps, head, true)?;
        let adv = adversarial_loss(Array1::zeros(0).view(), logits_flat(df.logits()).view(), Side::Generator)?;
        let mut d_tap_grads = BTreeMap::new();
        let mut cl2 = 0.0;
        if self.w.l2 > 0.0 {
            let (fake_s, _) = src.as_ref().expect("source pass");
            let fs = self.d.forward_raw(fake_s, d_taps, head, false)?;
            let fr = self.d.forward_raw(self.real, d_taps, head, false)?;
            cl2 = self.d_contrastive(&df, &fs, &fr, d_taps, (&mut d_tap_grads, None, None))?;
        }
        let (gimg, _, _) = self.d.backward(&df, Some(&unflatten(&adv.grad_fake, df.logits().dim())), &d_tap_grads, false);
        let mut grads = self.g.backward(ft.trace.as_ref().expect("trace"), Some(&gimg), &g_tap_grads);
        if let Some((anchor, fisher)) = &self.ewc {
            let current = self.g.net.flat_params();
            let (v, grad) = ewc_penalty(&current, anchor, fisher, self.w.ewc)?;
            aux += v;
            add_flat(&mut grads, &grad);
        }
        let bundle = with_aux(adv.value, cl1, cl2, aux, self.w.l1, self.w.l2)?;
        self.opt_g.apply(self.g.net_mut()?, &grads);
        Ok(bundle)
    }

    fn iteration(&mut self, it: usize) -> Result<(f64, LossBundle)> {
        let head = self.head_for(it);
        let g_taps = if self.w.l1 > 0.0 || self.w.cdc > 0.0 {
            sample_tap_layers(&mut self.tap_rng, &self.g_pool, self.taps)?
        } else {
            Vec::new()
        };
        let d_taps =
            if self.w.l2 > 0.0 { sample_tap_layers(&mut self.tap_rng, &self.d_pool, self.taps)? } else { Vec::new() };
        let wrap = |e: Error, what: &str| match e {
            Error::Degenerate(msg) | Error::NonFiniteLoss { dump: msg, .. } => {
                Error::NonFiniteLoss { iteration: it, dump: format!("{what}: {msg}") }
            }
            Error::NonFiniteActivation { layer } => {
                Error::NonFiniteLoss { iteration: it, dump: format!("{what}: non-finite activation in block {layer}") }
            }
            other => other,
        };
        let d_loss = self.d_step(head, &d_taps).map_err(|e| wrap(e, "discriminator step"))?;
        let bundle = self.g_step(head, &g_taps, &d_taps).map_err(|e| wrap(e, "generator step"))?;
        Ok((d_loss, bundle))
    }

    fn checkpoint(&self, hash: [u8; 32], iteration: usize, method: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(hash);
        ck.meta.insert("kind".into(), "adapted".into());
        ck.meta.insert("method".into(), method.into());
        ck.meta.insert("iteration".into(), iteration.to_string());
        ck.meta.insert("model".into(), toml::to_string(&self.g.config).expect("model config serializes"));
        ck.put_network("g", &self.g.net);
        put_discriminator(&mut ck, "d", &self.d);
        for (k, a) in [("g", &self.opt_g), ("d.trunk", &self.opt_trunk), ("d.img", &self.opt_img), ("d.patch", &self.opt_patch)] {
            ck.optimizers.insert(k.into(), a.clone());
        }
        for (k, r) in [("z", &self.z_rng), ("tap", &self.tap_rng), ("real", &self.real_rng)] {
            ck.rngs.insert(k.into(), RngState::capture(r));
        }
        ck
    }
}

fn add_flat(grads: &mut ParamGrads, flat: &[f64]) {
    let mut k = 0;
    for t in &mut grads.0 {
        for v in t.iter_mut() {
            *v += flat[k];
            k += 1;
        }
    }
}

/// Result of [`adapt`].
#[derive(Clone, Debug)]
pub struct AdaptationRun {
    pub config: AdaptationConfig,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub series: MetricSeries,
    /// Generator-step losses of every iteration.
    pub losses: Vec<LossBundle>,
    /// Discriminator-step objective of every iteration.
    pub d_losses: Vec<f64>,
    pub checkpoints: Vec<(usize, Checkpoint)>,
    pub final_checkpoint: Checkpoint,
    pub source_hash_before: [u8; 32],
    pub source_hash_after: [u8; 32],
    pub g_steps: u64,
    pub d_steps: u64,
    pub wall_clock: Duration,
}

/// Config hash stamped on the checkpoints of an adaptation run.
pub fn run_hash(cfg: &AdaptationConfig, model: &ModelConfig) -> [u8; 32] {
    config_hash(&format!("{}\n{}", cfg.canonical(), toml::to_string(model).expect("model config serializes")))
}

/// Generator stored in a source or adapted checkpoint.
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<GeneratorModel> {
    let text = ck.meta.get("model").ok_or_else(|| Error::Checkpoint("missing model config".into()))?;
    let model: ModelConfig = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    let mut g = GeneratorModel::new(&model, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_network("g", g.net_mut()?)?;
    Ok(g)
}

/// Fixed latent batch used for every probe of a run.
pub fn proxy_latents(seed: u64, size: usize, z_dim: usize) -> LatentBatch {
    LatentBatch::sample(&mut rng_stream(seed, 4), size, z_dim).into_proxy()
}

/// Realisticness and intra-cluster diversity of `g` on the pinned proxy
/// batch.
pub fn probe(
    g: &GeneratorModel,
    source: &SourceModels,
    proxy: &LatentBatch,
    shots: &ImageBatch,
    budget: PairBudget,
    seed: u64,
) -> Result<(f64, f64)> {
    let p_t = realisticness_probe(&source.classifier, g, proxy)?;
    let imgs = g.generate(proxy, 128)?;
    let intra = intra_lpips(&imgs, shots, budget, &source.feat_net, seed)?;
    Ok((p_t, intra.mean))
}

/// Few-shot adaptation of `source.generator` to `shots`.
pub fn adapt(cfg: &AdaptationConfig, source: &SourceModels, shots: &ImageBatch) -> Result<AdaptationRun> {
    cfg.validate()?;
    if shots.len() != cfg.shots {
        return Err(input_err(format!("expected {} target images, got {}", cfg.shots, shots.len())));
    }
    let start = Instant::now();
    let w = cfg.weights();
    let g_src = source.generator.clone_frozen();
    let source_hash_before = g_src.net.param_hash();
    let g_pool = if cfg.g_layers.is_empty() { g_src.tap_registry() } else { cfg.g_layers.clone() };
    let d_pool = if cfg.d_layers.is_empty() { source.discriminator.tap_registry() } else { cfg.d_layers.clone() };
    g_src.net.validate_taps(&g_pool)?;
    source.discriminator.trunk.validate_taps(&d_pool)?;
    for (pool, used, name) in [(&g_pool, w.l1 > 0.0 || w.cdc > 0.0, "generator"), (&d_pool, w.l2 > 0.0, "discriminator")] {
        if used && cfg.taps_per_iteration > pool.len() {
            return Err(config_err(format!(
                "{} taps per iteration exceed the {name} layer pool of {}",
                cfg.taps_per_iteration,
                pool.len()
            )));
        }
    }

    let d = freeze_discriminator_layers(source.discriminator.clone(), w.freeze)?;
    let ewc = if w.ewc > 0.0 {
        let z = LatentBatch::sample(&mut rng_stream(cfg.seed, 5), cfg.fisher_samples, source.model.z_dim);
        Some((g_src.net.flat_params(), estimate_fisher(&g_src, &d, &z)?))
    } else {
        None
    };
    let adam = || Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut t = Trainer {
        g: source.generator.clone(),
        d,
        g_src: Some(&g_src),
        opt_g: adam(),
        opt_trunk: adam(),
        opt_img: adam(),
        opt_patch: adam(),
        z_rng: rng_stream(cfg.seed, 1),
        tap_rng: rng_stream(cfg.seed, 2),
        real_rng: rng_stream(cfg.seed, 3),
        real: shots,
        w,
        batch: cfg.batch_size,
        taps: cfg.taps_per_iteration,
        tau: cfg.tau,
        negatives: cfg.negatives,
        reduction: cfg.reduction,
        patch_every: cfg.patch_every,
        g_pool,
        d_pool,
        ewc,
    };
    let hash = run_hash(cfg, &source.model);
    let proxy = proxy_latents(cfg.seed, cfg.proxy_size, source.model.z_dim);
    let probe_seed = cfg.seed ^ 0x1a7e;

    let mut series = MetricSeries::default();
    let (p0, i0) = probe(&t.g, source, &proxy, shots, cfg.pair_budget, probe_seed)?;
    series.push(MetricRow { iteration: 0, loss_adv: 0.0, loss_cl1: 0.0, loss_cl2: 0.0, loss_aux: 0.0, p_t: p0, intra_lpips: i0 })?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut d_losses = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    for it in 1..=cfg.iterations {
        let (dl, b) = t.iteration(it)?;
        d_losses.push(dl);
        losses.push(b);
        if it % cfg.probe_interval == 0 || it == cfg.iterations {
            let (p_t, intra) = probe(&t.g, source, &proxy, shots, cfg.pair_budget, probe_seed)?;
            series.push(MetricRow {
                iteration: it,
                loss_adv: b.adv,
                loss_cl1: b.cl1,
                loss_cl2: b.cl2,
                loss_aux: b.aux,
                p_t,
                intra_lpips: intra,
            })?;
            log::info!("{} it {it}: adv {:.4} cl1 {:.4} cl2 {:.4} aux {:.4} p_t {p_t:.4} intra {intra:.4}", cfg.method, b.adv, b.cl1, b.cl2, b.aux);
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != cfg.iterations {
            checkpoints.push((it, t.checkpoint(hash, it, cfg.method.name())));
        }
    }
    let final_checkpoint = t.checkpoint(hash, cfg.iterations, cfg.method.name());
    checkpoints.push((cfg.iterations, final_checkpoint.clone()));
    Ok(AdaptationRun {
        config: cfg.clone(),
        g_steps: t.opt_g.step,
        d_steps: t.opt_trunk.step.max(t.opt_img.step + t.opt_patch.step),
        generator: t.g,
        discriminator: t.d,
        series,
        losses,
        d_losses,
        checkpoints,
        final_checkpoint,
        source_hash_before,
        source_hash_after: g_src.net.param_hash(),
        wall_clock: start.elapsed(),
    })
}

/// Smallest source dataset accepted by [`pretrain`].
pub const MIN_PRETRAIN_IMAGES: usize = 1000;

/// Settings for source-domain pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Generated samples for the before/after Fréchet distances.
    pub eval_samples: usize,
    pub classifier: ClassifierTraining,
    pub feature_net: ClassifierTraining,
    pub classifier_held_out: f64,
    /// Minimum mean source-class probability of generated samples.
    pub min_source_realism: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            seed: 0,
            eval_samples: 1000,
            classifier: ClassifierTraining { epochs: 4, batch_size: 32, lr: 1e-3, seed: 1 },
            feature_net: ClassifierTraining { epochs: 6, batch_size: 32, lr: 1e-3, seed: 2 },
            classifier_held_out: 0.2,
            min_source_realism: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub frechet_before: f64,
    pub frechet_after: f64,
    pub classifier_accuracy: f64,
    /// Mean source-class probability of generated samples.
    pub source_realism: f64,
    pub realism_ok: bool,
    pub iterations: usize,
    pub seconds: f64,
}

impl PretrainReport {
    pub fn to_text(&self) -> String {
        format!(
            "frechet_before: {:.6}\nfrechet_after: {:.6}\nclassifier_accuracy: {:.6}\nsource_realism: {:.6}\nrealism_ok: {}\niterations: {}\nseconds: {:.1}\n",
            self.frechet_before,
            self.frechet_after,
            self.classifier_accuracy,
            self.source_realism,
            self.realism_ok,
            self.iterations,
            self.seconds
        )
    }
}

/// Trains the source GAN on the training split of `source`, the perceptual
/// feature net on its factor labels (random trunk when unlabeled) and the
/// realisticness classifier on the eval splits of both domains.
pub fn pretrain(
    cfg: &PretrainConfig,
    model: &ModelConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<(SourceModels, PretrainReport)> {
    model.validate()?;
    if cfg.batch_size == 0 {
        return Err(config_err("pretraining batch size must be positive"));
    }
    if source.images.len() < MIN_PRETRAIN_IMAGES {
        return Err(input_err(format!(
            "pretraining needs at least {MIN_PRETRAIN_IMAGES} source images, got {}",
            source.images.len()
        )));
    }
    let start = Instant::now();
    let train = source.split(Split::Train);
    let eval = source.split(Split::Eval);
    if train.is_empty() || eval.len() < 2 {
        return Err(input_err("source dataset needs training images and at least two eval images"));
    }
    let feat_net = match &train.factors {
        Some(f) => {
            let labels: Vec<usize> = f.iter().map(|x| x.label()).collect();
            train_feature_net(&train.images, &labels, 24, model, &cfg.feature_net)?
        }
        None => FeatureNet::random(model, &mut rng_stream(cfg.seed, 7)),
    };
    let mut init_rng = rng_stream(cfg.seed, 0);
    let g = GeneratorModel::new(model, &mut init_rng)?;
    let d = DiscriminatorModel::new(model, &mut init_rng)?;
    let eval_z = LatentBatch::sample(&mut rng_stream(cfg.seed, 6), cfg.eval_samples.max(2), model.z_dim);
    let frechet_before = frechet_feature_distance(&g.generate(&eval_z, 128)?, &eval.images, &feat_net)?;

    let adam = || Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut t = Trainer {
        g,
        d,
        g_src: None,
        opt_g: adam(),
        opt_trunk: adam(),
        opt_img: adam(),
        opt_patch: adam(),
        z_rng: rng_stream(cfg.seed, 1),
        tap_rng: rng_stream(cfg.seed, 2),
        real_rng: rng_stream(cfg.seed, 3),
        real: &train.images,
        w: Weights { l1: 0.0, l2: 0.0, ewc: 0.0, cdc: 0.0, freeze: 0 },
        batch: cfg.batch_size,
        taps: 1,
        tau: DEFAULT_TAU,
        negatives: NegativeSetup::SourceSide,
        reduction: FeatureReduction::Pool,
        patch_every: 0,
        g_pool: Vec::new(),
        d_pool: Vec::new(),
        ewc: None,
    };
    for it in 1..=cfg.iterations {
        let (dl, b) = t.iteration(it)?;
        if it % 500 == 0 {
            log::info!("pretrain it {it}: d {dl:.4} g {:.4}", b.adv);
        }
    }
    let (generator, discriminator) = (t.g, t.d);
    let generated = generator.generate(&eval_z, 128)?;
    let frechet_after = frechet_feature_distance(&generated, &eval.images, &feat_net)?;

    let target_eval = target.split(Split::Eval);
    let (classifier, crep) =
        train_binary_classifier(&eval.images, &target_eval.images, cfg.classifier_held_out, model, &cfg.classifier)?;
    let source_realism = 1.0 - classifier.predict(&generated, false)?.mean().unwrap_or(1.0);
    let report = PretrainReport {
        frechet_before,
        frechet_after,
        classifier_accuracy: crep.held_out_accuracy,
        source_realism,
        realism_ok: source_realism >= cfg.min_source_realism,
        iterations: cfg.iterations,
        seconds: start.elapsed().as_secs_f64(),
    };
    if !report.realism_ok {
        log::warn!("pretrained samples score {source_realism:.3} source realism, below {}", cfg.min_source_realism);
    }
    Ok((SourceModels { model: model.clone(), generator, discriminator, classifier, feat_net }, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let err = "gan".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("dcl") && err.contains("cdc"), "{err}");
    }

    #[test]
    fn tap_sampling() {
        let pool = [0, 2, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_tap_layers(&mut rng, &pool, 3).unwrap(), vec![0, 2, 5]);
        assert!(sample_tap_layers(&mut rng, &pool, 4).is_err());
        let a = sample_tap_layers(&mut ChaCha8Rng::seed_from_u64(9), &pool, 2).unwrap();
        let b = sample_tap_layers(&mut ChaCha8Rng::seed_from_u64(9), &pool, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metric_series_csv_round_trip_and_ordering() {
        let mut s = MetricSeries::default();
        let row = |i| MetricRow { iteration: i, loss_adv: 0.5, loss_cl1: 0.1, loss_cl2: 0.2, loss_aux: 0.0, p_t: 0.3, intra_lpips: 0.25 };
        s.push(row(0)).unwrap();
        s.push(row(50)).unwrap();
        assert!(s.push(row(50)).is_err());
        let csv = s.to_csv().unwrap();
        assert!(csv.starts_with(MetricSeries::HEADER));
        assert_eq!(MetricSeries::from_csv(&csv).unwrap(), s);
    }

    #[test]
    fn freeze_bounds() {
        let cfg = ModelConfig::default();
        let d = DiscriminatorModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let total = discriminator_layer_count(&d);
        assert!(freeze_discriminator_layers(d.clone(), total + 1).is_err());
        let all = freeze_discriminator_layers(d.clone(), total).unwrap();
        assert!(all.trunk.blocks.iter().chain(&all.image_head.blocks).all(|b| !b.trainable));
        let none = freeze_discriminator_layers(d.clone(), 0).unwrap();
        assert_eq!(none, d);
    }
}
