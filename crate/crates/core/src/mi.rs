//! Numerical check that the generator contrastive loss lower-bounds the
//! mutual information of its paired inputs: MI ≥ log N − loss.
//!
//! Pairs are drawn i.i.d. from a toy joint with known MI, embedded by two
//! small MLP encoders (the critic) and scored with
//! [`generator_contrastive_loss`] exactly as in training.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::losses::{generator_contrastive_loss, DEFAULT_TAU};
use crate::nn::{Adam, Block, Layer, Network};

#[derive(Clone, Debug, PartialEq)]
pub enum JointKind {
    /// Joint probability table over (x, y) symbols.
    Table(Array2<f64>),
    /// `dim` independent pairs with correlation `rho`.
    Gaussian { rho: f64, dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyJointDistribution {
    pub name: String,
    pub kind: JointKind,
}

impl ToyJointDistribution {
    pub fn table(name: &str, table: Array2<f64>) -> Result<Self> {
        let j = Self { name: name.into(), kind: JointKind::Table(table) };
        j.validate()?;
        Ok(j)
    }

    /// Uniform marginals over `k` symbols, independent.
    pub fn independent(k: usize) -> Self {
        let p = 1.0 / (k * k) as f64;
        Self { name: format!("independent{k}"), kind: JointKind::Table(Array2::from_elem((k, k), p)) }
    }

    /// X = Y uniform over `k` symbols.
    pub fn deterministic(k: usize) -> Self {
        let mut t = Array2::zeros((k, k));
        for i in 0..k {
            t[[i, i]] = 1.0 / k as f64;
        }
        Self { name: format!("deterministic{k}"), kind: JointKind::Table(t) }
    }

    pub fn gaussian(rho: f64, dim: usize) -> Result<Self> {
        let j = Self { name: format!("gaussian{rho}"), kind: JointKind::Gaussian { rho, dim } };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            JointKind::Table(t) => {
                if t.is_empty() || t.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(input_err("probability table entries must be finite and non-negative"));
                }
                let total: f64 = t.sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(input_err(format!("probability table sums to {total}, not 1")));
                }
            }
            JointKind::Gaussian { rho, dim } => {
                if !(rho.abs() < 1.0) || *dim == 0 {
                    return Err(input_err("gaussian joint needs |rho| < 1 and dim >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Dimension of one encoded x (and y) sample.
    pub fn input_dims(&self) -> (usize, usize) {
        match &self.kind {
            JointKind::Table(t) => t.dim(),
            JointKind::Gaussian { dim, .. } => (*dim, *dim),
        }
    }

    /// `n` i.i.d. pairs; table symbols are one-hot encoded.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (Array2<f64>, Array2<f64>) {
        let (dx, dy) = self.input_dims();
        let mut x = Array2::zeros((n, dx));
        let mut y = Array2::zeros((n, dy));
        match &self.kind {
            JointKind::Table(t) => {
                let dist = WeightedIndex::new(t.iter().copied()).expect("validated table");
                for i in 0..n {
                    let k = dist.sample(rng);
                    x[[i, k / dy]] = 1.0;
                    y[[i, k % dy]] = 1.0;
                }
            }
            JointKind::Gaussian { rho, .. } => {
                let s = (1.0 - rho * rho).sqrt();
                for i in 0..n {
                    for d in 0..dx {
                        let a: f64 = rng.sample(StandardNormal);
                        let e: f64 = rng.sample(StandardNormal);
                        x[[i, d]] = a;
                        y[[i, d]] = rho * a + s * e;
                    }
                }
            }
        }
        (x, y)
    }
}

/// Mutual information in nats.
pub fn exact_mi(j: &ToyJointDistribution) -> Result<f64> {
    j.validate()?;
    Ok(match &j.kind {
        JointKind::Table(t) => {
            let px = t.sum_axis(ndarray::Axis(1));
            let py = t.sum_axis(ndarray::Axis(0));
            let mut mi = 0.0;
            for ((a, b), &p) in t.indexed_iter() {
                if p > 0.0 {
                    mi += p * (p / (px[a] * py[b])).ln();
                }
            }
            mi.max(0.0)
        }
        JointKind::Gaussian { rho, dim } => -0.5 * (1.0 - rho * rho).ln() * *dim as f64,
    })
}

/// Two MLP encoders whose outputs are compared by the temperature-cosine
/// head of the contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub enc_x: Network,
    pub enc_y: Network,
    pub tau: f64,
}

fn mlp<R: Rng + ?Sized>(rng: &mut R, prefix: &str, input: usize, hidden: usize, out: usize) -> Network {
    Network::new(vec![
        Block::new(format!("{prefix}.0"), vec![Layer::dense(rng, input, hidden), Layer::leaky_relu()]),
        Block::new(format!("{prefix}.1"), vec![Layer::dense(rng, hidden, out)]),
    ])
}

impl Critic {
    pub fn new(j: &ToyJointDistribution, hidden: usize, out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dx, dy) = j.input_dims();
        Self { enc_x: mlp(&mut rng, "x", dx, hidden, out), enc_y: mlp(&mut rng, "y", dy, hidden, out), tau: DEFAULT_TAU }
    }

    fn encode(net: &Network, v: &Array2<f64>, trace: bool) -> Result<crate::nn::Forward> {
        let (n, d) = v.dim();
        net.forward(&v.clone().into_shape_with_order((n, d, 1, 1)).expect("column input"), &[], trace)
    }

    fn flat(a: &Array4<f64>) -> Array2<f64> {
        let n = a.dim().0;
        a.clone().into_shape_with_order((n, a.len() / n)).expect("encoder output")
    }

    /// Contrastive loss of one batch.
    pub fn loss(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        let fx = Self::flat(&Self::encode(&self.enc_x, x, false)?.output);
        let fy = Self::flat(&Self::encode(&self.enc_y, y, false)?.output);
        Ok(generator_contrastive_loss(&fx, &fy, self.tau)?.value)
    }

    /// Minimizes the contrastive loss over `steps` fresh batches of size `n`.
    pub fn train(&mut self, j: &ToyJointDistribution, n: usize, steps: usize, lr: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut ox = Adam::new(lr, 0.9, 0.999);
        let mut oy = Adam::new(lr, 0.9, 0.999);
        for step in 0..steps {
            let (x, y) = j.sample(rng, n);
            let fx = Self::encode(&self.enc_x, &x, true)?;
            let fy = Self::encode(&self.enc_y, &y, true)?;
            let l = match generator_contrastive_loss(&Self::flat(&fx.output), &Self::flat(&fy.output), self.tau) {
                Ok(l) => l,
                // a collapsed encoder output has no direction; skip the batch
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            if !l.value.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: step, dump: "critic loss".into() });
            }
            let gx = l.grad_anchor.into_shape_with_order(fx.output.dim()).expect("grad shape");
            let gy = l.grad_positive.into_shape_with_order(fy.output.dim()).expect("grad shape");
            let (_, px) = self.enc_x.backward(fx.trace.as_ref().expect("trace"), Some(&gx), &BTreeMap::new(), true);
            let (_, py) = self.enc_y.backward(fy.trace.as_ref().expect("trace"), Some(&gy), &BTreeMap::new(), true);
            ox.apply(&mut self.enc_x, &px);
            oy.apply(&mut self.enc_y, &py);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundCheckConfig {
    pub trials: usize,
    pub train_steps: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub lr: f64,
    pub seed: u64,
    /// Alphabet size of the independent and deterministic joints.
    pub symbols: usize,
    /// Correlation and dimension of the Gaussian joint.
    pub rho: f64,
    pub gaussian_dim: usize,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self { trials: 200, train_steps: 1500, hidden: 64, out_dim: 16, lr: 3e-3, seed: 0, symbols: 16, rho: 0.9, gaussian_dim: 2 }
    }
}

impl BoundCheckConfig {
    /// Builds the named joint: `independent`, `deterministic` or `gaussian`.
    pub fn joint(&self, name: &str) -> Result<ToyJointDistribution> {
        match name {
            "independent" => Ok(ToyJointDistribution::independent(self.symbols)),
            "deterministic" => Ok(ToyJointDistribution::deterministic(self.symbols)),
            "gaussian" => ToyJointDistribution::gaussian(self.rho, self.gaussian_dim),
            other => Err(config_err(format!("unknown joint '{other}'; valid joints: independent, deterministic, gaussian"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub joint: String,
    pub batch_size: usize,
    pub trials: usize,
    pub mean_loss: f64,
    /// Standard error of the mean loss.
    pub std_error: f64,
    /// log N − mean loss.
    pub bound_value: f64,
    pub exact_mi: f64,
    /// Three standard errors.
    pub epsilon: f64,
    pub holds: bool,
    /// min(log N, MI) − bound value.
    pub gap: f64,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str =
        "joint,batch_size,trials,mean_loss,std_error,bound_value,exact_mi,epsilon,holds,gap";

    pub fn to_text(&self) -> String {
        format!(
            "joint: {}\nbatch_size: {}\ntrials: {}\nmean_loss: {:.6}\nstd_error: {:.6}\nbound_value: {:.6}\nexact_mi: {:.6}\nepsilon: {:.6}\nholds: {}\ngap: {:.6}\n",
            self.joint,
            self.batch_size,
            self.trials,
            self.mean_loss,
            self.std_error,
            self.bound_value,
            self.exact_mi,
            self.epsilon,
            self.holds,
            self.gap
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.joint,
            self.batch_size,
            self.trials,
            self.mean_loss,
            self.std_error,
            self.bound_value,
            self.exact_mi,
            self.epsilon,
            self.holds,
            self.gap
        )
    }
}

/// Scores `critic` on `trials` fresh batches and compares the implied bound
/// with the exact MI.
pub fn evaluate_bound(
    j: &ToyJointDistribution,
    n: usize,
    critic: &Critic,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BoundReport> {
    if n < 2 {
        return Err(config_err("bound check needs a batch of at least 2"));
    }
    if trials < 2 {
        return Err(config_err("bound check needs at least 2 trials"));
    }
    let mut losses = Vec::with_capacity(trials);
    while losses.len() < trials {
        let (x, y) = j.sample(rng, n);
        match critic.loss(&x, &y) {
            Ok(v) => losses.push(v),
            Err(Error::Degenerate(_)) => return Err(Error::Degenerate("critic produced a zero feature".into())),
            Err(e) => return Err(e),
        }
    }
    let t = trials as f64;
    let mean = losses.iter().sum::<f64>() / t;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (t - 1.0);
    let se = (var / t).sqrt();
    let mi = exact_mi(j)?;
    let bound = (n as f64).ln() - mean;
    let eps = 3.0 * se;
    Ok(BoundReport {
        joint: j.name.clone(),
        batch_size: n,
        trials,
        mean_loss: mean,
        std_error: se,
        bound_value: bound,
        exact_mi: mi,
        epsilon: eps,
        holds: bound <= mi + eps,
        gap: mi.min((n as f64).ln()) - bound,
    })
}

/// Trains a critic of the configured capacity, then evaluates the bound.
pub fn verify_bound(j: &ToyJointDistribution, n: usize, cfg: &BoundCheckConfig) -> Result<(BoundReport, Critic)> {
    let mut critic = Critic::new(j, cfg.hidden, cfg.out_dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb0b);
    critic.train(j, n, cfg.train_steps, cfg.lr, &mut rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    Ok((evaluate_bound(j, n, &critic, cfg.trials, &mut eval_rng)?, critic))
}

/// Critic sizes as (hidden width, embedding width), smallest first.
pub const CAPACITY_LEVELS: [(usize, usize); 3] = [(2, 1), (8, 4), (64, 16)];

/// Best bound value over `restarts` critic seeds at each capacity level.
pub fn capacity_sweep(
    j: &ToyJointDistribution,
    n: usize,
    levels: &[(usize, usize)],
    restarts: u64,
    cfg: &BoundCheckConfig,
) -> Result<Vec<BoundReport>> {
    levels
        .iter()
        .map(|&(hidden, out_dim)| {
            let mut best: Option<BoundReport> = None;
            for r in 0..restarts.max(1) {
                let c = BoundCheckConfig { hidden, out_dim, seed: cfg.seed + r, ..cfg.clone() };
                let (rep, _) = verify_bound(j, n, &c)?;
                if best.as_ref().is_none_or(|b| rep.bound_value > b.bound_value) {
                    best = Some(rep);
                }
            }
            Ok(best.expect("at least one restart"))
        })
        .collect()
}

/// Expected value of log(1 + C), C ~ Binomial(n − 1, 1/k): the floor that
/// repeated symbols put under the loss of any critic on the deterministic
/// k-symbol joint.
pub fn duplicate_floor(k: usize, n: usize) -> f64 {
    let p = 1.0 / k as f64;
    let m = n - 1;
    let mut binom = 1.0;
    let mut total = 0.0;
    for c in 0..=m {
        if c > 0 {
            binom *= (m - c + 1) as f64 / c as f64;
        }
        total += binom * p.powi(c as i32) * (1.0 - p).powi((m - c) as i32) * (1.0 + c as f64).ln();
    }
    total
}
