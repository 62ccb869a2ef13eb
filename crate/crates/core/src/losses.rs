//! Training objectives.
//!
//! Every loss returns its value together with the gradient with respect to
//! its inputs, so the adaptation engine can push them back through the
//! networks. Features are (N, C) matrices of spatially pooled activations;
//! all similarity terms use `exp(cos(u, v) / tau)`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.07;
/// Default weight of the generator-feature contrastive term.
pub const DEFAULT_LAMBDA1: f64 = 2.0;
/// Default weight of the discriminator-feature contrastive term.
pub const DEFAULT_LAMBDA2: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Adversarial loss with gradients w.r.t. the real and fake logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLoss {
    pub value: f64,
    pub grad_real: Array1<f64>,
    pub grad_fake: Array1<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    crate::models::sigmoid(x)
}

/// Binary cross-entropy GAN loss on raw logits (image or patch logits
/// flattened).
///
/// Discriminator side: `0.5 * (mean softplus(-real) + mean softplus(fake))`,
/// i.e. the mean BCE of real->1 and fake->0 over both halves. Generator side:
/// the non-saturating `mean softplus(-fake)`; `real` is ignored and may be
/// empty.
pub fn adversarial_loss(real: ArrayView1<f64>, fake: ArrayView1<f64>, side: Side) -> Result<AdversarialLoss> {
    if fake.is_empty() || (side == Side::Discriminator && real.is_empty()) {
        return Err(input_err("adversarial loss on an empty batch"));
    }
    if !real.iter().chain(fake.iter()).all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite logits".into()));
    }
    let nf = fake.len() as f64;
    Ok(match side {
        Side::Generator => AdversarialLoss {
            value: fake.iter().map(|&f| softplus(-f)).sum::<f64>() / nf,
            grad_real: Array1::zeros(real.len()),
            grad_fake: fake.mapv(|f| -sigmoid(-f) / nf),
        },
        Side::Discriminator => {
            let nr = real.len() as f64;
            let lr = real.iter().map(|&r| softplus(-r)).sum::<f64>() / nr;
            let lf = fake.iter().map(|&f| softplus(f)).sum::<f64>() / nf;
            AdversarialLoss {
                value: 0.5 * (lr + lf),
                grad_real: real.mapv(|r| -0.5 * sigmoid(-r) / nr),
                grad_fake: fake.mapv(|f| 0.5 * sigmoid(f) / nf),
            }
        }
    })
}

/// `exp(cos(u, v) / tau)`.
pub fn temperature_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(config_err(format!("temperature must be positive, got {tau}")));
    }
    if u.len() != v.len() {
        return Err(input_err("feature length mismatch"));
    }
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("zero-norm feature vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv) / tau).exp())
}

/// Row-normalized copy plus the original row norms.
fn normalize_rows(x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|n| *n == 0.0 || !n.is_finite()) {
        return Err(Error::Degenerate("zero-norm feature row".into()));
    }
    let mut out = x.clone();
    for (mut row, n) in out.outer_iter_mut().zip(norms.iter()) {
        row /= *n;
    }
    Ok((out, norms))
}

/// Adds `coef * d cos(a_i, b_j) / d a_i` into `grad_a[i]` and the symmetric
/// term into `grad_b[j]`.
#[allow(clippy::too_many_arguments)]
fn push_cos_grad(
    coef: f64,
    ah: &Array2<f64>,
    an: &Array1<f64>,
    i: usize,
    bh: &Array2<f64>,
    bn: &Array1<f64>,
    j: usize,
    grad_a: &mut Array2<f64>,
    grad_b: &mut Array2<f64>,
) {
    let cos = ah.row(i).dot(&bh.row(j));
    let (ai, bj) = (ah.row(i), bh.row(j));
    {
        let mut ga = grad_a.row_mut(i);
        ga.scaled_add(coef / an[i], &bj);
        ga.scaled_add(-coef * cos / an[i], &ai);
    }
    let mut gb = grad_b.row_mut(j);
    gb.scaled_add(coef / bn[j], &ai);
    gb.scaled_add(-coef * cos / bn[j], &bj);
}

/// Contrastive loss value with gradients for each input role. When one
/// tensor plays two roles its gradients are merged into the first role and
/// `grad_negative` is left empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub grad_anchor: Array2<f64>,
    pub grad_positive: Array2<f64>,
    pub grad_negative: Array2<f64>,
}

/// Where the in-batch negatives of the generator-feature loss come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSetup {
    /// Negatives are the source features of the other latents.
    SourceSide,
    /// Negatives are the target features of the other latents.
    TargetSide,
}

/// Generic InfoNCE over cosine logits. Anchor `i` is scored against its
/// positive `positives[i]` and against every row of `negatives` (skipping
/// row `i` when `skip_self`). Loss is averaged over anchors.
fn info_nce(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    skip_self: bool,
    tau: f64,
) -> Result<ContrastiveLoss> {
    if tau <= 0.0 {
        return Err(config_err(format!("temperature must be positive, got {tau}")));
    }
    let n = anchors.nrows();
    if n == 0 {
        return Err(input_err("contrastive loss needs at least one anchor"));
    }
    if positives.dim() != anchors.dim() || negatives.ncols() != anchors.ncols() {
        return Err(input_err(format!(
            "feature shape mismatch: anchors {:?}, positives {:?}, negatives {:?}",
            anchors.dim(),
            positives.dim(),
            negatives.dim()
        )));
    }
    let (ah, an) = normalize_rows(anchors)?;
    let (ph, pn) = normalize_rows(positives)?;
    let (nh, nn) = if negatives.nrows() > 0 {
        normalize_rows(negatives)?
    } else {
        (negatives.clone(), Array1::zeros(0))
    };
    let mut ga = Array2::zeros(anchors.dim());
    let mut gp = Array2::zeros(positives.dim());
    let mut gn = Array2::zeros(negatives.dim());
    let mut ga_from_neg = Array2::zeros(anchors.dim());
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let pos = ah.row(i).dot(&ph.row(i)) / tau;
        let negs: Vec<(usize, f64)> = (0..nh.nrows())
            .filter(|&j| !(skip_self && j == i))
            .map(|j| (j, ah.row(i).dot(&nh.row(j)) / tau))
            .collect();
        let max = negs.iter().map(|(_, l)| *l).fold(pos, f64::max);
        let denom = (pos - max).exp() + negs.iter().map(|(_, l)| (l - max).exp()).sum::<f64>();
        let lse = max + denom.ln();
        total += lse - pos;
        // d loss_i / d logit = softmax - onehot(pos)
        let p_pos = (pos - lse).exp();
        push_cos_grad((p_pos - 1.0) * inv_n / tau, &ah, &an, i, &ph, &pn, i, &mut ga, &mut gp);
        for (j, l) in negs {
            let p = (l - lse).exp();
            push_cos_grad(p * inv_n / tau, &ah, &an, i, &nh, &nn, j, &mut ga_from_neg, &mut gn);
        }
    }
    Ok(ContrastiveLoss { value: total * inv_n, grad_anchor: ga + ga_from_neg, grad_positive: gp, grad_negative: gn })
}

/// Generator-feature contrastive loss: for each anchor `target[i]` an N-way
/// cross-entropy picking `source[i]` among all `source[j]` (the positive is
/// part of the denominator). `grad_positive` is the full gradient w.r.t.
/// `source`.
pub fn generator_contrastive_loss(target: &Array2<f64>, source: &Array2<f64>, tau: f64) -> Result<ContrastiveLoss> {
    let mut l = info_nce(target, source, source, true, tau)?;
    // positives and negatives are the same tensor here
    l.grad_positive += &l.grad_negative;
    l.grad_negative = Array2::zeros((0, source.ncols()));
    Ok(l)
}

/// Generator-feature contrastive loss with selectable negatives. With
/// [`NegativeSetup::TargetSide`] the negatives are `target[j != i]` and
/// `grad_anchor` is the full gradient w.r.t. `target`.
pub fn generator_contrastive_loss_with(
    target: &Array2<f64>,
    source: &Array2<f64>,
    tau: f64,
    setup: NegativeSetup,
) -> Result<ContrastiveLoss> {
    match setup {
        NegativeSetup::SourceSide => generator_contrastive_loss(target, source, tau),
        NegativeSetup::TargetSide => {
            let mut l = info_nce(target, source, target, true, tau)?;
            l.grad_anchor += &l.grad_negative;
            l.grad_negative = Array2::zeros((0, target.ncols()));
            Ok(l)
        }
    }
}

/// Discriminator-feature contrastive loss: anchor `fake_target[i]`, positive
/// `fake_source[i]`, negatives every real target row.
pub fn discriminator_contrastive_loss(
    fake_target: &Array2<f64>,
    fake_source: &Array2<f64>,
    real_target: &Array2<f64>,
    tau: f64,
) -> Result<ContrastiveLoss> {
    if real_target.nrows() == 0 {
        return Err(config_err("discriminator contrastive loss needs at least one real target sample"));
    }
    info_nce(fake_target, fake_source, real_target, false, tau)
}

/// Per-iteration loss record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv: f64,
    pub cl1: f64,
    pub cl2: f64,
    pub aux: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.adv, self.cl1, self.cl2, self.aux, self.total].iter().all(|v| v.is_finite())
    }
}

/// `adv + lambda1 * cl1 + lambda2 * cl2`.
pub fn dcl_objective(adv: f64, cl1: f64, cl2: f64, lambda1: f64, lambda2: f64) -> Result<LossBundle> {
    with_aux(adv, cl1, cl2, 0.0, lambda1, lambda2)
}

/// [`dcl_objective`] plus an already-weighted baseline regularizer.
pub fn with_aux(adv: f64, cl1: f64, cl2: f64, aux: f64, lambda1: f64, lambda2: f64) -> Result<LossBundle> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(config_err(format!("loss weights must be non-negative, got {lambda1}, {lambda2}")));
    }
    let b = LossBundle { adv, cl1, cl2, aux, total: adv + lambda1 * cl1 + lambda2 * cl2 + aux, lambda1, lambda2 };
    if !b.is_finite() {
        return Err(Error::Degenerate(format!("non-finite loss component: {b:?}")));
    }
    Ok(b)
}

/// Cross-domain distance-consistency loss: KL divergence between the
/// softmax over cosine similarities of each source row to the other source
/// rows and the same distribution in the target batch, averaged over
/// anchors. Returns the value and the gradient w.r.t. `target`.
pub fn cdc_distance_loss(target: &Array2<f64>, source: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = target.nrows();
    if n < 2 {
        return Err(input_err("distance-consistency loss needs at least two samples"));
    }
    if target.dim() != source.dim() {
        return Err(input_err("feature shape mismatch"));
    }
    let (th, tn) = normalize_rows(target)?;
    let (sh, _) = normalize_rows(source)?;
    let mut grad = Array2::zeros(target.dim());
    let mut grad_other = Array2::zeros(target.dim());
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let ps = softmax(&others.iter().map(|&j| sh.row(i).dot(&sh.row(j))).collect::<Vec<_>>());
        let pt = softmax(&others.iter().map(|&j| th.row(i).dot(&th.row(j))).collect::<Vec<_>>());
        total += ps.iter().zip(&pt).map(|(s, t)| s * (s.ln() - t.ln())).sum::<f64>();
        for (k, &j) in others.iter().enumerate() {
            push_cos_grad((pt[k] - ps[k]) * inv_n, &th, &tn, i, &th, &tn, j, &mut grad, &mut grad_other);
        }
    }
    Ok((total * inv_n, grad + grad_other))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Weighted squared drift `lambda * sum_i F_i (t_i - s_i)^2` and its gradient
/// w.r.t. `current`.
pub fn ewc_penalty(current: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if current.len() != anchor.len() || current.len() != fisher.len() {
        return Err(input_err(format!(
            "parameter length mismatch: {} / {} / {}",
            current.len(),
            anchor.len(),
            fisher.len()
        )));
    }
    let mut value = 0.0;
    let grad = current
        .iter()
        .zip(anchor)
        .zip(fisher)
        .map(|((t, s), f)| {
            let d = t - s;
            value += f * d * d;
            2.0 * lambda * f * d
        })
        .collect();
    Ok((lambda * value, grad))
}
