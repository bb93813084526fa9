//! Adversarial, reconstruction and distillation objectives.
//!
//! Every function returns its scalar value together with the gradient w.r.t.
//! the inputs it is differentiable in. Teacher outputs and teacher features are
//! always treated as constants; model-level losses that go through a frozen
//! network never touch that network's parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Discriminator, DiscriminatorTrace};
use crate::params::GradStore;
use crate::tensor::{Real, Tensor};

/// Which adversarial loss the discriminator logits feed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Sigmoid cross-entropy.
    #[default]
    Vanilla,
    /// Squared error against 0/1 targets.
    LeastSquares,
}

/// Trade-off weights of the teacher and student objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Supervised L1 weight in the image-translation objective.
    pub lambda_sup: f64,
    /// Perceptual weight inside the combined generator distillation loss.
    pub gamma_g: f64,
    /// Student generator: teacher-output L1.
    pub beta1: f64,
    /// Student generator: teacher-discriminator feature distance.
    pub gamma1: f64,
    /// Student discriminator: teacher outputs scored as real.
    pub beta2: f64,
    /// Student discriminator: triplet feature loss.
    pub gamma2: f64,
    /// Triplet margin.
    pub alpha_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sup: 1.0,
            gamma_g: 1.0,
            beta1: 1.0,
            gamma1: 1.0,
            beta2: 1.0,
            gamma2: 1.0,
            alpha_margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sup", self.lambda_sup),
            ("gamma_g", self.gamma_g),
            ("beta1", self.beta1),
            ("gamma1", self.gamma1),
            ("beta2", self.beta2),
            ("gamma2", self.gamma2),
            ("alpha_margin", self.alpha_margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// True when no distillation term is active.
    pub fn no_distillation(&self) -> bool {
        self.beta1 == 0.0 && self.gamma1 == 0.0 && self.beta2 == 0.0 && self.gamma2 == 0.0
    }
}

/// A scalar loss and its gradient w.r.t. one tensor input.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// A scalar loss and its gradient w.r.t. a model's parameters.
#[derive(Clone, Debug)]
pub struct ParamLoss<T> {
    pub value: T,
    pub grads: GradStore<T>,
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean adversarial loss of a logit grid against an all-`target` label grid.
pub fn adversarial_loss<T: Real>(logits: &Tensor<T>, target: bool, mode: GanMode) -> Result<LossGrad<T>> {
    check_finite(logits, "discriminator logits")?;
    if logits.is_empty() {
        return Err(Error::shape("empty logit grid".to_string()));
    }
    let inv_n = T::one() / T::from_f64(logits.len() as f64);
    let mut value = T::zero();
    let grad_data = logits
        .data()
        .iter()
        .map(|&x| match mode {
            GanMode::Vanilla => {
                if target {
                    value += softplus(-x);
                    (sigmoid(x) - T::one()) * inv_n
                } else {
                    value += softplus(x);
                    sigmoid(x) * inv_n
                }
            }
            GanMode::LeastSquares => {
                let t = if target { T::one() } else { T::zero() };
                value += (x - t) * (x - t);
                T::from_f64(2.0) * (x - t) * inv_n
            }
        })
        .collect();
    Ok(LossGrad {
        value: value * inv_n,
        grad: Tensor::from_vec(logits.shape(), grad_data)?,
    })
}

/// Discriminator side of the adversarial objective (not yet halved).
#[derive(Clone, Debug)]
pub struct DiscriminatorGanLoss<T> {
    pub value: T,
    pub grad_real: Tensor<T>,
    pub grad_fake: Tensor<T>,
}

/// `-E[log D(x,y)] - E[log(1 - D(x,G(x)))]` in logit form.
pub fn gan_loss_d<T: Real>(
    logits_real: &Tensor<T>,
    logits_fake: &Tensor<T>,
    mode: GanMode,
) -> Result<DiscriminatorGanLoss<T>> {
    logits_real.same_shape(logits_fake, "real vs fake logit grids")?;
    let real = adversarial_loss(logits_real, true, mode)?;
    let fake = adversarial_loss(logits_fake, false, mode)?;
    Ok(DiscriminatorGanLoss {
        value: real.value + fake.value,
        grad_real: real.grad,
        grad_fake: fake.grad,
    })
}

/// Generator side: fake logits scored against the true label.
pub fn gan_loss_g<T: Real>(logits_fake: &Tensor<T>, mode: GanMode) -> Result<LossGrad<T>> {
    adversarial_loss(logits_fake, true, mode)
}

/// Mean absolute difference over all elements; gradient w.r.t. `pred`.
pub fn mean_abs_diff<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<LossGrad<T>> {
    target.same_shape(pred, "l1 operands")?;
    if pred.is_empty() {
        return Err(Error::shape("empty l1 operands".to_string()));
    }
    let inv_n = T::one() / T::from_f64(pred.len() as f64);
    let mut value = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            value += d.abs();
            sign(d) * inv_n
        })
        .collect();
    Ok(LossGrad {
        value: value * inv_n,
        grad: Tensor::from_vec(pred.shape(), grad)?,
    })
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Supervised reconstruction term `E ||y - G(x)||_1`; gradient w.r.t. `g_x`.
pub fn supervised_l1<T: Real>(y: &Tensor<T>, g_x: &Tensor<T>) -> Result<LossGrad<T>> {
    mean_abs_diff(y, g_x)
}

/// Batch mean of per-sample L1 distances, optionally squared per sample.
///
/// Without squaring this equals the mean over all elements. The gradient is
/// w.r.t. `b`; `a` is a constant target.
pub fn sample_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>, square: bool) -> Result<LossGrad<T>> {
    if !square {
        return mean_abs_diff(a, b);
    }
    a.same_shape(b, "l1 operands")?;
    let n = b.batch();
    let m = b.sample_len();
    if n == 0 || m == 0 {
        return Err(Error::shape("empty l1 operands".to_string()));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let inv_m = T::one() / T::from_f64(m as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(b.len());
    for i in 0..n {
        let (ai, bi) = (a.sample(i), b.sample(i));
        let d = bi.iter().zip(ai).map(|(&p, &t)| (p - t).abs()).sum::<T>() * inv_m;
        value += d * d;
        let scale = T::from_f64(2.0) * d * inv_m * inv_n;
        grad.extend(bi.iter().zip(ai).map(|(&p, &t)| sign(p - t) * scale));
    }
    Ok(LossGrad {
        value: value * inv_n,
        grad: Tensor::from_vec(b.shape(), grad)?,
    })
}

/// Pixel-level distillation: L1 between teacher and student outputs.
pub fn kd_pixel_loss<T: Real>(z_t: &Tensor<T>, z_s: &Tensor<T>, square: bool) -> Result<LossGrad<T>> {
    sample_l1(z_t, z_s, square)
}

/// Feature-level distillation through the truncated teacher discriminator.
///
/// Gradient is w.r.t. `z_s`; the teacher discriminator is only read.
pub fn kd_perceptual_loss<T: Real>(
    d_t: &Discriminator<T>,
    x: &Tensor<T>,
    z_t: &Tensor<T>,
    z_s: &Tensor<T>,
    tap: usize,
    square: bool,
) -> Result<LossGrad<T>> {
    d_t.spec().check_tap(tap)?;
    z_t.same_shape(z_s, "teacher vs student outputs")?;
    let f_t = d_t.forward_features(x, z_t, tap)?;
    let trace_s = d_t.forward_to(&d_t.pair_input(x, z_s)?, tap)?;
    let dist = sample_l1(&f_t, trace_s.output(), square)?;
    let grad = image_grad(d_t, &trace_s, &[(tap, &dist.grad)], x.dims4().1);
    Ok(LossGrad {
        value: dist.value,
        grad,
    })
}

/// Gradient w.r.t. the image half of a discriminator input, leaving
/// the discriminator's parameters alone.
pub fn image_grad<T: Real>(
    d: &Discriminator<T>,
    trace: &DiscriminatorTrace<T>,
    injections: &[(usize, &Tensor<T>)],
    cond_channels: usize,
) -> Tensor<T> {
    let full = d
        .backward(trace, injections, None, true)
        .expect("input gradient requested");
    full.split_channels(cond_channels).1
}

/// Combined generator distillation: pixel term plus `gamma_g` times the
/// perceptual term.
#[allow(clippy::too_many_arguments)]
pub fn kd_generator_loss<T: Real>(
    weights: &LossWeights,
    z_t: &Tensor<T>,
    z_s: &Tensor<T>,
    d_t: &Discriminator<T>,
    x: &Tensor<T>,
    tap: usize,
    square: bool,
) -> Result<LossGrad<T>> {
    let mut out = kd_pixel_loss(z_t, z_s, square)?;
    if weights.gamma_g != 0.0 {
        let gamma = T::from_f64(weights.gamma_g);
        let perc = kd_perceptual_loss(d_t, x, z_t, z_s, tap, square)?;
        out.value += gamma * perc.value;
        out.grad.add_scaled(&perc.grad, gamma);
    }
    Ok(out)
}

/// Student discriminator scores teacher outputs against the true label.
/// Gradient reaches only the discriminator's parameters.
pub fn teacher_as_real_loss<T: Real>(
    d_s: &Discriminator<T>,
    x: &Tensor<T>,
    z_t: &Tensor<T>,
    mode: GanMode,
) -> Result<ParamLoss<T>> {
    let trace = d_s.forward(x, z_t)?;
    let loss = adversarial_loss(trace.output(), true, mode)?;
    let mut grads = d_s.params().zeros_like();
    d_s.backward(&trace, &[(trace.depth() - 1, &loss.grad)], Some(&mut grads), false);
    Ok(ParamLoss {
        value: loss.value,
        grads,
    })
}

/// Triplet hinge over per-sample feature distances, with gradients for the
/// anchor (real), positive (teacher) and negative (student) features.
#[derive(Clone, Debug)]
pub struct TripletGrad<T> {
    pub value: T,
    pub grad_anchor: Tensor<T>,
    pub grad_positive: Tensor<T>,
    pub grad_negative: Tensor<T>,
}

/// `mean_i max(0, d(f_y, f_t) - d(f_y, f_s) + alpha)` with `d` the per-sample
/// mean absolute difference.
pub fn triplet_from_features<T: Real>(
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negative: &Tensor<T>,
    alpha: f64,
) -> Result<TripletGrad<T>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::config("alpha_margin", format!("must be finite and non-negative, got {alpha}")));
    }
    anchor.same_shape(positive, "triplet anchor vs positive")?;
    anchor.same_shape(negative, "triplet anchor vs negative")?;
    let n = anchor.batch();
    let m = anchor.sample_len();
    if n == 0 || m == 0 {
        return Err(Error::shape("empty triplet features".to_string()));
    }
    let alpha = T::from_f64(alpha);
    let inv_n = T::one() / T::from_f64(n as f64);
    let inv_m = T::one() / T::from_f64(m as f64);
    let mut value = T::zero();
    let mut ga = Vec::with_capacity(anchor.len());
    let mut gp = Vec::with_capacity(anchor.len());
    let mut gn = Vec::with_capacity(anchor.len());
    for i in 0..n {
        let (a, p, q) = (anchor.sample(i), positive.sample(i), negative.sample(i));
        let d_pos = a.iter().zip(p).map(|(&u, &v)| (u - v).abs()).sum::<T>() * inv_m;
        let d_neg = a.iter().zip(q).map(|(&u, &v)| (u - v).abs()).sum::<T>() * inv_m;
        let hinge = d_pos - d_neg + alpha;
        if hinge > T::zero() {
            value += hinge;
            let s = inv_m * inv_n;
            for j in 0..m {
                let sp = sign(a[j] - p[j]) * s;
                let sn = sign(a[j] - q[j]) * s;
                ga.push(sp - sn);
                gp.push(-sp);
                gn.push(sn);
            }
        } else {
            ga.extend(std::iter::repeat_n(T::zero(), m));
            gp.extend(std::iter::repeat_n(T::zero(), m));
            gn.extend(std::iter::repeat_n(T::zero(), m));
        }
    }
    Ok(TripletGrad {
        value: value * inv_n,
        grad_anchor: Tensor::from_vec(anchor.shape(), ga)?,
        grad_positive: Tensor::from_vec(anchor.shape(), gp)?,
        grad_negative: Tensor::from_vec(anchor.shape(), gn)?,
    })
}

/// Triplet loss on truncated student-discriminator features of the real,
/// teacher and student images. Gradient reaches only the discriminator.
#[allow(clippy::too_many_arguments)]
pub fn triplet_feature_loss<T: Real>(
    d_s: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    z_t: &Tensor<T>,
    z_s: &Tensor<T>,
    alpha: f64,
    tap: usize,
) -> Result<ParamLoss<T>> {
    d_s.spec().check_tap(tap)?;
    let tr_y = d_s.forward_to(&d_s.pair_input(x, y)?, tap)?;
    let tr_t = d_s.forward_to(&d_s.pair_input(x, z_t)?, tap)?;
    let tr_s = d_s.forward_to(&d_s.pair_input(x, z_s)?, tap)?;
    let tri = triplet_from_features(tr_y.output(), tr_t.output(), tr_s.output(), alpha)?;
    let mut grads = d_s.params().zeros_like();
    d_s.backward(&tr_y, &[(tap, &tri.grad_anchor)], Some(&mut grads), false);
    d_s.backward(&tr_t, &[(tap, &tri.grad_positive)], Some(&mut grads), false);
    d_s.backward(&tr_s, &[(tap, &tri.grad_negative)], Some(&mut grads), false);
    Ok(ParamLoss {
        value: tri.value,
        grads,
    })
}

/// Batch tensors for one distillation step. `z_t` and `z_s` are constants to
/// every discriminator-side term.
pub struct StudentBatch<'a, T> {
    pub x: &'a Tensor<T>,
    pub y: &'a Tensor<T>,
    pub z_t: &'a Tensor<T>,
    pub z_s: &'a Tensor<T>,
}

/// Individual term values of the student objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentTerms {
    pub gan_g: f64,
    pub gan_d: f64,
    pub kd_pixel: f64,
    pub kd_perceptual: f64,
    pub teacher_as_real: f64,
    pub triplet: f64,
}

/// The student objective split by the network each part updates.
pub struct StudentObjective<T> {
    /// `gan_g + beta1 * kd_pixel + gamma1 * kd_perceptual`
    pub g_loss: T,
    /// `gan_d + beta2 * teacher_as_real + gamma2 * triplet`
    pub d_loss: T,
    pub terms: StudentTerms,
    /// Gradient of `g_loss` w.r.t. the student output.
    pub grad_z_s: Tensor<T>,
    /// Gradient of `d_loss` w.r.t. the student discriminator's parameters.
    pub d_grads: GradStore<T>,
}

/// Evaluates the full student objective. Terms whose weight is zero are
/// skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn student_total_objective<T: Real>(
    weights: &LossWeights,
    d_s: &Discriminator<T>,
    d_t: &Discriminator<T>,
    batch: &StudentBatch<'_, T>,
    tap_t: usize,
    tap_s: usize,
    mode: GanMode,
    square: bool,
) -> Result<StudentObjective<T>> {
    weights.validate()?;
    let cond = batch.x.dims4().1;
    let mut terms = StudentTerms::default();

    let tr_fake = d_s.forward(batch.x, batch.z_s)?;
    let last = tr_fake.depth() - 1;
    let gan_g = gan_loss_g(tr_fake.output(), mode)?;
    terms.gan_g = gan_g.value.as_f64();
    let mut g_loss = gan_g.value;
    let mut grad_z_s = image_grad(d_s, &tr_fake, &[(last, &gan_g.grad)], cond);
    if weights.beta1 != 0.0 {
        let b1 = T::from_f64(weights.beta1);
        let pix = kd_pixel_loss(batch.z_t, batch.z_s, square)?;
        terms.kd_pixel = pix.value.as_f64();
        g_loss += b1 * pix.value;
        grad_z_s.add_scaled(&pix.grad, b1);
    }
    if weights.gamma1 != 0.0 {
        let g1 = T::from_f64(weights.gamma1);
        let perc = kd_perceptual_loss(d_t, batch.x, batch.z_t, batch.z_s, tap_t, square)?;
        terms.kd_perceptual = perc.value.as_f64();
        g_loss += g1 * perc.value;
        grad_z_s.add_scaled(&perc.grad, g1);
    }

    let tr_real = d_s.forward(batch.x, batch.y)?;
    let gan_d = gan_loss_d(tr_real.output(), tr_fake.output(), mode)?;
    terms.gan_d = gan_d.value.as_f64();
    let mut d_loss = gan_d.value;
    let mut d_grads = d_s.params().zeros_like();
    d_s.backward(&tr_real, &[(last, &gan_d.grad_real)], Some(&mut d_grads), false);
    d_s.backward(&tr_fake, &[(last, &gan_d.grad_fake)], Some(&mut d_grads), false);
    if weights.beta2 != 0.0 {
        let b2 = T::from_f64(weights.beta2);
        let gt = teacher_as_real_loss(d_s, batch.x, batch.z_t, mode)?;
        terms.teacher_as_real = gt.value.as_f64();
        d_loss += b2 * gt.value;
        for (acc, g) in d_grads.tensors_mut().iter_mut().zip(gt.grads.tensors()) {
            acc.add_scaled(g, b2);
        }
    }
    if weights.gamma2 != 0.0 {
        let g2 = T::from_f64(weights.gamma2);
        let tri = triplet_feature_loss(d_s, batch.x, batch.y, batch.z_t, batch.z_s, weights.alpha_margin, tap_s)?;
        terms.triplet = tri.value.as_f64();
        d_loss += g2 * tri.value;
        for (acc, g) in d_grads.tensors_mut().iter_mut().zip(tri.grads.tensors()) {
            acc.add_scaled(g, g2);
        }
    }
    Ok(StudentObjective {
        g_loss,
        d_loss,
        terms,
        grad_z_s,
        d_grads,
    })
}
