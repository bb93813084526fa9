//! Central finite-difference checks of every loss gradient, in f64.
//!
//! Piecewise-linear terms (absolute values, hinges, leaky ReLUs) are not
//! differentiable everywhere. A coordinate whose difference quotients at step
//! `h` and `h / 2` disagree has a kink within reach and is skipped; the
//! fraction of skipped coordinates is bounded so a wrong gradient cannot hide
//! behind the skip rule.

use kdgan::losses::{
    adversarial_loss, gan_loss_d, gan_loss_g, image_grad, kd_perceptual_loss, kd_pixel_loss, student_total_objective,
    supervised_l1, teacher_as_real_loss, triplet_feature_loss, triplet_from_features, GanMode, LossWeights,
    StudentBatch,
};
use kdgan::models::{Discriminator, Generator, Mode, Role};
use kdgan::params::ParamStore;
use kdgan::Tensor;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{rng, tiny_disc, tiny_gen, uniform};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates checked per gradient and trial.
const COORDS: usize = 60;
/// Smooth coordinates that must remain after kink skipping.
const MIN_CHECKED: usize = 20;
const MAX_SKIPPED: f64 = 0.5;
/// Largest relative disagreement between the two step sizes still treated as smooth.
const KINK_RATIO: f64 = 1e-5;
const WEIGHT_GAIN: f64 = 50.0;

#[derive(Clone, Copy, Debug, Default)]
pub struct Stats {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl Stats {
    fn merge(self, o: Stats) -> Stats {
        Stats {
            max_rel: self.max_rel.max(o.max_rel),
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
        }
    }
}

/// Compares `analytic` against central differences of `f(i, delta)`, the
/// loss with flat coordinate `i` shifted by `delta`.
fn compare(what: &str, analytic: &[f64], rng: &mut ChaCha8Rng, mut f: impl FnMut(usize, f64) -> f64) -> Result<Stats, String> {
    let n = analytic.len();
    let coords = sample(rng, n, COORDS.min(n)).into_vec();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut stats = Stats::default();
    for i in coords {
        let c1 = (f(i, STEP) - f(i, -STEP)) / (2.0 * STEP);
        let c2 = (f(i, STEP / 2.0) - f(i, -STEP / 2.0)) / STEP;
        if (c1 - c2).abs() > KINK_RATIO * c1.abs().max(c2.abs()).max(1e-3 * scale) {
            stats.skipped += 1;
            continue;
        }
        stats.checked += 1;
        diff2 += (analytic[i] - c1).powi(2);
        a2 += analytic[i].powi(2);
        n2 += c1.powi(2);
    }
    let total = stats.checked + stats.skipped;
    if stats.skipped as f64 > MAX_SKIPPED * total as f64 || stats.checked < MIN_CHECKED.min(n) {
        return Err(format!("{what}: {} of {total} coordinates sit on kinks", stats.skipped));
    }
    let denom = a2.sqrt().max(n2.sqrt());
    stats.max_rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    if stats.max_rel >= TOLERANCE {
        return Err(format!("{what}: relative error {:.3e}", stats.max_rel));
    }
    Ok(stats)
}

fn shifted(t: &Tensor<f64>, i: usize, d: f64) -> Tensor<f64> {
    let mut out = t.clone();
    out.data_mut()[i] += d;
    out
}

fn flat(store: &ParamStore<f64>) -> Vec<f64> {
    store.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn locate(store: &ParamStore<f64>, mut i: usize) -> (usize, usize) {
    for (k, t) in store.tensors().iter().enumerate() {
        if i < t.len() {
            return (k, i);
        }
        i -= t.len();
    }
    panic!("flat index beyond parameter count");
}

fn shifted_disc(d: &Discriminator<f64>, i: usize, delta: f64) -> Discriminator<f64> {
    let mut out = d.clone();
    let (k, j) = locate(d.params(), i);
    out.params_mut().tensors_mut()[k].data_mut()[j] += delta;
    out
}

struct Fixture {
    rng: ChaCha8Rng,
    x: Tensor<f64>,
    y: Tensor<f64>,
    z_t: Tensor<f64>,
    z_s: Tensor<f64>,
    d_s: Discriminator<f64>,
    d_t: Discriminator<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = rng(seed);
    let x = uniform(&mut rng, &[2, 2, 8, 8], -1.0, 1.0);
    let y = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let z_t = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let z_s = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    // Unit-scale weights: at the default 0.02 a step of 1e-3 is a 5% change of
    // a weight and curvature swamps the difference quotient.
    let mut d_s = Discriminator::<f64>::build(&tiny_disc(), Role::StudentDiscriminator, seed ^ 0x5).unwrap();
    let mut d_t = Discriminator::<f64>::build(&tiny_disc(), Role::TeacherDiscriminator, seed ^ 0x7).unwrap();
    for d in [&mut d_s, &mut d_t] {
        for t in d.params_mut().tensors_mut() {
            t.scale(WEIGHT_GAIN);
        }
    }
    Fixture {
        rng,
        x,
        y,
        z_t,
        z_s,
        d_s,
        d_t,
    }
}

/// Adversarial objective: logit gradients of both sides, the generator-side
/// image gradient through a discriminator, and discriminator parameter gradients.
pub fn gan(seed: u64) -> Result<Stats, String> {
    let mut fx = fixture(seed);
    let mut stats = Stats::default();
    for mode in [GanMode::Vanilla, GanMode::LeastSquares] {
        let real = uniform::<f64>(&mut fx.rng, &[2, 1, 3, 3], -3.0, 3.0);
        let fake = uniform::<f64>(&mut fx.rng, &[2, 1, 3, 3], -3.0, 3.0);
        let l = gan_loss_d(&real, &fake, mode).map_err(|e| e.to_string())?;
        stats = stats.merge(compare("gan_d/real", l.grad_real.data(), &mut fx.rng, |i, d| {
            gan_loss_d(&shifted(&real, i, d), &fake, mode).unwrap().value
        })?);
        stats = stats.merge(compare("gan_d/fake", l.grad_fake.data(), &mut fx.rng, |i, d| {
            gan_loss_d(&real, &shifted(&fake, i, d), mode).unwrap().value
        })?);
        let g = gan_loss_g(&fake, mode).map_err(|e| e.to_string())?;
        stats = stats.merge(compare("gan_g/logits", g.grad.data(), &mut fx.rng, |i, d| {
            gan_loss_g(&shifted(&fake, i, d), mode).unwrap().value
        })?);
    }

    let d = &fx.d_s;
    let tr = d.forward(&fx.x, &fx.z_s).map_err(|e| e.to_string())?;
    let g = gan_loss_g(tr.output(), GanMode::Vanilla).map_err(|e| e.to_string())?;
    let last = tr.depth() - 1;
    let grad = image_grad(d, &tr, &[(last, &g.grad)], 2);
    stats = stats.merge(compare("gan_g/image", grad.data(), &mut fx.rng, |i, delta| {
        gan_loss_g(&d.logits(&fx.x, &shifted(&fx.z_s, i, delta)).unwrap(), GanMode::Vanilla)
            .unwrap()
            .value
    })?);

    let d_value = |d: &Discriminator<f64>| {
        let r = d.logits(&fx.x, &fx.y).unwrap();
        let f = d.logits(&fx.x, &fx.z_s).unwrap();
        gan_loss_d(&r, &f, GanMode::Vanilla).unwrap().value
    };
    let tr_r = d.forward(&fx.x, &fx.y).map_err(|e| e.to_string())?;
    let tr_f = d.forward(&fx.x, &fx.z_s).map_err(|e| e.to_string())?;
    let l = gan_loss_d(tr_r.output(), tr_f.output(), GanMode::Vanilla).map_err(|e| e.to_string())?;
    let mut grads = d.params().zeros_like();
    d.backward(&tr_r, &[(last, &l.grad_real)], Some(&mut grads), false);
    d.backward(&tr_f, &[(last, &l.grad_fake)], Some(&mut grads), false);
    stats = stats.merge(compare("gan_d/params", &flat(&grads), &mut fx.rng, |i, delta| {
        d_value(&shifted_disc(d, i, delta))
    })?);
    Ok(stats)
}

/// Supervised L1: gradient w.r.t. the output and, through a small U-Net, w.r.t.
/// generator parameters.
pub fn supervised(seed: u64) -> Result<Stats, String> {
    let mut fx = fixture(seed);
    let l = supervised_l1(&fx.y, &fx.z_s).map_err(|e| e.to_string())?;
    let mut stats = compare("l1/output", l.grad.data(), &mut fx.rng, |i, d| {
        supervised_l1(&fx.y, &shifted(&fx.z_s, i, d)).unwrap().value
    })?;

    let mut g = Generator::<f64>::build(&tiny_gen(), Role::StudentGenerator, seed).unwrap();
    for t in g.params_mut().tensors_mut() {
        t.scale(WEIGHT_GAIN);
    }
    let (out, trace) = g.forward(&fx.x, Mode::Eval).map_err(|e| e.to_string())?;
    let l = supervised_l1(&fx.y, &out).map_err(|e| e.to_string())?;
    let mut grads = g.params().zeros_like();
    g.backward(&trace, &l.grad, Some(&mut grads), false);
    stats = stats.merge(compare("l1/generator", &flat(&grads), &mut fx.rng, |i, delta| {
        let mut gg = g.clone();
        let (k, j) = locate(g.params(), i);
        gg.params_mut().tensors_mut()[k].data_mut()[j] += delta;
        supervised_l1(&fx.y, &gg.generate(&fx.x).unwrap()).unwrap().value
    })?);
    Ok(stats)
}

pub fn kd_pixel(seed: u64) -> Result<Stats, String> {
    let mut fx = fixture(seed);
    let mut stats = Stats::default();
    for square in [false, true] {
        let l = kd_pixel_loss(&fx.z_t, &fx.z_s, square).map_err(|e| e.to_string())?;
        stats = stats.merge(compare("kd_pixel", l.grad.data(), &mut fx.rng, |i, d| {
            kd_pixel_loss(&fx.z_t, &shifted(&fx.z_s, i, d), square).unwrap().value
        })?);
    }
    Ok(stats)
}

pub fn kd_perceptual(seed: u64) -> Result<Stats, String> {
    let mut fx = fixture(seed);
    let mut stats = Stats::default();
    for (tap, square) in [(1, false), (0, false), (1, true)] {
        let l = kd_perceptual_loss(&fx.d_t, &fx.x, &fx.z_t, &fx.z_s, tap, square).map_err(|e| e.to_string())?;
        stats = stats.merge(compare("kd_perceptual", l.grad.data(), &mut fx.rng, |i, d| {
            kd_perceptual_loss(&fx.d_t, &fx.x, &fx.z_t, &shifted(&fx.z_s, i, d), tap, square)
                .unwrap()
                .value
        })?);
    }
    Ok(stats)
}

pub fn teacher_as_real(seed: u64) -> Result<Stats, String> {
    let mut fx = fixture(seed);
    let l = teacher_as_real_loss(&fx.d_s, &fx.x, &fx.z_t, GanMode::Vanilla).map_err(|e| e.to_string())?;
    compare("teacher_as_real", &flat(&l.grads), &mut fx.rng, |i, d| {
        let dd = shifted_disc(&fx.d_s, i, d);
        adversarial_loss(&dd.logits(&fx.x, &fx.z_t).unwrap(), true, GanMode::Vanilla)
            .unwrap()
            .value
    })
}

pub fn triplet(seed: u64) -> Result<Stats, String> {
    let mut fx = fixture(seed);
    // Feature-level gradients with a margin large enough to keep the hinge active.
    let a = uniform::<f64>(&mut fx.rng, &[2, 4, 3, 3], -1.0, 1.0);
    let p = uniform::<f64>(&mut fx.rng, &[2, 4, 3, 3], -1.0, 1.0);
    let q = uniform::<f64>(&mut fx.rng, &[2, 4, 3, 3], -1.0, 1.0);
    let t = triplet_from_features(&a, &p, &q, 2.0).map_err(|e| e.to_string())?;
    let mut stats = compare("triplet/anchor", t.grad_anchor.data(), &mut fx.rng, |i, d| {
        triplet_from_features(&shifted(&a, i, d), &p, &q, 2.0).unwrap().value
    })?;
    stats = stats.merge(compare("triplet/positive", t.grad_positive.data(), &mut fx.rng, |i, d| {
        triplet_from_features(&a, &shifted(&p, i, d), &q, 2.0).unwrap().value
    })?);
    stats = stats.merge(compare("triplet/negative", t.grad_negative.data(), &mut fx.rng, |i, d| {
        triplet_from_features(&a, &p, &shifted(&q, i, d), 2.0).unwrap().value
    })?);

    let (x, y, z_t, z_s) = (&fx.x, &fx.y, &fx.z_t, &fx.z_s);
    let l = triplet_feature_loss(&fx.d_s, x, y, z_t, z_s, 5.0, 1).map_err(|e| e.to_string())?;
    stats = stats.merge(compare("triplet/params", &flat(&l.grads), &mut fx.rng, |i, d| {
        let dd = shifted_disc(&fx.d_s, i, d);
        let f = |img: &Tensor<f64>| dd.forward_features(x, img, 1).unwrap();
        triplet_from_features(&f(y), &f(z_t), &f(z_s), 5.0).unwrap().value
    })?);
    Ok(stats)
}

/// The full student objective: generator side w.r.t. the student output,
/// discriminator side w.r.t. student discriminator parameters.
pub fn total(seed: u64) -> Result<Stats, String> {
    let mut fx = fixture(seed);
    let weights = LossWeights {
        lambda_sup: 1.0,
        gamma_g: 1.0,
        beta1: 0.7,
        gamma1: 1.3,
        beta2: 0.9,
        gamma2: 1.1,
        alpha_margin: 4.0,
    };
    let objective = |d_s: &Discriminator<f64>, z_s: &Tensor<f64>| {
        let batch = StudentBatch {
            x: &fx.x,
            y: &fx.y,
            z_t: &fx.z_t,
            z_s,
        };
        student_total_objective(&weights, d_s, &fx.d_t, &batch, 1, 1, GanMode::Vanilla, false).unwrap()
    };
    let base = objective(&fx.d_s, &fx.z_s);
    let mut stats = compare("total/g", base.grad_z_s.data(), &mut fx.rng, |i, d| {
        objective(&fx.d_s, &shifted(&fx.z_s, i, d)).g_loss
    })?;
    stats = stats.merge(compare("total/d", &flat(&base.d_grads), &mut fx.rng, |i, d| {
        objective(&shifted_disc(&fx.d_s, i, d), &fx.z_s).d_loss
    })?);
    Ok(stats)
}

pub type LossCheck = fn(u64) -> Result<Stats, String>;

/// Every checked loss, by the name printed in reports.
pub const LOSSES: [(&str, LossCheck); 7] = [
    ("gan", gan),
    ("supervised_l1", supervised),
    ("kd_pixel", kd_pixel),
    ("kd_perceptual", kd_perceptual),
    ("teacher_as_real", teacher_as_real),
    ("triplet", triplet),
    ("total", total),
];

pub const TRIALS: u64 = 20;

/// Runs `TRIALS` randomized trials of one loss.
pub fn run_trials(check: LossCheck) -> Result<Stats, String> {
    let mut stats = Stats::default();
    for t in 0..TRIALS {
        stats = stats.merge(check(1000 + t).map_err(|e| format!("trial {t}: {e}"))?);
    }
    Ok(stats)
}
