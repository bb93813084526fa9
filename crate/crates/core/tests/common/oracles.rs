//! Worked examples with hand-computed or brute-force expected values.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use kdgan::config::ExperimentConfig;
use kdgan::data::{
    batch_iterator, dequantize, generate_sample, one_hot_encode, Dataset, DatasetSpec, Texture, PALETTE,
};
use kdgan::eval::{
    compare_runs, fit_segmenter, sample_bound, score_real, ConfusionMatrix, MetricsRecord, ReferenceSegmenter,
    RunMeta, SegmenterReport, SegmenterTrainConfig, SEGMENTER_GATE,
};
use kdgan::losses::{
    adversarial_loss, gan_loss_d, gan_loss_g, kd_generator_loss, kd_perceptual_loss, kd_pixel_loss,
    student_total_objective, supervised_l1, teacher_as_real_loss, triplet_feature_loss, GanMode, LossWeights,
    StudentBatch,
};
use kdgan::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Mode, Role};
use kdgan::optim::{Adam, AdamConfig};
use kdgan::params::ParamStore;
use kdgan::trainer::{update_step, ModelSet, Target};
use kdgan::{Error, Tensor};
use rand::Rng;

use super::{close, rng, tiny_disc, tiny_gen, uniform, Check};
use crate::ensure;

fn err(e: Error) -> String {
    e.to_string()
}

fn t64(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, v).unwrap()
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

// ---------------------------------------------------------------- models

pub fn full_scale_parameter_counts() -> Check {
    for (width, millions) in [(64, 54.41), (32, 13.61), (16, 3.4)] {
        let p = GeneratorSpec::full_scale(width).param_count() as f64 / 1e6;
        ensure!(within(p, millions, 0.05), "width {width}: {p:.3}M vs {millions}M");
    }
    Ok(())
}

pub fn width_doubling_quadruples_parameters() -> Check {
    let count = |spec: &GeneratorSpec| spec.param_count();
    let ratio = count(&GeneratorSpec::full_scale(64)) as f64 / count(&GeneratorSpec::full_scale(32)) as f64;
    ensure!(within(ratio, 4.0, 0.10), "full-scale ratio {ratio}");
    let desk = ExperimentConfig::desk();
    let ratio = count(&desk.teacher) as f64 / count(&desk.student) as f64;
    ensure!(within(ratio, 4.0, 0.10), "desk ratio {ratio}");
    ensure!(ParamStore::<f32>::new().numel() == 0, "empty store is not empty");
    Ok(())
}

pub fn flop_ratios() -> Check {
    let flops = |w| GeneratorSpec::full_scale(w).flops(256, 256).unwrap() as f64;
    let (t, h, q) = (flops(64), flops(32), flops(16));
    ensure!(within(t / h, 18.15 / 4.65, 0.15), "teacher/half {:.3}", t / h);
    ensure!(within(t / q, 18.15 / 1.22, 0.15), "teacher/quarter {:.3}", t / q);
    Ok(())
}

pub fn doubling_input_quadruples_flops() -> Check {
    let cfg = ExperimentConfig::desk();
    let g = Generator::<f32>::build(&cfg.teacher, Role::TeacherGenerator, 0).map_err(err)?;
    let r = g.count_flops(96, 96).map_err(err)? as f64 / g.count_flops(48, 48).map_err(err)? as f64;
    ensure!(within(r, 4.0, 0.01), "generator ratio {r}");
    ensure!(g.count_flops(50, 48).is_err(), "incompatible shape accepted");
    Ok(())
}

pub fn full_scale_patch_grid() -> Check {
    // Independent arithmetic: three stride-2 and two stride-1 convolutions,
    // kernel 4, padding 1.
    let mut side = 256usize;
    let mut layers = vec![(4usize, 2usize, 1usize); 3];
    layers.extend([(4, 1, 1), (4, 1, 1)]);
    for &(k, s, p) in &layers {
        side = (side + 2 * p - k) / s + 1;
    }
    let mut rf = 1usize;
    for &(k, s, _) in layers.iter().rev() {
        rf = (rf - 1) * s + k;
    }
    ensure!(side == 30 && rf == 70, "oracle itself gives {side} / {rf}");
    let d = Discriminator::<f32>::build(&DiscriminatorSpec::full_scale(), Role::TeacherDiscriminator, 0).map_err(err)?;
    ensure!(d.output_hw(256, 256).map_err(err)? == (30, 30), "grid {:?}", d.output_hw(256, 256));
    ensure!(d.spec().receptive_field() == 70, "receptive field {}", d.spec().receptive_field());
    Ok(())
}

pub fn batch_shapes_and_seeded_builds() -> Check {
    let mut r = rng(1);
    let d = Discriminator::<f64>::build(&tiny_disc(), Role::StudentDiscriminator, 9).map_err(err)?;
    let x = uniform::<f64>(&mut r, &[3, 2, 8, 8], -1.0, 1.0);
    let z = uniform::<f64>(&mut r, &[3, 3, 8, 8], -1.0, 1.0);
    let logits = d.logits(&x, &z).map_err(err)?;
    ensure!(logits.shape() == [3, 1, 2, 2], "logit shape {:?}", logits.shape());
    let again = Discriminator::<f64>::build(&tiny_disc(), Role::StudentDiscriminator, 9).map_err(err)?;
    ensure!(again.params() == d.params(), "same seed, different discriminator");
    let g1 = Generator::<f32>::build(&tiny_gen(), Role::StudentGenerator, 4).map_err(err)?;
    let g2 = Generator::<f32>::build(&tiny_gen(), Role::StudentGenerator, 4).map_err(err)?;
    ensure!(g1.params() == g2.params(), "same seed, different generator");
    let g3 = Generator::<f32>::build(&tiny_gen(), Role::StudentGenerator, 5).map_err(err)?;
    ensure!(g1.params() != g3.params(), "different seeds, same generator");
    Ok(())
}

pub fn feature_taps() -> Check {
    let mut r = rng(2);
    let d = Discriminator::<f64>::build(&tiny_disc(), Role::StudentDiscriminator, 3).map_err(err)?;
    let x = uniform::<f64>(&mut r, &[2, 2, 8, 8], -1.0, 1.0);
    let z = uniform::<f64>(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let last = d.spec().block_count() - 1;
    let logits = d.logits(&x, &z).map_err(err)?;
    ensure!(d.forward_features(&x, &z, last).map_err(err)? == logits, "last tap differs from logits");
    let pen = d.forward_features(&x, &z, d.spec().default_tap()).map_err(err)?;
    let head = d.head(&pen).map_err(err)?;
    for (a, b) in head.data().iter().zip(logits.data()) {
        ensure!(close(*a, *b, 1e-6), "tap + head {a} vs logits {b}");
    }
    let f1 = d.forward_features(&x, &z, 1).map_err(err)?;
    let f2 = d.forward_features(&x, &z, 1).map_err(err)?;
    let l = kd_pixel_loss(&f1, &f2, false).map_err(err)?;
    ensure!(f1 == f2 && l.value == 0.0, "identical inputs give different features");
    ensure!(
        matches!(d.forward_features(&x, &z, last + 1), Err(Error::Config { .. })),
        "tap beyond the last block accepted"
    );
    Ok(())
}

/// One block of 1x1 convolutions on a 2x2 input: stride 2 keeps pixel (0, 0).
fn toy_disc(weight: &[f64], bias: &[f64]) -> Discriminator<f64> {
    let spec = DiscriminatorSpec {
        in_channels: 4,
        base_width: 3,
        num_layers: 1,
        feature_tap: 0,
        kernel_size: 1,
    };
    let mut d = Discriminator::<f64>::build(&spec, Role::TeacherDiscriminator, 0).unwrap();
    let w = d.params().index_of("block0.weight").unwrap();
    let b = d.params().index_of("block0.bias").unwrap();
    d.params_mut().get_mut(w).data_mut().copy_from_slice(weight);
    d.params_mut().get_mut(b).data_mut().copy_from_slice(bias);
    d
}

/// Weights that copy image channel `o` into feature `o` and ignore the condition.
fn identity_toy() -> Discriminator<f64> {
    let mut w = vec![0.0; 12];
    for o in 0..3 {
        w[o * 4 + 1 + o] = 1.0;
    }
    toy_disc(&w, &[0.0; 3])
}

pub fn toy_discriminator_features() -> Check {
    let w: Vec<f64> = vec![0.5, -1.0, 2.0, 0.25, 1.5, 0.0, -0.5, 1.0, -2.0, 0.75, 0.5, -0.25];
    let b = [0.1, -0.2, 0.3];
    let d = toy_disc(&w, &b);
    // condition channel then three image channels, 2x2 each; only (0, 0) is sampled.
    let x = t64(&[1, 1, 2, 2], vec![0.8, 9.0, 9.0, 9.0]);
    let z = t64(&[1, 3, 2, 2], vec![0.2, 9.0, 9.0, 9.0, -0.4, 9.0, 9.0, 9.0, 0.6, 9.0, 9.0, 9.0]);
    let v = [0.8, 0.2, -0.4, 0.6];
    let f = d.forward_features(&x, &z, 0).map_err(err)?;
    ensure!(f.shape() == [1, 3, 1, 1], "feature shape {:?}", f.shape());
    for o in 0..3 {
        let pre: f64 = (0..4).map(|c| w[o * 4 + c] * v[c]).sum::<f64>() + b[o];
        let want = if pre > 0.0 { pre } else { 0.2 * pre };
        ensure!(close(f.data()[o], want, 1e-12), "feature {o}: {} vs {want}", f.data()[o]);
    }
    Ok(())
}

pub fn width_monotonicity_and_output_range() -> Check {
    let mut prev = 0;
    for w in 1..=6 {
        let spec = GeneratorSpec {
            base_width: w,
            ..tiny_gen()
        };
        let p = Generator::<f32>::build(&spec, Role::StudentGenerator, 0).map_err(err)?.count_params();
        ensure!(p > prev, "width {w}: {p} params not above {prev}");
        prev = p;
    }
    let mut r = rng(3);
    let mut g = Generator::<f64>::build(&tiny_gen(), Role::StudentGenerator, 1).map_err(err)?;
    for t in g.params_mut().tensors_mut() {
        t.scale(100.0);
    }
    let x = uniform::<f64>(&mut r, &[2, 2, 8, 8], -100.0, 100.0);
    let out = g.generate(&x).map_err(err)?;
    ensure!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)), "output leaves [-1, 1]");
    Ok(())
}

pub fn forward_determinism() -> Check {
    let mut r = rng(4);
    let spec = GeneratorSpec {
        use_dropout: true,
        depth: 4,
        in_channels: 2,
        ..tiny_gen()
    };
    let g = Generator::<f32>::build(&spec, Role::StudentGenerator, 2).map_err(err)?;
    let x = uniform::<f32>(&mut r, &[2, 2, 16, 16], -1.0, 1.0);
    let run = |seed| {
        let mut dropout = rng(seed);
        g.forward(&x, Mode::Train(&mut dropout)).unwrap().0
    };
    ensure!(run(7) == run(7), "same dropout state, different outputs");
    ensure!(g.generate(&x).map_err(err)? == g.generate(&x).map_err(err)?, "eval pass not deterministic");
    let before = g.count_params();
    let _ = run(8);
    ensure!(g.count_params() == before, "forward changed the parameter count");
    Ok(())
}

pub fn invalid_specs() -> Check {
    let field = |r: kdgan::Result<()>| match r {
        Err(Error::Config { field, .. }) => field,
        other => format!("{other:?}"),
    };
    let bad = GeneratorSpec { depth: 0, ..tiny_gen() };
    ensure!(field(bad.validate()) == "depth", "depth 0: {}", field(bad.validate()));
    let bad = GeneratorSpec {
        base_width: 0,
        ..tiny_gen()
    };
    ensure!(field(bad.validate()) == "base_width", "width 0");
    let d = Discriminator::<f32>::build(&tiny_disc(), Role::StudentDiscriminator, 0).map_err(err)?;
    let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
    let z = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
    ensure!(matches!(d.logits(&x, &z), Err(Error::Shape(_))), "channel mismatch accepted");
    let mut spec = tiny_disc();
    spec.feature_tap = 3;
    ensure!(field(spec.validate()) == "feature_tap", "tap out of range");
    Ok(())
}

pub fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let g = Generator::<f32>::build(&tiny_gen(), Role::StudentGenerator, 11).map_err(err)?;
    let path = dir.path().join("g.ckpt");
    g.save(&path, serde_json::json!({})).map_err(err)?;
    let back = Generator::load(&path).map_err(err)?;
    ensure!(back.params() == g.params() && back.spec() == g.spec(), "checkpoint changed the generator");
    let d = Discriminator::<f32>::build(&tiny_disc(), Role::StudentDiscriminator, 12).map_err(err)?;
    let path = dir.path().join("d.ckpt");
    d.save(&path, serde_json::json!({})).map_err(err)?;
    let back = Discriminator::load(&path).map_err(err)?;
    ensure!(back.params() == d.params(), "checkpoint changed the discriminator");
    Ok(())
}

// ---------------------------------------------------------------- losses

fn bce_oracle(logit: f64, target: bool) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn gan_loss_examples() -> Check {
    let zeros = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
    let ln2 = std::f64::consts::LN_2;
    let d = gan_loss_d(&zeros, &zeros, GanMode::Vanilla).map_err(err)?;
    ensure!(close(d.value, 2.0 * ln2, 1e-12), "gan_d at zero: {}", d.value);
    let g = gan_loss_g(&zeros, GanMode::Vanilla).map_err(err)?;
    ensure!(close(g.value, ln2, 1e-12), "gan_g at zero: {}", g.value);
    let mut r = rng(5);
    for _ in 0..10 {
        let real = uniform::<f64>(&mut r, &[1, 1, 2, 2], -4.0, 4.0);
        let fake = uniform::<f64>(&mut r, &[1, 1, 2, 2], -4.0, 4.0);
        let want: f64 = real
            .data()
            .iter()
            .zip(fake.data())
            .map(|(&a, &b)| bce_oracle(a, true) + bce_oracle(b, false))
            .sum::<f64>()
            / 4.0;
        let got = gan_loss_d(&real, &fake, GanMode::Vanilla).map_err(err)?.value;
        ensure!(close(got, want, 1e-12), "random grid: {got} vs {want}");
    }
    Ok(())
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn l1_examples() -> Check {
    let mut r = rng(6);
    let y = uniform::<f64>(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
    ensure!(supervised_l1(&y, &y).map_err(err)?.value == 0.0, "l1(y, y) != 0");
    let plus = Tensor::full(&[2, 3, 4, 4], 1.0f64);
    let minus = Tensor::full(&[2, 3, 4, 4], -1.0f64);
    ensure!(supervised_l1(&plus, &minus).map_err(err)?.value == 2.0, "extremes");
    let g = uniform::<f64>(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
    let got = supervised_l1(&y, &g).map_err(err)?.value;
    ensure!(close(got, mean_abs(y.data(), g.data()), 1e-6), "random pair");

    ensure!(kd_pixel_loss(&y, &y, false).map_err(err)?.value == 0.0, "kd_pixel(z, z) != 0");
    let shifted = y.map(|v| v + 0.5);
    ensure!(close(kd_pixel_loss(&y, &shifted, false).map_err(err)?.value, 0.5, 1e-12), "constant offset");
    let got = kd_pixel_loss(&y, &g, false).map_err(err)?.value;
    ensure!(close(got, mean_abs(y.data(), g.data()), 1e-6), "kd_pixel random pair");
    Ok(())
}

pub fn kd_perceptual_examples() -> Check {
    let mut r = rng(7);
    let d = identity_toy();
    let x = uniform::<f64>(&mut r, &[2, 1, 2, 2], -1.0, 1.0);
    let z_t = uniform::<f64>(&mut r, &[2, 3, 2, 2], 0.05, 1.0);
    let z_s = uniform::<f64>(&mut r, &[2, 3, 2, 2], 0.05, 1.0);
    ensure!(kd_perceptual_loss(&d, &x, &z_t, &z_t, 0, false).map_err(err)?.value == 0.0, "z_s = z_t");
    // Positive images pass the leaky unit unchanged, so features are the
    // images at pixel (0, 0).
    let pick = |z: &Tensor<f64>| -> Vec<f64> { (0..6).map(|i| z.data()[i * 4]).collect() };
    let want = mean_abs(&pick(&z_t), &pick(&z_s));
    let got = kd_perceptual_loss(&d, &x, &z_t, &z_s, 0, false).map_err(err)?.value;
    ensure!(close(got, want, 1e-12), "toy teacher: {got} vs {want}");
    let pix = kd_pixel_loss(
        &t64(&[2, 3, 1, 1], pick(&z_t)),
        &t64(&[2, 3, 1, 1], pick(&z_s)),
        false,
    )
    .map_err(err)?
    .value;
    ensure!(close(got, pix, 1e-12), "does not reduce to kd_pixel: {got} vs {pix}");
    Ok(())
}

pub fn kd_generator_examples() -> Check {
    let mut r = rng(8);
    let d = Discriminator::<f64>::build(&tiny_disc(), Role::TeacherDiscriminator, 1).map_err(err)?;
    let x = uniform::<f64>(&mut r, &[2, 2, 8, 8], -1.0, 1.0);
    let z_t = uniform::<f64>(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let z_s = uniform::<f64>(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let weights = |gamma_g| LossWeights {
        gamma_g,
        ..LossWeights::default()
    };
    let a = kd_pixel_loss(&z_t, &z_s, false).map_err(err)?.value;
    let b = kd_perceptual_loss(&d, &x, &z_t, &z_s, 1, false).map_err(err)?.value;
    let zero = kd_generator_loss(&weights(0.0), &z_t, &z_s, &d, &x, 1, false).map_err(err)?.value;
    ensure!(zero == a, "gamma 0: {zero} vs {a}");
    let same = kd_generator_loss(&weights(3.0), &z_t, &z_t, &d, &x, 1, false).map_err(err)?.value;
    ensure!(same == 0.0, "z_s = z_t gives {same}");
    let two = kd_generator_loss(&weights(2.0), &z_t, &z_s, &d, &x, 1, false).map_err(err)?.value;
    ensure!(close(two, a + 2.0 * b, 1e-7), "gamma 2: {two} vs {}", a + 2.0 * b);
    Ok(())
}

pub fn teacher_as_real_examples() -> Check {
    let mut r = rng(9);
    let x = uniform::<f64>(&mut r, &[2, 2, 8, 8], -1.0, 1.0);
    let z_t = uniform::<f64>(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let mut d = Discriminator::<f64>::build(&tiny_disc(), Role::StudentDiscriminator, 1).map_err(err)?;
    let original = d.clone();
    for t in d.params_mut().tensors_mut() {
        t.scale(0.0);
    }
    let l = teacher_as_real_loss(&d, &x, &z_t, GanMode::Vanilla).map_err(err)?;
    ensure!(close(l.value, std::f64::consts::LN_2, 1e-12), "zero logits: {}", l.value);
    let last = d.spec().block_count() - 1;
    let bias = d.params().index_of(&format!("block{last}.bias")).unwrap();
    d.params_mut().get_mut(bias).data_mut()[0] = 20.0;
    let l = teacher_as_real_loss(&d, &x, &z_t, GanMode::Vanilla).map_err(err)?;
    ensure!(l.value >= 0.0 && l.value < 1e-8, "saturated logits: {}", l.value);

    let logits = original.logits(&x, &z_t).map_err(err)?;
    let want = logits.data().iter().map(|&v| bce_oracle(v, true)).sum::<f64>() / logits.len() as f64;
    let got = teacher_as_real_loss(&original, &x, &z_t, GanMode::Vanilla).map_err(err)?.value;
    ensure!(close(got, want, 1e-12), "random grid: {got} vs {want}");
    let grid = uniform::<f64>(&mut r, &[2, 1, 3, 3], -5.0, 5.0);
    let want = grid.data().iter().map(|&v| bce_oracle(v, true)).sum::<f64>() / 18.0;
    ensure!(close(adversarial_loss(&grid, true, GanMode::Vanilla).map_err(err)?.value, want, 1e-12), "grid oracle");
    Ok(())
}

pub fn triplet_examples() -> Check {
    let d = identity_toy();
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let img = |v: f64| Tensor::full(&[1, 3, 2, 2], v);
    let tri = |y: f64, t: f64, s: f64| {
        triplet_feature_loss(&d, &x, &img(y), &img(t), &img(s), 0.5, 0).map(|l| l.value)
    };
    ensure!(tri(0.3, 0.3, 0.3).map_err(err)? == 0.5, "identical features must give alpha");
    let near_teacher = tri(0.2, 0.3, 1.1).map_err(err)?;
    ensure!(close(near_teacher, 0.0, 1e-12), "0.1 vs 0.9: {near_teacher}");
    let near_student = tri(0.2, 1.1, 0.3).map_err(err)?;
    ensure!(close(near_student, 1.3, 1e-12), "0.9 vs 0.1: {near_student}");
    ensure!(
        matches!(triplet_feature_loss(&d, &x, &img(0.1), &img(0.1), &img(0.1), -1.0, 0), Err(Error::Config { .. })),
        "negative margin accepted"
    );
    Ok(())
}

pub fn student_objective_examples() -> Check {
    let mut r = rng(10);
    let d_s = Discriminator::<f64>::build(&tiny_disc(), Role::StudentDiscriminator, 2).map_err(err)?;
    let d_t = Discriminator::<f64>::build(&tiny_disc(), Role::TeacherDiscriminator, 3).map_err(err)?;
    let x = uniform::<f64>(&mut r, &[2, 2, 8, 8], -1.0, 1.0);
    let y = uniform::<f64>(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let z_t = uniform::<f64>(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let z_s = uniform::<f64>(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let batch = StudentBatch {
        x: &x,
        y: &y,
        z_t: &z_t,
        z_s: &z_s,
    };
    let mode = GanMode::Vanilla;
    let a = gan_loss_g(&d_s.logits(&x, &z_s).map_err(err)?, mode).map_err(err)?.value;
    let b = kd_pixel_loss(&z_t, &z_s, false).map_err(err)?.value;
    let c = kd_perceptual_loss(&d_t, &x, &z_t, &z_s, 1, false).map_err(err)?.value;
    let dv = gan_loss_d(
        &d_s.logits(&x, &y).map_err(err)?,
        &d_s.logits(&x, &z_s).map_err(err)?,
        mode,
    )
    .map_err(err)?
    .value;
    let e = teacher_as_real_loss(&d_s, &x, &z_t, mode).map_err(err)?.value;
    let f = triplet_feature_loss(&d_s, &x, &y, &z_t, &z_s, 1.0, 1).map_err(err)?.value;

    let zero = LossWeights {
        beta1: 0.0,
        gamma1: 0.0,
        beta2: 0.0,
        gamma2: 0.0,
        ..LossWeights::default()
    };
    let o = student_total_objective(&zero, &d_s, &d_t, &batch, 1, 1, mode, false).map_err(err)?;
    ensure!(o.g_loss == a && o.d_loss == dv, "zero weights: ({}, {}) vs ({a}, {dv})", o.g_loss, o.d_loss);

    let ones = LossWeights::default();
    let o = student_total_objective(&ones, &d_s, &d_t, &batch, 1, 1, mode, false).map_err(err)?;
    ensure!(close(o.g_loss, a + b + c, 1e-12), "g_loss {} vs {}", o.g_loss, a + b + c);
    ensure!(close(o.d_loss, dv + e + f, 1e-12), "d_loss {} vs {}", o.d_loss, dv + e + f);

    let same = StudentBatch { z_s: &z_t, ..batch };
    let o = student_total_objective(&ones, &d_s, &d_t, &same, 1, 1, mode, false).map_err(err)?;
    ensure!(o.g_loss == o.terms.gan_g, "z_s = z_t leaves distillation terms: {:?}", o.terms);

    // With gamma_g = gamma1 / beta1 the combined distillation loss scaled by
    // beta1 is the generator-side distillation part of the total objective.
    let w = LossWeights {
        beta1: 0.8,
        gamma1: 1.4,
        gamma_g: 1.4 / 0.8,
        ..LossWeights::default()
    };
    let kd = kd_generator_loss(&w, &z_t, &z_s, &d_t, &x, 1, false).map_err(err)?.value;
    let o = student_total_objective(&w, &d_s, &d_t, &batch, 1, 1, mode, false).map_err(err)?;
    let part = o.g_loss - o.terms.gan_g;
    ensure!(close(kd * 0.8, part, 1e-7), "consistency: {} vs {part}", kd * 0.8);
    Ok(())
}

// ---------------------------------------------------------------- optimizer and updates

pub fn adam_examples() -> Check {
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut p = ParamStore::<f64>::new();
    p.push("w", Tensor::zeros(&[1]));
    let mut adam = Adam::new(cfg, &p);
    // loss (w - 3)^2; hand-iterated moments.
    let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let g = 2.0 * (w - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        let mut grads = p.zeros_like();
        grads.get_mut(0).data_mut()[0] = 2.0 * (p.get(0).data()[0] - 3.0);
        adam.update(&mut p, &grads).map_err(err)?;
        ensure!(close(p.get(0).data()[0], w, 1e-12), "step {t}: {} vs {w}", p.get(0).data()[0]);
        if t == 1 {
            ensure!(close(w, 0.1, 1e-8), "first step {w}");
        }
    }
    let mut q = ParamStore::<f64>::new();
    q.push("w", Tensor::full(&[3], 1.25));
    let before = q.clone();
    let mut adam = Adam::new(AdamConfig::default(), &q);
    adam.update(&mut q, &before.zeros_like()).map_err(err)?;
    ensure!(q == before, "zero gradient moved parameters");
    Ok(())
}

pub fn update_isolation() -> Check {
    let g = Generator::<f32>::build(&tiny_gen(), Role::StudentGenerator, 1).map_err(err)?;
    let d = Discriminator::<f32>::build(&tiny_disc(), Role::StudentDiscriminator, 2).map_err(err)?;
    let teacher = kdgan::trainer::Teacher {
        generator: Generator::build(&tiny_gen(), Role::TeacherGenerator, 3).map_err(err)?,
        discriminator: Discriminator::build(&tiny_disc(), Role::TeacherDiscriminator, 4).map_err(err)?,
    };
    let mut set = ModelSet {
        opt_g: Adam::new(AdamConfig::default(), g.params()),
        opt_d: Adam::new(AdamConfig::default(), d.params()),
        generator: g,
        discriminator: d,
        teacher: Some(teacher),
    };
    let ones = |p: &ParamStore<f32>| {
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        g
    };
    let snapshot = |s: &ModelSet| {
        let t = s.teacher.as_ref().unwrap();
        [
            s.generator.params().digest(),
            s.discriminator.params().digest(),
            t.generator.params().digest(),
            t.discriminator.params().digest(),
        ]
    };
    let before = snapshot(&set);
    let gg = ones(set.generator.params());
    update_step(&mut set, &gg, Target::Generator).map_err(err)?;
    let after_g = snapshot(&set);
    ensure!(after_g[0] != before[0], "generator update did nothing");
    ensure!(after_g[1..] == before[1..], "generator update touched another model");
    let dg = ones(set.discriminator.params());
    update_step(&mut set, &dg, Target::Discriminator).map_err(err)?;
    let after_d = snapshot(&set);
    ensure!(after_d[1] != after_g[1], "discriminator update did nothing");
    ensure!(after_d[0] == after_g[0] && after_d[2..] == after_g[2..], "discriminator update touched another model");
    for target in [Target::TeacherGenerator, Target::TeacherDiscriminator] {
        ensure!(
            matches!(update_step(&mut set, &gg, target), Err(Error::Invariant(_))),
            "update of frozen {target:?} accepted"
        );
    }
    ensure!(snapshot(&set) == after_d, "refused update still changed parameters");
    Ok(())
}

// ---------------------------------------------------------------- data

fn tiny_dataset(texture: Texture, n_train: usize) -> DatasetSpec {
    DatasetSpec {
        n_train,
        n_val: 8,
        n_test: 8,
        texture,
        ..DatasetSpec::default()
    }
}

pub fn dataset_determinism() -> Check {
    let spec = tiny_dataset(Texture::Textured, 32);
    let a = Dataset::generate(&spec).map_err(err)?;
    let b = Dataset::generate(&spec).map_err(err)?;
    ensure!(a == b, "two generations differ");
    ensure!(a.content_hash().map_err(err)? == b.content_hash().map_err(err)?, "hashes differ");
    let other = Dataset::generate(&DatasetSpec { seed: 1, ..spec }).map_err(err)?;
    ensure!(other.train != a.train, "seed has no effect");
    Ok(())
}

pub fn flat_palette_oracle() -> Check {
    let spec = tiny_dataset(Texture::Flat, 64);
    let ds = Dataset::generate(&spec).map_err(err)?;
    let plane = spec.image_size * spec.image_size;
    let mut l1 = 0.0f64;
    for s in ds.train.samples.iter().chain(&ds.val.samples) {
        for (p, &c) in s.label_map.iter().enumerate() {
            for ch in 0..3 {
                let painted = dequantize(PALETTE[c as usize][ch]) as f64;
                l1 += (painted - dequantize(s.photo[ch * plane + p]) as f64).abs();
            }
        }
    }
    ensure!(l1 == 0.0, "palette painting misses by {l1}");
    Ok(())
}

pub fn class_histogram() -> Check {
    let spec = DatasetSpec::default();
    let mut with_background = 0;
    let mut seen = BTreeSet::new();
    for id in 0..spec.n_train as u32 {
        let s = generate_sample(&spec, id);
        let classes: BTreeSet<u8> = s.label_map.iter().copied().collect();
        ensure!(classes.iter().all(|&c| (c as usize) < spec.n_classes), "label out of range");
        if classes.contains(&0) {
            with_background += 1;
        }
        seen.extend(classes);
    }
    let frac = with_background as f64 / spec.n_train as f64;
    ensure!(frac >= 0.9, "background in only {frac:.3} of images");
    ensure!(seen.len() == spec.n_classes, "classes seen: {seen:?}");
    Ok(())
}

pub fn region_means_approximate_photos() -> Check {
    for texture in [Texture::Flat, Texture::Noisy, Texture::Textured] {
        let spec = tiny_dataset(texture, 32);
        let plane = spec.image_size * spec.image_size;
        let bound = texture.amplitude_bound();
        for id in 0..32 {
            let s = generate_sample(&spec, id);
            let photo = s.photo_real();
            let mut sums = vec![[0.0f64; 3]; spec.n_classes];
            let mut counts = vec![0usize; spec.n_classes];
            for (p, &c) in s.label_map.iter().enumerate() {
                counts[c as usize] += 1;
                for ch in 0..3 {
                    sums[c as usize][ch] += photo[ch * plane + p] as f64;
                }
            }
            let mut err_sum = 0.0;
            for (p, &c) in s.label_map.iter().enumerate() {
                for ch in 0..3 {
                    let mean = sums[c as usize][ch] / counts[c as usize] as f64;
                    err_sum += (mean - photo[ch * plane + p] as f64).abs();
                }
            }
            let l1 = err_sum / (3 * plane) as f64;
            ensure!(l1 <= bound + 1e-9, "{texture:?} sample {id}: {l1} above {bound}");
        }
    }
    Ok(())
}

pub fn one_hot_examples() -> Check {
    let map = vec![0u8; 16];
    let single = one_hot_encode(&map, 1).map_err(err)?;
    ensure!(single.iter().all(|&v| v == 1.0), "K = 1 is not all ones");
    let mut r = rng(11);
    for _ in 0..100 {
        let k = r.random_range(1..=8usize);
        let map: Vec<u8> = (0..36).map(|_| r.random_range(0..k) as u8).collect();
        let enc = one_hot_encode(&map, k).map_err(err)?;
        for (p, &label) in map.iter().enumerate() {
            let column: Vec<f32> = (0..k).map(|c| enc[c * map.len() + p]).collect();
            let sum: f32 = column.iter().map(|v| (v + 1.0) / 2.0).sum();
            ensure!(sum == 1.0, "channel sum {sum}");
            let arg = column
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            ensure!(arg == label as usize, "argmax {arg} vs {label}");
        }
    }
    ensure!(matches!(one_hot_encode(&[3], 3), Err(Error::Data(_))), "label K accepted");
    Ok(())
}

pub fn batch_order_examples() -> Check {
    let a: Vec<Vec<usize>> = batch_iterator(37, 5, 3).map_err(err)?.collect();
    let b: Vec<Vec<usize>> = batch_iterator(37, 5, 3).map_err(err)?.collect();
    ensure!(a == b, "same seed, different order");
    ensure!(a.len() == 7 && a.iter().all(|x| x.len() == 5), "partial batch kept");
    let union: BTreeSet<usize> = a.iter().flatten().copied().collect();
    ensure!(union.len() == 35 && union.iter().all(|&i| i < 37), "union is not the split minus remainder");
    for seed in 0..20u64 {
        let p: Vec<usize> = batch_iterator(16, 16, seed).map_err(err)?.flatten().collect();
        let q: Vec<usize> = batch_iterator(16, 16, seed + 1).map_err(err)?.flatten().collect();
        ensure!(p != q, "seeds {seed} and {} share a permutation", seed + 1);
    }
    ensure!(matches!(batch_iterator(0, 1, 0), Err(Error::Data(_))), "empty split accepted");
    Ok(())
}

// ---------------------------------------------------------------- evaluation

fn scores_of(cm: &ConfusionMatrix) -> Result<[f64; 3], String> {
    let s = cm.scores().map_err(err)?;
    Ok([s.per_pixel_acc, s.per_class_acc, s.mean_iou])
}

pub fn confusion_examples() -> Check {
    let labels = [0u8, 1, 2, 2, 1];
    let perfect = ConfusionMatrix::from_predictions(3, &labels, &labels).map_err(err)?;
    ensure!(scores_of(&perfect)? == [1.0, 1.0, 1.0], "perfect predictions");
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).map_err(err)?;
    let s = scores_of(&cm)?;
    ensure!(close(s[0], 0.75, 1e-12) && close(s[1], 0.75, 1e-12) && close(s[2], 0.6, 1e-12), "2x2: {s:?}");
    let labels = [0u8, 1, 0, 1, 0, 1, 0, 1];
    let cm = ConfusionMatrix::from_predictions(2, &labels, &[0; 8]).map_err(err)?;
    let s = scores_of(&cm)?;
    ensure!(close(s[0], 0.5, 1e-12) && close(s[1], 0.5, 1e-12) && close(s[2], 0.25, 1e-12), "constant: {s:?}");
    ensure!(matches!(ConfusionMatrix::new(2).scores(), Err(Error::Data(_))), "empty matrix scored");
    Ok(())
}

/// Per-pixel definitions evaluated without a confusion matrix.
pub fn brute_force_scores(k: usize, labels: &[u8], preds: &[u8]) -> [f64; 3] {
    let n = labels.len() as f64;
    let correct = labels.iter().zip(preds).filter(|(a, b)| a == b).count() as f64;
    let (mut acc, mut iou, mut present) = (0.0, 0.0, 0.0);
    for c in 0..k as u8 {
        let truth = labels.iter().filter(|&&l| l == c).count();
        if truth == 0 {
            continue;
        }
        let hit = labels.iter().zip(preds).filter(|(&l, &p)| l == c && p == c).count();
        let union = labels.iter().zip(preds).filter(|(&l, &p)| l == c || p == c).count();
        present += 1.0;
        acc += hit as f64 / truth as f64;
        iou += hit as f64 / union as f64;
    }
    [correct / n, acc / present, iou / present]
}

pub fn confusion_brute_force() -> Check {
    let mut r = rng(12);
    for _ in 0..500 {
        let k = r.random_range(1..=3usize);
        let n = r.random_range(1..=16usize);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..k) as u8).collect();
        let preds: Vec<u8> = (0..n).map(|_| r.random_range(0..k) as u8).collect();
        let got = scores_of(&ConfusionMatrix::from_predictions(k, &labels, &preds).map_err(err)?)?;
        let want = brute_force_scores(k, &labels, &preds);
        for i in 0..3 {
            ensure!(close(got[i], want[i], 1e-12), "{labels:?} / {preds:?}: {got:?} vs {want:?}");
        }
    }
    Ok(())
}

pub fn sample_bound_examples() -> Check {
    ensure!(sample_bound(2, 1).map_err(err)? == 16.0, "ratio 2");
    ensure!(sample_bound(4, 1).map_err(err)? == 256.0, "ratio 4");
    ensure!(sample_bound(1000, 500).map_err(err)? == 16.0, "ratio 2 at scale");
    ensure!(sample_bound(7, 7).map_err(err)? == 1.0, "equal sizes");
    ensure!(matches!(sample_bound(3, 0), Err(Error::Config { .. })), "p_S = 0 accepted");
    Ok(())
}

pub fn record(label: &str, hash: &str, pixel: f64) -> MetricsRecord {
    // A 2-class matrix with the requested per-pixel accuracy out of 100 pixels.
    let hit = (pixel * 100.0).round() as u64;
    let cm = ConfusionMatrix::from_counts(2, vec![hit / 2, 50 - hit / 2, 50 - (hit - hit / 2), hit - hit / 2]).unwrap();
    MetricsRecord::from_confusion(
        cm,
        1,
        RunMeta {
            run_id: format!("{label}-{pixel}"),
            label: label.into(),
            dataset_hash: hash.into(),
            ..RunMeta::default()
        },
    )
    .unwrap()
}

pub fn compare_runs_examples() -> Check {
    let a = record("a", "h", 0.6);
    let rep = compare_runs(&[a.clone(), MetricsRecord { run: RunMeta { label: "b".into(), ..a.run.clone() }, ..a.clone() }])
        .map_err(err)?;
    ensure!(rep.rows.iter().all(|r| r.best == [true; 3]), "duplicates do not tie");
    let rep = compare_runs(&[record("x", "h", 0.5), record("y", "h", 0.7)]).map_err(err)?;
    ensure!(!rep.rows[0].best[0] && rep.rows[1].best[0], "0.7 not marked best");
    let rows: Vec<MetricsRecord> = kdgan::config::AblationMask::ablation_rows()
        .iter()
        .enumerate()
        .map(|(i, (l, _))| record(l, "h", 0.5 + 0.02 * i as f64))
        .collect();
    let rep = compare_runs(&rows).map_err(err)?;
    let labels: Vec<&str> = rep.rows.iter().map(|r| r.label.as_str()).collect();
    ensure!(labels == ["baseline", "L_perc", "L1+perc", "L_GT", "L_GT+tri", "all"], "{labels:?}");
    ensure!(
        matches!(compare_runs(&[record("a", "h", 0.5), record("b", "other", 0.5)]), Err(Error::Comparability(_))),
        "mismatched datasets compared"
    );
    ensure!(matches!(compare_runs(&[record("a", "h", 0.5)]), Err(Error::Comparability(_))), "single record");
    Ok(())
}

fn desk_segmenter() -> &'static Result<(Dataset, SegmenterReport), String> {
    static FIT: OnceLock<Result<(Dataset, SegmenterReport), String>> = OnceLock::new();
    FIT.get_or_init(|| {
        let ds = Dataset::generate(&DatasetSpec::default()).map_err(err)?;
        let fit = fit_segmenter(&ds, &SegmenterTrainConfig::default()).map_err(err)?;
        Ok((ds, fit))
    })
}

pub fn segmenter_examples() -> Check {
    let small = Dataset::generate(&tiny_dataset(Texture::Noisy, 32)).map_err(err)?;
    let quick = SegmenterTrainConfig {
        epochs: 1,
        ..SegmenterTrainConfig::default()
    };
    let a = fit_segmenter(&small, &quick).map_err(err)?;
    let b = fit_segmenter(&small, &quick).map_err(err)?;
    ensure!(a.segmenter.params() == b.segmenter.params(), "two fits differ");

    let (ds, fit) = desk_segmenter().as_ref().map_err(Clone::clone)?;
    let reference =
        ReferenceSegmenter::new(fit.segmenter.clone(), fit.heldout_acc, ds.spec.hash()).map_err(err)?;
    let real = score_real(&reference, &ds.test, RunMeta::default()).map_err(err)?;
    for (name, v) in [
        ("per-pixel", real.per_pixel_acc),
        ("per-class", real.per_class_acc),
        ("mean IoU", real.mean_iou),
    ] {
        ensure!(v >= SEGMENTER_GATE, "real photos: {name} {v:.4} below the gate");
    }
    real.verify(1e-9).map_err(err)?;
    Ok(())
}

pub fn segmenter_train_vs_heldout() -> Check {
    let (_, fit) = desk_segmenter().as_ref().map_err(Clone::clone)?;
    ensure!(
        fit.train_acc >= fit.heldout_acc,
        "train {:.5} below held-out {:.5}",
        fit.train_acc,
        fit.heldout_acc
    );
    Ok(())
}

pub type Oracle = fn() -> Check;

pub const ALL: [(&str, Oracle); 34] = [
    ("full-scale parameter counts", full_scale_parameter_counts),
    ("width doubling quadruples parameters", width_doubling_quadruples_parameters),
    ("FLOP ratios", flop_ratios),
    ("input doubling quadruples FLOPs", doubling_input_quadruples_flops),
    ("30x30 patch grid at 256", full_scale_patch_grid),
    ("batch shapes and seeded builds", batch_shapes_and_seeded_builds),
    ("feature taps", feature_taps),
    ("toy discriminator features", toy_discriminator_features),
    ("width monotonicity and output range", width_monotonicity_and_output_range),
    ("forward determinism", forward_determinism),
    ("invalid specs", invalid_specs),
    ("checkpoint round trip", checkpoint_round_trip),
    ("adversarial loss", gan_loss_examples),
    ("supervised and pixel L1", l1_examples),
    ("perceptual distillation", kd_perceptual_examples),
    ("combined generator distillation", kd_generator_examples),
    ("teacher as real", teacher_as_real_examples),
    ("triplet", triplet_examples),
    ("student objective", student_objective_examples),
    ("Adam", adam_examples),
    ("update isolation", update_isolation),
    ("dataset determinism", dataset_determinism),
    ("flat palette", flat_palette_oracle),
    ("class histogram", class_histogram),
    ("region means", region_means_approximate_photos),
    ("one-hot encoding", one_hot_examples),
    ("batch order", batch_order_examples),
    ("confusion matrix", confusion_examples),
    ("confusion brute force", confusion_brute_force),
    ("sample bound", sample_bound_examples),
    ("run comparison", compare_runs_examples),
    ("segmenter", segmenter_examples),
    ("segmenter train vs held-out", segmenter_train_vs_heldout),
    ("empty dataset spec", empty_dataset_spec),
];

pub fn empty_dataset_spec() -> Check {
    let spec = DatasetSpec {
        n_val: 0,
        ..DatasetSpec::default()
    };
    ensure!(
        matches!(Dataset::generate(&spec), Err(Error::Config { field, .. }) if field == "dataset.n_val"),
        "empty split accepted"
    );
    Ok(())
}
