//! Alternating generator/discriminator training for the teacher, the
//! from-scratch student and the distilled student.
//!
//! All three share one per-batch routine: a generator update followed by a
//! discriminator update. Distillation terms only enter through their weights,
//! so a distillation run with every distillation weight at zero follows the
//! same arithmetic as a from-scratch run.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{derive_seed, ExperimentConfig};
use crate::data::{batch_iterator, Dataset, PairedBatch, Split};
use crate::error::{Error, Result};
use crate::eval::{sample_bound, score_generator, MetricsRecord, ReferenceSegmenter, RunMeta};
use crate::losses::{
    adversarial_loss, gan_loss_d, gan_loss_g, image_grad, kd_perceptual_loss, kd_pixel_loss, supervised_l1,
    triplet_from_features, LossWeights,
};
use crate::models::{Discriminator, Generator, GeneratorSpec, Mode, Role};
use crate::optim::Adam;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRole {
    Teacher,
    Scratch,
    Distill,
}

impl TrainRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainRole::Teacher => "teacher",
            TrainRole::Scratch => "scratch",
            TrainRole::Distill => "distill",
        }
    }

    pub fn generator_role(self) -> Role {
        match self {
            TrainRole::Teacher => Role::TeacherGenerator,
            _ => Role::StudentGenerator,
        }
    }

    pub fn discriminator_role(self) -> Role {
        match self {
            TrainRole::Teacher => Role::TeacherDiscriminator,
            _ => Role::StudentDiscriminator,
        }
    }

    fn generator_spec(self, cfg: &ExperimentConfig) -> &GeneratorSpec {
        match self {
            TrainRole::Teacher => &cfg.teacher,
            _ => &cfg.student,
        }
    }
}

impl std::str::FromStr for TrainRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(TrainRole::Teacher),
            "scratch" => Ok(TrainRole::Scratch),
            "distill" => Ok(TrainRole::Distill),
            other => Err(Error::config("role", format!("unknown role `{other}`"))),
        }
    }
}

/// Frozen teacher pair used during distillation.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
}

impl Teacher {
    /// Loads the newest teacher generator and discriminator checkpoints of a run directory.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let g = latest_checkpoint(run_dir, Role::TeacherGenerator)?;
        let d = latest_checkpoint(run_dir, Role::TeacherDiscriminator)?;
        Ok(Self {
            generator: Generator::load(&g)?,
            discriminator: Discriminator::load(&d)?,
        })
    }

    /// Content hashes of the generator and discriminator parameters.
    pub fn digests(&self) -> (String, String) {
        (self.generator.params().digest(), self.discriminator.params().digest())
    }
}

pub fn checkpoint_path(run_dir: &Path, role: Role, epoch: usize) -> PathBuf {
    run_dir.join(format!("{}_{epoch}.ckpt", role.as_str()))
}

/// Newest `{role}_{epoch}.ckpt` in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path, role: Role) -> Result<PathBuf> {
    let prefix = format!("{}_", role.as_str());
    let missing = || Error::Load {
        path: run_dir.join(format!("{prefix}<epoch>.ckpt")),
        reason: format!("no {} checkpoint found", role.as_str()),
    };
    let entries = fs::read_dir(run_dir).map_err(|_| missing())?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(epoch) = name
            .strip_prefix(&prefix)
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|e| e.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
            best = Some((epoch, entry.path()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(missing)
}

/// Models a run may touch. The teacher, when present, is frozen.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub teacher: Option<Teacher>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Generator,
    Discriminator,
    TeacherGenerator,
    TeacherDiscriminator,
}

/// Applies one optimizer step to the named model only.
pub fn update_step(set: &mut ModelSet, grads: &GradStore<f32>, target: Target) -> Result<()> {
    match target {
        Target::Generator => set.opt_g.update(set.generator.params_mut(), grads),
        Target::Discriminator => set.opt_d.update(set.discriminator.params_mut(), grads),
        Target::TeacherGenerator | Target::TeacherDiscriminator => Err(Error::Invariant(format!(
            "gradient update requested for frozen model {target:?}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub val_l1: f64,
    pub mean_terms: BTreeMap<String, f64>,
    pub metrics: Option<MetricsRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Where checkpoints and logs go; nothing is written when `None`.
    pub run_dir: Option<PathBuf>,
    /// Scores every epoch on the validation split when present.
    pub reference: Option<&'a ReferenceSegmenter>,
    /// Continue from the state saved in `run_dir`.
    pub resume: bool,
    /// Return after this many completed epochs (the run can be resumed later).
    pub stop_after_epoch: Option<usize>,
    pub run_id: String,
    pub label: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub trace: Vec<TraceEntry>,
    pub epochs: Vec<EpochSummary>,
    /// Every optimizer step in order.
    pub updates: Vec<Target>,
    pub warnings: Vec<String>,
    pub epochs_completed: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&MetricsRecord> {
        self.epochs.last().and_then(|e| e.metrics.as_ref())
    }
}

/// Teacher training: full-width pair, adversarial plus supervised objective.
pub fn train_teacher(cfg: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions<'_>) -> Result<TrainOutcome> {
    run(cfg, TrainRole::Teacher, dataset, None, opts)
}

/// Narrow student trained exactly like the teacher.
pub fn train_student_scratch(cfg: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions<'_>) -> Result<TrainOutcome> {
    run(cfg, TrainRole::Scratch, dataset, None, opts)
}

/// Student trained against a frozen teacher. The teacher's parameter hashes
/// are checked before and after.
pub fn distill(
    cfg: &ExperimentConfig,
    teacher: &Teacher,
    dataset: &Dataset,
    opts: &RunOptions<'_>,
) -> Result<TrainOutcome> {
    let before = teacher.digests();
    let out = run(cfg, TrainRole::Distill, dataset, Some(teacher.clone()), opts)?;
    if teacher.digests() != before {
        return Err(Error::Invariant("teacher parameters changed during distillation".into()));
    }
    Ok(out)
}

/// Warning text when the training set is smaller than the student sample bound.
pub fn sample_bound_warning(teacher_params: usize, student_params: usize, n_train: usize) -> Result<Option<String>> {
    let bound = sample_bound(teacher_params as u64, student_params as u64)?;
    Ok(((n_train as f64) < bound).then(|| {
        format!(
            "training set of {n_train} samples is below the sample bound {bound:.1} \
             for {teacher_params} teacher / {student_params} student parameters"
        )
    }))
}

struct Ctx<'c> {
    cfg: &'c ExperimentConfig,
    weights: LossWeights,
    tap_t: usize,
    tap_s: usize,
    kd_active: bool,
}

impl Ctx<'_> {
    /// Runs one batch: generator step, then discriminator step. Returns the
    /// recorded terms in a fixed order.
    fn train_batch(
        &self,
        set: &mut ModelSet,
        batch: &PairedBatch,
        rng: &mut ChaCha8Rng,
        updates: &mut Vec<Target>,
    ) -> Result<Vec<(&'static str, f64)>> {
        let w = &self.weights;
        let mode = self.cfg.gan_mode;
        let square = self.cfg.square_l1;
        let (x, y) = (&batch.x, &batch.y);
        let cond = x.dims4().1;
        let mut terms: Vec<(&'static str, f64)> = Vec::new();

        let (z_s, g_trace) = set.generator.forward(x, Mode::Train(rng))?;
        let z_t = match (&set.teacher, self.kd_active) {
            (Some(t), true) => Some(t.generator.generate(x)?),
            _ => None,
        };
        let teacher_out = || z_t.as_ref().ok_or_else(|| Error::Invariant("teacher output missing".into()));

        // Generator step.
        let d = &set.discriminator;
        let last = d.spec().block_count() - 1;
        let tr_fake = d.forward(x, &z_s)?;
        let gan_g = gan_loss_g(tr_fake.output(), mode)?;
        let mut g_total = gan_g.value as f64;
        terms.push(("gan_g", gan_g.value as f64));
        let mut grad_z = image_grad(d, &tr_fake, &[(last, &gan_g.grad)], cond);
        if w.lambda_sup != 0.0 {
            let l1 = supervised_l1(y, &z_s)?;
            terms.push(("l1", l1.value as f64));
            g_total += w.lambda_sup * l1.value as f64;
            grad_z.add_scaled(&l1.grad, w.lambda_sup as f32);
        }
        if w.beta1 != 0.0 {
            let pix = kd_pixel_loss(teacher_out()?, &z_s, square)?;
            terms.push(("kd_pixel", pix.value as f64));
            g_total += w.beta1 * pix.value as f64;
            grad_z.add_scaled(&pix.grad, w.beta1 as f32);
        }
        if w.gamma1 != 0.0 {
            let t = set.teacher.as_ref().ok_or_else(|| Error::Invariant("teacher missing".into()))?;
            let perc = kd_perceptual_loss(&t.discriminator, x, teacher_out()?, &z_s, self.tap_t, square)?;
            terms.push(("kd_perceptual", perc.value as f64));
            g_total += w.gamma1 * perc.value as f64;
            grad_z.add_scaled(&perc.grad, w.gamma1 as f32);
        }
        terms.push(("g_total", g_total));
        let mut g_grads = set.generator.params().zeros_like();
        set.generator.backward(&g_trace, &grad_z, Some(&mut g_grads), false);
        update_step(set, &g_grads, Target::Generator)?;
        updates.push(Target::Generator);

        // Discriminator step on the same generated batch.
        let d = &set.discriminator;
        let tr_real = d.forward(x, y)?;
        let gan = gan_loss_d(tr_real.output(), tr_fake.output(), mode)?;
        let half = 0.5f32;
        let mut d_total = 0.5 * gan.value as f64;
        terms.push(("gan_d", gan.value as f64));
        let scaled = |t: &Tensor<f32>, s: f32| t.map(|v| v * s);
        let mut inj_real = vec![(last, scaled(&gan.grad_real, half))];
        let mut inj_fake = vec![(last, scaled(&gan.grad_fake, half))];
        let mut inj_teacher: Vec<(usize, Tensor<f32>)> = Vec::new();
        let mut tr_teacher = None;
        if w.beta2 != 0.0 || w.gamma2 != 0.0 {
            tr_teacher = Some(d.forward(x, teacher_out()?)?);
        }
        if w.beta2 != 0.0 {
            let tr = tr_teacher.as_ref().expect("traced above");
            let gt = adversarial_loss(tr.output(), true, mode)?;
            terms.push(("teacher_as_real", gt.value as f64));
            d_total += w.beta2 * gt.value as f64;
            inj_teacher.push((last, scaled(&gt.grad, w.beta2 as f32)));
        }
        if w.gamma2 != 0.0 {
            let tr = tr_teacher.as_ref().expect("traced above");
            let feat = |t: &crate::models::DiscriminatorTrace<f32>| {
                t.block_output(self.tap_s)
                    .cloned()
                    .ok_or_else(|| Error::Invariant("tap beyond trace".into()))
            };
            let tri = triplet_from_features(&feat(&tr_real)?, &feat(tr)?, &feat(&tr_fake)?, w.alpha_margin)?;
            terms.push(("triplet", tri.value as f64));
            d_total += w.gamma2 * tri.value as f64;
            let g2 = w.gamma2 as f32;
            inj_real.push((self.tap_s, scaled(&tri.grad_anchor, g2)));
            inj_teacher.push((self.tap_s, scaled(&tri.grad_positive, g2)));
            inj_fake.push((self.tap_s, scaled(&tri.grad_negative, g2)));
        }
        terms.push(("d_total", d_total));
        let mut d_grads = d.params().zeros_like();
        d.backward(&tr_real, &as_refs(&inj_real), Some(&mut d_grads), false);
        d.backward(&tr_fake, &as_refs(&inj_fake), Some(&mut d_grads), false);
        if let Some(tr) = &tr_teacher {
            if !inj_teacher.is_empty() {
                d.backward(tr, &as_refs(&inj_teacher), Some(&mut d_grads), false);
            }
        }
        update_step(set, &d_grads, Target::Discriminator)?;
        updates.push(Target::Discriminator);
        Ok(terms)
    }
}

/// Mean supervised L1 of eval-mode outputs over a split.
pub fn validation_l1(generator: &Generator<f32>, split: &Split) -> Result<f64> {
    const CHUNK: usize = 32;
    let mut total = 0.0;
    for start in (0..split.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(split.len())).collect();
        let b = split.batch(&idx)?;
        let out = generator.generate(&b.x)?;
        total += supervised_l1(&b.y, &out)?.value as f64 * idx.len() as f64;
    }
    Ok(total / split.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config_hash: String,
    role: TrainRole,
    epochs_completed: usize,
    step: u64,
    opt_g_step: u64,
    opt_d_step: u64,
    rng: ChaCha8Rng,
    best_val: Option<f64>,
    since_best: usize,
    stopped_early: bool,
    updates: Vec<Target>,
}

fn state_path(dir: &Path) -> PathBuf {
    dir.join("state.ckpt")
}

fn prefixed(store: &ParamStore<f32>, prefix: &str, out: &mut ParamStore<f32>) {
    for (name, t) in store.iter() {
        out.push(format!("{prefix}{name}"), t.clone());
    }
}

fn unprefixed(all: &ParamStore<f32>, prefix: &str, like: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for name in like.names() {
        let idx = all
            .index_of(&format!("{prefix}{name}"))
            .ok_or_else(|| Error::data(format!("resume state lacks {prefix}{name}")))?;
        out.push(name.clone(), all.get(idx).clone());
    }
    if !out.same_layout(like) {
        return Err(Error::data("resume state layout differs from the model"));
    }
    Ok(out)
}

fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn as_refs(v: &[(usize, Tensor<f32>)]) -> Vec<(usize, &Tensor<f32>)> {
    v.iter().map(|(b, t)| (*b, t)).collect()
}

fn rewrite_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let _ = fs::remove_file(path);
    append_jsonl(path, items)
}

fn run(
    cfg: &ExperimentConfig,
    role: TrainRole,
    dataset: &Dataset,
    teacher: Option<Teacher>,
    opts: &RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.spec != cfg.dataset {
        return Err(Error::config("dataset", "dataset on disk differs from the configured spec"));
    }
    let g_spec = role.generator_spec(cfg);
    let mut weights = cfg.effective_weights();
    if role != TrainRole::Distill {
        weights = LossWeights {
            beta1: 0.0,
            gamma1: 0.0,
            beta2: 0.0,
            gamma2: 0.0,
            ..weights
        };
    }
    let kd_active = !weights.no_distillation();
    let mut warnings = Vec::new();

    if let Some(t) = &teacher {
        let ts = t.generator.spec();
        if ts.in_channels != g_spec.in_channels || ts.out_channels != g_spec.out_channels {
            return Err(Error::config(
                "student",
                format!(
                    "student maps {}->{} channels but the teacher maps {}->{}",
                    g_spec.in_channels, g_spec.out_channels, ts.in_channels, ts.out_channels
                ),
            ));
        }
        if t.discriminator.spec().in_channels != cfg.discriminator.in_channels {
            return Err(Error::config(
                "discriminator.in_channels",
                "teacher discriminator input channels differ from the configuration",
            ));
        }
        t.discriminator.spec().check_tap(cfg.teacher_tap())?;
    }

    let mut generator = Generator::<f32>::build(g_spec, role.generator_role(), derive_seed(cfg.seed, "generator"))?;
    let mut discriminator = Discriminator::<f32>::build(
        &cfg.discriminator,
        role.discriminator_role(),
        derive_seed(cfg.seed, "discriminator"),
    )?;

    if role != TrainRole::Teacher {
        let p_t = match &teacher {
            Some(t) => t.generator.count_params(),
            None => Generator::<f32>::build(&cfg.teacher, Role::TeacherGenerator, 0)?.count_params(),
        };
        if let Some(msg) = sample_bound_warning(p_t, generator.count_params(), dataset.train.len())? {
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut opt_g = Adam::new(cfg.optimizer.clone(), generator.params());
    let mut opt_d = Adam::new(cfg.optimizer.clone(), discriminator.params());
    let mut start_epoch = 0usize;
    let mut step = 0u64;
    let mut best_val: Option<f64> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut epochs: Vec<EpochSummary> = Vec::new();
    let mut updates: Vec<Target> = Vec::new();
    let config_hash = cfg.hash();

    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir)?;
        if opts.resume && state_path(dir).exists() {
            let state = Checkpoint::load(&state_path(dir))?;
            let meta: StateMeta = serde_json::from_value(state.header.meta.clone())?;
            if meta.config_hash != config_hash || meta.role != role {
                return Err(Error::config("resume", "saved state belongs to a different configuration"));
            }
            let e = meta.epochs_completed;
            generator = Generator::load(&checkpoint_path(dir, role.generator_role(), e))?;
            discriminator = Discriminator::load(&checkpoint_path(dir, role.discriminator_role(), e))?;
            opt_g.m = unprefixed(&state.params, "g.m.", generator.params())?;
            opt_g.v = unprefixed(&state.params, "g.v.", generator.params())?;
            opt_d.m = unprefixed(&state.params, "d.m.", discriminator.params())?;
            opt_d.v = unprefixed(&state.params, "d.v.", discriminator.params())?;
            opt_g.step = meta.opt_g_step;
            opt_d.step = meta.opt_d_step;
            rng = meta.rng;
            start_epoch = e;
            step = meta.step;
            best_val = meta.best_val;
            since_best = meta.since_best;
            stopped_early = meta.stopped_early;
            updates = meta.updates;
            trace = read_jsonl::<TraceEntry>(&dir.join("trace.jsonl"))?
                .into_iter()
                .filter(|t| t.step <= step)
                .collect();
            epochs = read_jsonl::<EpochSummary>(&dir.join("epochs.jsonl"))?
                .into_iter()
                .filter(|s| s.epoch <= e)
                .collect();
            rewrite_jsonl(&dir.join("trace.jsonl"), &trace)?;
            rewrite_jsonl(&dir.join("epochs.jsonl"), &epochs)?;
            let metrics: Vec<MetricsRecord> = epochs.iter().filter_map(|s| s.metrics.clone()).collect();
            rewrite_jsonl(&dir.join("metrics.log"), &metrics)?;
        } else {
            for f in ["trace.jsonl", "epochs.jsonl", "metrics.log"] {
                let _ = fs::remove_file(dir.join(f));
            }
        }
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    }

    let mut set = ModelSet {
        generator,
        discriminator,
        opt_g,
        opt_d,
        teacher,
    };
    let ctx = Ctx {
        cfg,
        weights,
        tap_t: cfg.teacher_tap(),
        tap_s: cfg.student_tap(),
        kd_active,
    };
    let patience = cfg.early_stop_patience;
    let mut epoch = start_epoch;

    while epoch < cfg.epochs && !stopped_early {
        if opts.stop_after_epoch.is_some_and(|s| epoch >= s) {
            break;
        }
        let order = batch_iterator(
            dataset.train.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, &format!("order/{epoch}")),
        )?;
        let mut epoch_trace = Vec::new();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for idx in order {
            let batch = dataset.train.batch(&idx)?;
            step += 1;
            let terms = ctx.train_batch(&mut set, &batch, &mut rng, &mut updates)?;
            for (term, value) in terms {
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        term: term.to_string(),
                        value,
                    });
                }
                let e = sums.entry(term.to_string()).or_insert((0.0, 0));
                e.0 += value;
                e.1 += 1;
                epoch_trace.push(TraceEntry {
                    step,
                    epoch: epoch + 1,
                    term: term.to_string(),
                    value,
                });
            }
        }
        if !set.generator.params().all_finite() || !set.discriminator.params().all_finite() {
            return Err(Error::Divergence {
                step,
                term: "parameters".into(),
                value: f64::NAN,
            });
        }
        epoch += 1;

        let val_l1 = validation_l1(&set.generator, &dataset.val)?;
        let mean_terms: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let metrics = match opts.reference {
            Some(reference) => {
                let meta = RunMeta {
                    run_id: opts.run_id.clone(),
                    label: opts.label.clone(),
                    config_hash: config_hash.clone(),
                    dataset_hash: dataset.spec.hash(),
                    epoch: Some(epoch),
                    seed: Some(cfg.seed),
                };
                let mut rec = score_generator(reference, &set.generator, &dataset.val, meta)?;
                rec.loss_terms = mean_terms.clone();
                rec.loss_terms.insert("val_l1".into(), val_l1);
                Some(rec)
            }
            None => None,
        };
        if let (Some(p), Some(m)) = (patience, &metrics) {
            if best_val.is_none_or(|b| m.per_pixel_acc > b) {
                best_val = Some(m.per_pixel_acc);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    stopped_early = true;
                }
            }
        }
        let summary = EpochSummary {
            epoch,
            val_l1,
            mean_terms,
            metrics,
        };
        log::info!(
            "{} epoch {epoch}: val_l1 {:.4}{}",
            role.as_str(),
            val_l1,
            summary
                .metrics
                .as_ref()
                .map(|m| format!(", val per-pixel acc {:.4}", m.per_pixel_acc))
                .unwrap_or_default()
        );

        if let Some(dir) = &opts.run_dir {
            let meta = json!({"epoch": epoch, "step": step, "config_hash": config_hash});
            set.generator
                .save(&checkpoint_path(dir, role.generator_role(), epoch), meta.clone())?;
            set.discriminator
                .save(&checkpoint_path(dir, role.discriminator_role(), epoch), meta)?;
            let mut state_params = ParamStore::new();
            prefixed(&set.opt_g.m, "g.m.", &mut state_params);
            prefixed(&set.opt_g.v, "g.v.", &mut state_params);
            prefixed(&set.opt_d.m, "d.m.", &mut state_params);
            prefixed(&set.opt_d.v, "d.v.", &mut state_params);
            let state_meta = StateMeta {
                config_hash: config_hash.clone(),
                role,
                epochs_completed: epoch,
                step,
                opt_g_step: set.opt_g.step,
                opt_d_step: set.opt_d.step,
                rng: rng.clone(),
                best_val,
                since_best,
                stopped_early,
                updates: updates.clone(),
            };
            Checkpoint {
                header: CheckpointHeader {
                    spec: None,
                    role: None,
                    meta: serde_json::to_value(&state_meta)?,
                },
                params: state_params,
            }
            .save(&state_path(dir))?;
            append_jsonl(&dir.join("trace.jsonl"), &epoch_trace)?;
            append_jsonl(&dir.join("epochs.jsonl"), std::slice::from_ref(&summary))?;
            if let Some(m) = &summary.metrics {
                append_jsonl(&dir.join("metrics.log"), std::slice::from_ref(m))?;
            }
            if let Some(keep) = cfg.keep_checkpoints {
                if epoch > keep {
                    let old = epoch - keep;
                    for r in [role.generator_role(), role.discriminator_role()] {
                        let _ = fs::remove_file(checkpoint_path(dir, r, old));
                    }
                }
            }
        }
        trace.extend(epoch_trace);
        epochs.push(summary);
    }

    Ok(TrainOutcome {
        generator: set.generator,
        discriminator: set.discriminator,
        trace,
        epochs_completed: epoch,
        epochs,
        updates,
        warnings,
        stopped_early,
    })
}
