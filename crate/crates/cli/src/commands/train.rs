use std::path::Path;

use anyhow::Result;
use clap::{Args, ValueEnum};
use kdgan::config::ExperimentConfig;
use kdgan::data::{Dataset, Split};
use kdgan::eval::{load_or_train_segmenter, MetricsRecord, ReferenceSegmenter};
use kdgan::trainer::{distill, read_jsonl, train_student_scratch, train_teacher, RunOptions, Teacher, TrainRole};

use crate::config::ConfigFlags;
use crate::state::{claim, RunManifest, State};
use crate::Refusal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Teacher,
    Scratch,
    Distill,
}

impl From<RoleArg> for TrainRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Teacher => TrainRole::Teacher,
            RoleArg::Scratch => TrainRole::Scratch,
            RoleArg::Distill => TrainRole::Distill,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub role: RoleArg,
    #[arg(long)]
    pub run_id: String,
    #[arg(long, default_value = "desk")]
    pub dataset: String,
    /// Run id of the teacher (distillation only).
    #[arg(long)]
    pub teacher: Option<String>,
    /// Row label used in reports; defaults to the role or the loss combination.
    #[arg(long)]
    pub label: Option<String>,
    /// Continue an interrupted run from its last completed epoch.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub cfg: ConfigFlags,
}

pub fn kind(role: TrainRole) -> String {
    format!("train/{}", role.as_str())
}

/// A loaded teacher together with the run it came from.
pub struct TeacherRun {
    pub run_id: String,
    pub teacher: Teacher,
}

pub fn load_teacher(state: &State, run_id: &str, dataset: &RunManifest) -> Result<TeacherRun> {
    let dir = state.run_dir(run_id);
    if !dir.exists() {
        return Err(kdgan::Error::Load {
            path: dir,
            reason: format!("teacher run `{run_id}` not found; train it with `kdgan train --role teacher --run-id {run_id}`"),
        }
        .into());
    }
    let manifest = RunManifest::load_verified(&dir, &format!("teacher run `{run_id}`"))?;
    if manifest.kind != kind(TrainRole::Teacher) {
        return Err(kdgan::Error::config("teacher", format!("run `{run_id}` is a {} run", manifest.kind)).into());
    }
    if manifest.dataset_hash != dataset.dataset_hash {
        return Err(kdgan::Error::Comparability(format!(
            "teacher run `{run_id}` was trained on dataset `{}`, not `{}`",
            manifest.dataset.unwrap_or_default(),
            dataset.run_id
        ))
        .into());
    }
    Ok(TeacherRun {
        run_id: run_id.to_string(),
        teacher: Teacher::load(&dir)?,
    })
}

pub fn reference(state: &State, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<ReferenceSegmenter> {
    Ok(load_or_train_segmenter(&state.segmenter_dir(), dataset, &cfg.segmenter)?)
}

/// Everything one training run needs.
pub struct Job<'a> {
    pub state: &'a State,
    pub dataset: &'a Dataset,
    pub dataset_manifest: &'a RunManifest,
    pub reference: &'a ReferenceSegmenter,
    pub cfg: ExperimentConfig,
    pub role: TrainRole,
    pub teacher: Option<&'a TeacherRun>,
    pub run_id: String,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Existing {
    Refuse,
    Replace,
    Resume,
}

impl Job<'_> {
    pub fn execute(&self, existing: Existing) -> Result<RunManifest> {
        let dir = self.state.run_dir(&self.run_id);
        let resume = match existing {
            Existing::Resume if dir.exists() => {
                if let Some(m) = RunManifest::read(&dir)? {
                    if m.config_hash.as_deref() != Some(self.cfg.hash().as_str()) {
                        return Err(Refusal(format!(
                            "run {} was completed with a different configuration; pass --force to replace it",
                            self.run_id
                        ))
                        .into());
                    }
                    m.verify(&dir)?;
                    log::info!("run {} already complete", self.run_id);
                    return Ok(m);
                }
                true
            }
            Existing::Resume => {
                claim(&dir, "run", false)?;
                false
            }
            other => {
                claim(&dir, "run", other == Existing::Replace)?;
                false
            }
        };
        let opts = RunOptions {
            run_dir: Some(dir.clone()),
            reference: Some(self.reference),
            resume,
            stop_after_epoch: None,
            run_id: self.run_id.clone(),
            label: self.label.clone(),
        };
        let outcome = match (self.role, self.teacher) {
            (TrainRole::Teacher, _) => train_teacher(&self.cfg, self.dataset, &opts)?,
            (TrainRole::Scratch, _) => train_student_scratch(&self.cfg, self.dataset, &opts)?,
            (TrainRole::Distill, Some(t)) => distill(&self.cfg, &t.teacher, self.dataset, &opts)?,
            (TrainRole::Distill, None) => {
                return Err(kdgan::Error::config("teacher", "distillation needs --teacher <run id>").into())
            }
        };
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        let mut manifest = RunManifest::new(&self.run_id, &kind(self.role)).with_config(&self.cfg);
        manifest.dataset = Some(self.dataset_manifest.run_id.clone());
        manifest.dataset_hash = self.dataset_manifest.dataset_hash.clone();
        manifest.dataset_content_hash = self.dataset_manifest.dataset_content_hash.clone();
        if let Some(t) = self.teacher {
            manifest.inputs.push(t.run_id.clone());
        }
        manifest.finish(&dir)
    }
}

/// Final-epoch validation metrics of a completed run.
pub fn final_metrics(run_dir: &Path) -> Result<MetricsRecord> {
    let records: Vec<MetricsRecord> = read_jsonl(&run_dir.join("metrics.log"))?;
    records
        .into_iter()
        .last()
        .ok_or_else(|| kdgan::Error::data(format!("{} holds no metrics", run_dir.display())).into())
}

/// Per-pixel accuracy of always predicting the most frequent class.
pub fn constant_predictor_accuracy(split: &Split) -> f64 {
    let mut counts = vec![0u64; split.n_classes];
    let mut total = 0u64;
    for s in &split.samples {
        for &l in &s.label_map {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    counts.into_iter().max().unwrap_or(0) as f64 / total.max(1) as f64
}

pub fn run(state: &State, args: &TrainArgs) -> Result<()> {
    let role = TrainRole::from(args.role);
    let (dataset, dataset_manifest) = super::dataset::load(state, &args.dataset)?;
    let mut cfg = args.cfg.resolve()?;
    cfg.dataset = dataset.spec.clone();
    cfg.validate()?;
    let teacher = match (role, &args.teacher) {
        (TrainRole::Distill, Some(id)) => Some(load_teacher(state, id, &dataset_manifest)?),
        (TrainRole::Distill, None) => {
            return Err(kdgan::Error::config("teacher", "distillation needs --teacher <run id>").into())
        }
        _ => None,
    };
    let reference = reference(state, &dataset, &cfg)?;
    let label = args.label.clone().unwrap_or_else(|| match role {
        TrainRole::Distill => cfg.ablation.label(),
        other => other.as_str().to_string(),
    });
    let job = Job {
        state,
        dataset: &dataset,
        dataset_manifest: &dataset_manifest,
        reference: &reference,
        cfg,
        role,
        teacher: teacher.as_ref(),
        run_id: args.run_id.clone(),
        label,
    };
    let existing = if args.resume {
        Existing::Resume
    } else if args.force {
        Existing::Replace
    } else {
        Existing::Refuse
    };
    job.execute(existing)?;
    let m = final_metrics(&state.run_dir(&args.run_id))?;
    println!(
        "{} {}: per-pixel {:.4}, per-class {:.4}, mean IoU {:.4} (validation, epoch {})",
        role.as_str(),
        args.run_id,
        m.per_pixel_acc,
        m.per_class_acc,
        m.mean_iou,
        m.run.epoch.unwrap_or(0)
    );
    println!(
        "constant predictor per-pixel {:.4}",
        constant_predictor_accuracy(&dataset.val)
    );
    Ok(())
}
