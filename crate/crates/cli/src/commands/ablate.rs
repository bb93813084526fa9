use std::fs;

use anyhow::{anyhow, Result};
use clap::Args;
use kdgan::config::{AblationMask, ExperimentConfig};
use kdgan::eval::{compare_runs, MetricsRecord};
use kdgan::trainer::TrainRole;

use super::train::{final_metrics, load_teacher, reference, Existing, Job};
use crate::config::ConfigFlags;
use crate::state::{claim, RunManifest, State};

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Run ids are `<prefix>-<row>-s<seed>`; the report goes to `reports/<prefix>`.
    #[arg(long)]
    pub prefix: String,
    #[arg(long)]
    pub teacher: String,
    #[arg(long, default_value = "desk")]
    pub dataset: String,
    /// Seeds per row, counting up from the configured seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Train the seeds of each row concurrently.
    #[arg(long)]
    pub parallel: bool,
    /// Retrain every run instead of reusing completed ones.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub cfg: ConfigFlags,
}

/// Directory-safe form of a row label.
pub fn slug(label: &str) -> String {
    label
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

pub fn run_id(prefix: &str, label: &str, seed: u64) -> String {
    format!("{prefix}-{}-s{seed}", slug(label))
}

pub fn run(state: &State, args: &AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(kdgan::Error::config("seeds", "at least one seed is needed").into());
    }
    let (dataset, dataset_manifest) = super::dataset::load(state, &args.dataset)?;
    let mut base = args.cfg.resolve()?;
    base.dataset = dataset.spec.clone();
    base.validate()?;
    let teacher = load_teacher(state, &args.teacher, &dataset_manifest)?;
    let reference = reference(state, &dataset, &base)?;
    let existing = if args.force { Existing::Replace } else { Existing::Resume };

    let mut records: Vec<MetricsRecord> = Vec::new();
    for (label, mask) in AblationMask::ablation_rows() {
        let jobs: Vec<Job> = (0..args.seeds)
            .map(|i| {
                let cfg = ExperimentConfig {
                    ablation: mask,
                    seed: base.seed + i,
                    ..base.clone()
                };
                Job {
                    state,
                    dataset: &dataset,
                    dataset_manifest: &dataset_manifest,
                    reference: &reference,
                    role: TrainRole::Distill,
                    teacher: Some(&teacher),
                    run_id: run_id(&args.prefix, label, cfg.seed),
                    label: label.to_string(),
                    cfg,
                }
            })
            .collect();
        let results: Vec<Result<RunManifest>> = if args.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || j.execute(existing))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("training thread panicked"))))
                    .collect()
            })
        } else {
            jobs.iter().map(|j| j.execute(existing)).collect()
        };
        for (job, result) in jobs.iter().zip(results) {
            result?;
            let mut m = final_metrics(&state.run_dir(&job.run_id))?;
            m.run.label = label.to_string();
            println!("{:10} {}: per-pixel {:.4}", label, job.run_id, m.per_pixel_acc);
            records.push(m);
        }
    }

    let report = compare_runs(&records)?;
    let dir = state.report_dir(&args.prefix);
    claim(&dir, "report", true)?;
    let text = format!(
        "Validation scores per loss combination, mean over {} seed(s); teacher run {}.\n\n{}",
        args.seeds,
        args.teacher,
        report.to_text()
    );
    fs::write(dir.join("ablation.txt"), &text)?;
    fs::write(dir.join("ablation.json"), serde_json::to_vec_pretty(&report)?)?;
    let mut manifest = RunManifest::new(&args.prefix, "ablate").with_config(&base);
    manifest.dataset = Some(args.dataset.clone());
    manifest.dataset_hash = dataset_manifest.dataset_hash.clone();
    manifest.inputs = std::iter::once(args.teacher.clone())
        .chain(records.iter().map(|r| r.run.run_id.clone()))
        .collect();
    manifest.finish(&dir)?;
    print!("{text}");
    Ok(())
}
