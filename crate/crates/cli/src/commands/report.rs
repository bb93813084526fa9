use std::fs;

use anyhow::Result;
use clap::Args;
use image::{imageops, Rgb, RgbImage};
use kdgan::data::{colorize_labels, planar_to_image, quantize, Dataset, SplitName};
use kdgan::eval::{compare_runs, score_generator, score_real, RunMeta};
use kdgan::models::{Generator, Role};
use kdgan::trainer::{latest_checkpoint, TrainRole};

use super::train::{kind, reference};
use crate::state::{claim, RunManifest, State};

pub const GRID: &str = "grid.png";
pub const TABLES: &str = "tables.txt";
pub const COLUMNS: [&str; 6] = ["Input", "Ground truth", "Scratch", "Vanilla-KD", "Ours", "Teacher"];
pub const GAP: u32 = 2;

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory name under `reports/`.
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub scratch: String,
    /// Distillation run with only the pixel term enabled.
    #[arg(long)]
    pub vanilla: String,
    #[arg(long)]
    pub ours: String,
    #[arg(long)]
    pub teacher: String,
    /// Number of grid rows, taken from the start of the test split.
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    /// Explicit test sample ids, one grid row each.
    #[arg(long, value_delimiter = ',')]
    pub samples: Vec<u32>,
    #[arg(long)]
    pub force: bool,
}

struct Column {
    title: &'static str,
    run_id: String,
    manifest: RunManifest,
    role: TrainRole,
}

fn check_vanilla(c: &Column) -> Result<()> {
    let cfg = c
        .manifest
        .config
        .as_ref()
        .ok_or_else(|| kdgan::Error::config("vanilla", format!("run `{}` records no configuration", c.run_id)))?;
    let w = cfg.effective_weights();
    if w.gamma1 != 0.0 || w.beta2 != 0.0 || w.gamma2 != 0.0 {
        return Err(kdgan::Error::config(
            "vanilla",
            format!(
                "run `{}` has gamma1 = {}, beta2 = {}, gamma2 = {}; the vanilla column needs all three at zero",
                c.run_id, w.gamma1, w.beta2, w.gamma2
            ),
        )
        .into());
    }
    Ok(())
}

/// Six-column grid: label map, real photo, then one generated photo per run.
pub fn grid(dataset: &Dataset, sample_ids: &[u32], generators: &[Generator<f32>]) -> Result<RgbImage> {
    let test = dataset.split(SplitName::Test);
    let size = test.image_size;
    let s = size as u32;
    let positions = sample_ids
        .iter()
        .map(|&id| {
            test.position_of(id)
                .ok_or_else(|| kdgan::Error::data(format!("test split has no sample {id}")))
        })
        .collect::<kdgan::Result<Vec<usize>>>()?;
    let batch = test.batch(&positions)?;
    let outputs = generators
        .iter()
        .map(|g| g.generate(&batch.x))
        .collect::<kdgan::Result<Vec<_>>>()?;
    let cols = COLUMNS.len() as u32;
    let mut sheet = RgbImage::from_pixel(
        cols * (s + GAP) + GAP,
        sample_ids.len() as u32 * (s + GAP) + GAP,
        Rgb([255, 255, 255]),
    );
    let per_image = 3 * size * size;
    for (row, &pos) in positions.iter().enumerate() {
        let sample = &test.samples[pos];
        let mut cells = vec![
            colorize_labels(&sample.label_map, size),
            planar_to_image(&sample.photo, size),
        ];
        for out in &outputs {
            let bytes: Vec<u8> = out.data()[row * per_image..(row + 1) * per_image]
                .iter()
                .map(|&v| quantize(v))
                .collect();
            cells.push(planar_to_image(&bytes, size));
        }
        for (col, cell) in cells.iter().enumerate() {
            let x = GAP + col as u32 * (s + GAP);
            let y = GAP + row as u32 * (s + GAP);
            imageops::replace(&mut sheet, cell, x as i64, y as i64);
        }
    }
    Ok(sheet)
}

pub fn run(state: &State, args: &ReportArgs) -> Result<()> {
    let specs = [
        ("Scratch", &args.scratch, TrainRole::Scratch),
        ("Vanilla-KD", &args.vanilla, TrainRole::Distill),
        ("Ours", &args.ours, TrainRole::Distill),
        ("Teacher", &args.teacher, TrainRole::Teacher),
    ];
    let mut columns = Vec::new();
    for (title, run_id, role) in specs {
        let dir = state.run_dir(run_id);
        if !dir.exists() {
            return Err(kdgan::Error::Load {
                path: dir,
                reason: format!("run `{run_id}` for the {title} column not found"),
            }
            .into());
        }
        let manifest = RunManifest::load_verified(&dir, &format!("run `{run_id}`"))?;
        if manifest.kind != kind(role) {
            return Err(kdgan::Error::config(
                "report",
                format!("the {title} column needs a {} run but `{run_id}` is {}", kind(role), manifest.kind),
            )
            .into());
        }
        columns.push(Column {
            title,
            run_id: run_id.clone(),
            manifest,
            role,
        });
    }
    let first = &columns[0];
    if let Some(other) = columns.iter().find(|c| c.manifest.dataset_hash != first.manifest.dataset_hash) {
        return Err(kdgan::Error::Comparability(format!(
            "run `{}` uses dataset `{}` but `{}` uses `{}`",
            other.run_id,
            other.manifest.dataset.clone().unwrap_or_default(),
            first.run_id,
            first.manifest.dataset.clone().unwrap_or_default()
        ))
        .into());
    }
    check_vanilla(&columns[1])?;

    let dataset_name = first.manifest.dataset.clone().unwrap_or_default();
    let (dataset, dataset_manifest) = super::dataset::load(state, &dataset_name)?;
    if dataset_manifest.dataset_hash != first.manifest.dataset_hash {
        return Err(kdgan::Error::Comparability(format!(
            "dataset `{dataset_name}` changed since the runs were trained"
        ))
        .into());
    }
    let test = dataset.split(SplitName::Test);
    let sample_ids: Vec<u32> = if args.samples.is_empty() {
        test.samples.iter().take(args.rows).map(|s| s.sample_id).collect()
    } else {
        args.samples.clone()
    };
    if sample_ids.is_empty() {
        return Err(kdgan::Error::config("rows", "the grid needs at least one row").into());
    }

    let mut generators = Vec::new();
    for c in &columns {
        let role = match c.role {
            TrainRole::Teacher => Role::TeacherGenerator,
            _ => Role::StudentGenerator,
        };
        let path = latest_checkpoint(&state.run_dir(&c.run_id), role)?;
        generators.push(Generator::load(&path)?);
    }

    let dir = state.report_dir(&args.name);
    claim(&dir, "report", args.force)?;
    grid(&dataset, &sample_ids, &generators)?.save(dir.join(GRID))?;

    let cfg = columns[0].manifest.config.clone().unwrap_or_else(kdgan::config::ExperimentConfig::desk);
    let reference = reference(state, &dataset, &cfg)?;
    let meta = |label: &str, run_id: &str| RunMeta {
        run_id: run_id.to_string(),
        label: label.to_string(),
        dataset_hash: dataset.spec.hash(),
        ..RunMeta::default()
    };
    let mut records = vec![score_real(&reference, test, meta("Ground truth", "real"))?];
    for (c, g) in columns.iter().zip(&generators) {
        records.push(score_generator(&reference, g, test, meta(c.title, &c.run_id))?);
    }
    let table = compare_runs(&records)?;
    let mut text = String::from("Test-split scores of each column's final generator.\n");
    for c in &columns {
        text.push_str(&format!("  {:12} run {}\n", c.title, c.run_id));
    }
    text.push_str(
        "Vanilla-KD is this framework's distillation with only the teacher-output L1 term \
         (gamma1 = beta2 = gamma2 = 0), standing in for the classic pixel-regression baseline.\n\n",
    );
    text.push_str(&table.to_text());
    fs::write(dir.join(TABLES), &text)?;
    fs::write(dir.join("tables.json"), serde_json::to_vec_pretty(&table)?)?;

    let mut manifest = RunManifest::new(&args.name, "report");
    manifest.dataset = Some(dataset_name);
    manifest.dataset_hash = dataset_manifest.dataset_hash.clone();
    manifest.inputs = columns.iter().map(|c| c.run_id.clone()).collect();
    manifest.finish(&dir)?;
    println!("grid of {} rows x {} columns: {}", sample_ids.len(), COLUMNS.len(), dir.join(GRID).display());
    print!("{text}");
    Ok(())
}
