use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use kdgan::data::{write_preview, Dataset, DatasetSpec, SplitName};

use crate::config::{load_file, DatasetFlags};
use crate::state::{claim, RunManifest, State};

pub const PREVIEW: &str = "preview.png";

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Directory name under `datasets/`.
    #[arg(long, default_value = "desk")]
    pub name: String,
    /// Take the dataset section of this experiment config as the starting point.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub spec: DatasetFlags,
    /// Also write a contact sheet of training pairs.
    #[arg(long)]
    pub preview: bool,
    #[arg(long, default_value_t = 16)]
    pub preview_count: usize,
    #[arg(long)]
    pub force: bool,
}

pub fn run(state: &State, args: &DatasetArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => load_file(path)?.dataset,
        None => DatasetSpec::default(),
    };
    args.spec.apply(&mut spec);
    spec.validate()?;
    let dir = state.dataset_dir(&args.name);
    claim(&dir, "dataset", args.force)?;
    let dataset = Dataset::generate(&spec)?;
    dataset.save(&dir)?;
    if args.preview {
        write_preview(dataset.split(SplitName::Train), args.preview_count, &dir.join(PREVIEW))?;
    }
    let content = dataset.content_hash()?;
    let mut manifest = RunManifest::new(&args.name, "dataset");
    manifest.dataset = Some(args.name.clone());
    manifest.dataset_hash = Some(spec.hash());
    manifest.dataset_content_hash = Some(content.clone());
    manifest.finish(&dir)?;
    println!("dataset {} written to {}", args.name, dir.display());
    println!("content hash {content}");
    Ok(())
}

/// Loads a dataset after checking its files against the manifest.
pub fn load(state: &State, name: &str) -> Result<(Dataset, RunManifest)> {
    let dir = state.dataset_dir(name);
    if !dir.exists() {
        return Err(kdgan::Error::Load {
            path: dir,
            reason: format!("dataset `{name}` not found; create it with `kdgan dataset --name {name}`"),
        }
        .into());
    }
    let manifest = RunManifest::load_verified(&dir, &format!("dataset `{name}`"))?;
    let dataset = Dataset::load(&dir)?;
    Ok((dataset, manifest))
}
