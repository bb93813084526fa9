use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use kdgan::config::{AblationMask, ExperimentConfig};
use kdgan::data::{DatasetSpec, Texture};
use kdgan::losses::GanMode;
use kdgan::Error;
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TextureArg {
    Flat,
    Noisy,
    Textured,
}

impl From<TextureArg> for Texture {
    fn from(t: TextureArg) -> Self {
        match t {
            TextureArg::Flat => Texture::Flat,
            TextureArg::Noisy => Texture::Noisy,
            TextureArg::Textured => Texture::Textured,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GanModeArg {
    Vanilla,
    LeastSquares,
}

/// Dataset fields settable from the command line.
#[derive(Args, Clone, Debug, Default)]
pub struct DatasetFlags {
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, value_enum)]
    pub texture: Option<TextureArg>,
}

impl DatasetFlags {
    pub fn apply(&self, spec: &mut DatasetSpec) {
        set(&mut spec.seed, self.data_seed);
        set(&mut spec.n_classes, self.classes);
        set(&mut spec.image_size, self.image_size);
        set(&mut spec.n_train, self.n_train);
        set(&mut spec.n_val, self.n_val);
        set(&mut spec.n_test, self.n_test);
        set(&mut spec.texture, self.texture.map(Texture::from));
    }
}

/// Experiment settings: a JSON config file overlaid on the desk defaults,
/// then individual flags.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlags {
    /// JSON document with any subset of the experiment configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub teacher_width: Option<usize>,
    #[arg(long)]
    pub student_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dropout: Option<bool>,
    #[arg(long)]
    pub disc_width: Option<usize>,
    #[arg(long)]
    pub disc_layers: Option<usize>,
    /// Discriminator block used for teacher-side features.
    #[arg(long)]
    pub feature_tap: Option<usize>,
    #[arg(long)]
    pub student_tap: Option<usize>,
    #[arg(long)]
    pub lambda_sup: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Distillation terms to keep: comma-separated from l1, perc, gt, tri, or `none` / `all`.
    #[arg(long)]
    pub losses: Option<String>,
    #[arg(long, value_enum)]
    pub gan_mode: Option<GanModeArg>,
    #[arg(long)]
    pub square_l1: Option<bool>,
    /// Stop after this many epochs without a validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub keep_checkpoints: Option<usize>,
    #[arg(long)]
    pub segmenter_epochs: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn parse_mask(s: &str) -> Result<AblationMask, Error> {
    let mut mask = AblationMask::NONE;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "none" => {}
            "all" => mask = AblationMask::ALL,
            "l1" => mask.l1 = true,
            "perc" => mask.perc = true,
            "gt" => mask.gt = true,
            "tri" => mask.tri = true,
            other => return Err(Error::config("losses", format!("unknown term `{other}`"))),
        }
    }
    Ok(mask)
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Desk defaults overlaid with the file at `path`.
pub fn load_file(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    let overlay: Value = serde_json::from_str(&text)
        .map_err(|e| Error::config("config", format!("{} is not valid JSON: {e}", path.display())))?;
    let mut base = serde_json::to_value(ExperimentConfig::desk()).expect("config serializes");
    merge(&mut base, overlay);
    serde_json::from_value(base).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
}

impl ConfigFlags {
    pub fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => load_file(path)?,
            None => ExperimentConfig::desk(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Error> {
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.optimizer.lr, self.lr);
        set(&mut cfg.optimizer.beta1, self.adam_beta1);
        set(&mut cfg.optimizer.beta2, self.adam_beta2);
        set(&mut cfg.teacher.base_width, self.teacher_width);
        set(&mut cfg.student.base_width, self.student_width);
        if let Some(d) = self.depth {
            cfg.teacher.depth = d;
            cfg.student.depth = d;
        }
        if let Some(d) = self.dropout {
            cfg.teacher.use_dropout = d;
            cfg.student.use_dropout = d;
        }
        set(&mut cfg.discriminator.base_width, self.disc_width);
        set(&mut cfg.discriminator.num_layers, self.disc_layers);
        set(&mut cfg.discriminator.feature_tap, self.feature_tap);
        if self.student_tap.is_some() {
            cfg.student_feature_tap = self.student_tap;
        }
        let w = &mut cfg.weights;
        set(&mut w.lambda_sup, self.lambda_sup);
        set(&mut w.beta1, self.beta1);
        set(&mut w.gamma1, self.gamma1);
        set(&mut w.beta2, self.beta2);
        set(&mut w.gamma2, self.gamma2);
        set(&mut w.alpha_margin, self.alpha);
        if let Some(m) = &self.losses {
            cfg.ablation = parse_mask(m)?;
        }
        if let Some(g) = self.gan_mode {
            cfg.gan_mode = match g {
                GanModeArg::Vanilla => GanMode::Vanilla,
                GanModeArg::LeastSquares => GanMode::LeastSquares,
            };
        }
        set(&mut cfg.square_l1, self.square_l1);
        if self.patience.is_some() {
            cfg.early_stop_patience = self.patience;
        }
        if self.keep_checkpoints.is_some() {
            cfg.keep_checkpoints = self.keep_checkpoints;
        }
        set(&mut cfg.segmenter.epochs, self.segmenter_epochs);
        Ok(())
    }
}
