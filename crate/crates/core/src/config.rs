use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::SegmenterTrainConfig;
use crate::losses::{GanMode, LossWeights};
use crate::models::{DiscriminatorSpec, GeneratorSpec};
use crate::optim::AdamConfig;

/// Which distillation terms are switched on. A disabled term has its weight
/// forced to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationMask {
    pub l1: bool,
    pub perc: bool,
    pub gt: bool,
    pub tri: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl AblationMask {
    pub const NONE: Self = Self {
        l1: false,
        perc: false,
        gt: false,
        tri: false,
    };
    pub const ALL: Self = Self {
        l1: true,
        perc: true,
        gt: true,
        tri: true,
    };

    /// The six loss combinations of the ablation grid, with their row labels.
    pub fn ablation_rows() -> [(&'static str, AblationMask); 6] {
        let m = |l1, perc, gt, tri| AblationMask { l1, perc, gt, tri };
        [
            ("baseline", m(false, false, false, false)),
            ("L_perc", m(false, true, false, false)),
            ("L1+perc", m(true, true, false, false)),
            ("L_GT", m(false, false, true, false)),
            ("L_GT+tri", m(false, false, true, true)),
            ("all", m(true, true, true, true)),
        ]
    }

    /// Pixel-only distillation, the classic teacher-output regression baseline.
    pub const VANILLA: Self = Self {
        l1: true,
        perc: false,
        gt: false,
        tri: false,
    };

    pub fn label(&self) -> String {
        Self::ablation_rows()
            .iter()
            .find(|(_, m)| m == self)
            .map(|(l, _)| l.to_string())
            .unwrap_or_else(|| {
                let parts: Vec<&str> = [
                    (self.l1, "L1"),
                    (self.perc, "perc"),
                    (self.gt, "GT"),
                    (self.tri, "tri"),
                ]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, n)| *n)
                .collect();
                parts.join("+")
            })
    }

    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        LossWeights {
            beta1: keep(self.l1, w.beta1),
            gamma1: keep(self.perc, w.gamma1),
            beta2: keep(self.gt, w.beta2),
            gamma2: keep(self.tri, w.gamma2),
            ..w.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub teacher: GeneratorSpec,
    pub student: GeneratorSpec,
    /// Shared by the teacher and the student discriminator.
    pub discriminator: DiscriminatorSpec,
    /// Tap of the truncated student discriminator; defaults to the
    /// discriminator's own `feature_tap`.
    #[serde(default)]
    pub student_feature_tap: Option<usize>,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub ablation: AblationMask,
    pub seed: u64,
    #[serde(default)]
    pub gan_mode: GanMode,
    /// Square the per-sample distances of the pixel and perceptual terms.
    #[serde(default)]
    pub square_l1: bool,
    /// Stop when validation per-pixel accuracy has not improved for this many epochs.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    /// Keep only the newest this-many per-epoch model checkpoints.
    #[serde(default)]
    pub keep_checkpoints: Option<usize>,
    #[serde(default)]
    pub segmenter: SegmenterTrainConfig,
}

pub const DEFAULT_PATIENCE: usize = 5;

impl ExperimentConfig {
    /// 48x48 images, depth-4 generators of width 32 (teacher) and 16 (student).
    pub fn desk() -> Self {
        let dataset = DatasetSpec::default();
        let k = dataset.n_classes;
        let generator = |base_width| GeneratorSpec {
            in_channels: k,
            out_channels: 3,
            base_width,
            depth: 4,
            use_dropout: false,
        };
        let discriminator = DiscriminatorSpec {
            in_channels: k + 3,
            base_width: 16,
            num_layers: 2,
            feature_tap: 2,
            kernel_size: 4,
        };
        Self {
            dataset,
            teacher: generator(32),
            student: generator(16),
            discriminator,
            student_feature_tap: None,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            epochs: 30,
            batch_size: 8,
            ablation: AblationMask::ALL,
            seed: 0,
            gan_mode: GanMode::Vanilla,
            square_l1: false,
            early_stop_patience: None,
            keep_checkpoints: None,
            segmenter: SegmenterTrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (field, n) in [
            ("dataset.n_train", self.dataset.n_train),
            ("dataset.n_val", self.dataset.n_val),
            ("dataset.n_test", self.dataset.n_test),
        ] {
            if n < self.batch_size {
                return Err(Error::config(field, format!("must be at least batch_size ({})", self.batch_size)));
            }
        }
        let k = self.dataset.n_classes;
        for (field, g) in [("teacher", &self.teacher), ("student", &self.student)] {
            if g.in_channels != k {
                return Err(Error::config(
                    format!("{field}.in_channels"),
                    format!("must equal the class count {k}"),
                ));
            }
            if g.out_channels != 3 {
                return Err(Error::config(format!("{field}.out_channels"), "must be 3 (RGB)"));
            }
            let side = 1usize << g.depth;
            if self.dataset.image_size % side != 0 {
                return Err(Error::config(
                    "dataset.image_size",
                    format!("must be divisible by 2^{} for the {field} generator", g.depth),
                ));
            }
        }
        if self.discriminator.in_channels != k + 3 {
            return Err(Error::config(
                "discriminator.in_channels",
                format!("must equal classes + 3 = {}", k + 3),
            ));
        }
        self.discriminator.check_tap(self.student_tap())?;
        if self.early_stop_patience == Some(0) {
            return Err(Error::config("early_stop_patience", "must be at least 1"));
        }
        if self.keep_checkpoints == Some(0) {
            return Err(Error::config("keep_checkpoints", "must be at least 1"));
        }
        Ok(())
    }

    pub fn teacher_tap(&self) -> usize {
        self.discriminator.feature_tap
    }

    pub fn student_tap(&self) -> usize {
        self.student_feature_tap.unwrap_or(self.discriminator.feature_tap)
    }

    /// Loss weights after the ablation mask.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.apply(&self.weights)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Independent 64-bit seed for a named random stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}
