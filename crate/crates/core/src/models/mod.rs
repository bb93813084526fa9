//! Generator, discriminator and segmenter architectures plus their accounting.

pub mod discriminator;
pub mod generator;
pub mod segmenter;

use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorSpec, DiscriminatorTrace};
pub use generator::{Generator, GeneratorSpec, GeneratorTrace, Mode};
pub use segmenter::{argmax_channels, Segmenter, SegmenterSpec, SegmenterTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TeacherGenerator,
    StudentGenerator,
    TeacherDiscriminator,
    StudentDiscriminator,
    Segmenter,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::TeacherGenerator => "teacher_generator",
            Role::StudentGenerator => "student_generator",
            Role::TeacherDiscriminator => "teacher_discriminator",
            Role::StudentDiscriminator => "student_discriminator",
            Role::Segmenter => "segmenter",
        }
    }
}

/// Architecture description stored alongside parameters in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
    Segmenter(SegmenterSpec),
}
