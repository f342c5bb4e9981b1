//! Synthetic grasp-like hand sequences and their on-disk format.

mod dataset;
mod generate;
mod render;

use std::path::PathBuf;

pub use dataset::{
    generate_sequences, load_dataset, make_dataset, read_manifest, read_sequence, write_sequence,
    Dataset, Manifest, SequenceEntry, MANIFEST_FILE, SEQUENCE_MAGIC, SEQUENCE_VERSION,
};
pub use generate::{generate_sequence, SequenceRecord, SynthConfig};
pub use render::{render_frame, Occluder, RenderStyle, HAND_COLORS};

use crate::hand::HandError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Hand(#[from] HandError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}: not a sequence container")]
    BadMagic(PathBuf),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}
