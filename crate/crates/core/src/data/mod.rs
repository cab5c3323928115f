//! Sequence files, datasets, training windows and synthetic motion.

mod dataset;
mod format;
mod synthetic;

pub use dataset::{
    extract_windows, frames_to_channel_major, SequenceDataset, TrainingWindow, LABELS_FILE, SEQUENCE_EXT, SKELETON_FILE,
};
pub use format::{
    check_skeleton, decode_sequence, encode_sequence, read_csv, read_sequence, read_sequence_for, sequence_from_csv,
    write_sequence, MAGIC,
};
pub use synthetic::{gen_synthetic, SynthKind, SynthSpec};
