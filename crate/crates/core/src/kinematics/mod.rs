//! Skeletons, pose sequences, and position-error metrics.

mod metrics;
mod pose;
mod skeleton;

pub use metrics::{mpjpe_at_frames, mpjpe_channels, mpjpe_per_frame};
pub use pose::PoseSequence;
pub use skeleton::{KinematicChain, Skeleton, Units};
