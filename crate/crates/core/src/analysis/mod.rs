//! Post-training diagnostics: channel correlation, calibration, pruning
//! sensitivity and Grad-CAM.

pub mod calibration;
pub mod correlation;
pub mod gradcam;
pub mod prune;

pub use calibration::{calibration, CalibrationBin, CalibrationReport, DEFAULT_BINS};
pub use correlation::{channel_correlation, pearson, CorrelationMode, CorrelationStats};
pub use gradcam::{grad_cam, grad_cam_from_maps, Heatmap};
pub use prune::{
    apply_prune, channel_magnitudes, n_from_rate, prune_rank, prune_rate, prune_sweep, split_halves, ChannelRanking,
    PruneRow,
};
