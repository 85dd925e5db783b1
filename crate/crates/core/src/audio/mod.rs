//! Audio ingestion and the constant-Q front end.

pub mod cqt;
mod resample;
mod wav;

pub use cqt::{
    compute_cqt, downsample_time, extract_features, normalize, shift_bins, CqtSpectrogram,
};
pub use resample::{resample, TAPS_PER_PHASE};
pub use wav::{load_wav, write_wav, AudioClip};
