//! Synthetic cover-song corpora: random melodies rendered in different
//! keys, tempi and timbres.

mod corpus;
mod render;
mod song;

pub use corpus::{
    build_dataset, clique_name, recording_id, version_split, CorpusConfig, MANIFEST_NAME,
    SYNTH_DOWNSAMPLE,
};
pub use render::render;
pub use song::{
    gen_song, CoverParams, Note, SongSpec, MAX_NOTES, MAX_SHIFT, MIN_NOTES, MIN_SNR_DB, N_DEGREES,
    TARGET_SECONDS, TEMPO_RANGE, TEMPO_RATIO_RANGE,
};

/// Vertical bin shift of a spectrogram; see [`crate::audio::shift_bins`].
pub use crate::audio::shift_bins as shift_cqt_bins;
