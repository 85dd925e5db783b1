use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::cqt::N_BINS;
use crate::error::{Error, Result};

/// Semitone offsets of the major scale.
const SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
/// Degrees span two octaves of the scale.
pub const N_DEGREES: u8 = 14;
pub const MIN_NOTES: usize = 16;
pub const MAX_NOTES: usize = 64;
pub const TEMPO_RANGE: (f64, f64) = (70.0, 160.0);
pub const MAX_SHIFT: i32 = 5;
/// MIDI note of the lowest CQT bin (C1).
const MIDI_C1: i32 = 24;
/// Required distance from either CQT edge after any allowed shift.
const EDGE_MARGIN: i32 = 5;
const ROOT_RANGE: (u8, u8) = (36, 60);
const BEAT_CHOICES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
/// Melodies are looped until the song lasts at least this long.
pub const TARGET_SECONDS: f64 = 48.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Note {
    /// Scale degree in `0..14`.
    pub degree: u8,
    pub beats: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongSpec {
    /// MIDI note of degree 0.
    pub root: u8,
    pub notes: Vec<Note>,
    pub tempo_bpm: f64,
    /// Weights of harmonics 1..=3; positive, summing to 1.
    pub harmonics: [f64; 3],
    /// Times the note sequence is played.
    pub repeats: u32,
}

fn degree_offset(degree: u8) -> i32 {
    12 * (degree / 7) as i32 + SCALE[(degree % 7) as usize] as i32
}

pub(crate) fn random_harmonics(rng: &mut impl Rng) -> [f64; 3] {
    let raw: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..1.0));
    let sum: f64 = raw.iter().sum();
    raw.map(|w| w / sum)
}

impl SongSpec {
    pub fn midi(&self, note: &Note) -> i32 {
        self.root as i32 + degree_offset(note.degree)
    }

    /// Lowest and highest CQT bin of the melody's fundamentals.
    pub fn bin_range(&self, shift: i32) -> (i32, i32) {
        let bins = self.notes.iter().map(|n| self.midi(n) + shift - MIDI_C1);
        let lo = bins.clone().min().unwrap_or(0);
        (lo, bins.max().unwrap_or(0))
    }

    /// Length of one pass through the melody at the native tempo.
    pub fn melody_seconds(&self) -> f64 {
        self.notes.iter().map(|n| n.beats).sum::<f64>() * 60.0 / self.tempo_bpm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("song spec: {m}")));
        if !(MIN_NOTES..=MAX_NOTES).contains(&self.notes.len()) {
            return bad(format!(
                "{} notes, expected {MIN_NOTES}..={MAX_NOTES}",
                self.notes.len()
            ));
        }
        if let Some(n) = self
            .notes
            .iter()
            .find(|n| n.degree >= N_DEGREES || !(n.beats > 0.0))
        {
            return bad(format!("bad note {n:?}"));
        }
        if !(TEMPO_RANGE.0..=TEMPO_RANGE.1).contains(&self.tempo_bpm) {
            return bad(format!("tempo {} outside {TEMPO_RANGE:?}", self.tempo_bpm));
        }
        let sum: f64 = self.harmonics.iter().sum();
        if self.harmonics.iter().any(|&w| !(w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("harmonic weights {:?}", self.harmonics));
        }
        if self.repeats == 0 {
            return bad("zero repeats".into());
        }
        let (lo, hi) = self.bin_range(0);
        if lo - MAX_SHIFT < EDGE_MARGIN || hi + MAX_SHIFT > N_BINS as i32 - 1 - EDGE_MARGIN {
            return bad(format!("pitch bins {lo}..={hi} too close to the CQT edges"));
        }
        Ok(())
    }
}

/// Random melody in a major key; looped to at least [`TARGET_SECONDS`].
pub fn gen_song(rng: &mut impl Rng) -> SongSpec {
    let n = rng.gen_range(MIN_NOTES..=MAX_NOTES);
    let notes = (0..n)
        .map(|_| Note {
            degree: rng.gen_range(0..N_DEGREES),
            beats: BEAT_CHOICES[rng.gen_range(0..BEAT_CHOICES.len())],
        })
        .collect();
    let mut spec = SongSpec {
        root: rng.gen_range(ROOT_RANGE.0..=ROOT_RANGE.1),
        notes,
        tempo_bpm: rng.gen_range(TEMPO_RANGE.0..=TEMPO_RANGE.1),
        harmonics: random_harmonics(rng),
        repeats: 1,
    };
    spec.repeats = (TARGET_SECONDS / spec.melody_seconds()).ceil().max(1.0) as u32;
    spec
}

/// How a version departs from the original rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverParams {
    pub semitone_shift: i32,
    pub tempo_ratio: f64,
    /// `None` renders without noise.
    pub snr_db: Option<f64>,
    pub harmonics: [f64; 3],
    pub gain: f64,
    pub noise_seed: u64,
}

pub const TEMPO_RATIO_RANGE: (f64, f64) = (0.7, 1.4);
pub const MIN_SNR_DB: f64 = 20.0;
const MAX_SNR_DB: f64 = 40.0;
const GAIN_RANGE: (f64, f64) = (0.5, 1.0);

impl CoverParams {
    /// The original performance: no shift, native tempo and timbre, no noise.
    pub fn identity(spec: &SongSpec) -> Self {
        Self {
            semitone_shift: 0,
            tempo_ratio: 1.0,
            snr_db: None,
            harmonics: spec.harmonics,
            gain: 1.0,
            noise_seed: 0,
        }
    }

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            semitone_shift: rng.gen_range(-MAX_SHIFT..=MAX_SHIFT),
            tempo_ratio: rng.gen_range(TEMPO_RATIO_RANGE.0..=TEMPO_RATIO_RANGE.1),
            snr_db: Some(rng.gen_range(MIN_SNR_DB..=MAX_SNR_DB)),
            harmonics: random_harmonics(rng),
            gain: rng.gen_range(GAIN_RANGE.0..=GAIN_RANGE.1),
            noise_seed: rng.gen(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.semitone_shift.abs() > MAX_SHIFT {
            return Err(Error::InvalidArgument(format!(
                "cover params: shift {} outside ±{MAX_SHIFT}",
                self.semitone_shift
            )));
        }
        self.validate_levels()
    }

    /// Everything but the shift range, which [`super::render`] replaces
    /// with a check against the CQT range.
    pub(crate) fn validate_levels(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("cover params: {m}")));
        if !(self.tempo_ratio > 0.0 && self.tempo_ratio.is_finite()) {
            return bad(format!("tempo ratio {}", self.tempo_ratio));
        }
        if let Some(s) = self.snr_db {
            if !(s >= MIN_SNR_DB) {
                return bad(format!("snr {s} dB below {MIN_SNR_DB}"));
            }
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return bad(format!("gain {}", self.gain));
        }
        if self.harmonics.iter().any(|&w| !(w >= 0.0)) || self.harmonics.iter().sum::<f64>() <= 0.0
        {
            return bad(format!("harmonic weights {:?}", self.harmonics));
        }
        Ok(())
    }
}
