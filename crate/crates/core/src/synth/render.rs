use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::cqt::{N_BINS, SAMPLE_RATE};
use crate::audio::AudioClip;
use crate::error::{Error, Result};

use super::song::{CoverParams, SongSpec};

const RAMP_SECONDS: f64 = 0.010;
const PEAK: f64 = 0.9;

fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

/// Additive synthesis of the melody: three harmonics per note with
/// raised-cosine attack and release, optional white noise at the given
/// SNR, then peak normalization to `0.9 · gain`.
pub fn render(spec: &SongSpec, params: &CoverParams) -> Result<AudioClip> {
    spec.validate()?;
    params.validate_levels()?;
    let (lo, hi) = spec.bin_range(params.semitone_shift);
    if lo < 0 || hi >= N_BINS as i32 {
        return Err(Error::InvalidArgument(format!(
            "shift {} moves the melody outside the CQT range",
            params.semitone_shift
        )));
    }
    let sr = SAMPLE_RATE as f64;
    let beat = 60.0 / spec.tempo_bpm / params.tempo_ratio;
    let total_beats: f64 = spec.notes.iter().map(|n| n.beats).sum::<f64>() * spec.repeats as f64;
    let n_samples = (total_beats * beat * sr).round() as usize;
    let mut out = vec![0.0f64; n_samples];
    let wsum: f64 = params.harmonics.iter().sum();

    let mut t_beats = 0.0;
    for _ in 0..spec.repeats {
        for note in &spec.notes {
            let start = (t_beats * beat * sr).round() as usize;
            t_beats += note.beats;
            let end = ((t_beats * beat * sr).round() as usize).min(n_samples);
            let len = end - start;
            let f0 = midi_to_hz((spec.midi(note) + params.semitone_shift) as f64);
            let ramp = ((RAMP_SECONDS * sr) as usize).min(len / 2).max(1);
            for i in 0..len {
                let t = i as f64 / sr;
                let mut v = 0.0;
                for (h, &w) in params.harmonics.iter().enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f < sr / 2.0 {
                        v += w / wsum * (2.0 * PI * f * t).sin();
                    }
                }
                let env = if i < ramp {
                    0.5 * (1.0 - (PI * i as f64 / ramp as f64).cos())
                } else if len - 1 - i < ramp {
                    0.5 * (1.0 - (PI * (len - 1 - i) as f64 / ramp as f64).cos())
                } else {
                    1.0
                };
                out[start + i] = v * env;
            }
        }
    }

    if let Some(snr) = params.snr_db {
        let power = out.iter().map(|v| v * v).sum::<f64>() / n_samples.max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
            out.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 {
        PEAK * params.gain / peak
    } else {
        0.0
    };
    AudioClip::new(
        out.into_iter().map(|v| (v * scale) as f32).collect(),
        SAMPLE_RATE,
    )
}
