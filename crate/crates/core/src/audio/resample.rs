use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::AudioClip;

/// Filter taps evaluated per output sample (per polyphase branch).
pub const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 8.6;
const MAX_TABLE_PHASES: u64 = 4096;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser-windowed sinc taps for a fractional offset `frac ∈ [0, 1)`;
/// tap `i` weighs source sample `floor(t) - HALF + 1 + i`.
fn taps(frac: f64, cutoff: f64) -> [f64; TAPS_PER_PHASE] {
    let half = (TAPS_PER_PHASE / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let mut out = [0.0; TAPS_PER_PHASE];
    for (i, tap) in out.iter_mut().enumerate() {
        let x = (i as f64 - half + 1.0) - frac;
        let r = x / half;
        let win = if r.abs() >= 1.0 {
            0.0
        } else {
            bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
        };
        *tap = cutoff * sinc(cutoff * x) * win;
    }
    let sum: f64 = out.iter().sum();
    if sum.abs() > 1e-12 {
        out.iter_mut().for_each(|t| *t /= sum);
    }
    out
}

/// Band-limited resampling by Kaiser-windowed sinc interpolation.
/// Output length is `round(N · target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument(
            "target rate must be positive".into(),
        ));
    }
    let source_rate = clip.sample_rate();
    if source_rate == target_rate {
        return Ok(clip.clone());
    }
    let (src, tgt) = (source_rate as u64, target_rate as u64);
    let g = gcd(src, tgt);
    let (up, down) = (tgt / g, src / g);
    let cutoff = (tgt as f64 / src as f64).min(1.0);
    let input = clip.samples();
    let n_out = ((input.len() as f64) * tgt as f64 / src as f64)
        .round()
        .max(1.0) as usize;
    let table: Option<Vec<[f64; TAPS_PER_PHASE]>> = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|ph| taps(ph as f64 / up as f64, cutoff))
            .collect()
    });

    let half = TAPS_PER_PHASE as i64 / 2;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out as u64 {
        let num = j * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let computed;
        let row = match &table {
            Some(t) => &t[phase as usize],
            None => {
                computed = taps(phase as f64 / up as f64, cutoff);
                &computed
            }
        };
        let mut acc = 0.0f64;
        for (i, &w) in row.iter().enumerate() {
            let idx = base - half + 1 + i as i64;
            if idx >= 0 && (idx as usize) < input.len() {
                acc += w * input[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_rate)
}
