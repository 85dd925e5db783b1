//! Constant-Q spectrogram by direct per-bin windowed correlation.

use std::f64::consts::PI;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::AudioClip;

pub const N_BINS: usize = 84;
pub const BINS_PER_OCTAVE: usize = 12;
pub const HOP_LENGTH: usize = 512;
pub const SAMPLE_RATE: u32 = 22050;
/// C1.
pub const FMIN: f64 = 32.703_195_662_574_83;
pub const DEFAULT_DOWNSAMPLE: u32 = 100;

const MAGIC: &[u8; 4] = b"CQT1";
const FORMAT_VERSION: u32 = 1;

/// `Q = 1 / (2^(1/12) − 1)`
pub fn q_factor() -> f64 {
    1.0 / (2f64.powf(1.0 / BINS_PER_OCTAVE as f64) - 1.0)
}

pub fn bin_frequency(bin: usize) -> f64 {
    FMIN * 2f64.powf(bin as f64 / BINS_PER_OCTAVE as f64)
}

pub fn window_length(bin: usize, sample_rate: u32) -> usize {
    (q_factor() * sample_rate as f64 / bin_frequency(bin)).round() as usize
}

/// Longest analysis window (bin 0).
pub fn longest_window(sample_rate: u32) -> usize {
    window_length(0, sample_rate)
}

/// 84×T nonnegative magnitudes; row `b` is frequency `FMIN · 2^(b/12)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CqtSpectrogram {
    /// Bin-major: `values[b * n_frames + t]`.
    values: Vec<f32>,
    n_frames: usize,
    fmin: f64,
    hop_length: usize,
    downsample_factor: u32,
}

impl CqtSpectrogram {
    /// `values` is bin-major (`N_BINS` rows of `n_frames`).
    pub fn from_bin_major(
        values: Vec<f32>,
        n_frames: usize,
        downsample_factor: u32,
    ) -> Result<Self> {
        if n_frames == 0 || values.len() != N_BINS * n_frames {
            return Err(Error::Shape(format!(
                "cqt needs {N_BINS}×{n_frames} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "cqt magnitudes must be finite and nonnegative".into(),
            ));
        }
        if downsample_factor == 0 {
            return Err(Error::InvalidArgument(
                "downsample factor must be positive".into(),
            ));
        }
        Ok(Self {
            values,
            n_frames,
            fmin: FMIN,
            hop_length: HOP_LENGTH,
            downsample_factor,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn fmin(&self) -> f64 {
        self.fmin
    }

    pub fn hop_length(&self) -> usize {
        self.hop_length
    }

    pub fn downsample_factor(&self) -> u32 {
        self.downsample_factor
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.n_frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f32] {
        &self.values[bin * self.n_frames..(bin + 1) * self.n_frames]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Bin with the largest magnitude in `frame` (first on ties).
    pub fn argmax_bin(&self, frame: usize) -> usize {
        let mut best = 0;
        for b in 1..N_BINS {
            if self.get(b, frame) > self.get(best, frame) {
                best = b;
            }
        }
        best
    }

    /// Model input of shape `[1, 1, 84, T]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, N_BINS, self.n_frames], self.values.clone())
            .expect("cqt invariants guarantee a valid shape")
    }

    /// Writes the binary feature file (frame-major float32 payload).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.values.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(N_BINS as u32).to_le_bytes());
        buf.extend_from_slice(&self.downsample_factor.to_le_bytes());
        buf.extend_from_slice(&(self.n_frames as u64).to_le_bytes());
        for t in 0..self.n_frames {
            for b in 0..N_BINS {
                buf.extend_from_slice(&self.get(b, t).to_le_bytes());
            }
        }
        buf
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::malformed("cqt file", "bad magic"));
        }
        let version = read_u32(&mut cur)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                what: "cqt file",
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let n_bins = read_u32(&mut cur)? as usize;
        if n_bins != N_BINS {
            return Err(Error::malformed(
                "cqt file",
                format!("{n_bins} bins, expected {N_BINS}"),
            ));
        }
        let factor = read_u32(&mut cur)?;
        let n_frames = read_u64(&mut cur)? as usize;
        let payload = &bytes[cur.position() as usize..];
        if payload.len() != n_frames * N_BINS * 4 {
            return Err(Error::malformed(
                "cqt file",
                format!("payload of {} bytes for {n_frames} frames", payload.len()),
            ));
        }
        let mut values = vec![0.0f32; N_BINS * n_frames];
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let (t, b) = (i / N_BINS, i % N_BINS);
            values[b * n_frames + t] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        Self::from_bin_major(values, n_frames, factor)
    }
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::malformed("cqt file", "truncated header"))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

struct Kernel {
    re: Vec<f32>,
    im: Vec<f32>,
}

fn kernels(sample_rate: u32) -> Vec<Kernel> {
    (0..N_BINS)
        .map(|b| {
            let len = window_length(b, sample_rate);
            let f = bin_frequency(b);
            let hann: Vec<f64> = (0..len)
                .map(|m| 0.5 - 0.5 * (2.0 * PI * m as f64 / (len - 1) as f64).cos())
                .collect();
            let scale = 2.0 / hann.iter().sum::<f64>();
            let center = (len / 2) as f64;
            let (re, im) = hann
                .iter()
                .enumerate()
                .map(|(m, &w)| {
                    let phase = -2.0 * PI * f * (m as f64 - center) / sample_rate as f64;
                    (
                        (w * scale * phase.cos()) as f32,
                        (w * scale * phase.sin()) as f32,
                    )
                })
                .unzip();
            Kernel { re, im }
        })
        .collect()
}

#[inline]
fn complex_dot(x: &[f32], re: &[f32], im: &[f32]) -> (f32, f32) {
    let mut ar = [0.0f32; 8];
    let mut ai = [0.0f32; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let rs = &re[c * 8..c * 8 + 8];
        let is = &im[c * 8..c * 8 + 8];
        for l in 0..8 {
            ar[l] += xs[l] * rs[l];
            ai[l] += xs[l] * is[l];
        }
    }
    let (mut sr, mut si) = (ar.iter().sum::<f32>(), ai.iter().sum::<f32>());
    for i in chunks * 8..x.len() {
        sr += x[i] * re[i];
        si += x[i] * im[i];
    }
    (sr, si)
}

/// Reflect-pads (edge sample not repeated) by `pad` on both sides.
fn reflect_pad(x: &[f32], pad: usize) -> Vec<f32> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    out
}

/// 84-bin constant-Q magnitude spectrogram of a 22050 Hz clip, one frame
/// every 512 samples with frame `k` centered on sample `k·512`.
pub fn compute_cqt(clip: &AudioClip) -> Result<CqtSpectrogram> {
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "cqt expects {SAMPLE_RATE} Hz audio, got {} Hz",
            clip.sample_rate()
        )));
    }
    let longest = longest_window(SAMPLE_RATE);
    let n = clip.len();
    if n < longest {
        return Err(Error::InvalidArgument(format!(
            "clip of {n} samples is shorter than the longest analysis window ({longest})"
        )));
    }
    let pad = longest / 2 + 1;
    let padded = reflect_pad(clip.samples(), pad);
    let kernels = kernels(SAMPLE_RATE);
    let n_frames = n / HOP_LENGTH + 1;
    let mut values = vec![0.0f32; N_BINS * n_frames];
    for t in 0..n_frames {
        let center = t * HOP_LENGTH + pad;
        for (b, k) in kernels.iter().enumerate() {
            let start = center - k.re.len() / 2;
            let seg = &padded[start..start + k.re.len()];
            let (re, im) = complex_dot(seg, &k.re, &k.im);
            values[b * n_frames + t] = (re * re + im * im).sqrt();
        }
    }
    CqtSpectrogram::from_bin_major(values, n_frames, 1)
}

/// Non-overlapping means of `factor` frames. A trailing partial window is
/// kept iff it spans at least `ceil(factor / 2)` frames, or if it is the
/// only window.
pub fn downsample_time(cqt: &CqtSpectrogram, factor: u32) -> Result<CqtSpectrogram> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "downsample factor must be positive".into(),
        ));
    }
    if cqt.downsample_factor != 1 {
        return Err(Error::InvalidArgument(format!(
            "spectrogram already downsampled by {}",
            cqt.downsample_factor
        )));
    }
    let f = factor as usize;
    let t_raw = cqt.n_frames;
    let full = t_raw / f;
    let tail = t_raw % f;
    let keep_tail = tail > 0 && (tail >= f.div_ceil(2) || full == 0);
    let n_out = full + keep_tail as usize;
    let mut values = Vec::with_capacity(N_BINS * n_out);
    for b in 0..N_BINS {
        let row = cqt.row(b);
        for w in 0..n_out {
            let win = &row[w * f..((w + 1) * f).min(t_raw)];
            let mean = win.iter().map(|&v| v as f64).sum::<f64>() / win.len() as f64;
            values.push(mean as f32);
        }
    }
    CqtSpectrogram::from_bin_major(values, n_out, factor)
}

/// Scales to unit maximum; optionally applies `ln(1 + 1000 x)` and rescales.
pub fn normalize(cqt: &CqtSpectrogram, log_compress: bool) -> CqtSpectrogram {
    let mut out = cqt.clone();
    scale_to_unit_max(&mut out.values);
    if log_compress {
        out.values
            .iter_mut()
            .for_each(|v| *v = (1000.0 * *v).ln_1p());
        scale_to_unit_max(&mut out.values);
    }
    out
}

fn scale_to_unit_max(values: &mut [f32]) {
    let max = values.iter().copied().fold(0.0, f32::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

/// Moves rows by `shift` bins (toward higher bins when positive) and
/// zero-fills the vacated rows.
pub fn shift_bins(cqt: &CqtSpectrogram, shift: i32) -> Result<CqtSpectrogram> {
    if shift.unsigned_abs() as usize >= N_BINS {
        return Err(Error::InvalidArgument(format!(
            "bin shift {shift} must be smaller than {N_BINS} in magnitude"
        )));
    }
    let t = cqt.n_frames;
    let mut values = vec![0.0f32; cqt.values.len()];
    for b in 0..N_BINS {
        let dst = b as i32 + shift;
        if (0..N_BINS as i32).contains(&dst) {
            let d = dst as usize;
            values[d * t..(d + 1) * t].copy_from_slice(cqt.row(b));
        }
    }
    let mut out = cqt.clone();
    out.values = values;
    Ok(out)
}

/// Resample → CQT → time downsampling → max normalization.
pub fn extract_features(
    clip: &AudioClip,
    factor: u32,
    log_compress: bool,
) -> Result<CqtSpectrogram> {
    let clip = super::resample(clip, SAMPLE_RATE)?;
    let raw = compute_cqt(&clip)?;
    let down = downsample_time(&raw, factor)?;
    Ok(normalize(&down, log_compress))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> AudioClip {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32)
            .collect();
        AudioClip::new(s, SAMPLE_RATE).unwrap()
    }

    /// Frames whose longest window lies fully inside the signal.
    fn interior(n: usize) -> std::ops::RangeInclusive<usize> {
        let half = longest_window(SAMPLE_RATE) / 2 + 1;
        half.div_ceil(HOP_LENGTH)..=(n - half) / HOP_LENGTH
    }

    fn spec(values: Vec<f32>, n_frames: usize) -> CqtSpectrogram {
        CqtSpectrogram::from_bin_major(values, n_frames, 1).unwrap()
    }

    #[test]
    fn bin_45_is_a4() {
        let expected = (12.0 * (440.0f64 / 32.703).log2()).round() as usize;
        assert_eq!(expected, 45);
        assert!((bin_frequency(45) - 440.0).abs() < 1e-9);
        let clip = tone(440.0, 2.0);
        let cqt = compute_cqt(&clip).unwrap();
        for t in interior(clip.len()) {
            assert_eq!(cqt.argmax_bin(t), 45, "frame {t}");
        }
    }

    #[test]
    fn silence_is_zero() {
        let clip = AudioClip::new(vec![0.0; 22050], SAMPLE_RATE).unwrap();
        let cqt = compute_cqt(&clip).unwrap();
        assert!(cqt.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_law() {
        for n in [22050usize, longest_window(SAMPLE_RATE), 30000, 33333] {
            let clip = AudioClip::new(vec![0.1; n], SAMPLE_RATE).unwrap();
            assert_eq!(compute_cqt(&clip).unwrap().n_frames(), n / 512 + 1);
        }
        assert_eq!(22050 / 512 + 1, 44);
    }

    #[test]
    fn rejects_short_or_wrong_rate() {
        let short = AudioClip::new(vec![0.0; 1000], SAMPLE_RATE).unwrap();
        assert!(compute_cqt(&short).is_err());
        let wrong = AudioClip::new(vec![0.0; 30000], 44100).unwrap();
        assert!(compute_cqt(&wrong).is_err());
    }

    #[test]
    fn unit_sine_response_is_flat_across_bins() {
        for b in [0usize, 7, 20, 45, 60, 83] {
            let f = bin_frequency(b);
            let clip = tone(f, 2.0);
            let cqt = compute_cqt(&clip).unwrap();
            let mid = clip.len() / 2 / HOP_LENGTH;
            let v = cqt.get(b, mid);
            assert!((v - 1.0).abs() < 0.05, "bin {b}: {v}");
        }
    }

    #[test]
    fn pitch_shift_moves_argmax() {
        for k in -5i32..=5 {
            let f = 440.0 * 2f64.powf(k as f64 / 12.0);
            let clip = tone(f, 1.2);
            let cqt = compute_cqt(&clip).unwrap();
            for t in interior(clip.len()) {
                assert_eq!(cqt.argmax_bin(t) as i32, 45 + k);
            }
        }
    }

    #[test]
    fn downsample_window_rules() {
        let raw = spec((0..N_BINS * 430).map(|i| (i % 13) as f32).collect(), 430);
        assert_eq!(downsample_time(&raw, 100).unwrap().n_frames(), 4);
        assert_eq!(downsample_time(&raw, 1).unwrap().values(), raw.values());
        let short = spec(vec![1.0; N_BINS * 44], 44);
        assert_eq!(downsample_time(&short, 100).unwrap().n_frames(), 1);
        assert_eq!(downsample_time(&short, 20).unwrap().n_frames(), 2);
        let kept = spec(vec![1.0; N_BINS * 450], 450);
        assert_eq!(downsample_time(&kept, 100).unwrap().n_frames(), 5);
        let constant = spec(vec![2.5; N_BINS * 77], 77);
        for f in [1, 3, 20, 100] {
            let d = downsample_time(&constant, f).unwrap();
            assert!(d.values().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        }
        let twice = downsample_time(&raw, 20).unwrap();
        assert!(downsample_time(&twice, 2).is_err());
    }

    #[test]
    fn normalize_cases() {
        let mut v = vec![0.0f32; N_BINS * 2];
        v[3] = 4.0;
        v[10] = 1.0;
        let n = normalize(&spec(v, 2), false);
        assert_eq!(n.max(), 1.0);
        assert_eq!(n.values()[10], 0.25);

        let zero = spec(vec![0.0; N_BINS], 1);
        assert_eq!(normalize(&zero, true), zero);

        let mut b = vec![0.0f32; N_BINS];
        b[0] = 1.0;
        let l = normalize(&spec(b, 1), true);
        assert!(l.values().iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(l.values()[0], 1.0);
    }

    #[test]
    fn shift_bins_cases() {
        let t = 3;
        let mut v = vec![0.0f32; N_BINS * t];
        for b in 10..=40 {
            for f in 0..t {
                v[b * t + f] = (b + f) as f32;
            }
        }
        let x = spec(v, t);
        assert_eq!(shift_bins(&x, 0).unwrap(), x);
        let up = shift_bins(&x, 3).unwrap();
        for b in 0..N_BINS {
            let nonzero = up.row(b).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, (13..=43).contains(&b), "bin {b}");
        }
        let energy = |s: &CqtSpectrogram| s.values().iter().map(|v| (v * v) as f64).sum::<f64>();
        assert_eq!(energy(&up), energy(&x));
        assert_eq!(shift_bins(&up, -3).unwrap(), x);
        assert!(shift_bins(&x, 84).is_err());
        assert!(shift_bins(&x, -84).is_err());
    }

    #[test]
    fn feature_file_roundtrip_and_errors() {
        let x = spec((0..N_BINS * 5).map(|i| i as f32 * 0.5).collect(), 5);
        let bytes = x.to_bytes();
        assert_eq!(&bytes[..4], b"CQT1");
        assert_eq!(bytes.len(), 24 + 5 * N_BINS * 4);
        // frame-major payload: second value is bin 1 of frame 0
        assert_eq!(
            f32::from_le_bytes(bytes[28..32].try_into().unwrap()),
            x.get(1, 0)
        );
        assert_eq!(CqtSpectrogram::from_bytes(&bytes).unwrap(), x);

        assert!(CqtSpectrogram::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CqtSpectrogram::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            CqtSpectrogram::from_bytes(&v2),
            Err(Error::Version { .. })
        ));
    }
}
