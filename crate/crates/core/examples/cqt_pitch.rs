//! Constant-Q analysis of pure tones: each semitone moves the peak one bin.

use coverid::audio::cqt::{bin_frequency, SAMPLE_RATE};
use coverid::audio::{compute_cqt, AudioClip};

fn tone(freq: f64, secs: f64) -> AudioClip {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let w = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
    AudioClip::new(
        (0..n).map(|i| (w * i as f64).sin() as f32).collect(),
        SAMPLE_RATE,
    )
    .unwrap()
}

fn main() -> coverid::Result<()> {
    println!("{:>6} {:>9} {:>5} {:>9}", "semi", "Hz", "bin", "bin Hz");
    for k in -5i32..=5 {
        let f = 440.0 * 2f64.powf(k as f64 / 12.0);
        let cqt = compute_cqt(&tone(f, 2.0))?;
        let bin = cqt.argmax_bin(cqt.n_frames() / 2);
        println!("{k:>6} {f:>9.2} {bin:>5} {:>9.2}", bin_frequency(bin));
    }
    Ok(())
}
