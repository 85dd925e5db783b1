//! Key-shift search: shifting the reference back recovers a transposed copy.

use coverid::audio::cqt::N_BINS;
use coverid::audio::{shift_bins, CqtSpectrogram};
use coverid::model::{ModelConfig, ResNetIbn};
use coverid::retrieval::transposed_max_similarity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> coverid::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = 60;
    let mut v = vec![0.0f32; N_BINS * frames];
    for b in 12..N_BINS - 12 {
        for t in 0..frames {
            v[b * frames + t] = rng.gen_range(0.0..1.0);
        }
    }
    let query = CqtSpectrogram::from_bin_major(v, frames, 20)?;
    let mut model = ResNetIbn::new(ModelConfig::mini(4), 3)?;
    for k in [-4, -1, 0, 2, 5] {
        let reference = shift_bins(&query, k)?;
        let plain = transposed_max_similarity(&mut model, &query, &reference, 0)?;
        let best = transposed_max_similarity(&mut model, &query, &reference, 6)?;
        println!(
            "reference shifted {k:+}: plain cos {:.4}, best {:.4} at shift {:+}",
            plain.similarity, best.similarity, best.shift
        );
    }
    Ok(())
}
