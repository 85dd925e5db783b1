use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::cqt::N_BINS;
use crate::audio::{shift_bins, CqtSpectrogram};
use crate::error::{Error, Result};
use crate::model::ResNetIbn;
use crate::tensor::{Mode, Tape};
use crate::train::crop_or_pad;

use super::metrics::cosine_similarity;
use super::store::EmbeddingStore;

const MIN_NORM: f64 = 1e-12;

/// Eval-mode embedding of a full-length spectrogram: `f_c`, or its
/// projection when `use_projection` is set, scaled to unit length.
pub fn extract_embedding(
    model: &mut ResNetIbn<f32>,
    cqt: &CqtSpectrogram,
    use_projection: bool,
) -> Result<Vec<f32>> {
    // eval mode never draws from the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = crop_or_pad(cqt, 0, &mut rng, Mode::Eval);
    let t = x.shape()[2];
    let mut tape = Tape::new();
    let input = tape.input(x.reshape(&[1, 1, N_BINS, t])?);
    let out = model.forward(&mut tape, input, Mode::Eval)?;
    let v = if use_projection {
        model.project(&mut tape, out.f_c)?
    } else {
        out.f_c
    };
    unit(tape.value(v).data())
}

fn unit(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm >= MIN_NORM) {
        return Err(Error::Degenerate(format!(
            "embedding norm {norm:e} is too small"
        )));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Embeds `(id, cqt)` pairs into a store, projecting iff the model has a
/// projection head.
pub fn embed_all<'a>(
    model: &mut ResNetIbn<f32>,
    items: impl IntoIterator<Item = (&'a str, &'a CqtSpectrogram)>,
) -> Result<EmbeddingStore> {
    let project = model.config().embed_dim > 0;
    let mut store = EmbeddingStore::new(model.config().embedding_dim())?;
    for (id, cqt) in items {
        store.push(id, &extract_embedding(model, cqt, project)?)?;
    }
    Ok(store)
}

/// Best cosine similarity over vertical shifts of the reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransposeMatch {
    pub similarity: f64,
    /// Shift of `R` that achieved it; ties go to the smaller magnitude,
    /// then to the negative shift.
    pub shift: i32,
}

/// `max_i cos(f(Q), f(R shifted by i))` for `i ∈ [−range, range]`.
pub fn transposed_max_similarity(
    model: &mut ResNetIbn<f32>,
    query: &CqtSpectrogram,
    reference: &CqtSpectrogram,
    range: u32,
) -> Result<TransposeMatch> {
    let project = model.config().embed_dim > 0;
    let q = extract_embedding(model, query, project)?;
    let mut best = TransposeMatch {
        similarity: f64::NEG_INFINITY,
        shift: 0,
    };
    let r = range as i32;
    for shift in std::iter::once(0).chain((1..=r).flat_map(|i| [-i, i])) {
        let shifted = shift_bins(reference, shift)?;
        let e = extract_embedding(model, &shifted, project)?;
        let s = cosine_similarity(&q, &e)?;
        if s > best.similarity {
            best = TransposeMatch {
                similarity: s,
                shift,
            };
        }
    }
    Ok(best)
}
