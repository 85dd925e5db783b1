use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::cqt::N_BINS;
use crate::audio::CqtSpectrogram;
use crate::error::{Error, Result};
use crate::model::MIN_FRAMES;
use crate::tensor::{Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One row of the JSON-lines dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path to the `.cqt` file; relative paths are resolved against the
    /// manifest's directory.
    pub feature: PathBuf,
    pub clique: String,
    pub split: Split,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::malformed("manifest", format!("line {}: {e}", lineno + 1)))?;
        entries.push(entry);
    }
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::malformed(
                "manifest",
                format!("duplicate id {:?}", e.id),
            ));
        }
    }
    if entries.is_empty() {
        return Err(Error::malformed("manifest", "no entries"));
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Resolves an entry's feature path against the manifest location.
pub fn feature_path(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    if entry.feature.is_absolute() {
        entry.feature.clone()
    } else {
        manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&entry.feature)
    }
}

#[derive(Clone, Debug)]
pub struct Recording {
    pub id: String,
    pub clique: usize,
    pub split: Split,
    pub cqt: CqtSpectrogram,
}

/// Recordings with their features loaded and cliques indexed `0..C` in
/// name order.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    recordings: Vec<Recording>,
    clique_names: Vec<String>,
    /// Train-split recording indices per clique.
    train_by_clique: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let entries = read_manifest(manifest)?;
        let mut items = Vec::with_capacity(entries.len());
        for e in entries {
            let cqt = CqtSpectrogram::read(feature_path(manifest, &e))?;
            items.push((e, cqt));
        }
        Self::from_parts(items)
    }

    pub fn from_parts(items: Vec<(ManifestEntry, CqtSpectrogram)>) -> Result<Self> {
        let mut names: BTreeMap<String, usize> =
            items.iter().map(|(e, _)| (e.clique.clone(), 0)).collect();
        for (i, v) in names.values_mut().enumerate() {
            *v = i;
        }
        let factor = items.first().map(|(_, c)| c.downsample_factor());
        if items
            .iter()
            .any(|(_, c)| Some(c.downsample_factor()) != factor)
        {
            return Err(Error::InvalidArgument(
                "dataset mixes features with different downsample factors".into(),
            ));
        }
        let mut train_by_clique = vec![Vec::new(); names.len()];
        let recordings: Vec<Recording> = items
            .into_iter()
            .enumerate()
            .map(|(i, (e, cqt))| {
                let clique = names[&e.clique];
                if e.split == Split::Train {
                    train_by_clique[clique].push(i);
                }
                Recording {
                    id: e.id,
                    clique,
                    split: e.split,
                    cqt,
                }
            })
            .collect();
        Ok(Self {
            recordings,
            clique_names: names.into_keys().collect(),
            train_by_clique,
        })
    }

    pub fn recordings(&self) -> &[Recording] {
        &self.recordings
    }

    pub fn num_cliques(&self) -> usize {
        self.clique_names.len()
    }

    pub fn clique_name(&self, clique: usize) -> &str {
        &self.clique_names[clique]
    }

    /// Cliques that have at least one training recording.
    pub fn train_cliques(&self) -> Vec<usize> {
        (0..self.num_cliques())
            .filter(|&c| !self.train_by_clique[c].is_empty())
            .collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.recordings.len())
            .filter(|&i| self.recordings[i].split == split)
            .collect()
    }

    /// Time downsampling factor shared by all features.
    pub fn feature_factor(&self) -> u32 {
        self.recordings
            .first()
            .map_or(1, |r| r.cqt.downsample_factor())
    }
}

/// Draws `p` distinct training cliques and `k` recordings from each
/// (with replacement only when a clique has fewer than `k`). Returns
/// recording indices, grouped by clique.
pub fn pk_sample(
    dataset: &LabeledDataset,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let cliques = dataset.train_cliques();
    if cliques.len() < p {
        return Err(Error::InvalidArgument(format!(
            "PK sampling needs {p} training cliques, dataset has {}",
            cliques.len()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for &c in cliques.choose_multiple(rng, p) {
        let members = &dataset.train_by_clique[c];
        if members.len() >= k {
            out.extend(
                index::sample(rng, members.len(), k)
                    .iter()
                    .map(|i| members[i]),
            );
        } else {
            out.extend((0..k).map(|_| members[rng.gen_range(0..members.len())]));
        }
    }
    Ok(out)
}

/// Train mode: a uniformly placed window of `crop_len` frames, zero-padded
/// on the right when the input is shorter. Eval mode: the whole input,
/// right-padded only up to the model's minimum length. Returns `[1, 84, T']`.
pub fn crop_or_pad(
    cqt: &CqtSpectrogram,
    crop_len: usize,
    rng: &mut impl Rng,
    mode: Mode,
) -> Tensor<f32> {
    let t = cqt.n_frames();
    let (start, len) = match mode {
        Mode::Train if t > crop_len => (rng.gen_range(0..=t - crop_len), crop_len),
        Mode::Train => (0, crop_len),
        Mode::Eval => (0, t.max(MIN_FRAMES)),
    };
    let take = len.min(t - start);
    let mut out = Tensor::zeros(&[1, N_BINS, len]);
    let data = out.data_mut();
    for b in 0..N_BINS {
        data[b * len..b * len + take].copy_from_slice(&cqt.row(b)[start..start + take]);
    }
    out
}

/// Stacks cropped recordings into a `[N, 1, 84, crop_len]` batch.
pub fn make_batch(
    dataset: &LabeledDataset,
    indices: &[usize],
    crop_len: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let crops: Vec<Tensor<f32>> = indices
        .iter()
        .map(|&i| crop_or_pad(&dataset.recordings[i].cqt, crop_len, rng, Mode::Train))
        .collect();
    let labels = indices
        .iter()
        .map(|&i| dataset.recordings[i].clique)
        .collect();
    let batch = Tensor::stack(&crops)?.reshape(&[indices.len(), 1, N_BINS, crop_len])?;
    Ok((batch, labels))
}
