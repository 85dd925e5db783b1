use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{extract_features, write_wav};
use crate::error::{Error, Result};
use crate::train::{write_manifest, ManifestEntry, Split};

use super::render::render;
use super::song::{gen_song, CoverParams};

/// Default time downsampling for synthetic corpora. Songs last about a
/// minute, so the coarser factor of 100 would leave too few frames for
/// the mini preset's 80-frame crops.
pub const SYNTH_DOWNSAMPLE: u32 = 20;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_cliques: usize,
    pub versions_per_clique: usize,
    pub seed: u64,
    pub factor: u32,
    pub log_compress: bool,
    pub write_wav: bool,
}

impl CorpusConfig {
    pub fn new(n_cliques: usize, versions_per_clique: usize, seed: u64) -> Self {
        Self {
            n_cliques,
            versions_per_clique,
            seed,
            factor: SYNTH_DOWNSAMPLE,
            log_compress: false,
            write_wav: false,
        }
    }
}

/// Split of version `v` out of `versions`: val and test each get
/// `max(1, round(0.15 · versions))` of the highest indices, train the rest.
pub fn version_split(v: usize, versions: usize) -> Split {
    let held = ((0.15 * versions as f64).round() as usize).max(1);
    let n_train = versions - 2 * held;
    if v < n_train {
        Split::Train
    } else if v < n_train + held {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn clique_name(c: usize) -> String {
    format!("c{c:03}")
}

pub fn recording_id(c: usize, v: usize) -> String {
    format!("c{c:03}_v{v}")
}

/// Renders every version, writes `features/<id>.cqt` (and `audio/<id>.wav`
/// if requested) under `out_dir`, then `manifest.jsonl` with paths
/// relative to it. Clique `c` draws from its own random stream, so the
/// corpus depends only on the configuration.
pub fn build_dataset(
    config: &CorpusConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    if config.n_cliques == 0 {
        return Err(Error::InvalidArgument("need at least one clique".into()));
    }
    if config.versions_per_clique < 3 {
        return Err(Error::InvalidArgument(format!(
            "{} versions per clique; at least 3 are needed to fill train, val and test",
            config.versions_per_clique
        )));
    }
    let out_dir = out_dir.as_ref();
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let wav_dir = out_dir.join("audio");
    if config.write_wav {
        fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    }

    let mut entries = Vec::with_capacity(config.n_cliques * config.versions_per_clique);
    for c in 0..config.n_cliques {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(c as u64);
        let song = gen_song(&mut rng);
        for v in 0..config.versions_per_clique {
            let params = if v == 0 {
                CoverParams::identity(&song)
            } else {
                CoverParams::draw(&mut rng)
            };
            let clip = render(&song, &params)?;
            let id = recording_id(c, v);
            if config.write_wav {
                write_wav(wav_dir.join(format!("{id}.wav")), &clip)?;
            }
            let cqt = extract_features(&clip, config.factor, config.log_compress)?;
            let rel = PathBuf::from("features").join(format!("{id}.cqt"));
            cqt.write(out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                id,
                feature: rel,
                clique: clique_name(c),
                split: version_split(v, config.versions_per_clique),
            });
        }
    }
    write_manifest(out_dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}
