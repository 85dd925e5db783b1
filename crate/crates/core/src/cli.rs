//! The `coverid` command line. [`run`] parses arguments, dispatches, and
//! maps failures to exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audio::cqt::DEFAULT_DOWNSAMPLE;
use crate::audio::{extract_features, load_wav, shift_bins};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset, ResNetIbn};
use crate::retrieval::{cosine_similarity, evaluate, extract_embedding, EmbeddingStore};
use crate::synth::{build_dataset, CorpusConfig, MANIFEST_NAME, SYNTH_DOWNSAMPLE};
use crate::train::{
    read_manifest, train, Checkpoint, LabeledDataset, LossMode, Split, TrainConfig,
};
use crate::verify::gradient_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "coverid", version, about = "Cover song identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Seed {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic cover-song corpus and its manifest.
    Synth(SynthArgs),
    /// Compute CQT feature files from WAV recordings.
    Extract(ExtractArgs),
    /// Train an embedding model from a manifest.
    Train(TrainArgs),
    /// Embed the recordings of one split with a trained checkpoint.
    Embed(EmbedArgs),
    /// Score an embedding file against the manifest's clique labels.
    Evaluate(EvaluateArgs),
    /// Rank stored embeddings against a WAV query.
    Query(QueryArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    cliques: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
    versions: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the rendered audio under `audio/`.
    #[arg(long)]
    wav: bool,
    #[arg(long, default_value_t = SYNTH_DOWNSAMPLE, value_parser = clap::value_parser!(u32).range(1..))]
    factor: u32,
    /// log(1 + x) compression after normalization.
    #[arg(long)]
    log: bool,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DOWNSAMPLE, value_parser = clap::value_parser!(u32).range(1..))]
    factor: u32,
    #[arg(long)]
    log: bool,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    preset: Preset,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
    /// cls, tri, naive or bnneck.
    #[arg(long, default_value = "bnneck")]
    loss: LossMode,
    /// Pool the two halves of the feature map with separate exponents.
    #[arg(long)]
    gem_split: bool,
    /// Size of a linear projection head on the embedding; 0 for none.
    #[arg(long, default_value_t = 0)]
    embed_dim: usize,
    /// Record that the features were log-compressed, so queries match.
    #[arg(long)]
    log: bool,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Clone, Copy, Debug)]
enum SplitArg {
    One(Split),
    All,
}

impl std::str::FromStr for SplitArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(SplitArg::All)
        } else {
            s.parse().map(SplitArg::One)
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Drop each query's own recording from its ranking.
    #[arg(long)]
    exclude_self: bool,
    /// Use only this split's recordings as queries; every stored
    /// embedding stays a reference.
    #[arg(long)]
    query_split: Option<Split>,
    #[arg(long)]
    json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    topk: u64,
    /// Try query shifts of up to this many bins each way, keeping the
    /// best similarity per reference.
    #[arg(long, default_value_t = 0)]
    transpose_search: u32,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Append an op with a wrong backward pass (harness self-test).
    #[arg(long, hide = true)]
    inject_broken: bool,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    seed: Seed,
}

/// Runs one invocation; `args` includes the program name.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Extract(a) => cmd_extract(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Embed(a) => cmd_embed(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Query(a) => cmd_query(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| Error::io("<stdout>", e))
    };
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = CorpusConfig {
        factor: a.factor,
        log_compress: a.log,
        write_wav: a.wav,
        ..CorpusConfig::new(a.cliques as usize, a.versions as usize, a.seed.seed)
    };
    let rows = build_dataset(&cfg, &a.out)?;
    say!(
        out,
        "wrote {} recordings to {}",
        rows.len(),
        a.out.join(MANIFEST_NAME).display()
    )?;
    Ok(EXIT_OK)
}

fn cmd_extract(a: ExtractArgs, out: &mut dyn Write) -> Result<i32> {
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    for input in &a.inputs {
        let clip = load_wav(input)?;
        let cqt = extract_features(&clip, a.factor, a.log)?;
        let stem = input.file_stem().ok_or_else(|| {
            Error::InvalidArgument(format!("no file name in {}", input.display()))
        })?;
        let dest = a.out.join(stem).with_extension("cqt");
        cqt.write(&dest)?;
        say!(
            out,
            "{} -> {} ({} frames)",
            input.display(),
            dest.display(),
            cqt.n_frames()
        )?;
    }
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let ds = LabeledDataset::load(&a.manifest)?;
    let mut cfg = TrainConfig::new(a.preset, a.seed.seed);
    cfg.epochs = a.epochs;
    cfg.loss_mode = a.loss;
    cfg.feature_factor = ds.feature_factor();
    cfg.log_compress = a.log;
    let model_cfg = ModelConfig {
        gem_split: a.gem_split,
        embed_dim: a.embed_dim,
        neck: a.loss.uses_neck(),
        ..ModelConfig::preset(a.preset, ds.num_cliques())
    };
    let model = ResNetIbn::new(model_cfg, a.seed.seed)?;
    let mut write_err = None;
    let outcome = train(model, &ds, &cfg, |m| {
        let val = m.val_map.map_or("-".to_string(), |v| format!("{v:.4}"));
        if let Err(e) = writeln!(
            out,
            "epoch {:>3}  ce {:.4}  triplet {:.4}  total {:.4}  val_map {val}  p {:.3}",
            m.epoch, m.ce_loss, m.triplet_loss, m.total_loss, m.gem_p
        ) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io("<stdout>", e));
    }
    outcome.save(&a.out)?;
    say!(out, "checkpoint written to {}", a.out.display())?;
    Ok(EXIT_OK)
}

fn cmd_embed(a: EmbedArgs, out: &mut dyn Write) -> Result<i32> {
    let mut ckpt = Checkpoint::load(&a.ckpt)?;
    let ds = LabeledDataset::load(&a.manifest)?;
    let project = ckpt.model.config().embed_dim > 0;
    let mut store = EmbeddingStore::new(ckpt.model.config().embedding_dim())?;
    for r in ds.recordings() {
        if let SplitArg::One(s) = a.split {
            if r.split != s {
                continue;
            }
        }
        store.push(
            r.id.clone(),
            &extract_embedding(&mut ckpt.model, &r.cqt, project)?,
        )?;
    }
    store.write(&a.out)?;
    say!(
        out,
        "wrote {} embeddings of dim {} to {}",
        store.len(),
        store.dim(),
        a.out.display()
    )?;
    Ok(EXIT_OK)
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let refs = EmbeddingStore::read(&a.emb)?;
    let manifest = read_manifest(&a.manifest)?;
    let labels: HashMap<String, String> = manifest
        .iter()
        .map(|e| (e.id.clone(), e.clique.clone()))
        .collect();
    if let Some(id) = refs.ids().iter().find(|id| !labels.contains_key(*id)) {
        return Err(Error::InvalidArgument(format!(
            "embedding {id:?} is not in the manifest"
        )));
    }
    let queries = match a.query_split {
        Some(split) => {
            let keep: HashSet<&str> = manifest
                .iter()
                .filter(|e| e.split == split)
                .map(|e| e.id.as_str())
                .collect();
            refs.subset(&keep)
        }
        None => refs.clone(),
    };
    let report = evaluate(&queries, &refs, &labels, a.exclude_self)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.out {
        fs::write(path, format!("{json}\n")).map_err(io_err(path))?;
    }
    if a.json {
        say!(out, "{json}")?;
    } else {
        write!(out, "{}", report.to_table()).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Hit {
    rank: usize,
    id: String,
    similarity: f64,
    /// Query shift (in bins) that produced the similarity.
    shift: i32,
}

fn cmd_query(a: QueryArgs, out: &mut dyn Write) -> Result<i32> {
    let store = EmbeddingStore::read(&a.emb)?;
    let mut ckpt = Checkpoint::load(&a.ckpt)?;
    if store.dim() != ckpt.model.config().embedding_dim() {
        return Err(Error::Shape(format!(
            "store dim {} does not match the checkpoint's embedding dim {}",
            store.dim(),
            ckpt.model.config().embedding_dim()
        )));
    }
    let tc = &ckpt.train_config;
    let cqt = extract_features(&load_wav(&a.wav)?, tc.feature_factor, tc.log_compress)?;
    let project = ckpt.model.config().embed_dim > 0;
    let r = a.transpose_search as i32;
    let mut best: Vec<(f64, i32)> = vec![(f64::NEG_INFINITY, 0); store.len()];
    for shift in std::iter::once(0).chain((1..=r).flat_map(|i| [-i, i])) {
        let q = extract_embedding(&mut ckpt.model, &shift_bins(&cqt, shift)?, project)?;
        for (i, b) in best.iter_mut().enumerate() {
            let s = cosine_similarity(&q, store.vector(i))?;
            if s > b.0 {
                *b = (s, shift);
            }
        }
    }
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.sort_by(|&x, &y| {
        best[y]
            .0
            .total_cmp(&best[x].0)
            .then(store.id(x).cmp(store.id(y)))
    });
    let hits: Vec<Hit> = order
        .into_iter()
        .take(a.topk as usize)
        .enumerate()
        .map(|(k, i)| Hit {
            rank: k + 1,
            id: store.id(i).to_string(),
            similarity: best[i].0,
            shift: best[i].1,
        })
        .collect();
    if a.json {
        say!(out, "{}", serde_json::to_string_pretty(&hits)?)?;
    } else {
        for h in &hits {
            say!(
                out,
                "{:>4}  {:<24} {:.6}  shift {:+}",
                h.rank,
                h.id,
                h.similarity,
                h.shift
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let reports = gradient_suite(a.seed.seed, a.inject_broken)?;
    if a.json {
        say!(out, "{}", serde_json::to_string_pretty(&reports)?)?;
    } else {
        for r in &reports {
            say!(
                out,
                "{:<24} {}  max rel err {:.3e}  checked {}  skipped {}",
                r.name,
                if r.passed { "ok  " } else { "FAIL" },
                r.max_rel_error,
                r.checked,
                r.skipped_near_kink
            )?;
        }
    }
    Ok(if reports.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}
