use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use coverid::audio::{write_wav, AudioClip, CqtSpectrogram};
use coverid::cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use coverid::retrieval::EmbeddingStore;
use coverid::train::{read_manifest, Split};

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn coverid(args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("coverid").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let o = coverid(args);
    assert_eq!(o.code, EXIT_OK, "{args:?}\n{}", o.stderr);
    o.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Eight cliques × three versions with audio, plus a two-epoch checkpoint
/// and an all-split embedding file. Built once per test binary.
struct Fixture {
    data: PathBuf,
    ckpt: PathBuf,
    emb: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_fixture");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        let ckpt = root.join("ckpt");
        let emb = root.join("all.emb");
        ok(&[
            "synth",
            "--cliques",
            "8",
            "--versions",
            "3",
            "--seed",
            "3",
            "--wav",
            "--out",
            s(&data),
        ]);
        let manifest = data.join("manifest.jsonl");
        ok(&[
            "train",
            "--manifest",
            s(&manifest),
            "--preset",
            "mini",
            "--epochs",
            "2",
            "--seed",
            "1",
            "--out",
            s(&ckpt),
        ]);
        ok(&[
            "embed",
            "--ckpt",
            s(&ckpt),
            "--manifest",
            s(&manifest),
            "--split",
            "all",
            "--out",
            s(&emb),
        ]);
        Fixture { data, ckpt, emb }
    })
}

#[test]
fn help_and_version_exit_zero() {
    for sub in [
        "synth",
        "extract",
        "train",
        "embed",
        "evaluate",
        "query",
        "gradcheck",
    ] {
        let o = coverid(&[sub, "--help"]);
        assert_eq!(o.code, EXIT_OK, "{sub}");
        assert!(
            o.stdout.contains("--seed"),
            "{sub} lacks --seed:\n{}",
            o.stdout
        );
    }
    assert_eq!(coverid(&["--help"]).code, EXIT_OK);
    assert!(ok(&["--version"]).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    for args in [
        vec![],
        vec!["frobnicate"],
        vec!["synth", "--cliques", "30", "--versions", "5"],
        vec![
            "synth",
            "--cliques",
            "3",
            "--versions",
            "5",
            "--out",
            out,
            "--bogus",
        ],
        vec!["synth", "--cliques", "3", "--versions", "2", "--out", out],
        vec![
            "train",
            "--manifest",
            "m.jsonl",
            "--preset",
            "huge",
            "--epochs",
            "1",
            "--out",
            out,
        ],
        vec![
            "train",
            "--manifest",
            "m.jsonl",
            "--preset",
            "mini",
            "--epochs",
            "1",
            "--out",
            out,
            "--loss",
            "magic",
        ],
        vec![
            "embed",
            "--ckpt",
            out,
            "--manifest",
            "m",
            "--split",
            "dev",
            "--out",
            out,
        ],
        vec![
            "query", "--emb", "e", "--ckpt", out, "--wav", "w", "--topk", "0",
        ],
        vec!["gradcheck", "--seed", "minus-one"],
    ] {
        let o = coverid(&args);
        assert_eq!(o.code, EXIT_USAGE, "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&[
            "synth",
            "--cliques",
            "2",
            "--versions",
            "3",
            "--seed",
            "11",
            "--out",
            s(d.path()),
        ]);
    }
    let rows = read_manifest(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(rows.len(), 6);
    for name in std::iter::once(PathBuf::from("manifest.jsonl"))
        .chain(rows.iter().map(|r| r.feature.clone()))
    {
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap(),
            "{}",
            name.display()
        );
    }
}

#[test]
fn extract_frame_counts_and_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("tone.wav");
    let sr = 22050;
    let samples = (0..sr)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin()) as f32)
        .collect();
    write_wav(&wav, &AudioClip::new(samples, sr as u32).unwrap()).unwrap();
    // 22050 samples give 44 raw frames
    for (factor, frames) in [("100", 1), ("20", 2)] {
        let dir = tmp.path().join(factor);
        ok(&[
            "extract",
            "--in",
            s(&wav),
            "--out",
            s(&dir),
            "--factor",
            factor,
        ]);
        let cqt = CqtSpectrogram::read(dir.join("tone.cqt")).unwrap();
        assert_eq!(cqt.n_frames(), frames, "factor {factor}");
        assert_eq!(cqt.downsample_factor(), factor.parse::<u32>().unwrap());
    }
    let o = coverid(&[
        "extract",
        "--in",
        s(&tmp.path().join("absent.wav")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.code, EXIT_FAILURE);
}

#[test]
fn train_writes_log_and_best_checkpoint() {
    let f = fixture();
    let log = std::fs::read_to_string(f.ckpt.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,ce_loss,triplet_loss,total_loss,val_map,gem_p"
    );
    assert_eq!(lines.len(), 3);
    assert!(f.ckpt.join("manifest.json").exists());
    assert!(f.ckpt.join("best").join("params.bin").exists());
}

#[test]
fn train_missing_manifest_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coverid(&[
        "train",
        "--manifest",
        s(&tmp.path().join("none.jsonl")),
        "--preset",
        "mini",
        "--epochs",
        "1",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.code, EXIT_FAILURE);
    assert!(o.stderr.contains("not found"), "{}", o.stderr);
}

#[test]
fn embed_counts_dims_and_corrupt_checkpoint() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let manifest = f.data.join("manifest.jsonl");
    let test_emb = tmp.path().join("test.emb");
    ok(&[
        "embed",
        "--ckpt",
        s(&f.ckpt),
        "--manifest",
        s(&manifest),
        "--split",
        "test",
        "--out",
        s(&test_emb),
    ]);
    let store = EmbeddingStore::read(&test_emb).unwrap();
    let n_test = read_manifest(&manifest)
        .unwrap()
        .iter()
        .filter(|e| e.split == Split::Test)
        .count();
    assert_eq!(store.len(), n_test);
    assert_eq!(store.dim(), 128);
    assert_eq!(EmbeddingStore::read(&f.emb).unwrap().len(), 24);

    // corrupt copy: truncated parameter blob
    let bad = tmp.path().join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    for name in ["manifest.json", "params.bin"] {
        std::fs::copy(f.ckpt.join(name), bad.join(name)).unwrap();
    }
    let blob = std::fs::read(bad.join("params.bin")).unwrap();
    std::fs::write(bad.join("params.bin"), &blob[..blob.len() - 7]).unwrap();
    let o = coverid(&[
        "embed",
        "--ckpt",
        s(&bad),
        "--manifest",
        s(&manifest),
        "--split",
        "test",
        "--out",
        s(&test_emb),
    ]);
    assert_eq!(o.code, EXIT_FAILURE);
}

#[test]
fn embed_dim_follows_projection_head() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let manifest = f.data.join("manifest.jsonl");
    let ckpt = tmp.path().join("ckpt");
    let emb = tmp.path().join("e.emb");
    ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--preset",
        "mini",
        "--epochs",
        "1",
        "--embed-dim",
        "16",
        "--gem-split",
        "--out",
        s(&ckpt),
    ]);
    ok(&[
        "embed",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--split",
        "val",
        "--out",
        s(&emb),
    ]);
    assert_eq!(EmbeddingStore::read(&emb).unwrap().dim(), 16);
}

#[test]
fn evaluate_perfect_store_and_mismatched_ids() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let manifest = f.data.join("manifest.jsonl");
    let rows = read_manifest(&manifest).unwrap();
    // one-hot embedding per clique
    let cliques: Vec<&str> = rows
        .iter()
        .map(|r| r.clique.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut store = EmbeddingStore::new(cliques.len()).unwrap();
    for r in &rows {
        let mut v = vec![0.0; cliques.len()];
        v[cliques.iter().position(|c| *c == r.clique).unwrap()] = 1.0;
        store.push(r.id.clone(), &v).unwrap();
    }
    let emb = tmp.path().join("perfect.emb");
    store.write(&emb).unwrap();
    let report_path = tmp.path().join("report.json");
    let text = ok(&[
        "evaluate",
        "--emb",
        s(&emb),
        "--manifest",
        s(&manifest),
        "--exclude-self",
        "--json",
        "--out",
        s(&report_path),
    ]);
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: HashSet<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    assert_eq!(
        keys,
        HashSet::from(["map", "p_at_10", "mr1", "n_queries_scored", "per_query"])
    );
    assert_eq!(json["map"], 1.0);
    assert_eq!(json["mr1"], 1.0);
    assert_eq!(json["n_queries_scored"], 24);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(saved, json);

    let table = ok(&[
        "evaluate",
        "--emb",
        s(&emb),
        "--manifest",
        s(&manifest),
        "--exclude-self",
        "--query-split",
        "test",
    ]);
    assert!(table.contains("mAP"), "{table}");

    let mut stray = store.clone();
    stray
        .push("not_in_manifest", &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        .unwrap();
    let stray_path = tmp.path().join("stray.emb");
    stray.write(&stray_path).unwrap();
    let o = coverid(&[
        "evaluate",
        "--emb",
        s(&stray_path),
        "--manifest",
        s(&manifest),
    ]);
    assert_eq!(o.code, EXIT_FAILURE);
}

#[test]
fn query_ranks_own_audio_first() {
    let f = fixture();
    let wav = f.data.join("audio").join("c005_v1.wav");
    let base = [
        "query",
        "--emb",
        s(&f.emb),
        "--ckpt",
        s(&f.ckpt),
        "--wav",
        s(&wav),
    ];
    let run_json = |extra: &[&str]| -> Vec<serde_json::Value> {
        let args: Vec<&str> = base
            .iter()
            .copied()
            .chain(extra.iter().copied())
            .chain(["--json"])
            .collect();
        serde_json::from_str(&ok(&args)).unwrap()
    };
    let top3 = run_json(&["--topk", "3"]);
    assert_eq!(top3.len(), 3);
    assert_eq!(top3[0]["id"], "c005_v1");
    assert_eq!(top3[0]["rank"], 1);
    let plain = run_json(&[]);
    assert_eq!(plain.len(), 10);
    assert_eq!(plain, run_json(&["--transpose-search", "0"]));
    let searched = run_json(&["--transpose-search", "2"]);
    for hit in &searched {
        let id = hit["id"].as_str().unwrap();
        if let Some(p) = plain.iter().find(|h| h["id"] == id) {
            assert!(hit["similarity"].as_f64().unwrap() >= p["similarity"].as_f64().unwrap());
        }
    }
    let table = ok(&base);
    assert_eq!(table.lines().count(), 10);
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let text = ok(&["gradcheck", "--seed", "2"]);
    for op in [
        "conv2d",
        "batch_norm2d_train",
        "batch_norm1d",
        "instance_norm",
        "relu",
        "max_pool2d",
        "linear",
        "softmax_cross_entropy",
        "gem",
        "gem_split",
        "triplet_batch_hard",
        "mini_model_loss",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(op) && l.contains("ok")),
            "{op} missing:\n{text}"
        );
    }
    let o = coverid(&["gradcheck", "--inject-broken", "--json"]);
    assert_eq!(o.code, EXIT_FAILURE);
    let reports: Vec<serde_json::Value> = serde_json::from_str(&o.stdout).unwrap();
    let broken = reports
        .iter()
        .find(|r| r["name"] == "broken_fixture")
        .unwrap();
    assert_eq!(broken["passed"], false);
}
