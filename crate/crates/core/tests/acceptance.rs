//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N: PASS|FAIL ...` line to stderr (bypassing the harness's
//! output capture) before asserting.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coverid::audio::cqt::{longest_window, HOP_LENGTH, N_BINS, SAMPLE_RATE};
use coverid::audio::{compute_cqt, shift_bins, AudioClip};
use coverid::cli::{run, EXIT_OK};
use coverid::model::{ModelConfig, ResNetIbn};
use coverid::retrieval::{
    cosine_similarity, evaluate_scores, extract_embedding, label_permutation_baseline,
    similarity_matrix, transposed_max_similarity, EmbeddingStore,
};
use coverid::tensor::{Mode, Tape, Tensor};
use coverid::train::{read_manifest, Checkpoint, LabeledDataset, Split};
use coverid::verify::gradient_suite;

fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict}  {detail}");
}

// 1. gradient suite

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let reports = gradient_suite(0, false).unwrap();
    let elapsed = start.elapsed();
    let names: HashSet<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    let required = [
        "conv2d",
        "batch_norm2d_train",
        "batch_norm2d_eval",
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
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !names.contains(n))
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all_checked = reports.iter().all(|r| r.checked > 0);
    let pass = missing.is_empty()
        && all_checked
        && worst < 1e-6
        && reports.iter().all(|r| r.passed)
        && elapsed < Duration::from_secs(120);
    report(
        1,
        pass,
        format!(
            "{} ops, worst rel err {worst:.2e}, {:.1}s, missing {missing:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// 2. GeM identities

fn gem(x: &Tensor<f64>, p: f64) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let pv = tape.input(Tensor::new(vec![1], vec![p]).unwrap());
    let y = tape.gem_pool(xv, pv).unwrap();
    tape.value(y).item()
}

#[test]
fn criterion_2_gem_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mean, mut worst_max) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.gen_range(0.05..5.0));
        let mean = x.data().iter().sum::<f64>() / 36.0;
        let max = x.data().iter().copied().fold(f64::MIN, f64::max);
        worst_mean = worst_mean.max((gem(&x, 1.0) - mean).abs());
        worst_max = worst_max.max((gem(&x, 64.0) - max).abs() / max);
    }
    let pass = worst_mean < 1e-5 && worst_max < 0.06;
    report(
        2,
        pass,
        format!("|GeM1 - mean| <= {worst_mean:.2e}, |GeM64 - max|/max <= {worst_max:.4}"),
    );
    assert!(pass);
}

// 3. shape law

#[test]
fn criterion_3_shape_law() {
    let mut full = ResNetIbn::<f32>::new(ModelConfig::full(10), 0).unwrap();
    let full_shape = full
        .forward_values(
            Tensor::from_fn(&[1, 1, N_BINS, 400], |i| (i % 7) as f32 / 7.0),
            Mode::Eval,
        )
        .unwrap()
        .feature_map
        .shape()
        .to_vec();

    let start = Instant::now();
    let mut mini = ResNetIbn::<f32>::new(ModelConfig::mini(10), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut widths: Vec<usize> = vec![400, 8, 1024];
    widths.extend((0..47).map(|_| rng.gen_range(8..=1024)));
    let mut bad = Vec::new();
    for &t in &widths {
        let x = Tensor::from_fn(&[1, 1, N_BINS, t], |_| rng.gen_range(0.0..1.0));
        let shape = mini
            .forward_values(x, Mode::Eval)
            .unwrap()
            .feature_map
            .shape()
            .to_vec();
        if shape != [1, 128, 6, t.div_ceil(8)] {
            bad.push((t, shape));
        }
    }
    let mini_time = start.elapsed();
    let pass =
        full_shape == [1, 2048, 6, 50] && bad.is_empty() && mini_time < Duration::from_secs(60);
    report(
        3,
        pass,
        format!(
            "full {full_shape:?}, mini {} widths ({:.1}s), mismatches {bad:?}",
            widths.len(),
            mini_time.as_secs_f64()
        ),
    );
    assert!(pass);
}

// 4. metric oracle

/// Brute-force metrics: the rank of each reference is one plus the number
/// of references that beat it (higher score, or equal score and smaller id).
fn brute_force(
    qids: &[String],
    rids: &[String],
    sims: &[Vec<f64>],
    labels: &HashMap<String, String>,
    exclude_self: bool,
) -> Option<(f64, f64, f64)> {
    let mut aps = Vec::new();
    let mut p10s = Vec::new();
    let mut r1s = Vec::new();
    for (q, qid) in qids.iter().enumerate() {
        let pool: Vec<usize> = (0..rids.len())
            .filter(|&r| !(exclude_self && rids[r] == *qid))
            .collect();
        let mut rel_ranks: Vec<usize> = pool
            .iter()
            .filter(|&&r| labels[&rids[r]] == labels[qid])
            .map(|&r| {
                1 + pool
                    .iter()
                    .filter(|&&o| {
                        sims[q][o] > sims[q][r] || (sims[q][o] == sims[q][r] && rids[o] < rids[r])
                    })
                    .count()
            })
            .collect();
        if rel_ranks.is_empty() {
            continue;
        }
        rel_ranks.sort_unstable();
        let ap = rel_ranks
            .iter()
            .enumerate()
            .map(|(k, &rank)| (k + 1) as f64 / rank as f64)
            .sum::<f64>()
            / rel_ranks.len() as f64;
        aps.push(ap);
        p10s.push(rel_ranks.iter().filter(|&&r| r <= 10).count() as f64 / 10.0);
        r1s.push(rel_ranks[0] as f64);
    }
    if aps.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((mean(&aps), mean(&p10s), mean(&r1s)))
}

#[test]
fn criterion_4_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut scored = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=32);
        let n_labels = rng.gen_range(1..=6);
        let ids: Vec<String> = (0..n).map(|i| format!("r{i:02}")).collect();
        let labels: HashMap<String, String> = ids
            .iter()
            .map(|id| (id.clone(), format!("c{}", rng.gen_range(0..n_labels))))
            .collect();
        let n_q = rng.gen_range(1..=n);
        let qids: Vec<String> = ids.choose_multiple(&mut rng, n_q).cloned().collect();
        // coarse scores so ties are common
        let sims: Vec<Vec<f64>> = (0..n_q)
            .map(|_| (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect())
            .collect();
        let exclude_self = rng.gen_bool(0.5);
        let lib = evaluate_scores(&qids, &ids, &sims, &labels, exclude_self).ok();
        let oracle = brute_force(&qids, &ids, &sims, &labels, exclude_self);
        match (lib, oracle) {
            (Some(r), Some((map, p10, mr1))) => {
                scored += 1;
                if r.map != map || r.p_at_10 != p10 || r.mr1 != mr1 {
                    mismatches += 1;
                }
            }
            (None, None) => {}
            _ => mismatches += 1,
        }
    }
    // AP with relevant items at ranks 1, 3 and 6 of 10
    let mut rel = [false; 10];
    for r in [0, 2, 5] {
        rel[r] = true;
    }
    let ap = coverid::retrieval::average_precision(&rel);
    let mut tape = Tape::<f64>::new();
    let logits = tape.input(Tensor::from_fn(&[1, 10], |_| 0.25));
    let ce = tape.softmax_cross_entropy(logits, &[3]).unwrap();
    let ce = tape.value(ce).item();
    let pass = mismatches == 0 && (ap - 0.72222).abs() < 5e-6 && (ce - 10f64.ln()).abs() < 1e-6;
    report(
        4,
        pass,
        format!(
            "{mismatches} mismatches over 200 instances ({scored} scored), AP {ap:.5}, CE {ce:.7}"
        ),
    );
    assert!(pass);
}

// 5. CQT pitch law

fn tone(freq: f64, secs: f64) -> AudioClip {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let s = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32)
        .collect();
    AudioClip::new(s, SAMPLE_RATE).unwrap()
}

fn interior_argmax(clip: &AudioClip) -> Vec<usize> {
    let cqt = compute_cqt(clip).unwrap();
    let half = longest_window(SAMPLE_RATE) / 2 + 1;
    let first = half.div_ceil(HOP_LENGTH);
    let last = (clip.len() - half) / HOP_LENGTH;
    (first..=last).map(|t| cqt.argmax_bin(t)).collect()
}

#[test]
fn criterion_5_cqt_pitch_law() {
    let a4 = interior_argmax(&tone(440.0, 2.0));
    let mut bad = Vec::new();
    if a4.is_empty() || a4.iter().any(|&b| b != 45) {
        bad.push(0);
    }
    for k in -5i32..=5 {
        let f = 440.0 * 2f64.powf(k as f64 / 12.0);
        let bins = interior_argmax(&tone(f, 2.0));
        if bins.iter().any(|&b| b as i32 != 45 + k) {
            bad.push(k);
        }
    }
    let pass = bad.is_empty();
    report(
        5,
        pass,
        format!(
            "440 Hz -> bin 45 on {} interior frames; failing shifts {bad:?}",
            a4.len()
        ),
    );
    assert!(pass);
}

// 6 – 9 share one corpus and the seed-42 training run.

fn cli(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("coverid").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    assert_eq!(code, EXIT_OK, "{args:?}: {}", String::from_utf8_lossy(&err));
    String::from_utf8(out).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Desk {
    root: PathBuf,
    manifest: PathBuf,
    seconds: f64,
}

fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let start = Instant::now();
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        cli(&[
            "synth",
            "--cliques",
            "30",
            "--versions",
            "5",
            "--seed",
            "42",
            "--out",
            s(&data),
        ]);
        let manifest = data.join("manifest.jsonl");
        train_and_embed(&root, &manifest, "bnneck", 42);
        Desk {
            root,
            manifest,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn run_dir(root: &Path, loss: &str, seed: u64) -> PathBuf {
    root.join(format!("{loss}_{seed}"))
}

/// `train` then `embed --split all`; returns the run directory.
fn train_and_embed(root: &Path, manifest: &Path, loss: &str, seed: u64) -> PathBuf {
    let dir = run_dir(root, loss, seed);
    let seed_s = seed.to_string();
    cli(&[
        "train",
        "--manifest",
        s(manifest),
        "--preset",
        "mini",
        "--loss",
        loss,
        "--epochs",
        "40",
        "--seed",
        &seed_s,
        "--out",
        s(&dir.join("ckpt")),
    ]);
    cli(&[
        "embed",
        "--ckpt",
        s(&dir.join("ckpt")),
        "--manifest",
        s(manifest),
        "--split",
        "all",
        "--out",
        s(&dir.join("all.emb")),
    ]);
    dir
}

fn test_map(dir: &Path, manifest: &Path) -> serde_json::Value {
    let text = cli(&[
        "evaluate",
        "--emb",
        s(&dir.join("all.emb")),
        "--manifest",
        s(manifest),
        "--query-split",
        "test",
        "--exclude-self",
        "--json",
    ]);
    serde_json::from_str(&text).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn criterion_6_end_to_end_desk_run() {
    let d = desk();
    let dir = run_dir(&d.root, "bnneck", 42);
    let eval_start = Instant::now();
    let rep = test_map(&dir, &d.manifest);
    let (map, mr1) = (rep["map"].as_f64().unwrap(), rep["mr1"].as_f64().unwrap());

    let store = EmbeddingStore::read(dir.join("all.emb")).unwrap();
    let rows = read_manifest(&d.manifest).unwrap();
    let labels: HashMap<String, String> = rows
        .iter()
        .map(|r| (r.id.clone(), r.clique.clone()))
        .collect();
    let test_ids: HashSet<&str> = rows
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.id.as_str())
        .collect();
    let queries = store.subset(&test_ids);
    let sims = similarity_matrix(&queries, &store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let baseline = label_permutation_baseline(
        queries.ids(),
        store.ids(),
        &sims,
        &labels,
        true,
        100,
        &mut rng,
    )
    .unwrap();
    let total = d.seconds + eval_start.elapsed().as_secs_f64();

    let log = std::fs::read_to_string(dir.join("ckpt").join("train_log.csv")).unwrap();
    let ce: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let final_ce = *ce.last().unwrap();
    let trend = median(ce[30..40].to_vec()) < median(ce[..10].to_vec());
    let ce_ok = final_ce < 30f64.ln() * 0.5;

    let pass = map >= 0.60 && map >= 10.0 * baseline && mr1 <= 5.0 && total < 1800.0;
    report(
        6,
        pass,
        format!(
            "test mAP {map:.4} (>= 0.60), baseline {baseline:.4} (ratio {:.2}, >= 10), MR1 {mr1:.2} (<= 5), \
             {total:.0}s; final CE {final_ce:.3} vs {:.3} [{}], CE trend down [{}]",
            map / baseline,
            30f64.ln() * 0.5,
            if ce_ok { "ok" } else { "miss" },
            if trend { "ok" } else { "miss" },
        ),
    );
    assert!(
        trend,
        "median CE over epochs 31-40 should be below epochs 1-10"
    );
    assert!(pass);
}

#[test]
fn criterion_7_bnneck_not_worse_than_cls() {
    let d = desk();
    let mut bn = Vec::new();
    let mut cls = Vec::new();
    for seed in [42, 43, 44] {
        let b = if seed == 42 {
            run_dir(&d.root, "bnneck", 42)
        } else {
            train_and_embed(&d.root, &d.manifest, "bnneck", seed)
        };
        bn.push(test_map(&b, &d.manifest)["map"].as_f64().unwrap());
        let c = train_and_embed(&d.root, &d.manifest, "cls", seed);
        cls.push(test_map(&c, &d.manifest)["map"].as_f64().unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mc) = (mean(&bn), mean(&cls));
    let pass = mb >= mc - 0.02;
    report(
        7,
        pass,
        format!("mean test mAP bnneck {mb:.4} {bn:.4?} vs cls {mc:.4} {cls:.4?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_transposition_robustness() {
    let d = desk();
    let ckpt_dir = run_dir(&d.root, "bnneck", 42).join("ckpt");
    let mut model = Checkpoint::load(&ckpt_dir).unwrap().model;
    let ds = LabeledDataset::load(&d.manifest).unwrap();
    let tests: Vec<_> = ds
        .recordings()
        .iter()
        .filter(|r| r.split == Split::Test)
        .collect();

    let emb: Vec<Vec<f32>> = tests
        .iter()
        .map(|r| extract_embedding(&mut model, &r.cqt, false).unwrap())
        .collect();
    let mut shifted_sim = 0.0;
    for (r, e) in tests.iter().zip(&emb) {
        let up = extract_embedding(&mut model, &shift_bins(&r.cqt, 2).unwrap(), false).unwrap();
        shifted_sim += cosine_similarity(e, &up).unwrap();
    }
    shifted_sim /= tests.len() as f64;
    let (mut cross, mut n_cross) = (0.0, 0);
    for i in 0..tests.len() {
        for j in 0..tests.len() {
            if tests[i].clique != tests[j].clique {
                cross += cosine_similarity(&emb[i], &emb[j]).unwrap();
                n_cross += 1;
            }
        }
    }
    cross /= n_cross as f64;

    // every ordered pair of test tracks
    let mut violations = 0;
    let mut pairs = 0;
    for i in 0..tests.len() {
        for j in 0..tests.len() {
            if i == j {
                continue;
            }
            let hit =
                transposed_max_similarity(&mut model, &tests[i].cqt, &tests[j].cqt, 6).unwrap();
            let plain = cosine_similarity(&emb[i], &emb[j]).unwrap();
            pairs += 1;
            if hit.similarity < plain {
                violations += 1;
            }
        }
    }
    let margin = shifted_sim - cross;
    let pass = margin >= 0.10 && violations == 0;
    report(
        8,
        pass,
        format!("+2-bin cosine {shifted_sim:.4} vs cross-clique {cross:.4} (margin {margin:.4} >= 0.10); ±6 search below plain in {violations}/{pairs} pairs"),
    );
    assert!(pass);
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_determinism_and_round_trip() {
    let d = desk();
    let first = run_dir(&d.root, "bnneck", 42).join("ckpt");
    let again = d.root.join("repeat").join("ckpt");
    cli(&[
        "train",
        "--manifest",
        s(&d.manifest),
        "--preset",
        "mini",
        "--loss",
        "bnneck",
        "--epochs",
        "40",
        "--seed",
        "42",
        "--out",
        s(&again),
    ]);
    let (a, b) = (tree_bytes(&first), tree_bytes(&again));
    let identical = a == b;

    let mut loaded = Checkpoint::load(&first).unwrap();
    let ds = LabeledDataset::load(&d.manifest).unwrap();
    let x = ds.recordings()[0].cqt.to_tensor();
    let before = loaded.model.forward_values(x.clone(), Mode::Eval).unwrap();
    let resaved = d.root.join("resaved");
    loaded.save(&resaved).unwrap();
    let mut reloaded = Checkpoint::load(&resaved).unwrap();
    let after = reloaded.model.forward_values(x, Mode::Eval).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = bits(&before.f_c) == bits(&after.f_c)
        && bits(&before.logits) == bits(&after.logits)
        && bits(&before.feature_map) == bits(&after.feature_map);
    let pass = identical && round_trip;
    report(
        9,
        pass,
        format!("repeat training byte-identical over {} files: {identical}; save/load forward bitwise equal: {round_trip}", a.len()),
    );
    assert!(pass);
}
