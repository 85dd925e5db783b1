use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn ids(n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

/// Rank-counting metrics: no sorting, rank(j) = 1 + #items that beat j.
fn brute_force(
    qids: &[String],
    rids: &[String],
    sims: &[Vec<f64>],
    labels: &HashMap<String, String>,
    exclude_self: bool,
) -> Option<(f64, f64, f64, usize)> {
    let (mut ap_sum, mut p10_sum, mut r1_sum, mut n) = (0.0, 0.0, 0.0, 0);
    for (q, qid) in qids.iter().enumerate() {
        let cand: Vec<usize> = (0..rids.len())
            .filter(|&r| !(exclude_self && rids[r] == *qid))
            .collect();
        let rank = |j: usize| {
            1 + cand
                .iter()
                .filter(|&&i| {
                    sims[q][i] > sims[q][j] || (sims[q][i] == sims[q][j] && rids[i] < rids[j])
                })
                .count()
        };
        let relevant: Vec<usize> = cand
            .iter()
            .copied()
            .filter(|&r| labels[&rids[r]] == labels[qid])
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let ranks: Vec<usize> = relevant.iter().map(|&j| rank(j)).collect();
        let ap = ranks
            .iter()
            .map(|&rj| ranks.iter().filter(|&&ri| ri <= rj).count() as f64 / rj as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        ap_sum += ap;
        p10_sum += ranks.iter().filter(|&&r| r <= 10).count() as f64 / 10.0;
        r1_sum += *ranks.iter().min().unwrap() as f64;
        n += 1;
    }
    (n > 0).then(|| (ap_sum / n as f64, p10_sum / n as f64, r1_sum / n as f64, n))
}

/// Query ids, reference ids, scores, labels, exclude-self.
type Instance = (
    Vec<String>,
    Vec<String>,
    Vec<Vec<f64>>,
    HashMap<String, String>,
    bool,
);

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_refs = rng.gen_range(2..=32);
    let rids = ids(n_refs, "r");
    let shared = rng.gen_bool(0.5);
    let qids: Vec<String> = if shared {
        rids.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect()
    } else {
        ids(rng.gen_range(1..=8), "q")
    };
    let n_cliques = rng.gen_range(1..=6);
    let mut labels = HashMap::new();
    for id in rids.iter().chain(&qids) {
        labels
            .entry(id.clone())
            .or_insert_with(|| format!("c{}", rng.gen_range(0..n_cliques)));
    }
    // coarse values so ties are common
    let sims = (0..qids.len())
        .map(|_| {
            (0..n_refs)
                .map(|_| rng.gen_range(0..6) as f64 / 5.0 - 0.5)
                .collect()
        })
        .collect();
    (qids, rids, sims, labels, shared && rng.gen_bool(0.7))
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 200 {
        let (q, r, s, l, ex) = random_instance(&mut rng);
        let oracle = brute_force(&q, &r, &s, &l, ex);
        let got = evaluate_scores(&q, &r, &s, &l, ex);
        match oracle {
            None => assert!(got.is_err()),
            Some((map, p10, mr1, n)) => {
                let rep = got.unwrap();
                assert_eq!(rep.n_queries_scored, n);
                assert!((rep.map - map).abs() < 1e-12, "{} vs {map}", rep.map);
                assert!((rep.p_at_10 - p10).abs() < 1e-12);
                assert!((rep.mr1 - mr1).abs() < 1e-12);
                checked += 1;
            }
        }
    }
}

#[test]
fn average_precision_cases() {
    let mut rel = vec![false; 10];
    for r in [1, 3, 6] {
        rel[r - 1] = true;
    }
    assert!((average_precision(&rel) - 0.72222).abs() < 1e-5);
    assert_eq!(average_precision(&[true, true, false, false]), 1.0);
    for n in [5, 17, 40] {
        for r in 1..=n {
            let mut v = vec![false; n];
            v[r - 1] = true;
            assert!((average_precision(&v) - 1.0 / r as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn p_at_10_counts_three_of_ten() {
    let rids = ids(20, "r");
    let mut labels: HashMap<String, String> =
        rids.iter().map(|r| (r.clone(), "x".into())).collect();
    for r in ["r02", "r05", "r09"] {
        labels.insert(r.into(), "a".into());
    }
    labels.insert("q".into(), "a".into());
    let sims = vec![(0..20).map(|i| 1.0 - i as f64 * 0.01).collect()];
    let rep = evaluate_scores(&["q".to_string()], &rids, &sims, &labels, false).unwrap();
    assert!((rep.p_at_10 - 0.3).abs() < 1e-15);
    assert_eq!(rep.per_query[0].first_hit_rank, 3);
}

#[test]
fn cosine_cases() {
    assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(
        (cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2)
            .abs()
            < 1e-12
    );
    assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let a: Vec<f32> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = rng.gen_range(0.1f32..10.0);
        let ab = cosine_similarity(&a, &b).unwrap();
        assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
        let ca: Vec<f32> = a.iter().map(|x| x * c).collect();
        assert!((cosine_similarity(&ca, &b).unwrap() - ab).abs() < 1e-6);
    }
}

fn store(vectors: &[(&str, Vec<f32>)]) -> EmbeddingStore {
    let mut s = EmbeddingStore::new(vectors[0].1.len()).unwrap();
    for (id, v) in vectors {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let u: Vec<f32> = v.iter().map(|x| x / n).collect();
        s.push(*id, &u).unwrap();
    }
    s
}

#[test]
fn ranking_cases() {
    let refs = store(&[
        ("a", vec![0.9, 0.436]),
        ("b", vec![0.1, 0.995]),
        ("c", vec![0.5, 0.866]),
    ]);
    let q = store(&[("q", vec![1.0, 0.0])]);
    assert_eq!(rank_all(&q, &refs, false).unwrap(), vec![vec![0, 2, 1]]);

    // equal similarity: id order decides
    let tie = store(&[
        ("z", vec![1.0, 1.0]),
        ("m", vec![1.0, 1.0]),
        ("k", vec![0.0, 1.0]),
    ]);
    assert_eq!(rank_all(&q, &tie, false).unwrap()[0], vec![1, 0, 2]);

    let same = store(&[("x", vec![0.2, 0.7]), ("q", vec![1.0, 0.0])]);
    assert_eq!(rank_all(&q, &same, false).unwrap()[0][0], 1);
    assert_eq!(rank_all(&q, &same, true).unwrap()[0], vec![0]);

    let wrong = store(&[("w", vec![1.0, 0.0, 0.0])]);
    assert!(rank_all(&q, &wrong, false).is_err());
}

#[test]
fn ranking_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (q, r, s, l, ex) = random_instance(&mut rng);
        let warped: Vec<Vec<f64>> = s
            .iter()
            .map(|row| row.iter().map(|&x| (3.0 * x).exp() + x.powi(3)).collect())
            .collect();
        for (qi, qid) in q.iter().enumerate() {
            assert_eq!(
                rank_scores(qid, &r, &s[qi], ex),
                rank_scores(qid, &r, &warped[qi], ex)
            );
        }
        if let Ok(a) = evaluate_scores(&q, &r, &s, &l, ex) {
            assert_eq!(a, evaluate_scores(&q, &r, &warped, &l, ex).unwrap());
        }
    }
}

#[test]
fn perfect_ordering_scores_one() {
    let mut labels = HashMap::new();
    let mut rows = Vec::new();
    for c in 0..4 {
        for v in 0..3 {
            let id = format!("c{c}v{v}");
            labels.insert(id.clone(), format!("c{c}"));
            let mut e = vec![0.05f32; 4];
            e[c] = 1.0 + v as f32 * 0.01;
            rows.push((id, e));
        }
    }
    let refs: Vec<(&str, Vec<f32>)> = rows.iter().map(|(i, e)| (i.as_str(), e.clone())).collect();
    let s = store(&refs);
    let rep = evaluate(&s, &s, &labels, true).unwrap();
    assert_eq!(rep.map, 1.0);
    assert_eq!(rep.mr1, 1.0);
    assert_eq!(rep.n_queries_scored, 12);
    for (qi, order) in rank_all(&s, &s, true).unwrap().iter().enumerate() {
        assert!(!order.contains(&qi));
    }
    let json = serde_json::to_value(&rep).unwrap();
    let keys: Vec<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    let mut keys = keys;
    keys.sort();
    assert_eq!(
        keys,
        ["map", "mr1", "n_queries_scored", "p_at_10", "per_query"]
    );
}

#[test]
fn baseline_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rids = ids(30, "r");
    let labels: HashMap<String, String> = rids
        .iter()
        .enumerate()
        .map(|(i, r)| (r.clone(), format!("c{}", i % 6)))
        .collect();
    // scores that rank perfectly under the true labels
    let sims: Vec<Vec<f64>> = (0..30)
        .map(|q| {
            (0..30)
                .map(|r| if q % 6 == r % 6 { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let truth = evaluate_scores(&rids, &rids, &sims, &labels, true)
        .unwrap()
        .map;
    assert_eq!(truth, 1.0);
    let base =
        label_permutation_baseline(&rids, &rids, &sims, &labels, true, 100, &mut rng).unwrap();
    assert!(base < 0.4, "baseline {base}");
}
