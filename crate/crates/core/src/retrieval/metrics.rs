use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::store::EmbeddingStore;

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// `sims[q][r]` between every query and reference.
pub fn similarity_matrix(queries: &EmbeddingStore, refs: &EmbeddingStore) -> Result<Vec<Vec<f64>>> {
    if queries.dim() != refs.dim() {
        return Err(Error::Shape(format!(
            "query dimension {} differs from reference dimension {}",
            queries.dim(),
            refs.dim()
        )));
    }
    (0..queries.len())
        .map(|q| {
            (0..refs.len())
                .map(|r| cosine_similarity(queries.vector(q), refs.vector(r)))
                .collect()
        })
        .collect()
}

/// Reference indices by descending score, ties by ascending id. With
/// `exclude_self` the reference sharing the query's id is dropped.
pub fn rank_scores(
    query_id: &str,
    ref_ids: &[String],
    scores: &[f64],
    exclude_self: bool,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ref_ids.len())
        .filter(|&r| !(exclude_self && ref_ids[r] == query_id))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ref_ids[a].cmp(&ref_ids[b]))
    });
    order
}

/// Ranked reference indices for every query.
pub fn rank_all(
    queries: &EmbeddingStore,
    refs: &EmbeddingStore,
    exclude_self: bool,
) -> Result<Vec<Vec<usize>>> {
    let sims = similarity_matrix(queries, refs)?;
    Ok((0..queries.len())
        .map(|q| rank_scores(queries.id(q), refs.ids(), &sims[q], exclude_self))
        .collect())
}

/// Mean of precision@k over the ranks `k` of relevant items. Returns 0
/// when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub ap: f64,
    pub first_hit_rank: usize,
    pub n_relevant: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub p_at_10: f64,
    pub mr1: f64,
    pub n_queries_scored: usize,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>6} {:>6}", "query", "AP", "rank1", "rel");
        for q in &self.per_query {
            let _ = writeln!(
                s,
                "{:<24} {:>8.4} {:>6} {:>6}",
                q.id, q.ap, q.first_hit_rank, q.n_relevant
            );
        }
        let _ = writeln!(
            s,
            "mAP {:.4}  P@10 {:.4}  MR1 {:.2}  scored {}",
            self.map, self.p_at_10, self.mr1, self.n_queries_scored
        );
        s
    }
}

/// Metrics from a precomputed score matrix. `labels` maps every id to its
/// clique; queries without a relevant reference are not scored.
pub fn evaluate_scores(
    query_ids: &[String],
    ref_ids: &[String],
    sims: &[Vec<f64>],
    labels: &HashMap<String, String>,
    exclude_self: bool,
) -> Result<EvalReport> {
    let label = |id: &str| {
        labels
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no clique label for {id:?}")))
    };
    for id in ref_ids {
        label(id)?;
    }
    let mut per_query = Vec::new();
    let mut p10_sum = 0.0;
    for (q, qid) in query_ids.iter().enumerate() {
        let ql = label(qid)?;
        let order = rank_scores(qid, ref_ids, &sims[q], exclude_self);
        let rel: Vec<bool> = order.iter().map(|&r| labels[&ref_ids[r]] == *ql).collect();
        let n_relevant = rel.iter().filter(|&&x| x).count();
        if n_relevant == 0 {
            continue;
        }
        let top = rel.len().min(10);
        p10_sum += rel[..top].iter().filter(|&&x| x).count() as f64 / 10.0;
        per_query.push(QueryResult {
            id: qid.clone(),
            ap: average_precision(&rel),
            first_hit_rank: rel.iter().position(|&x| x).map_or(0, |p| p + 1),
            n_relevant,
        });
    }
    if per_query.is_empty() {
        return Err(Error::Degenerate(
            "no query has a relevant reference; nothing to score".into(),
        ));
    }
    let n = per_query.len() as f64;
    Ok(EvalReport {
        map: per_query.iter().map(|q| q.ap).sum::<f64>() / n,
        p_at_10: p10_sum / n,
        mr1: per_query
            .iter()
            .map(|q| q.first_hit_rank as f64)
            .sum::<f64>()
            / n,
        n_queries_scored: per_query.len(),
        per_query,
    })
}

pub fn evaluate(
    queries: &EmbeddingStore,
    refs: &EmbeddingStore,
    labels: &HashMap<String, String>,
    exclude_self: bool,
) -> Result<EvalReport> {
    let sims = similarity_matrix(queries, refs)?;
    evaluate_scores(queries.ids(), refs.ids(), &sims, labels, exclude_self)
}

/// Mean mAP after randomly permuting clique labels across all ids,
/// keeping the score matrix fixed.
pub fn label_permutation_baseline(
    query_ids: &[String],
    ref_ids: &[String],
    sims: &[Vec<f64>],
    labels: &HashMap<String, String>,
    exclude_self: bool,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let ids: Vec<&String> = query_ids
        .iter()
        .chain(ref_ids)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut pool: Vec<String> = ids
        .iter()
        .map(|id| {
            labels
                .get(*id)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no clique label for {id:?}")))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for _ in 0..trials {
        pool.shuffle(rng);
        let permuted: HashMap<String, String> = ids
            .iter()
            .map(|id| (*id).clone())
            .zip(pool.iter().cloned())
            .collect();
        total += evaluate_scores(query_ids, ref_ids, sims, &permuted, exclude_self)?.map;
    }
    Ok(total / trials.max(1) as f64)
}
