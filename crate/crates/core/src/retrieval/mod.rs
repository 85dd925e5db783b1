//! Embeddings, similarity ranking and retrieval metrics.

mod embed;
mod metrics;
mod store;

pub use embed::{embed_all, extract_embedding, transposed_max_similarity, TransposeMatch};
pub use metrics::{
    average_precision, cosine_similarity, evaluate, evaluate_scores, label_permutation_baseline,
    rank_all, rank_scores, similarity_matrix, EvalReport, QueryResult,
};
pub use store::{EmbeddingStore, EMB_VERSION};

#[cfg(test)]
mod tests;
