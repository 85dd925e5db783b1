use crate::error::Result;
use crate::model::ForwardVars;
use crate::tensor::{Scalar, Tape, TripletStats, Var};

use super::config::LossMode;

/// Loss terms of one batch. Both parts are always computed so they can be
/// logged; `total` only includes the ones the mode trains on.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ce: Var,
    pub triplet: Var,
    pub total: Var,
    pub triplet_stats: TripletStats,
}

pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardVars,
    labels: &[usize],
    mode: LossMode,
    alpha: f64,
) -> Result<LossParts> {
    let ce = tape.softmax_cross_entropy(out.logits, labels)?;
    let (triplet, triplet_stats) = tape.triplet_batch_hard(out.f_t, labels, T::lit(alpha))?;
    let total = match mode {
        LossMode::ClsOnly => ce,
        LossMode::TriOnly => triplet,
        LossMode::JointNaive | LossMode::JointBnneck => tape.add(ce, triplet)?,
    };
    Ok(LossParts {
        ce,
        triplet,
        total,
        triplet_stats,
    })
}
