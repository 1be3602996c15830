use super::batch::Batch;
use super::TrainError;
use crate::model::{Bound, QueryEmbedding, RefEmbedding, ScholarLm, TokenId};
use crate::nn::{NnError, Real, Tape, Tensor, Var};

/// Mean next-token cross-entropy over rows whose mask bit is set.
pub fn ntp_loss(logits: &Tensor<f32>, targets: &[usize], mask: &[bool]) -> Result<f32, TrainError> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let l = tape.cross_entropy(x, targets, mask).map_err(degenerate)?;
    Ok(tape.value(l).item())
}

fn degenerate(e: NnError) -> TrainError {
    match e {
        NnError::DegenerateMask => TrainError::DegenerateBatch,
        other => TrainError::Nn(other),
    }
}

/// In-batch contrastive loss for one query: the negative log of the
/// positive's share of `exp(sim/τ)` among the positive and the negatives.
pub fn contrastive_loss(
    q: &QueryEmbedding,
    pos: &RefEmbedding,
    negs: &[RefEmbedding],
    tau: f32,
) -> Result<f32, TrainError> {
    let d = q.vector.len();
    let rows: Vec<Vec<f32>> = std::iter::once(pos).chain(negs).map(|r| r.vector.clone()).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(TrainError::Nn(NnError::Contract(format!(
            "query has dimension {d} but a reference has {}",
            bad.len()
        ))));
    }
    if !(tau > 0.0) {
        return Err(TrainError::Config("tau must be > 0".into()));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(Tensor::new(vec![1, d], q.vector.clone())?);
    let rv = tape.constant(Tensor::from_rows(&rows));
    let s = tape.matmul_nt(qv, rv)?;
    let s = tape.scale(s, 1.0 / tau);
    let negatives: Vec<usize> = (1..rows.len()).collect();
    let l = tape.set_cross_entropy(s, &[0], &[negatives])?;
    Ok(tape.value(l).item())
}

/// Tape handles for one batch's losses.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_g: Var,
    /// Absent when the batch has no citation events.
    pub l_r: Option<Var>,
    pub total: Var,
    pub tokens: usize,
    pub queries: usize,
}

/// Next-token targets for one sequence: row t predicts token t + 1, counted
/// when that token's mask bit is set.
pub fn shifted_targets(tokens: &[TokenId], loss_mask: &[u8]) -> (Vec<usize>, Vec<bool>) {
    let n = tokens.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for t in 0..n.saturating_sub(1) {
        targets[t] = tokens[t + 1] as usize;
        mask[t] = loss_mask[t + 1] != 0;
    }
    (targets, mask)
}

/// Builds `L_g + λ·L_r` for a batch on `tape`. `ref_sequences[i]` is the
/// encoder input for `batch.refs[i]`.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &ScholarLm<T>,
    bound: &Bound,
    batch: &Batch,
    ref_sequences: &[Vec<TokenId>],
    lambda: T,
    tau: T,
) -> Result<LossVars, TrainError> {
    let mut logits = Vec::with_capacity(batch.examples.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    let mut query_rows = Vec::new();
    for (ei, ex) in batch.examples.iter().enumerate() {
        let out = model.forward(tape, bound, &ex.tokens, true)?;
        logits.push(out.logits.expect("requested"));
        let (t, m) = shifted_targets(&ex.tokens, &ex.loss_mask);
        targets.extend(t);
        mask.extend(m);
        let positions: Vec<usize> = batch.queries.iter().filter(|q| q.example == ei).map(|q| q.position).collect();
        if !positions.is_empty() {
            query_rows.push(tape.select_rows(out.hidden, &positions)?);
        }
    }
    let tokens = mask.iter().filter(|b| **b).count();
    let all_logits = tape.concat_rows(&logits)?;
    let l_g = tape.cross_entropy(all_logits, &targets, &mask).map_err(degenerate)?;

    if batch.queries.is_empty() {
        return Ok(LossVars { l_g, l_r: None, total: l_g, tokens, queries: 0 });
    }
    // Queries were gathered example by example, which is also their order in `batch.queries`.
    let q = tape.concat_rows(&query_rows)?;
    let q = tape.l2_normalize_rows(q)?;
    let r = model.reference_rows(tape, bound, ref_sequences)?;
    let s = tape.matmul_nt(q, r)?;
    let s = tape.scale(s, T::one() / tau);
    let positives: Vec<usize> = batch.queries.iter().map(|q| q.positive).collect();
    let negatives: Vec<Vec<usize>> = batch.queries.iter().map(|q| q.negatives()).collect();
    let l_r = tape.set_cross_entropy(s, &positives, &negatives)?;
    let weighted = tape.scale(l_r, lambda);
    let total = tape.add(l_g, weighted)?;
    Ok(LossVars { l_g, l_r: Some(l_r), total, tokens, queries: batch.queries.len() })
}
