use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use super::loss::joint_loss;
use super::TrainError;
use crate::corpus::MetadataIndex;
use crate::model::{reference_sequence, ScholarLm, TokenId, Vocabulary};
use crate::nn::Tape;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub parameters: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat offset of the worst coordinate.
    pub worst: (String, usize),
}

/// Encoder inputs for every reference in `batch`, in batch order.
pub fn batch_reference_sequences(
    vocab: &Vocabulary,
    metadata: &MetadataIndex,
    batch: &Batch,
    budget: usize,
    max_context: usize,
) -> Result<Vec<Vec<TokenId>>, TrainError> {
    batch
        .refs
        .iter()
        .map(|id| {
            let entry = metadata.get(id).ok_or_else(|| TrainError::MissingRef(id.clone()))?;
            Ok(reference_sequence(vocab, entry, budget, max_context)?)
        })
        .collect()
}

fn total_loss(
    model: &ScholarLm<f64>,
    batch: &Batch,
    refs: &[Vec<TokenId>],
    lambda: f64,
    tau: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let lv = joint_loss(&mut tape, model, &bound, batch, refs, lambda, tau)?;
    Ok(tape.value(lv.total).item())
}

/// Checks `d L_total / d θ` in f64 on `coordinates` sampled coordinates,
/// spread round-robin over parameter tensors.
pub fn gradient_check(
    model: &ScholarLm,
    batch: &Batch,
    refs: &[Vec<TokenId>],
    lambda: f64,
    tau: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheck, TrainError> {
    const EPS: f64 = 1e-5;
    let mut m = model.cast::<f64>();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let lv = joint_loss(&mut tape, &m, &bound, batch, refs, lambda, tau)?;
    tape.backward(lv.total)?;
    let analytic = m.collect_grads(&tape, &bound);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tensors = m.params().len();
    let names = m.params().names().to_vec();
    let mut out =
        GradCheck { parameters: m.params().num_scalars(), coordinates, max_rel_err: 0.0, worst: (String::new(), 0) };
    for c in 0..coordinates {
        let ti = c % n_tensors;
        let len = m.params().tensors()[ti].len();
        let j = rng.random_range(0..len);
        let orig = m.params().tensors()[ti].data()[j];
        m.params_mut().tensors_mut()[ti].data_mut()[j] = orig + EPS;
        let up = total_loss(&m, batch, refs, lambda, tau)?;
        m.params_mut().tensors_mut()[ti].data_mut()[j] = orig - EPS;
        let down = total_loss(&m, batch, refs, lambda, tau)?;
        m.params_mut().tensors_mut()[ti].data_mut()[j] = orig;

        let numeric = (up - down) / (2.0 * EPS);
        let a = analytic[ti][j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = (names[ti].clone(), j);
        }
    }
    Ok(out)
}
