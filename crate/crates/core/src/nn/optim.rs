use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet};

/// Adam hyperparameters plus moment accumulators, one pair per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
    #[serde(skip)]
    pub first_moment: Vec<Vec<f32>>,
    #[serde(skip)]
    pub second_moment: Vec<Vec<f32>>,
}

impl OptState {
    pub fn new(params: &ParamSet<f32>, learning_rate: f32, weight_decay: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    fn check_shapes(&self, params: &ParamSet<f32>, grads: &[Vec<f32>]) -> Result<(), NnError> {
        let bad = |name: &str| NnError::Contract(format!("optimizer state does not match parameter {name}"));
        if self.first_moment.len() != params.len()
            || self.second_moment.len() != params.len()
            || grads.len() != params.len()
        {
            return Err(NnError::Contract(format!(
                "expected {} parameters, got {} moments and {} gradients",
                params.len(),
                self.first_moment.len(),
                grads.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let n = t.len();
            if self.first_moment[i].len() != n || self.second_moment[i].len() != n || grads[i].len() != n {
                return Err(bad(name));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// The whole step is rejected before any parameter moves if a gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamSet<f32>, grads: &[Vec<f32>], state: &mut OptState) -> Result<(), NnError> {
    if !(state.learning_rate > 0.0) {
        return Err(NnError::Contract(format!("learning rate must be positive, got {}", state.learning_rate)));
    }
    state.check_shapes(params, grads)?;
    for ((name, _), g) in params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { name: name.to_string() });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let wd = state.weight_decay;

    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *p -= lr * (m_hat / (v_hat.sqrt() + state.epsilon) + wd * *p);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
