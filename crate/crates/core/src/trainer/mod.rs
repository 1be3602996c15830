//! Joint training of next-token prediction and in-batch contrastive
//! retrieval over shared weights.

mod batch;
mod config;
mod gradcheck;
mod loss;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{build_batch, Batch, QuerySlot};
pub use config::{ModelShape, Profile, TrainConfig};
pub use gradcheck::{batch_reference_sequences, gradient_check, GradCheck, REL_ERR_FLOOR};
pub use loss::{contrastive_loss, joint_loss, ntp_loss, shifted_targets, LossVars};

use crate::corpus::{MetadataIndex, TrainingExample};
use crate::model::{reference_sequence, Checkpoint, ModelError, ScholarLm, TokenId, Vocabulary};
use crate::nn::{adam_step, clip_global_norm, NnError, OptState, ParamSet, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training examples")]
    EmptyData,
    #[error("batch has no counted target tokens")]
    DegenerateBatch,
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("reference {0} is not in the metadata index")]
    MissingRef(String),
    #[error("checkpoint carries no usable training state: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    #[serde(rename = "L_g")]
    pub l_g: f32,
    #[serde(rename = "L_r")]
    pub l_r: f32,
    #[serde(rename = "L_total")]
    pub l_total: f32,
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
    pub tokens_seen: usize,
    pub queries_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

/// Position in the deterministic batch schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    /// Next batch index within `epoch`.
    pub batch: usize,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    optimizer: OptState,
    progress: Progress,
}

const FIRST_MOMENT: &str = "opt.m.";
const SECOND_MOMENT: &str = "opt.v.";

/// Per-step decision from the step callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct Trainer<'a> {
    model: ScholarLm,
    vocab: Vocabulary,
    metadata: &'a MetadataIndex,
    config: TrainConfig,
    opt: OptState,
    progress: Progress,
    ref_cache: HashMap<String, Vec<TokenId>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ScholarLm,
        vocab: Vocabulary,
        metadata: &'a MetadataIndex,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if model.config().vocab_size != vocab.len() {
            return Err(TrainError::Config(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        let opt = OptState::new(model.params(), config.learning_rate, config.weight_decay);
        Ok(Self { model, vocab, metadata, config, opt, progress: Progress::default(), ref_cache: HashMap::new() })
    }

    /// Restores weights, optimizer moments and schedule position.
    pub fn resume(ckpt: Checkpoint, metadata: &'a MetadataIndex) -> Result<Self, TrainError> {
        let state: TrainState = serde_json::from_value(
            ckpt.train_state.clone().ok_or_else(|| TrainError::State("missing train_state".into()))?,
        )
        .map_err(|e| TrainError::State(e.to_string()))?;
        let mut t = Self::new(ckpt.model, ckpt.vocab, metadata, state.config)?;
        let mut opt = state.optimizer;
        let moment = |prefix: &str| -> Result<Vec<Vec<f32>>, TrainError> {
            t.model
                .params()
                .names()
                .iter()
                .map(|n| {
                    ckpt.aux
                        .get(&format!("{prefix}{n}"))
                        .map(|x| x.data().to_vec())
                        .ok_or_else(|| TrainError::State(format!("missing optimizer moment for {n}")))
                })
                .collect()
        };
        opt.first_moment = moment(FIRST_MOMENT)?;
        opt.second_moment = moment(SECOND_MOMENT)?;
        t.opt = opt;
        t.progress = state.progress;
        Ok(t)
    }

    pub fn model(&self) -> &ScholarLm {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changes the epoch target; the rest of the config is fixed at creation.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs.max(1);
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    /// Weights, vocabulary, optimizer moments and schedule position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut aux = ParamSet::new();
        for (prefix, moments) in [(FIRST_MOMENT, &self.opt.first_moment), (SECOND_MOMENT, &self.opt.second_moment)] {
            for ((name, t), m) in self.model.params().iter().zip(moments.iter()) {
                aux.push(
                    format!("{prefix}{name}"),
                    Tensor::new(t.shape().to_vec(), m.clone()).expect("moment matches parameter"),
                );
            }
        }
        let state = TrainState { config: self.config, optimizer: self.opt.clone(), progress: self.progress };
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            aux,
            train_state: Some(serde_json::to_value(state).expect("plain data")),
        }
    }

    /// Example indices per batch for `epoch`, shuffled by (seed, epoch).
    pub fn schedule(&self, n_examples: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n_examples).collect();
        let mix = self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn ref_sequences(&mut self, batch: &Batch) -> Result<Vec<Vec<TokenId>>, TrainError> {
        let max = self.model.config().max_context;
        batch
            .refs
            .iter()
            .map(|id| {
                if let Some(s) = self.ref_cache.get(id) {
                    return Ok(s.clone());
                }
                let entry = self.metadata.get(id).ok_or_else(|| TrainError::MissingRef(id.clone()))?;
                let seq = reference_sequence(&self.vocab, entry, self.config.ref_budget, max)?;
                self.ref_cache.insert(id.clone(), seq.clone());
                Ok(seq)
            })
            .collect()
    }

    /// Loss values and raw gradients for one batch, without updating weights.
    pub fn gradients(&mut self, batch: &Batch) -> Result<(StepMetrics, Vec<Vec<f32>>), TrainError> {
        let refs = self.ref_sequences(batch)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let lv = joint_loss(&mut tape, &self.model, &bound, batch, &refs, self.config.lambda, self.config.tau)?;
        let l_g = tape.value(lv.l_g).item();
        let l_r = lv.l_r.map_or(0.0, |v| tape.value(v).item());
        let l_total = tape.value(lv.total).item();
        if !(l_g.is_finite() && l_r.is_finite() && l_total.is_finite()) {
            return Err(TrainError::NonFiniteLoss { epoch: self.progress.epoch, batch: self.progress.batch });
        }
        tape.backward(lv.total)?;
        let grads = self.model.collect_grads(&tape, &bound);
        let metrics = StepMetrics {
            step: self.progress.step + 1,
            epoch: self.progress.epoch,
            batch: self.progress.batch,
            l_g,
            l_r,
            l_total,
            grad_norm: 0.0,
            tokens_seen: lv.tokens,
            queries_seen: lv.queries,
        };
        Ok((metrics, grads))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepMetrics, TrainError> {
        let (mut metrics, mut grads) = self.gradients(batch)?;
        metrics.grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        adam_step(self.model.params_mut(), &grads, &mut self.opt)?;
        self.progress.step += 1;
        Ok(metrics)
    }

    /// Trains until `config.epochs` complete or `on_step` asks to stop.
    /// Resumed trainers continue from their saved schedule position.
    pub fn run(
        &mut self,
        data: &[TrainingExample],
        mut on_step: impl FnMut(&StepMetrics) -> Control,
    ) -> Result<Vec<EpochSummary>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let max = self.model.config().max_context;
        let mut summaries = Vec::new();
        while self.progress.epoch < self.config.epochs {
            let epoch = self.progress.epoch;
            let plan = self.schedule(data.len(), epoch);
            let mut acc = (0usize, 0f64, 0f64, 0f64);
            while self.progress.batch < plan.len() {
                let members: Vec<TrainingExample> =
                    plan[self.progress.batch].iter().map(|&i| data[i].clone()).collect();
                let batch = build_batch(&members, max);
                let m = self.step(&batch)?;
                acc = (acc.0 + 1, acc.1 + m.l_g as f64, acc.2 + m.l_r as f64, acc.3 + m.l_total as f64);
                self.progress.batch += 1;
                let end_of_epoch = self.progress.batch == plan.len();
                if end_of_epoch {
                    self.progress.epoch += 1;
                    self.progress.batch = 0;
                }
                let stop = on_step(&m) == Control::Stop;
                if end_of_epoch || stop {
                    if acc.0 > 0 {
                        let n = acc.0 as f64;
                        summaries.push(EpochSummary {
                            epoch,
                            steps: acc.0,
                            l_g: acc.1 / n,
                            l_r: acc.2 / n,
                            l_total: acc.3 / n,
                        });
                    }
                }
                if stop {
                    return Ok(summaries);
                }
                if end_of_epoch {
                    break;
                }
            }
        }
        Ok(summaries)
    }
}

/// Appends one JSON line per step to a metrics log.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        Ok(Self { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn append(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        let line = serde_json::to_string(m).expect("plain data");
        writeln!(self.file, "{line}")
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

/// Trains a freshly initialized model on `data`, logging each step to
/// `metrics_log` when given.
pub fn train(
    model: ScholarLm,
    vocab: Vocabulary,
    metadata: &MetadataIndex,
    data: &[TrainingExample],
    config: TrainConfig,
    metrics_log: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(model, vocab, metadata, config)?;
    let mut log = metrics_log.map(MetricsLog::open).transpose()?;
    let mut steps = Vec::new();
    let mut io_err = None;
    let epochs = trainer.run(data, |m| {
        steps.push(*m);
        if let Some(l) = log.as_mut() {
            if let Err(e) = l.append(m) {
                io_err = Some(e);
                return Control::Stop;
            }
        }
        Control::Continue
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), steps, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, synth_corpus, SynthMode, DEFAULT_INJECT_BUDGET};
    use crate::model::ModelConfig;

    struct Fixture {
        vocab: Vocabulary,
        examples: Vec<TrainingExample>,
        metadata: MetadataIndex,
    }

    fn fixture() -> Fixture {
        let c = synth_corpus(5, 12, 24, SynthMode::Synonym).unwrap();
        let built = build_corpus(&c.sources, &c.metadata, 2, DEFAULT_INJECT_BUDGET).unwrap();
        Fixture { vocab: built.vocab, examples: built.examples, metadata: c.metadata }
    }

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig { vocab_size: vocab, d_model: 16, n_layers: 1, n_heads: 2, max_context: 256, d_ff: 32 }
    }

    fn config() -> TrainConfig {
        TrainConfig { batch_size: 4, epochs: 2, seed: 9, learning_rate: 1e-3, tau: 0.1, ..Default::default() }
    }

    #[test]
    fn total_is_weighted_sum() {
        let f = fixture();
        let model = ScholarLm::init(tiny(f.vocab.len()), 1).unwrap();
        let cfg = TrainConfig { lambda: 0.7, ..config() };
        let out = train(model, f.vocab, &f.metadata, &f.examples, cfg, None).unwrap();
        assert_eq!(out.steps.len(), 2 * 3);
        for s in &out.steps {
            assert!((s.l_total - (s.l_g + 0.7 * s.l_r)).abs() <= 1e-5);
            assert!(s.l_r >= 0.0 && s.l_g >= 0.0);
            assert!(s.queries_seen > 0);
        }
    }

    #[test]
    fn zero_lambda_matches_generation_only_gradients() {
        let f = fixture();
        let model = ScholarLm::init(tiny(f.vocab.len()), 2).unwrap();
        let batch = build_batch(&f.examples[..3], 256);
        let mut t =
            Trainer::new(model.clone(), f.vocab.clone(), &f.metadata, TrainConfig { lambda: 0.0, ..config() }).unwrap();
        let (m, grads) = t.gradients(&batch).unwrap();
        assert!(m.l_r > 0.0);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut no_events = batch.clone();
        no_events.queries.clear();
        let lv = joint_loss(&mut tape, &model, &bound, &no_events, &[], 0.0, 1.0).unwrap();
        tape.backward(lv.total).unwrap();
        let want = model.collect_grads(&tape, &bound);
        assert_eq!(grads, want);
    }

    #[test]
    fn negative_text_reaches_gradients() {
        let f = fixture();
        let model = ScholarLm::init(tiny(f.vocab.len()), 3).unwrap();
        let batch = build_batch(&f.examples[..2], 256);
        let mut t = Trainer::new(model.clone(), f.vocab.clone(), &f.metadata, config()).unwrap();
        let (_, base) = t.gradients(&batch).unwrap();

        let mut meta = f.metadata.entries().to_vec();
        let victim = batch.refs[batch.queries[0].negatives()[0]].clone();
        for e in &mut meta {
            if e.ref_id == victim {
                e.abstract_text = "entirely different words here".into();
            }
        }
        let changed = MetadataIndex::new(meta).unwrap();
        let mut t2 = Trainer::new(model, f.vocab.clone(), &changed, config()).unwrap();
        let (_, other) = t2.gradients(&batch).unwrap();
        assert_ne!(base, other);
    }

    #[test]
    fn resume_replays_step_for_step() {
        let f = fixture();
        let model = ScholarLm::init(tiny(f.vocab.len()), 4).unwrap();
        let full = train(model.clone(), f.vocab.clone(), &f.metadata, &f.examples, config(), None).unwrap();

        let mut first = Vec::new();
        let mut t = Trainer::new(model, f.vocab.clone(), &f.metadata, config()).unwrap();
        t.run(&f.examples, |m| {
            first.push(*m);
            if first.len() == 4 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), &f.metadata).unwrap();
        let mut rest = Vec::new();
        resumed
            .run(&f.examples, |m| {
                rest.push(*m);
                Control::Continue
            })
            .unwrap();
        first.extend(rest);
        assert_eq!(first, full.steps);
        assert_eq!(resumed.model().params(), full.checkpoint.model.params());
    }

    #[test]
    fn same_seed_same_metrics() {
        let f = fixture();
        let model = ScholarLm::init(tiny(f.vocab.len()), 4).unwrap();
        let a = train(model.clone(), f.vocab.clone(), &f.metadata, &f.examples, config(), None).unwrap();
        let b = train(model, f.vocab.clone(), &f.metadata, &f.examples, config(), None).unwrap();
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn metrics_log_lines_carry_loss_names() {
        let f = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let model = ScholarLm::init(tiny(f.vocab.len()), 6).unwrap();
        let cfg = TrainConfig { epochs: 1, ..config() };
        let out = train(model, f.vocab, &f.metadata, &f.examples, cfg, Some(&path)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), out.steps.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for k in ["step", "L_g", "L_r", "L_total", "grad_norm"] {
            assert!(first.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn empty_data_rejected() {
        let f = fixture();
        let model = ScholarLm::init(tiny(f.vocab.len()), 1).unwrap();
        assert!(matches!(train(model, f.vocab, &f.metadata, &[], config(), None), Err(TrainError::EmptyData)));
    }
}
