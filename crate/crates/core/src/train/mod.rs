//! The training engine: loss assembly, gradient clipping, Adam, the epoch
//! loop with interleaved evaluation, and hyperparameter grid search.
//!
//! Determinism contract: given the same data, configuration, and seed, two
//! runs produce bit-identical parameters, metrics, and checkpoints. All
//! randomness flows from one seeded ChaCha stream (initialisation, epoch
//! shuffles, dropout masks, in that order); evaluation consumes no
//! randomness and mutates no state, so adding or removing evaluations
//! cannot change a training trajectory.

mod checkpoint;

pub use checkpoint::{
    fnv1a64, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, SplitDataset, WindowedDataset};
use crate::layers::{
    network_forward, Buffers, DropoutPosition, LayerError, Mode, NetworkArchitecture,
};
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::tensor::{NodeId, ParamStore, Tape, Tensor, TensorError};

/// Rows per forward pass during evaluation. Inference math is row-wise
/// independent, so this affects speed and memory only, never results.
const EVAL_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("target row {row} is not one-hot (entries in {{0,1}} summing to 1)")]
    MalformedLabels { row: usize },
    #[error("non-finite gradient in \"{path}\"")]
    NonFiniteGradient { path: String },
    #[error("unknown hyperparameter {name:?}; valid names: {valid}")]
    UnknownHyperparameter { name: String, valid: String },
    #[error("hyperparameter {name:?}: cannot parse {value:?} as {expected}")]
    BadHyperparameterValue {
        name: String,
        value: String,
        expected: &'static str,
    },
    #[error("checkpoint does not fit this architecture: {0}")]
    CheckpointMismatch(String),
}

/// Optimisation hyperparameters. Architecture-side knobs (dropout, feature
/// flags) live on [`NetworkArchitecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Coefficient of the L2 penalty added to the loss; applies to weight
    /// matrices only, never biases or normalisation parameters.
    pub l2_lambda: f64,
    /// Maximum global gradient norm before rescaling.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Evaluate every this many epochs (the final epoch always evaluates).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            l2_lambda: 0.0015,
            clip_norm: 15.0,
            batch_size: 100,
            epochs: 25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            eval_every: 1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return fail(format!("l2_lambda must be non-negative, got {}", self.l2_lambda));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        // epochs == 0 is allowed: training degenerates to a recorded no-op.
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0 && self.adam_epsilon.is_finite()) {
            return fail(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter, plus the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zeroed state mirroring the store's parameters.
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| -> BTreeMap<String, Tensor> {
            s.iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape())))
                .collect()
        };
        Self {
            t: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }
}

/// One Adam update from the gradients currently held in the store.
/// Uses bias-corrected moment estimates.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    for (path, p) in store.iter_mut() {
        let m = state
            .m
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParam(path.clone()))?;
        let v = state
            .v
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParam(path.clone()))?;
        let grads = p.grad.data();
        for (i, (mv, vv)) in m
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .enumerate()
        {
            let g = grads[i];
            *mv = b1 * *mv + (1.0 - b1) * g;
            *vv = b2 * *vv + (1.0 - b2) * g * g;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            p.value.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// Outcome of one gradient-clipping pass.
#[derive(Debug, Clone, Copy)]
pub struct ClipReport {
    /// Global L2 norm before any rescaling.
    pub norm: f64,
    /// Factor applied to every gradient (1.0 when under the limit).
    pub scale: f64,
    pub clipped: bool,
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// A non-finite gradient is an error naming the offending parameter.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<ClipReport, TrainError> {
    if !(max_norm > 0.0 && max_norm.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "clip_norm must be positive and finite, got {max_norm}"
        )));
    }
    for (path, p) in store.iter() {
        if !p.grad.all_finite() {
            return Err(TrainError::NonFiniteGradient { path: path.clone() });
        }
    }
    let norm = store.global_grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        store.scale_grads(scale);
        Ok(ClipReport {
            norm,
            scale,
            clipped: true,
        })
    } else {
        Ok(ClipReport {
            norm,
            scale: 1.0,
            clipped: false,
        })
    }
}

/// Builds the scalar training loss: mean sigmoid cross-entropy over every
/// (row, class) element plus `l2_lambda / 2 * sum of squared weights` over
/// the decayed parameters. Targets must be one-hot rows.
pub fn classification_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &Tensor,
    decayed_weights: &[NodeId],
    l2_lambda: f64,
) -> Result<NodeId, TrainError> {
    if !(l2_lambda >= 0.0 && l2_lambda.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "l2_lambda must be non-negative, got {l2_lambda}"
        )));
    }
    let classes = targets.shape()[targets.rank() - 1];
    for (row, chunk) in targets.data().chunks_exact(classes).enumerate() {
        let mut sum = 0.0;
        for &v in chunk {
            if v != 0.0 && v != 1.0 {
                return Err(TrainError::MalformedLabels { row });
            }
            sum += v;
        }
        if sum != 1.0 {
            return Err(TrainError::MalformedLabels { row });
        }
    }
    let ce = tape.sigmoid_ce_mean(logits, targets)?;
    if l2_lambda == 0.0 || decayed_weights.is_empty() {
        return Ok(ce);
    }
    let mut penalty = tape.sum_sq(decayed_weights[0])?;
    for &w in &decayed_weights[1..] {
        let sq = tape.sum_sq(w)?;
        penalty = tape.add(penalty, sq)?;
    }
    let scaled = tape.scale(penalty, 0.5 * l2_lambda)?;
    Ok(tape.add(ce, scaled)?)
}

/// A model: architecture, parameters, and non-trainable buffers.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: NetworkArchitecture,
    pub params: ParamStore,
    pub buffers: Buffers,
}

impl Model {
    /// Fresh model with seeded initialisation.
    pub fn init(arch: NetworkArchitecture, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let params = arch.init_params(rng)?;
        let buffers = arch.init_buffers();
        Ok(Self {
            arch,
            params,
            buffers,
        })
    }

    /// Rebuilds a model from checkpointed tensors, verifying that the path
    /// set and every shape match what `arch` defines. Mismatches are
    /// collected into one error so the user sees the whole story.
    pub fn from_checkpoint(arch: NetworkArchitecture, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        // A throwaway init gives us the expected paths and shapes.
        let mut probe_rng = ChaCha8Rng::seed_from_u64(0);
        let reference = arch.init_params(&mut probe_rng)?;
        let ref_buffers = arch.init_buffers();
        let mut problems = Vec::new();
        for (path, p) in reference.iter() {
            match ckpt.params.get(path) {
                None => problems.push(format!("missing parameter {path}")),
                Some(t) if t.shape() != p.value.shape() => problems.push(format!(
                    "{path}: checkpoint shape {:?} vs architecture {:?}",
                    t.shape(),
                    p.value.shape()
                )),
                Some(_) => {}
            }
        }
        for path in ckpt.params.keys() {
            if reference.get(path).is_err() {
                problems.push(format!("unexpected parameter {path}"));
            }
        }
        for (path, t) in &ref_buffers {
            match ckpt.buffers.get(path) {
                None => problems.push(format!("missing buffer {path}")),
                Some(b) if b.shape() != t.shape() => problems.push(format!(
                    "{path}: checkpoint shape {:?} vs architecture {:?}",
                    b.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for path in ckpt.buffers.keys() {
            if !ref_buffers.contains_key(path) {
                problems.push(format!("unexpected buffer {path}"));
            }
        }
        if !problems.is_empty() {
            return Err(TrainError::CheckpointMismatch(problems.join("; ")));
        }
        let mut params = reference;
        params.restore_values(&ckpt.params)?;
        Ok(Self {
            arch,
            params,
            buffers: ckpt.buffers.clone(),
        })
    }
}

/// Everything needed to reproduce or resume a moment of training.
#[derive(Debug, Clone)]
pub struct TrainingSnapshot {
    pub epoch: usize,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: Buffers,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub adam_t: u64,
    pub rng_word_pos: u128,
}

impl TrainingSnapshot {
    fn capture(epoch: usize, model: &Model, adam: &AdamState, rng: &ChaCha8Rng) -> Self {
        Self {
            epoch,
            params: model.params.values_snapshot(),
            buffers: model.buffers.clone(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            adam_t: adam.t,
            rng_word_pos: rng.get_word_pos(),
        }
    }

    /// Packages the snapshot as a writable checkpoint.
    pub fn to_checkpoint(&self, config_hash: u64, seed: u64) -> Checkpoint {
        Checkpoint {
            config_hash,
            seed,
            rng_word_pos: self.rng_word_pos,
            adam_t: self.adam_t,
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
        }
    }
}

/// Metrics recorded at one evaluation point.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training-batch loss over this epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_f1: f64,
    pub test_accuracy: f64,
    pub test_f1: f64,
    /// Wall-clock seconds since training started. Informational only; no
    /// deterministic artifact may include it.
    pub wall_time_s: f64,
}

/// Why a run stopped early.
#[derive(Debug, Clone)]
pub struct TrainAbort {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
}

/// The result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub reports: Vec<EpochReport>,
    /// State at the evaluation with the best test F1 (ties broken by
    /// accuracy, then by the earlier epoch).
    pub best: TrainingSnapshot,
    /// State when training finished (or the last epoch boundary before an
    /// abort).
    pub final_state: TrainingSnapshot,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub best_test_f1: f64,
    pub final_test_accuracy: f64,
    pub final_test_f1: f64,
    /// Set when training stopped on a non-finite loss or gradient; the
    /// model was rolled back to `final_state`.
    pub abort: Option<TrainAbort>,
}

/// Evaluation output: the confusion matrix plus its derived headline
/// numbers.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor, TrainError> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(TrainError::InvalidConfig(format!(
                "label {l} outside 0..{classes}"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Row-wise argmax; ties resolve to the lowest index.
fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[t.rank() - 1];
    t.data()
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn decayed_ids(store: &ParamStore, bound: &crate::tensor::BoundParams) -> Vec<NodeId> {
    store
        .iter()
        .filter(|(_, p)| p.decay)
        .map(|(path, _)| bound.get(path).expect("bound param"))
        .collect()
}

/// Runs the model over a dataset in inference mode and scores the
/// predictions. Consumes no randomness and leaves the model untouched;
/// results are independent of how rows are batched.
pub fn evaluate(
    model: &mut Model,
    data: &WindowedDataset,
    class_names: Option<&[String]>,
) -> Result<EvalOutcome, TrainError> {
    if data.is_empty() {
        return Err(DataError::Empty("evaluation set has no windows".into()).into());
    }
    let mut preds = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = data.gather(chunk);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let net = model.arch.bind_network(&bound)?;
        let x_id = tape.leaf(x);
        let logits = network_forward(
            &mut tape,
            &model.arch,
            &net,
            &mut model.buffers,
            x_id,
            Mode::Infer,
            None,
        )?;
        preds.extend(argmax_rows(tape.value(logits)));
    }
    let confusion =
        ConfusionMatrix::from_pairs(&data.labels, &preds, data.class_count, class_names)?;
    let accuracy = confusion.accuracy()?;
    let weighted_f1 = confusion.weighted_f1()?;
    Ok(EvalOutcome {
        confusion,
        accuracy,
        weighted_f1,
    })
}

/// Trains `model` on `data.train`, evaluating on both splits at the
/// configured cadence. All randomness comes from `rng`, which the caller
/// seeds; pass the same stream that initialised the model to reproduce a
/// full run from one seed.
pub fn train(
    model: &mut Model,
    data: &SplitDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainRun, TrainError> {
    train_with_progress(model, data, cfg, rng, None)
}

/// [`train`] with an observer invoked after each recorded evaluation, for
/// live progress reporting. The observer sees each report exactly once and
/// cannot influence the run.
pub fn train_with_progress(
    model: &mut Model,
    data: &SplitDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut progress: Option<&mut dyn FnMut(&EpochReport)>,
) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    model.arch.validate()?;
    if data.train.is_empty() {
        return Err(DataError::Empty("training set has no windows".into()).into());
    }
    if data.train.class_count != model.arch.num_classes {
        return Err(TrainError::InvalidConfig(format!(
            "dataset has {} classes but the architecture expects {}",
            data.train.class_count, model.arch.num_classes
        )));
    }
    if data.train.channels() != model.arch.input_channels {
        return Err(TrainError::InvalidConfig(format!(
            "dataset has {} channels but the architecture expects {}",
            data.train.channels(),
            model.arch.input_channels
        )));
    }

    let classes = model.arch.num_classes;
    let mut adam = AdamState::new(&model.params);
    let started = Instant::now();
    let mut reports: Vec<EpochReport> = Vec::new();
    let mut last_good = TrainingSnapshot::capture(0, model, &adam, rng);
    let mut best: Option<TrainingSnapshot> = None;
    let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = 0usize;
    let mut abort: Option<TrainAbort> = None;

    let mut indices: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        indices.shuffle(rng);
        let mut epoch_losses = Vec::new();
        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.train.gather(chunk);
            let targets = one_hot(&labels, classes)?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let net = model.arch.bind_network(&bound)?;
            let decayed = decayed_ids(&model.params, &bound);
            let x_id = tape.leaf(x);
            let logits = network_forward(
                &mut tape,
                &model.arch,
                &net,
                &mut model.buffers,
                x_id,
                Mode::Train,
                Some(rng),
            )?;
            let loss = classification_loss(&mut tape, logits, &targets, &decayed, cfg.l2_lambda)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                abort = Some(TrainAbort {
                    epoch,
                    batch: batch_no,
                    reason: format!("loss became non-finite ({loss_value})"),
                });
                break 'epochs;
            }
            tape.backward(loss)?;
            model.params.harvest(&tape, &bound)?;
            drop(tape);
            match clip_gradients(&mut model.params, cfg.clip_norm) {
                Ok(_) => {}
                Err(TrainError::NonFiniteGradient { path }) => {
                    abort = Some(TrainAbort {
                        epoch,
                        batch: batch_no,
                        reason: format!("non-finite gradient in \"{path}\""),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            adam_step(&mut model.params, &mut adam, cfg)?;
            epoch_losses.push(loss_value);
        }

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let train_eval = evaluate(model, &data.train, Some(&data.class_names))?;
            let test_eval = evaluate(model, &data.test, Some(&data.class_names))?;
            let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            reports.push(EpochReport {
                epoch,
                train_loss,
                train_accuracy: train_eval.accuracy,
                train_f1: train_eval.weighted_f1,
                test_accuracy: test_eval.accuracy,
                test_f1: test_eval.weighted_f1,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
            if let Some(cb) = progress.as_mut() {
                cb(reports.last().expect("report was just pushed"));
            }
            let key = (test_eval.weighted_f1, test_eval.accuracy);
            if key > best_key {
                best_key = key;
                best_epoch = epoch;
                best = Some(TrainingSnapshot::capture(epoch, model, &adam, rng));
            }
        }
        last_good = TrainingSnapshot::capture(epoch, model, &adam, rng);
    }

    if let Some(a) = &abort {
        // Roll the model back to the last completed epoch so callers never
        // see the poisoned state.
        model.params.restore_values(&last_good.params)?;
        model.buffers = last_good.buffers.clone();
        let _ = a;
    }
    let final_state = if abort.is_some() {
        last_good
    } else {
        TrainingSnapshot::capture(cfg.epochs, model, &adam, rng)
    };
    let (final_acc, final_f1) = reports
        .last()
        .map(|r| (r.test_accuracy, r.test_f1))
        .unwrap_or((f64::NAN, f64::NAN));
    let best = best.unwrap_or_else(|| final_state.clone());
    Ok(TrainRun {
        reports,
        best,
        final_state,
        best_epoch,
        best_test_accuracy: if best_key.1.is_finite() { best_key.1 } else { final_acc },
        best_test_f1: if best_key.0.is_finite() { best_key.0 } else { final_f1 },
        final_test_accuracy: final_acc,
        final_test_f1: final_f1,
        abort,
    })
}

// ---------------------------------------------------------------------------
// Hyperparameter registry and grid search
// ---------------------------------------------------------------------------

/// Names accepted by [`apply_hyperparameter`] (bare form; `train.` and
/// `arch.` prefixes are stripped on input).
pub const HYPERPARAMETER_NAMES: [&str; 20] = [
    "learning_rate",
    "l2_lambda",
    "clip_norm",
    "batch_size",
    "epochs",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "eval_every",
    "seed",
    "hidden_width",
    "residual_blocks",
    "layers_per_block",
    "dropout_keep_prob",
    "dropout_position",
    "residual_skips",
    "bidirectional",
    "batch_norm",
    "bn_beta_init",
    "bn_momentum",
];

/// Sets one named field on the architecture or training config from its
/// string form. Unknown names list the valid vocabulary.
pub fn apply_hyperparameter(
    arch: &mut NetworkArchitecture,
    cfg: &mut TrainConfig,
    name: &str,
    value: &str,
) -> Result<(), TrainError> {
    let bare = name
        .strip_prefix("train.")
        .or_else(|| name.strip_prefix("arch."))
        .unwrap_or(name);
    let bad = |expected: &'static str| TrainError::BadHyperparameterValue {
        name: name.to_string(),
        value: value.to_string(),
        expected,
    };
    let as_f64 = || value.parse::<f64>().map_err(|_| bad("a number"));
    let as_usize = || value.parse::<usize>().map_err(|_| bad("a positive integer"));
    let as_u64 = || value.parse::<u64>().map_err(|_| bad("an unsigned integer"));
    let as_bool = || match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad("true or false")),
    };
    match bare {
        "learning_rate" => cfg.learning_rate = as_f64()?,
        "l2_lambda" => cfg.l2_lambda = as_f64()?,
        "clip_norm" => cfg.clip_norm = as_f64()?,
        "batch_size" => cfg.batch_size = as_usize()?,
        "epochs" => cfg.epochs = as_usize()?,
        "adam_beta1" => cfg.adam_beta1 = as_f64()?,
        "adam_beta2" => cfg.adam_beta2 = as_f64()?,
        "adam_epsilon" => cfg.adam_epsilon = as_f64()?,
        "eval_every" => cfg.eval_every = as_usize()?,
        "seed" => cfg.seed = as_u64()?,
        "hidden_width" => arch.hidden_width = as_usize()?,
        "residual_blocks" => arch.residual_blocks = as_usize()?,
        "layers_per_block" => arch.layers_per_block = as_usize()?,
        "dropout_keep_prob" => arch.dropout_keep_prob = as_f64()?,
        "dropout_position" => {
            arch.dropout_position = match value {
                "output_only" => DropoutPosition::OutputOnly,
                "between_blocks" => DropoutPosition::BetweenBlocks,
                _ => return Err(bad("output_only or between_blocks")),
            }
        }
        "residual_skips" => arch.residual_skips = as_bool()?,
        "bidirectional" => arch.bidirectional = as_bool()?,
        "batch_norm" => arch.batch_norm = as_bool()?,
        "bn_beta_init" => arch.bn_beta_init = as_f64()?,
        "bn_momentum" => arch.bn_momentum = as_f64()?,
        _ => {
            return Err(TrainError::UnknownHyperparameter {
                name: name.to_string(),
                valid: HYPERPARAMETER_NAMES.join(", "),
            })
        }
    }
    Ok(())
}

/// One axis of a hyperparameter grid.
#[derive(Debug, Clone)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Outcome of one grid trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    /// The overrides that defined this trial, in axis order.
    pub overrides: Vec<(String, String)>,
    /// The derived seed the trial trained with.
    pub seed: u64,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub best_test_f1: f64,
    pub final_test_accuracy: f64,
    pub final_test_f1: f64,
    pub aborted: bool,
}

impl TrialResult {
    /// Canonical `key=value;...` description, also used for seed derivation.
    pub fn override_string(&self) -> String {
        override_string(&self.overrides)
    }
}

fn override_string(overrides: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = overrides.iter().collect();
    sorted.sort();
    sorted
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Derives the seed for one trial: the base seed XORed with a hash of the
/// trial's override string, so every cell of the grid trains differently
/// but reproducibly.
pub fn trial_seed(base_seed: u64, overrides: &[(String, String)]) -> u64 {
    base_seed ^ fnv1a64(override_string(overrides).as_bytes())
}

/// Exhaustive grid search over the Cartesian product of the axes.
///
/// Trials are independent (each gets its own model, config, and derived
/// seed) and may run in parallel; results are ranked by best test F1, then
/// best test accuracy, then the override string, so the ordering is
/// deterministic regardless of scheduling.
pub fn grid_search(
    arch: &NetworkArchitecture,
    cfg: &TrainConfig,
    axes: &[GridAxis],
    data: &SplitDataset,
    parallel: bool,
) -> Result<Vec<TrialResult>, TrainError> {
    for axis in axes {
        if axis.values.is_empty() {
            return Err(TrainError::InvalidConfig(format!(
                "grid axis {:?} has no values",
                axis.key
            )));
        }
        // Surface unknown keys before any training starts.
        let mut a = arch.clone();
        let mut c = cfg.clone();
        apply_hyperparameter(&mut a, &mut c, &axis.key, &axis.values[0])?;
    }
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(combos.len() * axis.values.len());
        for combo in &combos {
            for v in &axis.values {
                let mut c = combo.clone();
                c.push((axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        combos = next;
    }

    let run_trial = |overrides: &Vec<(String, String)>| -> Result<TrialResult, TrainError> {
        let mut trial_arch = arch.clone();
        let mut trial_cfg = cfg.clone();
        for (k, v) in overrides {
            apply_hyperparameter(&mut trial_arch, &mut trial_cfg, k, v)?;
        }
        trial_cfg.seed = trial_seed(cfg.seed, overrides);
        trial_cfg.validate()?;
        trial_arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(trial_cfg.seed);
        let mut model = Model::init(trial_arch, &mut rng)?;
        let run = train(&mut model, data, &trial_cfg, &mut rng)?;
        Ok(TrialResult {
            overrides: overrides.clone(),
            seed: trial_cfg.seed,
            best_epoch: run.best_epoch,
            best_test_accuracy: run.best_test_accuracy,
            best_test_f1: run.best_test_f1,
            final_test_accuracy: run.final_test_accuracy,
            final_test_f1: run.final_test_f1,
            aborted: run.abort.is_some(),
        })
    };

    let mut results: Vec<TrialResult> = if parallel {
        combos
            .par_iter()
            .map(run_trial)
            .collect::<Result<Vec<_>, _>>()?
    } else {
        combos
            .iter()
            .map(run_trial)
            .collect::<Result<Vec<_>, _>>()?
    };
    results.sort_by(|a, b| {
        let fa = if a.aborted { f64::NEG_INFINITY } else { a.best_test_f1 };
        let fb = if b.aborted { f64::NEG_INFINITY } else { b.best_test_f1 };
        fb.total_cmp(&fa)
            .then_with(|| b.best_test_accuracy.total_cmp(&a.best_test_accuracy))
            .then_with(|| a.override_string().cmp(&b.override_string()))
    });
    Ok(results)
}
