//! Network building blocks: LSTM cells, bidirectional layers, residual
//! blocks with batch normalisation, dropout, and the end-to-end forward
//! pass.
//!
//! The architecture is a stack of residual blocks. Each block holds one or
//! more bidirectional LSTM layers whose two directions are concatenated and
//! projected back to the hidden width through a ReLU; the block's input is
//! added back on top (identity skip) and the sum is batch-normalised.
//! Classification reads the final time step of the last block through an
//! affine head. Feature flags (`residual_skips`, `bidirectional`,
//! `batch_norm`) turn the individual mechanisms off so reduced variants of
//! the same network can be trained for comparison.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{BoundParams, NodeId, ParamStore, Tape, Tensor, TensorError};

/// Whether a forward pass is part of training or inference. Training mode
/// applies dropout and batch statistics (updating running estimates);
/// inference mode is deterministic and mutates nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Errors raised while assembling or running network layers.
#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence is empty (zero time steps)")]
    EmptySequence,
    #[error("residual skip needs matching widths, got input {input:?} vs output {output:?}")]
    ResidualWidthMismatch { input: Vec<usize>, output: Vec<usize> },
    #[error("input has {got} channels, architecture expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("dropout keep probability {0} outside (0, 1]")]
    InvalidKeepProb(f64),
    #[error("training-mode dropout needs a random source")]
    MissingRng,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

/// Where dropout is applied in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutPosition {
    /// On the features flowing between consecutive residual blocks.
    BetweenBlocks,
    /// On the final-step features feeding the classification head.
    OutputOnly,
}

/// Shape of the network and the feature flags that carve out its reduced
/// variants. Block and layer counts are at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkArchitecture {
    /// Number of residual blocks stacked in series.
    pub residual_blocks: usize,
    /// Bidirectional layers inside each block.
    pub layers_per_block: usize,
    /// Hidden width `h`; every layer consumes and produces `h` features.
    pub hidden_width: usize,
    /// Input channels per time step.
    pub input_channels: usize,
    /// Output classes.
    pub num_classes: usize,
    /// Time steps per window (informational; the forward pass accepts any
    /// positive sequence length).
    pub window_length: usize,
    /// Dropout survival probability; 1.0 disables dropout.
    pub dropout_keep_prob: f64,
    pub dropout_position: DropoutPosition,
    /// Identity skip connections around each block's layers.
    pub residual_skips: bool,
    /// Run a second LSTM pass over the reversed sequence in every layer.
    pub bidirectional: bool,
    /// Batch-normalise each block's output.
    pub batch_norm: bool,
    /// Initial value of the batch-norm shift `beta`.
    pub bn_beta_init: f64,
    /// Exponential-decay factor for the running mean/variance estimates.
    pub bn_momentum: f64,
}

impl NetworkArchitecture {
    pub fn validate(&self) -> Result<(), LayerError> {
        let fail = |msg: String| Err(LayerError::InvalidArchitecture(msg));
        if self.residual_blocks == 0 {
            return fail("residual_blocks must be at least 1 (blocks are numbered from 1)".into());
        }
        if self.layers_per_block == 0 {
            return fail("layers_per_block must be at least 1".into());
        }
        if self.hidden_width == 0 {
            return fail("hidden_width must be positive".into());
        }
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.window_length == 0 {
            return fail("window_length must be positive".into());
        }
        if !(self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0) {
            return Err(LayerError::InvalidKeepProb(self.dropout_keep_prob));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return fail(format!("bn_momentum must lie in (0, 1), got {}", self.bn_momentum));
        }
        if !self.bn_beta_init.is_finite() {
            return fail(format!("bn_beta_init must be finite, got {}", self.bn_beta_init));
        }
        Ok(())
    }

    /// Initialises all parameters with a fixed draw order: input projection,
    /// then blocks in index order (each layer's forward cell, backward cell,
    /// projection), then batch-norm scales, then the classification head.
    /// Weight matrices use Xavier-uniform bounds `±sqrt(6/(fan_in+fan_out))`;
    /// the forget/input/output gate biases start at 1.0 so gates begin
    /// mostly open, and all other biases at zero.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore, LayerError> {
        self.validate()?;
        let h = self.hidden_width;
        let mut store = ParamStore::new();

        let xavier = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| (rand::Rng::gen::<f64>(rng) * 2.0 - 1.0) * limit)
                .collect();
            Tensor::new(vec![rows, cols], data).expect("xavier shape")
        };

        store.insert("input_proj.W", xavier(h, self.input_channels, rng), true)?;
        store.insert("input_proj.b", Tensor::zeros(&[h]), false)?;

        for block in 1..=self.residual_blocks {
            for layer in 1..=self.layers_per_block {
                let cell = |dir: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| -> Result<(), LayerError> {
                    let prefix = format!("block{block}.layer{layer}.{dir}");
                    for gate in ["W_f", "W_i", "W_c", "W_o"] {
                        store.insert(&format!("{prefix}.{gate}"), xavier(h, 2 * h, rng), true)?;
                    }
                    for (gate, init) in [("b_f", 1.0), ("b_i", 1.0), ("b_c", 0.0), ("b_o", 1.0)] {
                        store.insert(&format!("{prefix}.{gate}"), Tensor::full(&[h], init), false)?;
                    }
                    Ok(())
                };
                cell("forward", &mut store, rng)?;
                if self.bidirectional {
                    cell("backward", &mut store, rng)?;
                }
                let proj_in = if self.bidirectional { 2 * h } else { h };
                store.insert(
                    &format!("block{block}.layer{layer}.proj.W"),
                    xavier(h, proj_in, rng),
                    true,
                )?;
                store.insert(
                    &format!("block{block}.layer{layer}.proj.b"),
                    Tensor::zeros(&[h]),
                    false,
                )?;
            }
            if self.batch_norm {
                store.insert(&format!("block{block}.bn.alpha"), Tensor::full(&[h], 1.0), false)?;
                store.insert(
                    &format!("block{block}.bn.beta"),
                    Tensor::full(&[h], self.bn_beta_init),
                    false,
                )?;
            }
        }

        store.insert("head.W", xavier(self.num_classes, h, rng), true)?;
        store.insert("head.b", Tensor::zeros(&[self.num_classes]), false)?;
        Ok(store)
    }

    /// Non-trainable state: running batch-norm statistics per block, keyed
    /// like the parameters. Means start at 0 and variances at 1.
    pub fn init_buffers(&self) -> Buffers {
        let mut buffers = BTreeMap::new();
        if self.batch_norm {
            for block in 1..=self.residual_blocks {
                buffers.insert(
                    format!("block{block}.bn.running_mean"),
                    Tensor::zeros(&[self.hidden_width]),
                );
                buffers.insert(
                    format!("block{block}.bn.running_var"),
                    Tensor::full(&[self.hidden_width], 1.0),
                );
            }
        }
        buffers
    }

    /// Resolves tape handles for every parameter into the layer structures
    /// the forward functions consume.
    pub fn bind_network(&self, bound: &BoundParams) -> Result<NetworkParams, LayerError> {
        let cell = |prefix: &str| -> Result<LstmLayerParams, TensorError> {
            Ok(LstmLayerParams {
                w_f: bound.get(&format!("{prefix}.W_f"))?,
                w_i: bound.get(&format!("{prefix}.W_i"))?,
                w_c: bound.get(&format!("{prefix}.W_c"))?,
                w_o: bound.get(&format!("{prefix}.W_o"))?,
                b_f: bound.get(&format!("{prefix}.b_f"))?,
                b_i: bound.get(&format!("{prefix}.b_i"))?,
                b_c: bound.get(&format!("{prefix}.b_c"))?,
                b_o: bound.get(&format!("{prefix}.b_o"))?,
            })
        };
        let mut blocks = Vec::with_capacity(self.residual_blocks);
        for block in 1..=self.residual_blocks {
            let mut layers = Vec::with_capacity(self.layers_per_block);
            for layer in 1..=self.layers_per_block {
                let prefix = format!("block{block}.layer{layer}");
                layers.push(BidirLayerParams {
                    forward_cell: cell(&format!("{prefix}.forward"))?,
                    backward_cell: if self.bidirectional {
                        Some(cell(&format!("{prefix}.backward"))?)
                    } else {
                        None
                    },
                    w_proj: bound.get(&format!("{prefix}.proj.W"))?,
                    b_proj: bound.get(&format!("{prefix}.proj.b"))?,
                });
            }
            let bn = if self.batch_norm {
                Some(BatchNormParams {
                    alpha: bound.get(&format!("block{block}.bn.alpha"))?,
                    beta: bound.get(&format!("block{block}.bn.beta"))?,
                })
            } else {
                None
            };
            blocks.push(BlockParams { layers, bn });
        }
        Ok(NetworkParams {
            input_w: bound.get("input_proj.W")?,
            input_b: bound.get("input_proj.b")?,
            blocks,
            head_w: bound.get("head.W")?,
            head_b: bound.get("head.b")?,
        })
    }
}

/// Running batch-norm statistics and any other non-trainable model state,
/// keyed by dotted path.
pub type Buffers = BTreeMap<String, Tensor>;

/// Tape handles for one LSTM cell's eight parameters. Gate weights act on
/// the concatenation `[h_prev, x_t]`.
#[derive(Debug, Clone)]
pub struct LstmLayerParams {
    pub w_f: NodeId,
    pub w_i: NodeId,
    pub w_c: NodeId,
    pub w_o: NodeId,
    pub b_f: NodeId,
    pub b_i: NodeId,
    pub b_c: NodeId,
    pub b_o: NodeId,
}

/// Recurrent state carried between time steps: hidden output `h` and cell
/// memory `c`, each `[batch, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// One bidirectional layer: two LSTM cells (the backward one absent when
/// bidirectionality is disabled) and the ReLU projection that merges their
/// concatenated outputs back to the hidden width.
#[derive(Debug, Clone)]
pub struct BidirLayerParams {
    pub forward_cell: LstmLayerParams,
    pub backward_cell: Option<LstmLayerParams>,
    pub w_proj: NodeId,
    pub b_proj: NodeId,
}

/// Learned per-feature scale and shift of a batch-norm stage.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// One residual block: its layers plus an optional batch-norm stage.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub layers: Vec<BidirLayerParams>,
    pub bn: Option<BatchNormParams>,
}

/// The fully bound network.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub input_w: NodeId,
    pub input_b: NodeId,
    pub blocks: Vec<BlockParams>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

/// Mutable batch-norm context for one block's forward pass.
pub struct BnContext<'a> {
    pub params: BatchNormParams,
    pub running_mean: &'a mut Tensor,
    pub running_var: &'a mut Tensor,
    pub momentum: f64,
}

/// Advances an LSTM cell by one step.
///
/// Gates follow the standard formulation: forget `f`, input `i`, candidate
/// `c~`, output `o`, all computed from `[h_prev, x_t]`; the new cell state
/// is `f*c_prev + i*c~` and the new hidden state `o*tanh(c)`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    p: &LstmLayerParams,
    x_t: NodeId,
    state: &LstmState,
) -> Result<LstmState, LayerError> {
    let z = tape.concat_last(state.h, x_t)?;
    let f_pre = tape.linear(z, p.w_f, Some(p.b_f))?;
    let f = tape.sigmoid(f_pre)?;
    let i_pre = tape.linear(z, p.w_i, Some(p.b_i))?;
    let i = tape.sigmoid(i_pre)?;
    let c_pre = tape.linear(z, p.w_c, Some(p.b_c))?;
    let c_tilde = tape.tanh(c_pre)?;
    let o_pre = tape.linear(z, p.w_o, Some(p.b_o))?;
    let o = tape.sigmoid(o_pre)?;
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, c_tilde)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c)?;
    let h = tape.mul(o, c_act)?;
    Ok(LstmState { h, c })
}

/// Runs one LSTM direction over a `[batch, time, d]` sequence, returning
/// all hidden states as `[batch, time, hidden]`. State starts at zero and
/// is never carried across calls — each window is independent.
pub fn lstm_layer_forward(
    tape: &mut Tape,
    p: &LstmLayerParams,
    x: NodeId,
) -> Result<NodeId, LayerError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "lstm_layer_forward",
            expected: 3,
            shape,
        }
        .into());
    }
    let (batch, time) = (shape[0], shape[1]);
    if time == 0 {
        return Err(LayerError::EmptySequence);
    }
    let hidden = tape.value(p.b_f).shape()[0];
    let mut state = LstmState {
        h: tape.leaf(Tensor::zeros(&[batch, hidden])),
        c: tape.leaf(Tensor::zeros(&[batch, hidden])),
    };
    let mut outputs = Vec::with_capacity(time);
    for t in 0..time {
        let x_t = tape.slice_time(x, t)?;
        state = lstm_cell_step(tape, p, x_t, &state)?;
        outputs.push(state.h);
    }
    Ok(tape.stack_time(&outputs)?)
}

/// Runs a bidirectional layer: the forward cell reads the sequence as-is,
/// the backward cell reads it time-reversed (its outputs are reversed back
/// so both streams align per step), and the concatenated features are
/// projected to the hidden width through a ReLU. Without a backward cell
/// the projection consumes the forward stream alone.
pub fn bidir_layer_forward(
    tape: &mut Tape,
    p: &BidirLayerParams,
    x: NodeId,
) -> Result<NodeId, LayerError> {
    let fwd = lstm_layer_forward(tape, &p.forward_cell, x)?;
    let features = match &p.backward_cell {
        Some(cell) => {
            let x_rev = tape.reverse_time(x)?;
            let bwd_rev = lstm_layer_forward(tape, cell, x_rev)?;
            let bwd = tape.reverse_time(bwd_rev)?;
            tape.concat_last(fwd, bwd)?
        }
        None => fwd,
    };
    let shape = tape.value(features).shape().to_vec();
    let (b, t, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(features, &[b * t, w])?;
    let proj = tape.linear(flat, p.w_proj, Some(p.b_proj))?;
    let act = tape.relu(proj)?;
    let h = tape.value(act).shape()[1];
    Ok(tape.reshape(act, &[b, t, h])?)
}

/// Applies batch normalisation across batch and time for every feature of
/// a `[batch, time, hidden]` sequence. Training mode uses the current
/// batch's population statistics and folds them into the running estimates;
/// inference mode uses the running estimates alone.
pub fn batch_norm(
    tape: &mut Tape,
    x: NodeId,
    ctx: &mut BnContext,
    mode: Mode,
) -> Result<NodeId, LayerError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "batch_norm",
            expected: 3,
            shape,
        }
        .into());
    }
    let (b, t, h) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[b * t, h])?;
    let normed = match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm_train(flat, ctx.params.alpha, ctx.params.beta)?;
            let m = ctx.momentum;
            for (r, s) in ctx.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                *r = m * *r + (1.0 - m) * s;
            }
            for (r, s) in ctx.running_var.data_mut().iter_mut().zip(&stats.var) {
                *r = m * *r + (1.0 - m) * s;
            }
            y
        }
        Mode::Infer => tape.batch_norm_infer(
            flat,
            ctx.params.alpha,
            ctx.params.beta,
            ctx.running_mean.data(),
            ctx.running_var.data(),
        )?,
    };
    Ok(tape.reshape(normed, &[b, t, h])?)
}

/// Runs one residual block: the stacked layers, then the identity skip
/// (when enabled), then batch normalisation (when present).
pub fn residual_block_forward(
    tape: &mut Tape,
    layers: &[BidirLayerParams],
    bn: Option<&mut BnContext>,
    x: NodeId,
    use_skip: bool,
    mode: Mode,
) -> Result<NodeId, LayerError> {
    let mut y = x;
    for layer in layers {
        y = bidir_layer_forward(tape, layer, y)?;
    }
    if use_skip {
        let xs = tape.value(x).shape();
        let ys = tape.value(y).shape();
        if xs != ys {
            return Err(LayerError::ResidualWidthMismatch {
                input: xs.to_vec(),
                output: ys.to_vec(),
            });
        }
        y = tape.add(y, x)?;
    }
    if let Some(ctx) = bn {
        y = batch_norm(tape, y, ctx, mode)?;
    }
    Ok(y)
}

/// Inverted dropout. Inference mode and `keep = 1` are both exact
/// identities (the input node is returned unchanged and no randomness is
/// consumed); otherwise each element survives with probability `keep` and
/// survivors are scaled by `1/keep`.
pub fn dropout(
    tape: &mut Tape,
    x: NodeId,
    keep: f64,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, LayerError> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(LayerError::InvalidKeepProb(keep));
    }
    if mode == Mode::Infer || keep == 1.0 {
        return Ok(x);
    }
    let rng = rng.ok_or(LayerError::MissingRng)?;
    Ok(tape.dropout(x, keep, rng)?)
}

/// Full forward pass: input projection, residual blocks (with dropout at
/// the configured position), and the affine head over the final time step.
/// Returns `[batch, num_classes]` logits.
pub fn network_forward(
    tape: &mut Tape,
    arch: &NetworkArchitecture,
    net: &NetworkParams,
    buffers: &mut Buffers,
    x: NodeId,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, LayerError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "network_forward",
            expected: 3,
            shape,
        }
        .into());
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if d != arch.input_channels {
        return Err(LayerError::ChannelMismatch {
            expected: arch.input_channels,
            got: d,
        });
    }
    if t == 0 {
        return Err(LayerError::EmptySequence);
    }
    let h = arch.hidden_width;

    // Project raw channels to the hidden width so every block sees — and
    // residual skips add — tensors of the same shape.
    let flat = tape.reshape(x, &[b * t, d])?;
    let proj = tape.linear(flat, net.input_w, Some(net.input_b))?;
    let act = tape.relu(proj)?;
    let mut seq = tape.reshape(act, &[b, t, h])?;

    let last_block = net.blocks.len();
    for (i, block) in net.blocks.iter().enumerate() {
        let block_no = i + 1;
        let seq_out = if let Some(params) = block.bn {
            let mk = format!("block{block_no}.bn.running_mean");
            let vk = format!("block{block_no}.bn.running_var");
            let mut rm = buffers.remove(&mk).ok_or_else(|| {
                LayerError::InvalidArchitecture(format!("missing buffer {mk}"))
            })?;
            let mut rv = buffers.remove(&vk).ok_or_else(|| {
                LayerError::InvalidArchitecture(format!("missing buffer {vk}"))
            })?;
            let result = {
                let mut ctx = BnContext {
                    params,
                    running_mean: &mut rm,
                    running_var: &mut rv,
                    momentum: arch.bn_momentum,
                };
                residual_block_forward(
                    tape,
                    &block.layers,
                    Some(&mut ctx),
                    seq,
                    arch.residual_skips,
                    mode,
                )
            };
            buffers.insert(mk, rm);
            buffers.insert(vk, rv);
            result?
        } else {
            residual_block_forward(tape, &block.layers, None, seq, arch.residual_skips, mode)?
        };
        seq = seq_out;
        if arch.dropout_position == DropoutPosition::BetweenBlocks && block_no < last_block {
            seq = dropout(tape, seq, arch.dropout_keep_prob, mode, rng.as_deref_mut())?;
        }
    }

    let mut last = tape.slice_time(seq, t - 1)?;
    if arch.dropout_position == DropoutPosition::OutputOnly {
        last = dropout(tape, last, arch.dropout_keep_prob, mode, rng.as_deref_mut())?;
    }
    Ok(tape.linear(last, net.head_w, Some(net.head_b))?)
}
