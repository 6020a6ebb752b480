//! Desk-scale decoder-only transformer with per-layer hidden-state access.

mod checkpoint;
mod config;
pub(crate) mod forward;
mod infer;
mod model;
mod tokenizer;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, model_from_bytes,
    save_checkpoint, LM_MAGIC,
};
pub use config::{LmConfig, TraceAnchor, VOCAB_SIZE};
pub use forward::LossStats;
pub use infer::{argmax, forward_with_trace, generate, Decoder, HiddenStateTrace, PositionKind, StepOutput};
pub use model::{Block, Linear, MiniLmModel};
pub use tokenizer::{decode, encode, STOP_TOKEN};
pub use train::{pretrain, PretrainConfig};

use crate::error::Result;

/// Mean next-token loss and the full-model gradient for one sequence.
/// `targets[p]` is the token expected after `input[p]`, `None` to skip.
pub fn sequence_loss_and_grad(
    model: &MiniLmModel,
    input: &[u8],
    targets: &[Option<u8>],
) -> Result<(LossStats, MiniLmModel)> {
    let mut grads = model.zeros_like();
    let stats = forward::loss_and_grads(model, None, input, targets, Some(&mut grads), None)?;
    Ok((stats, grads))
}

/// Mean next-token loss without gradients.
pub fn sequence_loss(model: &MiniLmModel, input: &[u8], targets: &[Option<u8>]) -> Result<LossStats> {
    forward::loss_only(model, None, input, targets)
}

/// Input/target pair for plain language modelling over `tokens`.
pub fn next_token_targets(tokens: &[u8]) -> (Vec<u8>, Vec<Option<u8>>) {
    if tokens.len() < 2 {
        return (tokens.to_vec(), vec![None; tokens.len()]);
    }
    let input = tokens[..tokens.len() - 1].to_vec();
    let targets = tokens[1..].iter().map(|&t| Some(t)).collect();
    (input, targets)
}
