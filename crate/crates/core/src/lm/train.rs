use serde::{Deserialize, Serialize};

use crate::error::{KamirError, Result};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::rng::SeededRng;

use super::forward::loss_and_grads;
use super::model::MiniLmModel;

/// Next-token pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f32,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Input tokens per window.
    pub seq_len: usize,
    pub clip_norm: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 2e-3,
            batch_size: 4,
            seq_len: 48,
            clip_norm: 1.0,
        }
    }
}

/// Picks a random window of at most `seq_len + 1` tokens from a random
/// document and returns (input, targets).
fn sample_window(
    corpus: &[&[u8]],
    seq_len: usize,
    rng: &mut SeededRng,
) -> (Vec<u8>, Vec<Option<u8>>) {
    let doc = corpus[rng.below(corpus.len())];
    let w = (seq_len + 1).min(doc.len());
    let start = rng.below(doc.len() - w + 1);
    let window = &doc[start..start + w];
    let input = window[..w - 1].to_vec();
    let targets = window[1..].iter().map(|&t| Some(t)).collect();
    (input, targets)
}

/// Trains every weight with Adam on next-token cross-entropy and returns the
/// per-step mean batch loss (measured before each update).
pub fn pretrain(
    model: &mut MiniLmModel,
    corpus: &[Vec<u8>],
    cfg: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(KamirError::invalid("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 || cfg.seq_len == 0 {
        return Err(KamirError::Config(
            "batch_size and seq_len must be >= 1".into(),
        ));
    }
    let usable: Vec<&[u8]> = corpus
        .iter()
        .filter(|d| d.len() >= 2)
        .map(|d| d.as_slice())
        .collect();
    if usable.is_empty() {
        return Err(KamirError::invalid(
            "pretraining corpus has no document with at least 2 tokens",
        ));
    }
    let seq_len = cfg.seq_len.min(model.config.max_seq_len);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.param_count(),
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = model.zeros_like();
        let mut loss = 0.0f64;
        for _ in 0..cfg.batch_size {
            let (input, targets) = sample_window(&usable, seq_len, rng);
            let stats = loss_and_grads(model, None, &input, &targets, Some(&mut grads), None)?;
            loss += stats.loss;
        }
        let inv = 1.0 / cfg.batch_size as f32;
        for g in grads.params_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        let norm = clip_global_norm(grads.params_mut(), cfg.clip_norm);
        if !norm.is_finite() {
            return Err(KamirError::NonFinite(format!("gradient norm at step {step}")));
        }
        opt.step(model.params_mut(), grads.params());
        losses.push(loss / cfg.batch_size as f64);
    }
    Ok(losses)
}
