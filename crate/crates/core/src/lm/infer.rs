//! Inference: per-layer traces, incremental decoding and greedy generation.

use serde::{Deserialize, Serialize};

use crate::error::{KamirError, Result};
use crate::lora::{LoraAdapter, LoraTarget};
use crate::tensor::{gelu, layer_norm_row, DenseMatrix};

use super::config::TraceAnchor;
use super::forward::{attend_row, forward, linear_forward};
use super::model::MiniLmModel;
use super::tokenizer::STOP_TOKEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    FinalGeneratedToken,
    FinalInputToken,
}

/// Hidden states `H_1 … H_N` of every block at a single token position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateTrace {
    pub doc_id: String,
    pub layer_states: Vec<Vec<f32>>,
    pub position_kind: PositionKind,
}

impl HiddenStateTrace {
    pub fn new(
        doc_id: impl Into<String>,
        layer_states: Vec<Vec<f32>>,
        position_kind: PositionKind,
    ) -> Result<Self> {
        let trace = HiddenStateTrace {
            doc_id: doc_id.into(),
            layer_states,
            position_kind,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn n_layers(&self) -> usize {
        self.layer_states.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer_states.first().map_or(0, Vec::len)
    }

    /// Every layer present, equal lengths, finite, nonzero norm.
    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim();
        if self.layer_states.is_empty() || d == 0 {
            return Err(KamirError::invalid(format!(
                "trace {:?} has no layer states",
                self.doc_id
            )));
        }
        for (i, h) in self.layer_states.iter().enumerate() {
            if h.len() != d {
                return Err(KamirError::Shape(format!(
                    "trace {:?}: layer {} has length {}, expected {d}",
                    self.doc_id,
                    i + 1,
                    h.len()
                )));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(KamirError::NonFinite(format!(
                    "trace {:?} layer {}",
                    self.doc_id,
                    i + 1
                )));
            }
            if h.iter().all(|&v| v == 0.0) {
                return Err(KamirError::DegenerateVector(format!(
                    "trace {:?} layer {}",
                    self.doc_id,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

fn anchored_states(
    model: &MiniLmModel,
    mut states: Vec<Vec<f32>>,
    anchor: TraceAnchor,
) -> Vec<Vec<f32>> {
    if anchor == TraceAnchor::PostFinalNorm {
        if let Some(last) = states.last_mut() {
            let mut normed = vec![0.0f32; last.len()];
            layer_norm_row(last, Some(&model.lnf_gain), Some(&model.lnf_bias), &mut normed);
            *last = normed;
        }
    }
    states
}

/// Logits for every position and the per-block hidden states at the last
/// position.
pub fn forward_with_trace(
    model: &MiniLmModel,
    tokens: &[u8],
    anchor: TraceAnchor,
) -> Result<(DenseMatrix, Vec<Vec<f32>>)> {
    forward_with_trace_adapted(model, None, tokens, anchor)
}

pub(crate) fn forward_with_trace_adapted(
    model: &MiniLmModel,
    adapter: Option<&LoraAdapter>,
    tokens: &[u8],
    anchor: TraceAnchor,
) -> Result<(DenseMatrix, Vec<Vec<f32>>)> {
    let cache = forward(model, adapter, tokens)?;
    let t = cache.len();
    let d = model.config.hidden_dim;
    let states = cache
        .block_outputs
        .iter()
        .map(|x| x[(t - 1) * d..t * d].to_vec())
        .collect();
    let logits = DenseMatrix::from_vec(t, model.config.vocab_size, cache.logits)?;
    Ok((logits, anchored_states(model, states, anchor)))
}

/// Key/value cache for token-at-a-time decoding. Produces the same numbers
/// as the full-sequence pass, position by position.
pub struct Decoder<'a> {
    model: &'a MiniLmModel,
    adapter: Option<&'a LoraAdapter>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Residual stream after each block (pre final norm).
    pub block_outputs: Vec<Vec<f32>>,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a MiniLmModel) -> Self {
        Self::with_adapter(model, None)
    }

    pub(crate) fn with_adapter(model: &'a MiniLmModel, adapter: Option<&'a LoraAdapter>) -> Self {
        let n = model.config.n_layers;
        Decoder {
            model,
            adapter,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token at the next position.
    pub fn step(&mut self, token: u8) -> Result<StepOutput> {
        let m = self.model;
        let cfg = &m.config;
        let pos = self.len;
        if pos >= cfg.max_seq_len {
            return Err(KamirError::invalid(format!(
                "position {pos} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let d = cfg.hidden_dim;
        let nh = cfg.n_heads;
        let mut x: Vec<f32> = m
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(m.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut block_outputs = Vec::with_capacity(cfg.n_layers);
        let mut normed = vec![0.0f32; d];
        let mut probs = vec![0.0f32; nh * (pos + 1)];
        let mut attn = vec![0.0f32; d];
        let lora = |l: usize, t: LoraTarget| match self.adapter {
            Some(a) => (a.pair(l, t), a.scale()),
            None => (None, 0.0),
        };
        for (l, blk) in m.blocks.iter().enumerate() {
            layer_norm_row(&x, Some(&blk.ln1_gain), Some(&blk.ln1_bias), &mut normed);
            let (p, s) = lora(l, LoraTarget::QProj);
            let (q, _) = linear_forward(&blk.q_proj, p, s, &normed, 1);
            let (p, s) = lora(l, LoraTarget::KProj);
            let (k, _) = linear_forward(&blk.k_proj, p, s, &normed, 1);
            let (p, s) = lora(l, LoraTarget::VProj);
            let (v, _) = linear_forward(&blk.v_proj, p, s, &normed, 1);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            attend_row(
                &q,
                &self.keys[l],
                &self.values[l],
                pos + 1,
                nh,
                &mut probs,
                &mut attn,
            );
            let (p, s) = lora(l, LoraTarget::OProj);
            let (o, _) = linear_forward(&blk.o_proj, p, s, &attn, 1);
            for (a, b) in x.iter_mut().zip(&o) {
                *a += b;
            }
            layer_norm_row(&x, Some(&blk.ln2_gain), Some(&blk.ln2_bias), &mut normed);
            let (p, s) = lora(l, LoraTarget::FfnIn);
            let (mut h, _) = linear_forward(&blk.ffn_in, p, s, &normed, 1);
            for z in h.iter_mut() {
                *z = gelu(*z);
            }
            let (p, s) = lora(l, LoraTarget::FfnOut);
            let (f, _) = linear_forward(&blk.ffn_out, p, s, &h, 1);
            for (a, b) in x.iter_mut().zip(&f) {
                *a += b;
            }
            block_outputs.push(x.clone());
        }
        layer_norm_row(&x, Some(&m.lnf_gain), Some(&m.lnf_bias), &mut normed);
        let (logits, _) = linear_forward(&m.lm_head, None, 0.0, &normed, 1);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(KamirError::NonFinite("decoder logits".into()));
        }
        self.len += 1;
        Ok(StepOutput {
            logits,
            block_outputs,
        })
    }
}

/// Index of the largest logit; the lowest id wins ties.
pub fn argmax(logits: &[f32]) -> u8 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u8
}

/// Greedy decoding of up to `max_output` tokens.
///
/// The returned trace holds the block outputs at the position of the last
/// generated token. Generation stops early at [`STOP_TOKEN`] (not emitted)
/// or when the context is full; if nothing was generated the trace falls
/// back to the last input token.
pub fn generate(
    model: &MiniLmModel,
    input: &[u8],
    max_output: usize,
    anchor: TraceAnchor,
) -> Result<(Vec<u8>, HiddenStateTrace)> {
    if max_output == 0 {
        return Err(KamirError::invalid(
            "max_output must be >= 1: the trace is taken at a generated token",
        ));
    }
    if input.is_empty() {
        return Err(KamirError::invalid("generation needs a non-empty input"));
    }
    let max_len = model.config.max_seq_len;
    if input.len() >= max_len {
        return Err(KamirError::invalid(format!(
            "input of {} tokens leaves no room to generate within max_seq_len {max_len}",
            input.len()
        )));
    }
    let mut dec = Decoder::new(model);
    let mut last = None;
    for &tok in input {
        last = Some(dec.step(tok)?);
    }
    let mut last = last.expect("input is non-empty");
    let mut output = Vec::new();
    while output.len() < max_output && dec.len() < max_len {
        let next = argmax(&last.logits);
        if next == STOP_TOKEN {
            break;
        }
        output.push(next);
        last = dec.step(next)?;
    }
    let kind = if output.is_empty() {
        PositionKind::FinalInputToken
    } else {
        PositionKind::FinalGeneratedToken
    };
    let states = anchored_states(model, last.block_outputs, anchor);
    let trace = HiddenStateTrace::new(String::new(), states, kind)?;
    Ok((output, trace))
}
