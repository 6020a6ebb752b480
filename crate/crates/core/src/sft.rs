//! LoRA fine-tuning on a split and the per-group loss / entropy /
//! gradient-norm diagnostics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::write_file;
use crate::error::{KamirError, Result};
use crate::fmt::sig9;
use crate::lm::forward::{forward, loss_and_grads, LossStats};
use crate::lm::{encode, MiniLmModel};
use crate::lora::{attach_lora, AdaptedModel, LoraAdapter, LoraTarget};
use crate::optim::{global_norm, Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::selection::Group;
use crate::tensor::DenseMatrix;

/// Separates the prompt from the answer in a training document.
pub const ANSWER_MARKER: &str = "\nA: ";

/// A document prepared for next-token training. Only answer tokens are
/// scored; documents without [`ANSWER_MARKER`] are scored throughout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub id: String,
    pub input: Vec<u8>,
    pub targets: Vec<Option<u8>>,
}

impl SftExample {
    /// Tokenizes `text` and truncates it to `max_seq_len` input positions.
    pub fn from_text(id: &str, text: &str, max_seq_len: usize) -> Result<Self> {
        let tokens = encode(text);
        let answer_start = text.find(ANSWER_MARKER).map_or(1, |m| m + ANSWER_MARKER.len());
        let tokens = &tokens[..tokens.len().min(max_seq_len + 1)];
        if tokens.len() < 2 {
            return Err(KamirError::invalid(format!(
                "document {id:?} needs at least 2 tokens"
            )));
        }
        let input = tokens[..tokens.len() - 1].to_vec();
        // Position p predicts token p + 1.
        let targets: Vec<Option<u8>> = (0..input.len())
            .map(|p| (p + 1 >= answer_start).then_some(tokens[p + 1]))
            .collect();
        if targets.iter().all(Option::is_none) {
            return Err(KamirError::invalid(format!(
                "document {id:?} has no answer tokens within {max_seq_len} positions"
            )));
        }
        Ok(SftExample {
            id: id.to_string(),
            input,
            targets,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<LoraTarget>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: vec![LoraTarget::QProj, LoraTarget::VProj],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn attach(&self, model: MiniLmModel) -> Result<AdaptedModel> {
        attach_lora(model, self.rank, self.alpha, &self.targets, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 100,
            lr: 1e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub group: Group,
    pub step: usize,
    pub loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Loss statistics and adapter gradient for one example.
pub fn example_gradient(
    adapted: &AdaptedModel,
    ex: &SftExample,
) -> Result<(LossStats, LoraAdapter)> {
    let adapter = adapted.adapter()?;
    let mut grads = adapter.zeros_like();
    let stats = loss_and_grads(
        adapted.base(),
        Some(adapter),
        &ex.input,
        &ex.targets,
        None,
        Some(&mut grads),
    )?;
    Ok((stats, grads))
}

fn batch_gradient(
    adapted: &AdaptedModel,
    batch: &[&SftExample],
) -> Result<(f64, f64, LoraAdapter)> {
    let adapter = adapted.adapter()?;
    let mut grads = adapter.zeros_like();
    let (mut loss, mut entropy) = (0.0, 0.0);
    for ex in batch {
        let s = loss_and_grads(
            adapted.base(),
            Some(adapter),
            &ex.input,
            &ex.targets,
            None,
            Some(&mut grads),
        )?;
        loss += s.loss;
        entropy += s.entropy;
    }
    let inv = 1.0 / batch.len() as f32;
    for g in grads.params_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    let n = batch.len() as f64;
    Ok((loss / n, entropy / n, grads))
}

/// Trains the adapter only; the base model is never written. Each step
/// draws `batch_size` examples from a reshuffled cyclic order and emits a
/// record measured on that batch before the update.
pub fn sft_train(
    adapted: &mut AdaptedModel,
    examples: &[SftExample],
    cfg: &SftConfig,
    group: Group,
) -> Result<Vec<DynamicsRecord>> {
    if examples.is_empty() {
        return Err(KamirError::invalid(format!("group {group} has no training documents")));
    }
    if cfg.batch_size == 0 {
        return Err(KamirError::Config("batch_size must be >= 1".into()));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        adapted.adapter()?.param_count(),
    );
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, entropy, grads) = batch_gradient(adapted, &batch)?;
        let grad_norm = global_norm(&grads.params());
        if !grad_norm.is_finite() {
            return Err(KamirError::NonFinite(format!("adapter gradient norm at step {step}")));
        }
        records.push(DynamicsRecord {
            group,
            step,
            loss,
            entropy,
            grad_norm,
        });
        adam.step(adapted.adapter_mut()?.params_mut(), grads.params());
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentMetrics {
    pub id: String,
    pub loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub mean_loss: f64,
    pub mean_entropy: f64,
    pub mean_grad_norm: f64,
    pub count: usize,
}

/// Per-document metrics with no weight update. The gradient norm is over
/// the adapter parameters.
pub fn document_metrics(adapted: &AdaptedModel, examples: &[SftExample]) -> Result<Vec<DocumentMetrics>> {
    examples
        .par_iter()
        .map(|ex| {
            let (s, g) = example_gradient(adapted, ex)?;
            Ok(DocumentMetrics {
                id: ex.id.clone(),
                loss: s.loss,
                entropy: s.entropy,
                grad_norm: global_norm(&g.params()),
            })
        })
        .collect()
}

/// Averages [`document_metrics`] over each group.
pub fn group_dynamics(
    adapted: &AdaptedModel,
    groups: &[(Group, Vec<SftExample>)],
) -> Result<Vec<GroupSummary>> {
    groups
        .iter()
        .map(|(group, examples)| {
            if examples.is_empty() {
                return Err(KamirError::invalid(format!("group {group} is empty")));
            }
            let m = document_metrics(adapted, examples)?;
            let n = m.len() as f64;
            Ok(GroupSummary {
                group: *group,
                mean_loss: m.iter().map(|d| d.loss).sum::<f64>() / n,
                mean_entropy: m.iter().map(|d| d.entropy).sum::<f64>() / n,
                mean_grad_norm: m.iter().map(|d| d.grad_norm).sum::<f64>() / n,
                count: m.len(),
            })
        })
        .collect()
}

/// Logits of the adapted model at every position.
pub fn adapted_logits(adapted: &AdaptedModel, tokens: &[u8]) -> Result<DenseMatrix> {
    let cache = forward(adapted.base(), Some(adapted.adapter()?), tokens)?;
    DenseMatrix::from_vec(tokens.len(), adapted.base().config().vocab_size, cache.logits)
}

fn write_csv<R: AsRef<[String]>>(header: &[&str], rows: impl Iterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).map_err(crate::awareness::csv_err)?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(crate::awareness::csv_err)?;
    }
    w.into_inner()
        .map_err(|e| KamirError::invalid(format!("csv: {e}")))
}

/// `group,step,loss,entropy,grad_norm`.
pub fn dynamics_csv(records: &[DynamicsRecord]) -> Result<Vec<u8>> {
    write_csv(
        &["group", "step", "loss", "entropy", "grad_norm"],
        records.iter().map(|r| {
            vec![
                r.group.to_string(),
                r.step.to_string(),
                sig9(r.loss),
                sig9(r.entropy),
                sig9(r.grad_norm),
            ]
        }),
    )
}

/// `group,mean_loss,mean_entropy,mean_grad_norm`.
pub fn summary_csv(summaries: &[GroupSummary]) -> Result<Vec<u8>> {
    write_csv(
        &["group", "mean_loss", "mean_entropy", "mean_grad_norm"],
        summaries.iter().map(|s| {
            vec![
                s.group.to_string(),
                sig9(s.mean_loss),
                sig9(s.mean_entropy),
                sig9(s.mean_grad_norm),
            ]
        }),
    )
}

pub fn write_dynamics_csv(path: &Path, records: &[DynamicsRecord]) -> Result<()> {
    write_file(path, &dynamics_csv(records)?)
}

pub fn write_summary_csv(path: &Path, summaries: &[GroupSummary]) -> Result<()> {
    write_file(path, &summary_csv(summaries)?)
}

/// Reads a summary CSV back.
pub fn read_summary_csv(path: &Path) -> Result<Vec<GroupSummary>> {
    let file = std::fs::File::open(path).map_err(|e| KamirError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let perr = |m: String| KamirError::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if rec.len() != 4 {
            return Err(perr(format!("expected 4 fields, got {}", rec.len())));
        }
        let num = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|_| perr(format!("bad number {:?}", &rec[j])))
        };
        out.push(GroupSummary {
            group: rec[0].parse().map_err(|e: KamirError| perr(e.to_string()))?,
            mean_loss: num(1)?,
            mean_entropy: num(2)?,
            mean_grad_norm: num(3)?,
            count: 0,
        });
    }
    Ok(out)
}
