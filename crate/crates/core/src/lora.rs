//! Low-rank adapters over the mini-LM's linear projections.
//!
//! A target projection `W` (d_out × d_in) gains a trainable pair
//! `A` (r × d_in), `B` (d_out × r); the effective weight is
//! `W + (alpha / r) · B · A`. `B` starts at zero so a fresh adapter leaves
//! the base model's outputs untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KamirError, Result};
use crate::lm::{Block, Linear, MiniLmModel};
use crate::rng::SeededRng;
use crate::tensor::{matmul_nn, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    QProj,
    KProj,
    VProj,
    OProj,
    FfnIn,
    FfnOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::QProj,
        LoraTarget::KProj,
        LoraTarget::VProj,
        LoraTarget::OProj,
        LoraTarget::FfnIn,
        LoraTarget::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::QProj => "q_proj",
            LoraTarget::KProj => "k_proj",
            LoraTarget::VProj => "v_proj",
            LoraTarget::OProj => "o_proj",
            LoraTarget::FfnIn => "ffn_in",
            LoraTarget::FfnOut => "ffn_out",
        }
    }

    pub(crate) fn linear(self, block: &Block) -> &Linear {
        match self {
            LoraTarget::QProj => &block.q_proj,
            LoraTarget::KProj => &block.k_proj,
            LoraTarget::VProj => &block.v_proj,
            LoraTarget::OProj => &block.o_proj,
            LoraTarget::FfnIn => &block.ffn_in,
            LoraTarget::FfnOut => &block.ffn_out,
        }
    }

    fn linear_mut(self, block: &mut Block) -> &mut Linear {
        match self {
            LoraTarget::QProj => &mut block.q_proj,
            LoraTarget::KProj => &mut block.k_proj,
            LoraTarget::VProj => &mut block.v_proj,
            LoraTarget::OProj => &mut block.o_proj,
            LoraTarget::FfnIn => &mut block.ffn_in,
            LoraTarget::FfnOut => &mut block.ffn_out,
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoraTarget {
    type Err = KamirError;

    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| KamirError::Config(format!("unknown LoRA target {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    alpha: f32,
    targets: Vec<LoraTarget>,
    /// `layers[l][i]` adapts `targets[i]` in block `l`.
    pub layers: Vec<Vec<LoraPair>>,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn targets(&self) -> &[LoraTarget] {
        &self.targets
    }

    pub(crate) fn pair(&self, layer: usize, target: LoraTarget) -> Option<&LoraPair> {
        let i = self.targets.iter().position(|&t| t == target)?;
        Some(&self.layers[layer][i])
    }

    pub(crate) fn pair_mut(&mut self, layer: usize, target: LoraTarget) -> Option<&mut LoraPair> {
        let i = self.targets.iter().position(|&t| t == target)?;
        Some(&mut self.layers[layer][i])
    }

    /// Zeroed copy, used as a gradient buffer.
    pub fn zeros_like(&self) -> LoraAdapter {
        let layers = self
            .layers
            .iter()
            .map(|pairs| {
                pairs
                    .iter()
                    .map(|p| LoraPair {
                        a: DenseMatrix::zeros(p.a.rows(), p.a.cols()),
                        b: DenseMatrix::zeros(p.b.rows(), p.b.cols()),
                    })
                    .collect()
            })
            .collect();
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets.clone(),
            layers,
        }
    }

    /// Layer-major, target order, `A` before `B`.
    pub fn params(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [p.a.as_slice(), p.b.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| {
                let LoraPair { a, b } = p;
                [a.as_mut_slice(), b.as_mut_slice()]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Closed-form trainable parameter count: `Σ_targets r · (d_in + d_out)`
/// summed over every block.
pub fn lora_param_count(model: &MiniLmModel, rank: usize, targets: &[LoraTarget]) -> usize {
    model
        .blocks
        .iter()
        .map(|b| {
            targets
                .iter()
                .map(|t| {
                    let lin = t.linear(b);
                    rank * (lin.d_in() + lin.d_out())
                })
                .sum::<usize>()
        })
        .sum()
}

/// Frozen base model plus a trainable adapter.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: MiniLmModel,
    adapter: Option<LoraAdapter>,
}

/// Attaches a fresh adapter. `A` is Gaussian with std `1/sqrt(d_in)`,
/// `B` is zero.
pub fn attach_lora(
    model: MiniLmModel,
    rank: usize,
    alpha: f32,
    targets: &[LoraTarget],
    seed: u64,
) -> Result<AdaptedModel> {
    if rank == 0 {
        return Err(KamirError::Config("LoRA rank must be >= 1".into()));
    }
    if targets.is_empty() {
        return Err(KamirError::Config("LoRA needs at least one target".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(KamirError::Config(format!("LoRA alpha must be > 0 (got {alpha})")));
    }
    let mut targets = targets.to_vec();
    targets.sort_unstable();
    targets.dedup();
    let mut rng = SeededRng::new(seed);
    let mut layers = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let mut pairs = Vec::with_capacity(targets.len());
        for &t in &targets {
            let lin = t.linear(block);
            let (d_in, d_out) = (lin.d_in(), lin.d_out());
            if rank >= d_in.min(d_out) {
                return Err(KamirError::Config(format!(
                    "rank {rank} is not low-rank for {t} ({d_out}x{d_in})"
                )));
            }
            pairs.push(LoraPair {
                a: DenseMatrix::gaussian(rank, d_in, 1.0 / (d_in as f32).sqrt(), &mut rng),
                b: DenseMatrix::zeros(d_out, rank),
            });
        }
        layers.push(pairs);
    }
    Ok(AdaptedModel {
        base: model,
        adapter: Some(LoraAdapter {
            rank,
            alpha,
            targets,
            layers,
        }),
    })
}

impl AdaptedModel {
    pub fn base(&self) -> &MiniLmModel {
        &self.base
    }

    pub fn adapter(&self) -> Result<&LoraAdapter> {
        self.adapter.as_ref().ok_or(KamirError::AdapterConsumed)
    }

    pub fn adapter_mut(&mut self) -> Result<&mut LoraAdapter> {
        self.adapter.as_mut().ok_or(KamirError::AdapterConsumed)
    }

    /// Folds the adapter into the base weights: `W' = W + (alpha/r)·B·A`.
    /// The adapter is consumed; a second call fails.
    pub fn merge(&mut self) -> Result<MiniLmModel> {
        let adapter = self.adapter.take().ok_or(KamirError::AdapterConsumed)?;
        let mut merged = self.base.clone();
        let scale = adapter.scale();
        for (block, pairs) in merged.blocks.iter_mut().zip(&adapter.layers) {
            for (&t, pair) in adapter.targets.iter().zip(pairs) {
                let lin = t.linear_mut(block);
                let (d_out, d_in) = lin.weight.shape();
                let mut delta = vec![0.0f32; d_out * d_in];
                matmul_nn(
                    pair.b.as_slice(),
                    pair.a.as_slice(),
                    d_out,
                    adapter.rank,
                    d_in,
                    &mut delta,
                );
                for (w, dv) in lin.weight.as_mut_slice().iter_mut().zip(&delta) {
                    *w += scale * dv;
                }
            }
        }
        Ok(merged)
    }
}

/// Standalone form of [`AdaptedModel::merge`].
pub fn merge_adapter(adapted: &mut AdaptedModel) -> Result<MiniLmModel> {
    adapted.merge()
}
