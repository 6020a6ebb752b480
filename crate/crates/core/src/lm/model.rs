use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::DenseMatrix;

use super::config::LmConfig;

const INIT_STD: f32 = 0.02;

/// Affine map `y = x·Wᵀ + b` with `W` stored as `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Vec<f32>,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, std: f32, rng: &mut SeededRng) -> Self {
        Linear {
            weight: DenseMatrix::gaussian(d_out, d_in, std, rng),
            bias: vec![0.0; d_out],
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: DenseMatrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Pre-norm transformer block: attention then GELU feed-forward, each
/// wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub o_proj: Linear,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Decoder-only byte-level transformer with learned positions and an
/// untied LM head.
#[derive(Debug, Clone)]
pub struct MiniLmModel {
    pub(crate) config: LmConfig,
    pub tok_emb: DenseMatrix,
    pub pos_emb: DenseMatrix,
    pub blocks: Vec<Block>,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
    pub lm_head: Linear,
}

/// Weight equality; the seed is not part of a model's identity once it
/// has been initialized.
impl PartialEq for MiniLmModel {
    fn eq(&self, other: &Self) -> bool {
        self.config.same_shape(&other.config)
            && self.tok_emb == other.tok_emb
            && self.pos_emb == other.pos_emb
            && self.blocks == other.blocks
            && self.lnf_gain == other.lnf_gain
            && self.lnf_bias == other.lnf_bias
            && self.lm_head == other.lm_head
    }
}

impl MiniLmModel {
    /// Gaussian init (std 0.02); residual output projections are scaled by
    /// `1/sqrt(2·n_layers)`. Norm gains start at 1, biases at 0.
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let d = config.hidden_dim;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
        let tok_emb = DenseMatrix::gaussian(config.vocab_size, d, INIT_STD, &mut rng);
        let pos_emb = DenseMatrix::gaussian(config.max_seq_len, d, INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                q_proj: Linear::init(d, d, INIT_STD, &mut rng),
                k_proj: Linear::init(d, d, INIT_STD, &mut rng),
                v_proj: Linear::init(d, d, INIT_STD, &mut rng),
                o_proj: Linear::init(d, d, resid_std, &mut rng),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                ffn_in: Linear::init(d, config.ffn_dim, INIT_STD, &mut rng),
                ffn_out: Linear::init(config.ffn_dim, d, resid_std, &mut rng),
            })
            .collect();
        let lm_head = Linear::init(d, config.vocab_size, INIT_STD, &mut rng);
        Ok(MiniLmModel {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            lm_head,
            config,
        })
    }

    /// All-zero tensors with this model's shapes; used as a gradient buffer.
    pub fn zeros_like(&self) -> MiniLmModel {
        let c = &self.config;
        let d = c.hidden_dim;
        let block = Block {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            q_proj: Linear::zeros(d, d),
            k_proj: Linear::zeros(d, d),
            v_proj: Linear::zeros(d, d),
            o_proj: Linear::zeros(d, d),
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            ffn_in: Linear::zeros(d, c.ffn_dim),
            ffn_out: Linear::zeros(c.ffn_dim, d),
        };
        MiniLmModel {
            config: c.clone(),
            tok_emb: DenseMatrix::zeros(c.vocab_size, d),
            pos_emb: DenseMatrix::zeros(c.max_seq_len, d),
            blocks: vec![block; c.n_layers],
            lnf_gain: vec![0.0; d],
            lnf_bias: vec![0.0; d],
            lm_head: Linear::zeros(d, c.vocab_size),
        }
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Parameter tensors in checkpoint order: token embedding, position
    /// embedding, then per block (ln1 gain, ln1 bias, q W, q b, k W, k b,
    /// v W, v b, o W, o b, ln2 gain, ln2 bias, ffn_in W, ffn_in b,
    /// ffn_out W, ffn_out b), then final norm gain, bias, LM head W, b.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.tok_emb.as_slice(), self.pos_emb.as_slice()];
        for b in &self.blocks {
            out.push(&b.ln1_gain);
            out.push(&b.ln1_bias);
            for lin in [&b.q_proj, &b.k_proj, &b.v_proj, &b.o_proj] {
                out.push(lin.weight.as_slice());
                out.push(&lin.bias);
            }
            out.push(&b.ln2_gain);
            out.push(&b.ln2_bias);
            for lin in [&b.ffn_in, &b.ffn_out] {
                out.push(lin.weight.as_slice());
                out.push(&lin.bias);
            }
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out.push(self.lm_head.weight.as_slice());
        out.push(&self.lm_head.bias);
        out
    }

    /// Same order as [`MiniLmModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> =
            vec![self.tok_emb.as_mut_slice(), self.pos_emb.as_mut_slice()];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            for lin in [&mut b.q_proj, &mut b.k_proj, &mut b.v_proj, &mut b.o_proj] {
                out.push(lin.weight.as_mut_slice());
                out.push(&mut lin.bias);
            }
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            for lin in [&mut b.ffn_in, &mut b.ffn_out] {
                out.push(lin.weight.as_mut_slice());
                out.push(&mut lin.bias);
            }
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(self.lm_head.weight.as_mut_slice());
        out.push(&mut self.lm_head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Little-endian bytes of every weight, in parameter order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 4);
        for p in self.params() {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 hex digest of [`MiniLmModel::weight_bytes`].
    pub fn weight_digest(&self) -> String {
        crate::digest::sha256_hex(&self.weight_bytes())
    }
}

/// Parameter count implied by a configuration, without allocating.
pub(crate) fn param_count_for(c: &LmConfig) -> u64 {
    let (v, d, f, s, n) = (
        c.vocab_size as u64,
        c.hidden_dim as u64,
        c.ffn_dim as u64,
        c.max_seq_len as u64,
        c.n_layers as u64,
    );
    let block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
    v * d + s * d + n * block + 2 * d + v * d + v
}
