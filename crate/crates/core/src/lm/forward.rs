//! Full-sequence forward pass with activation caching, and its hand-written
//! backward pass. Adapters (if any) are applied inside the linear layers.

use crate::error::{KamirError, Result};
use crate::lora::{LoraAdapter, LoraPair, LoraTarget};
use crate::tensor::{
    axpy, dot, entropy_unchecked, gelu, gelu_grad, layer_norm_row, matmul_nn, matmul_nt,
    matmul_tn_acc, softmax_in_place,
};

use super::model::{Linear, MiniLmModel};

pub(crate) fn linear_forward(
    lin: &Linear,
    lora: Option<&LoraPair>,
    scale: f32,
    x: &[f32],
    t: usize,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let (d_out, d_in) = lin.weight.shape();
    let mut y = vec![0.0f32; t * d_out];
    matmul_nt(x, lin.weight.as_slice(), t, d_in, d_out, &mut y);
    for row in y.chunks_exact_mut(d_out) {
        for (v, b) in row.iter_mut().zip(&lin.bias) {
            *v += b;
        }
    }
    let u = lora.map(|p| {
        let r = p.a.rows();
        let mut u = vec![0.0f32; t * r];
        matmul_nt(x, p.a.as_slice(), t, d_in, r, &mut u);
        let mut delta = vec![0.0f32; t * d_out];
        matmul_nt(&u, p.b.as_slice(), t, r, d_out, &mut delta);
        for (v, dv) in y.iter_mut().zip(&delta) {
            *v += scale * dv;
        }
        u
    });
    (y, u)
}

/// Accumulates the input gradient into `dx` and parameter gradients into
/// whichever of `glin` / `gpair` is given.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    lin: &Linear,
    lora: Option<&LoraPair>,
    scale: f32,
    x: &[f32],
    u: Option<&[f32]>,
    t: usize,
    dy: &[f32],
    dx: &mut [f32],
    glin: Option<&mut Linear>,
    gpair: Option<&mut LoraPair>,
) {
    let (d_out, d_in) = lin.weight.shape();
    let mut tmp = vec![0.0f32; t * d_in];
    matmul_nn(dy, lin.weight.as_slice(), t, d_out, d_in, &mut tmp);
    for (a, b) in dx.iter_mut().zip(&tmp) {
        *a += b;
    }
    if let Some(g) = glin {
        matmul_tn_acc(dy, x, t, d_out, d_in, g.weight.as_mut_slice());
        for row in dy.chunks_exact(d_out) {
            for (gb, v) in g.bias.iter_mut().zip(row) {
                *gb += v;
            }
        }
    }
    if let (Some(p), Some(u)) = (lora, u) {
        let r = p.a.rows();
        let mut du = vec![0.0f32; t * r];
        matmul_nn(dy, p.b.as_slice(), t, d_out, r, &mut du);
        for v in du.iter_mut() {
            *v *= scale;
        }
        matmul_nn(&du, p.a.as_slice(), t, r, d_in, &mut tmp);
        for (a, b) in dx.iter_mut().zip(&tmp) {
            *a += b;
        }
        if let Some(g) = gpair {
            let us: Vec<f32> = u.iter().map(|v| v * scale).collect();
            matmul_tn_acc(dy, &us, t, d_out, r, g.b.as_mut_slice());
            matmul_tn_acc(&du, x, t, r, d_in, g.a.as_mut_slice());
        }
    }
}

/// Causal multi-head attention for one query row against `len` keys.
/// `probs` receives the `n_heads × len` attention weights.
pub(crate) fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    len: usize,
    n_heads: usize,
    probs: &mut [f32],
    out: &mut [f32],
) {
    let d = q.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    out.fill(0.0);
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * len..(h + 1) * len];
        for (s, ps) in p.iter_mut().enumerate() {
            *ps = dot(qh, &keys[s * d + h * hd..s * d + (h + 1) * hd]) * scale;
        }
        softmax_in_place(p);
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (s, &ps) in p.iter().enumerate() {
            axpy(ps, &values[s * d + h * hd..s * d + (h + 1) * hd], oh);
        }
    }
}

struct NormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

fn norm_forward(x: &[f32], t: usize, d: usize, gain: &[f32], bias: &[f32]) -> (Vec<f32>, NormCache) {
    let mut y = vec![0.0f32; t * d];
    let mut xhat = vec![0.0f32; t * d];
    let mut rstd = vec![0.0f32; t];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        rstd[r] = layer_norm_row(row, None, None, &mut xhat[r * d..(r + 1) * d]);
        for i in 0..d {
            y[r * d + i] = xhat[r * d + i] * gain[i] + bias[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Adds the input gradient to `dx`.
fn norm_backward(
    cache: &NormCache,
    gain: &[f32],
    dy: &[f32],
    d: usize,
    dx: &mut [f32],
    grads: Option<(&mut [f32], &mut [f32])>,
) {
    let t = cache.rstd.len();
    let mut dxhat = vec![0.0f32; d];
    let mut grads = grads;
    for r in 0..t {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        if let Some((gg, gb)) = grads.as_mut() {
            for i in 0..d {
                gg[i] += dyr[i] * xh[i];
                gb[i] += dyr[i];
            }
        }
        let mut mean_d = 0.0f32;
        let mut mean_dx = 0.0f32;
        for i in 0..d {
            dxhat[i] = dyr[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= d as f32;
        mean_dx /= d as f32;
        let rs = cache.rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

struct BlockCache {
    ln1: NormCache,
    a1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    q_u: Option<Vec<f32>>,
    k_u: Option<Vec<f32>>,
    v_u: Option<Vec<f32>>,
    /// `[head][query][key]`, zero above the diagonal.
    probs: Vec<f32>,
    attn: Vec<f32>,
    o_u: Option<Vec<f32>>,
    ln2: NormCache,
    a2: Vec<f32>,
    h_pre: Vec<f32>,
    h_u: Option<Vec<f32>>,
    h_act: Vec<f32>,
    f_u: Option<Vec<f32>>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardCache {
    tokens: Vec<u8>,
    blocks: Vec<BlockCache>,
    /// Residual stream after each block, `n_layers × (T·d)`.
    pub(crate) block_outputs: Vec<Vec<f32>>,
    lnf: NormCache,
    pub(crate) lnf_out: Vec<f32>,
    pub(crate) logits: Vec<f32>,
}

impl ForwardCache {
    pub(crate) fn len(&self) -> usize {
        self.tokens.len()
    }

    #[cfg(test)]
    pub(crate) fn attention_probs(&self, block: usize) -> &[f32] {
        &self.blocks[block].probs
    }
}

fn lora_for(
    adapter: Option<&LoraAdapter>,
    layer: usize,
    target: LoraTarget,
) -> (Option<&LoraPair>, f32) {
    match adapter {
        Some(a) => (a.pair(layer, target), a.scale()),
        None => (None, 0.0),
    }
}

pub(crate) fn forward(
    model: &MiniLmModel,
    adapter: Option<&LoraAdapter>,
    tokens: &[u8],
) -> Result<ForwardCache> {
    let cfg = &model.config;
    let t = tokens.len();
    if t == 0 {
        return Err(KamirError::invalid("forward pass needs at least one token"));
    }
    if t > cfg.max_seq_len {
        return Err(KamirError::invalid(format!(
            "sequence of {t} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let d = cfg.hidden_dim;
    let nh = cfg.n_heads;

    let mut x = vec![0.0f32; t * d];
    for (p, &tok) in tokens.iter().enumerate() {
        let row = &mut x[p * d..(p + 1) * d];
        let te = model.tok_emb.row(tok as usize);
        let pe = model.pos_emb.row(p);
        for i in 0..d {
            row[i] = te[i] + pe[i];
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut block_outputs = Vec::with_capacity(cfg.n_layers);
    for (l, blk) in model.blocks.iter().enumerate() {
        let (a1, ln1) = norm_forward(&x, t, d, &blk.ln1_gain, &blk.ln1_bias);
        let (pq, s) = lora_for(adapter, l, LoraTarget::QProj);
        let (q, q_u) = linear_forward(&blk.q_proj, pq, s, &a1, t);
        let (pk, s) = lora_for(adapter, l, LoraTarget::KProj);
        let (k, k_u) = linear_forward(&blk.k_proj, pk, s, &a1, t);
        let (pv, s) = lora_for(adapter, l, LoraTarget::VProj);
        let (v, v_u) = linear_forward(&blk.v_proj, pv, s, &a1, t);

        let mut probs = vec![0.0f32; nh * t * t];
        let mut attn = vec![0.0f32; t * d];
        let mut row_probs = vec![0.0f32; nh * t];
        for p in 0..t {
            let len = p + 1;
            attend_row(
                &q[p * d..(p + 1) * d],
                &k,
                &v,
                len,
                nh,
                &mut row_probs[..nh * len],
                &mut attn[p * d..(p + 1) * d],
            );
            for h in 0..nh {
                probs[h * t * t + p * t..h * t * t + p * t + len]
                    .copy_from_slice(&row_probs[h * len..(h + 1) * len]);
            }
        }
        let (po, s) = lora_for(adapter, l, LoraTarget::OProj);
        let (o, o_u) = linear_forward(&blk.o_proj, po, s, &attn, t);
        let x_mid: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

        let (a2, ln2) = norm_forward(&x_mid, t, d, &blk.ln2_gain, &blk.ln2_bias);
        let (pi, s) = lora_for(adapter, l, LoraTarget::FfnIn);
        let (h_pre, h_u) = linear_forward(&blk.ffn_in, pi, s, &a2, t);
        let h_act: Vec<f32> = h_pre.iter().map(|&z| gelu(z)).collect();
        let (pf, s) = lora_for(adapter, l, LoraTarget::FfnOut);
        let (f, f_u) = linear_forward(&blk.ffn_out, pf, s, &h_act, t);
        let x_out: Vec<f32> = x_mid.iter().zip(&f).map(|(a, b)| a + b).collect();

        blocks.push(BlockCache {
            ln1,
            a1,
            q,
            k,
            v,
            q_u,
            k_u,
            v_u,
            probs,
            attn,
            o_u,
            ln2,
            a2,
            h_pre,
            h_u,
            h_act,
            f_u,
        });
        x = x_out.clone();
        block_outputs.push(x_out);
    }

    let (lnf_out, lnf) = norm_forward(&x, t, d, &model.lnf_gain, &model.lnf_bias);
    let (logits, _) = linear_forward(&model.lm_head, None, 0.0, &lnf_out, t);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(KamirError::NonFinite("logits".into()));
    }
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        blocks,
        block_outputs,
        lnf,
        lnf_out,
        logits,
    })
}

/// Mean next-token cross-entropy (nats) and mean predictive entropy over
/// the scored positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub entropy: f64,
    pub n_targets: usize,
}

/// `targets[p]` is the token expected after position `p`, or `None` when
/// position `p` is not scored. Returns the statistics and `dLoss/dlogits`.
pub(crate) fn cross_entropy(
    logits: &[f32],
    vocab: usize,
    targets: &[Option<u8>],
) -> Result<(LossStats, Vec<f32>)> {
    let n_targets = targets.iter().filter(|t| t.is_some()).count();
    if n_targets == 0 {
        return Err(KamirError::invalid("no scored positions"));
    }
    let inv_n = 1.0 / n_targets as f32;
    let mut dlogits = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    let mut entropy = 0.0f64;
    for (p, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let row = &logits[p * vocab..(p + 1) * vocab];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[target as usize] as f64;
        let drow = &mut dlogits[p * vocab..(p + 1) * vocab];
        drow.copy_from_slice(row);
        softmax_in_place(drow);
        entropy += entropy_unchecked(drow);
        drow[target as usize] -= 1.0;
        for v in drow.iter_mut() {
            *v *= inv_n;
        }
    }
    let stats = LossStats {
        loss: loss / n_targets as f64,
        entropy: entropy / n_targets as f64,
        n_targets,
    };
    if !stats.loss.is_finite() {
        return Err(KamirError::NonFinite("cross-entropy loss".into()));
    }
    Ok((stats, dlogits))
}

/// Backpropagates `dlogits` through the cached forward pass.
pub(crate) fn backward(
    model: &MiniLmModel,
    adapter: Option<&LoraAdapter>,
    cache: &ForwardCache,
    dlogits: &[f32],
    mut base_grads: Option<&mut MiniLmModel>,
    mut lora_grads: Option<&mut LoraAdapter>,
) {
    let cfg = &model.config;
    let t = cache.len();
    let d = cfg.hidden_dim;
    let nh = cfg.n_heads;
    let hd = d / nh;
    let att_scale = 1.0 / (hd as f32).sqrt();

    let mut dy = vec![0.0f32; t * d];
    linear_backward(
        &model.lm_head,
        None,
        0.0,
        &cache.lnf_out,
        None,
        t,
        dlogits,
        &mut dy,
        base_grads.as_deref_mut().map(|g| &mut g.lm_head),
        None,
    );
    let mut dx = vec![0.0f32; t * d];
    norm_backward(
        &cache.lnf,
        &model.lnf_gain,
        &dy,
        d,
        &mut dx,
        base_grads
            .as_deref_mut()
            .map(|g| (g.lnf_gain.as_mut_slice(), g.lnf_bias.as_mut_slice())),
    );

    for l in (0..cfg.n_layers).rev() {
        let blk = &model.blocks[l];
        let c = &cache.blocks[l];
        let mut gblk = base_grads.as_deref_mut().map(|g| &mut g.blocks[l]);

        // Feed-forward branch; the residual passes dx through unchanged.
        let mut dx_mid = dx.clone();
        let mut dh_act = vec![0.0f32; t * cfg.ffn_dim];
        let (pf, s) = lora_for(adapter, l, LoraTarget::FfnOut);
        linear_backward(
            &blk.ffn_out,
            pf,
            s,
            &c.h_act,
            c.f_u.as_deref(),
            t,
            &dx,
            &mut dh_act,
            gblk.as_deref_mut().map(|g| &mut g.ffn_out),
            lora_grads.as_deref_mut().and_then(|g| g.pair_mut(l, LoraTarget::FfnOut)),
        );
        let dh_pre: Vec<f32> = dh_act
            .iter()
            .zip(&c.h_pre)
            .map(|(g, &z)| g * gelu_grad(z))
            .collect();
        let mut da2 = vec![0.0f32; t * d];
        let (pi, s) = lora_for(adapter, l, LoraTarget::FfnIn);
        linear_backward(
            &blk.ffn_in,
            pi,
            s,
            &c.a2,
            c.h_u.as_deref(),
            t,
            &dh_pre,
            &mut da2,
            gblk.as_deref_mut().map(|g| &mut g.ffn_in),
            lora_grads.as_deref_mut().and_then(|g| g.pair_mut(l, LoraTarget::FfnIn)),
        );
        norm_backward(
            &c.ln2,
            &blk.ln2_gain,
            &da2,
            d,
            &mut dx_mid,
            gblk
                .as_deref_mut()
                .map(|g| (g.ln2_gain.as_mut_slice(), g.ln2_bias.as_mut_slice())),
        );

        // Attention branch.
        let mut dx_in = dx_mid.clone();
        let mut dattn = vec![0.0f32; t * d];
        let (po, s) = lora_for(adapter, l, LoraTarget::OProj);
        linear_backward(
            &blk.o_proj,
            po,
            s,
            &c.attn,
            c.o_u.as_deref(),
            t,
            &dx_mid,
            &mut dattn,
            gblk.as_deref_mut().map(|g| &mut g.o_proj),
            lora_grads.as_deref_mut().and_then(|g| g.pair_mut(l, LoraTarget::OProj)),
        );
        let mut dq = vec![0.0f32; t * d];
        let mut dk = vec![0.0f32; t * d];
        let mut dv = vec![0.0f32; t * d];
        let mut dp = vec![0.0f32; t];
        for h in 0..nh {
            let off = h * hd;
            for p in 0..t {
                let probs = &c.probs[h * t * t + p * t..h * t * t + p * t + p + 1];
                let dout = &dattn[p * d + off..p * d + off + hd];
                let mut weighted = 0.0f32;
                for s_ in 0..=p {
                    dp[s_] = dot(dout, &c.v[s_ * d + off..s_ * d + off + hd]);
                    weighted += probs[s_] * dp[s_];
                    axpy(probs[s_], dout, &mut dv[s_ * d + off..s_ * d + off + hd]);
                }
                let qrow = &c.q[p * d + off..p * d + off + hd];
                for s_ in 0..=p {
                    let ds = probs[s_] * (dp[s_] - weighted) * att_scale;
                    if ds != 0.0 {
                        axpy(ds, &c.k[s_ * d + off..s_ * d + off + hd], &mut dq[p * d + off..p * d + off + hd]);
                        axpy(ds, qrow, &mut dk[s_ * d + off..s_ * d + off + hd]);
                    }
                }
            }
        }
        let mut da1 = vec![0.0f32; t * d];
        for (target, lin, grad_in, u) in [
            (LoraTarget::QProj, &blk.q_proj, &dq, &c.q_u),
            (LoraTarget::KProj, &blk.k_proj, &dk, &c.k_u),
            (LoraTarget::VProj, &blk.v_proj, &dv, &c.v_u),
        ] {
            let (pair, s) = lora_for(adapter, l, target);
            linear_backward(
                lin,
                pair,
                s,
                &c.a1,
                u.as_deref(),
                t,
                grad_in,
                &mut da1,
                gblk.as_deref_mut().map(|g| match target {
                    LoraTarget::QProj => &mut g.q_proj,
                    LoraTarget::KProj => &mut g.k_proj,
                    _ => &mut g.v_proj,
                }),
                lora_grads.as_deref_mut().and_then(|g| g.pair_mut(l, target)),
            );
        }
        norm_backward(
            &c.ln1,
            &blk.ln1_gain,
            &da1,
            d,
            &mut dx_in,
            gblk
                .map(|g| (g.ln1_gain.as_mut_slice(), g.ln1_bias.as_mut_slice())),
        );
        dx = dx_in;
    }

    if let Some(g) = base_grads {
        for (p, &tok) in cache.tokens.iter().enumerate() {
            let grow = &dx[p * d..(p + 1) * d];
            axpy(1.0, grow, g.tok_emb.row_mut(tok as usize));
            axpy(1.0, grow, g.pos_emb.row_mut(p));
        }
    }
}

/// Loss over one sequence plus gradients for the requested parameter sets.
pub(crate) fn loss_and_grads(
    model: &MiniLmModel,
    adapter: Option<&LoraAdapter>,
    input: &[u8],
    targets: &[Option<u8>],
    base_grads: Option<&mut MiniLmModel>,
    lora_grads: Option<&mut LoraAdapter>,
) -> Result<LossStats> {
    if targets.len() != input.len() {
        return Err(KamirError::Shape(format!(
            "{} targets for {} input tokens",
            targets.len(),
            input.len()
        )));
    }
    let cache = forward(model, adapter, input)?;
    let (stats, dlogits) = cross_entropy(&cache.logits, model.config.vocab_size, targets)?;
    backward(model, adapter, &cache, &dlogits, base_grads, lora_grads);
    Ok(stats)
}

/// Loss statistics without any gradient work.
pub(crate) fn loss_only(
    model: &MiniLmModel,
    adapter: Option<&LoraAdapter>,
    input: &[u8],
    targets: &[Option<u8>],
) -> Result<LossStats> {
    let cache = forward(model, adapter, input)?;
    Ok(cross_entropy(&cache.logits, model.config.vocab_size, targets)?.0)
}
