//! Scaled dot-product attention, multi-head attention, and post-LN
//! transformer encoder/decoder layers and stacks.
//!
//! Every block follows the post-LN convention: sublayer output is added to
//! its input and the sum is layer-normalized. Inputs are batched as
//! [B, n, d]; rank-2 [n, d] inputs are treated as a batch of one.

use crate::params::{Forward, ParamError, ParamId, ParamRegistry};
use crate::tensor::{TensorError, TensorId};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Layer-norm epsilon used throughout the transformer blocks.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, AttentionError>;

/// Projection parameters for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Projection biases; absent when the config disables attention biases.
    pub b_q: Option<ParamId>,
    pub b_k: Option<ParamId>,
    pub b_v: Option<ParamId>,
    pub b_o: Option<ParamId>,
}

/// Two-layer relu MLP d -> d_ff -> d.
#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Self-attention block, MLP block, and their layer norms.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerParams {
    pub attn: MhaParams,
    pub ln_attn: LayerNormParams,
    pub mlp: MlpParams,
    pub ln_mlp: LayerNormParams,
}

/// Self-attention, cross-attention, and MLP blocks with three layer norms.
/// The self block is always allocated; a config flag may skip it in the
/// forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerParams {
    pub self_attn: MhaParams,
    pub ln_self: LayerNormParams,
    pub cross_attn: MhaParams,
    pub ln_cross: LayerNormParams,
    pub mlp: MlpParams,
    pub ln_mlp: LayerNormParams,
}

// ── initialization ──────────────────────────────────────────────────

pub fn init_mha(
    reg: &mut ParamRegistry,
    prefix: &str,
    d: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<MhaParams, ParamError> {
    let w_q = reg.glorot(&format!("{prefix}.wq"), d, d, rng)?;
    let w_k = reg.glorot(&format!("{prefix}.wk"), d, d, rng)?;
    let w_v = reg.glorot(&format!("{prefix}.wv"), d, d, rng)?;
    let w_o = reg.glorot(&format!("{prefix}.wo"), d, d, rng)?;
    let mut biases = [None; 4];
    if bias {
        for (slot, name) in biases.iter_mut().zip(["bq", "bk", "bv", "bo"]) {
            *slot = Some(reg.zeros(&format!("{prefix}.{name}"), vec![d])?);
        }
    }
    Ok(MhaParams {
        w_q,
        w_k,
        w_v,
        w_o,
        b_q: biases[0],
        b_k: biases[1],
        b_v: biases[2],
        b_o: biases[3],
    })
}

pub fn init_mlp(
    reg: &mut ParamRegistry,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<MlpParams, ParamError> {
    Ok(MlpParams {
        w1: reg.glorot(&format!("{prefix}.w1"), d, d_ff, rng)?,
        b1: reg.zeros(&format!("{prefix}.b1"), vec![d_ff])?,
        w2: reg.glorot(&format!("{prefix}.w2"), d_ff, d, rng)?,
        b2: reg.zeros(&format!("{prefix}.b2"), vec![d])?,
    })
}

pub fn init_layer_norm(
    reg: &mut ParamRegistry,
    prefix: &str,
    d: usize,
) -> std::result::Result<LayerNormParams, ParamError> {
    Ok(LayerNormParams {
        gamma: reg.ones(&format!("{prefix}.gamma"), vec![d])?,
        beta: reg.zeros(&format!("{prefix}.beta"), vec![d])?,
    })
}

pub fn init_encoder_layer(
    reg: &mut ParamRegistry,
    prefix: &str,
    d: usize,
    d_ff: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<EncoderLayerParams, ParamError> {
    Ok(EncoderLayerParams {
        attn: init_mha(reg, &format!("{prefix}.attn"), d, bias, rng)?,
        ln_attn: init_layer_norm(reg, &format!("{prefix}.ln_attn"), d)?,
        mlp: init_mlp(reg, &format!("{prefix}.mlp"), d, d_ff, rng)?,
        ln_mlp: init_layer_norm(reg, &format!("{prefix}.ln_mlp"), d)?,
    })
}

pub fn init_decoder_layer(
    reg: &mut ParamRegistry,
    prefix: &str,
    d: usize,
    d_ff: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<DecoderLayerParams, ParamError> {
    Ok(DecoderLayerParams {
        self_attn: init_mha(reg, &format!("{prefix}.self"), d, bias, rng)?,
        ln_self: init_layer_norm(reg, &format!("{prefix}.ln_self"), d)?,
        cross_attn: init_mha(reg, &format!("{prefix}.cross"), d, bias, rng)?,
        ln_cross: init_layer_norm(reg, &format!("{prefix}.ln_cross"), d)?,
        mlp: init_mlp(reg, &format!("{prefix}.mlp"), d, d_ff, rng)?,
        ln_mlp: init_layer_norm(reg, &format!("{prefix}.ln_mlp"), d)?,
    })
}

pub fn init_encoder_stack(
    reg: &mut ParamRegistry,
    prefix: &str,
    layers: usize,
    d: usize,
    d_ff: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Vec<EncoderLayerParams>, ParamError> {
    (0..layers)
        .map(|l| init_encoder_layer(reg, &format!("{prefix}.l{l}"), d, d_ff, bias, rng))
        .collect()
}

pub fn init_decoder_stack(
    reg: &mut ParamRegistry,
    prefix: &str,
    layers: usize,
    d: usize,
    d_ff: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Vec<DecoderLayerParams>, ParamError> {
    (0..layers)
        .map(|l| init_decoder_layer(reg, &format!("{prefix}.l{l}"), d, d_ff, bias, rng))
        .collect()
}

// ── forward passes ──────────────────────────────────────────────────

/// softmax(Q·Kᵀ/√d_h)·V with the softmax over the key axis.
///
/// Q is [.., n_q, d_h] and K/V are [.., n_k, d_h]/[.., n_k, d_v], either
/// both rank 2 or both rank 3 with matching batch. Returns the attention
/// output and the row-stochastic weight tensor.
pub fn sdp_attention(
    fx: &mut Forward<'_>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<(TensorId, TensorId)> {
    let d_h = *fx.tape.value(q).shape().last().unwrap_or(&0);
    let scores = fx.tape.matmul_nt(q, k)?;
    let scaled = fx.tape.scale(scores, 1.0 / (d_h as f64).sqrt());
    let axis = fx.tape.value(scaled).shape().len() - 1;
    let weights = fx.tape.softmax(scaled, axis)?;
    let out = fx.tape.matmul(weights, v)?;
    Ok((out, weights))
}

fn lift_rank2(fx: &mut Forward<'_>, x: TensorId) -> Result<(TensorId, bool)> {
    let shape = fx.tape.value(x).shape().to_vec();
    if shape.len() == 2 {
        let lifted = fx.tape.reshape(x, vec![1, shape[0], shape[1]])?;
        Ok((lifted, true))
    } else {
        Ok((x, false))
    }
}

fn unlift(fx: &mut Forward<'_>, x: TensorId, lifted: bool) -> Result<TensorId> {
    if !lifted {
        return Ok(x);
    }
    let shape = fx.tape.value(x).shape().to_vec();
    Ok(fx.tape.reshape(x, shape[1..].to_vec())?)
}

/// Multi-head attention: project queries and memory, attend per head,
/// concatenate heads, output-project. `x_q` is [B, n_q, d] (or [n_q, d]),
/// `x_kv` likewise over n_k tokens.
pub fn mha(
    fx: &mut Forward<'_>,
    p: &MhaParams,
    heads: usize,
    x_q: TensorId,
    x_kv: TensorId,
) -> Result<TensorId> {
    let (x_q, lifted) = lift_rank2(fx, x_q)?;
    let (x_kv, _) = lift_rank2(fx, x_kv)?;
    let q = fx.linear_tokens(x_q, p.w_q, p.b_q)?;
    let k = fx.linear_tokens(x_kv, p.w_k, p.b_k)?;
    let v = fx.linear_tokens(x_kv, p.w_v, p.b_v)?;
    let qh = fx.tape.split_heads(q, heads)?;
    let kh = fx.tape.split_heads(k, heads)?;
    let vh = fx.tape.split_heads(v, heads)?;
    let (attended, _) = sdp_attention(fx, qh, kh, vh)?;
    let merged = fx.tape.merge_heads(attended, heads)?;
    let out = fx.linear_tokens(merged, p.w_o, p.b_o)?;
    unlift(fx, out, lifted)
}

fn mlp_forward(fx: &mut Forward<'_>, p: &MlpParams, x: TensorId) -> Result<TensorId> {
    let hidden = fx.linear_tokens(x, p.w1, Some(p.b1))?;
    let act = fx.tape.relu(hidden);
    Ok(fx.linear_tokens(act, p.w2, Some(p.b2))?)
}

fn residual_norm(
    fx: &mut Forward<'_>,
    ln: &LayerNormParams,
    x: TensorId,
    sublayer: TensorId,
) -> Result<TensorId> {
    let sum = fx.tape.add(x, sublayer)?;
    let gamma = fx.bind(ln.gamma);
    let beta = fx.bind(ln.beta);
    Ok(fx.tape.layer_norm(sum, gamma, beta, LN_EPS)?)
}

/// Post-LN encoder layer: LN(x + MHSA(x)), then LN(· + MLP(·)).
pub fn encoder_layer(
    fx: &mut Forward<'_>,
    p: &EncoderLayerParams,
    heads: usize,
    x: TensorId,
) -> Result<TensorId> {
    let (x, lifted) = lift_rank2(fx, x)?;
    let attended = mha(fx, &p.attn, heads, x, x)?;
    let normed = residual_norm(fx, &p.ln_attn, x, attended)?;
    let transformed = mlp_forward(fx, &p.mlp, normed)?;
    let out = residual_norm(fx, &p.ln_mlp, normed, transformed)?;
    unlift(fx, out, lifted)
}

/// Post-LN decoder layer for a length-1 query sequence: optional
/// self-attention block, cross-attention against `memory`, then MLP.
pub fn decoder_layer(
    fx: &mut Forward<'_>,
    p: &DecoderLayerParams,
    heads: usize,
    self_attn: bool,
    query: TensorId,
    memory: TensorId,
) -> Result<TensorId> {
    let (query, lifted) = lift_rank2(fx, query)?;
    let (memory, _) = lift_rank2(fx, memory)?;
    let mut cur = query;
    if self_attn {
        let attended = mha(fx, &p.self_attn, heads, cur, cur)?;
        cur = residual_norm(fx, &p.ln_self, cur, attended)?;
    }
    let crossed = mha(fx, &p.cross_attn, heads, cur, memory)?;
    cur = residual_norm(fx, &p.ln_cross, cur, crossed)?;
    let transformed = mlp_forward(fx, &p.mlp, cur)?;
    cur = residual_norm(fx, &p.ln_mlp, cur, transformed)?;
    unlift(fx, cur, lifted)
}

/// Sequential application of encoder layers.
pub fn encoder_stack(
    fx: &mut Forward<'_>,
    layers: &[EncoderLayerParams],
    heads: usize,
    x: TensorId,
) -> Result<TensorId> {
    let mut cur = x;
    for layer in layers {
        cur = encoder_layer(fx, layer, heads, cur)?;
    }
    Ok(cur)
}

/// Sequential decoder layers, each reading the same encoder memory.
pub fn decoder_stack(
    fx: &mut Forward<'_>,
    layers: &[DecoderLayerParams],
    heads: usize,
    self_attn: bool,
    query: TensorId,
    memory: TensorId,
) -> Result<TensorId> {
    let mut cur = query;
    for layer in layers {
        cur = decoder_layer(fx, layer, heads, self_attn, cur, memory)?;
    }
    Ok(cur)
}
