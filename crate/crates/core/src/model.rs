//! The assembled model: configuration, parameter construction, the forward
//! passes of every variant, the combined loss, and prediction.
//!
//! The full model routes each input through the shared backbone, builds K
//! expert tokens plus one query token, encodes the expert tokens into a
//! memory, decodes the query against that memory by cross-attention, and
//! classifies the decoded feature with the final FC layer. Sub-model
//! variants reuse the same parameter set and differ only in which pieces
//! the forward pass touches, so any two variants can be compared on
//! literally identical weights.
//!
//! The training loss is
//!   total = λ·(1/B)·Σᵢ CE(g_{zᵢ}(xᵢ), yᵢ) + (1−λ)·(1/B)·Σᵢ CE(h(xᵢ), yᵢ),
//! where the first term reaches expert k's head only through the samples
//! with zᵢ = k, and the second term never touches any expert head.

use crate::attention::{
    decoder_stack, encoder_stack, init_decoder_stack, init_encoder_stack, AttentionError,
    DecoderLayerParams, EncoderLayerParams,
};
use crate::experts::{
    backbone_forward, expert_feature, expert_head, init_backbone, init_expert,
    init_query_branch, query_forward, BackboneParams, ExpertParams, QueryBranchParams,
};
use crate::params::{derive_rng, Forward, ParamError, ParamId, ParamRegistry, ParamSession};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("operation requires variant {expected:?}, config has {got:?}")]
    WrongVariant { expected: Variant, got: Variant },
}

impl From<AttentionError> for ModelError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::Tensor(t) => ModelError::Tensor(t),
            AttentionError::Param(p) => ModelError::Param(p),
        }
    }
}

/// Which architecture the forward pass assembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Backbone → experts + query → encoder → cross-attention decoder → FC.
    Full,
    /// Sum of the K expert classifiers; no transformer.
    ConvExp,
    /// Encoder over expert tokens, fresh per-domain heads on the encoded
    /// tokens, summed; no decoder.
    TEExp,
    /// Decoder only: raw expert tokens serve as memory.
    TD,
    /// Experts weighted by softmax of query·expert inner products.
    WeightedMoE,
    /// Backbone → query branch → FC; domain-agnostic baseline.
    ERM,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::ERM,
        Variant::ConvExp,
        Variant::TEExp,
        Variant::TD,
        Variant::Full,
        Variant::WeightedMoE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::ConvExp => "ConvExp",
            Variant::TEExp => "TEExp",
            Variant::TD => "TD",
            Variant::WeightedMoE => "WeightedMoE",
            Variant::ERM => "ERM",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

/// Model hyperparameters. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of source domains / experts.
    pub k: usize,
    /// Number of classes.
    pub n_c: usize,
    /// Input dimension.
    pub d_in: usize,
    /// Shared (backbone) feature dimension.
    pub d_s: usize,
    /// Token dimension inside the transformer.
    pub d: usize,
    /// Encoder and decoder stack depth.
    pub l: usize,
    pub num_heads: usize,
    /// MLP hidden width inside transformer blocks.
    pub d_ff: usize,
    /// Eq. 1 mixing weight on the domain-expert term.
    pub lambda: f64,
    pub variant: Variant,
    /// Learned additive per-domain embedding on the expert tokens.
    pub domain_embedding: bool,
    /// Keep the decoder's (near-trivial) self-attention block.
    pub decoder_self_attn: bool,
    /// Include Q/K/V/output projection biases in attention blocks.
    pub attn_bias: bool,
    /// Master seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            n_c: 5,
            d_in: 16,
            d_s: 64,
            d: 32,
            l: 2,
            num_heads: 2,
            d_ff: 64,
            lambda: 0.1,
            variant: Variant::Full,
            domain_embedding: false,
            decoder_self_attn: true,
            attn_bias: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The micro configuration used for exhaustive gradient checking.
    pub fn micro() -> Self {
        ModelConfig {
            k: 2,
            n_c: 5,
            d_in: 8,
            d_s: 16,
            d: 8,
            l: 1,
            num_heads: 2,
            d_ff: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 1 {
            return Err(ModelError::Config("K must be at least 1".into()));
        }
        if self.num_heads == 0 || !self.d.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "d = {} must be divisible by num_heads = {}",
                self.d, self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ModelError::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        for (name, v) in [
            ("N_C", self.n_c),
            ("D_in", self.d_in),
            ("d_s", self.d_s),
            ("d", self.d),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Handles to every parameter of the model superset. All variants share
/// this layout; unused pieces simply receive no gradient.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub experts: Vec<ExpertParams>,
    pub query: QueryBranchParams,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub final_fc_w: ParamId,
    pub final_fc_b: ParamId,
    /// Fresh per-domain heads on encoded tokens (TEExp path, θ^G).
    pub te_heads: Vec<(ParamId, ParamId)>,
    /// Learned [K, d] additive token embedding, used when the config
    /// enables domain_embedding.
    pub domain_embed: ParamId,
    /// Count of expert-head (g_k) evaluations, batched rows counted once
    /// per head application; inference paths must keep this at zero for
    /// variants whose prediction discards the heads.
    pub head_evals: Cell<u64>,
}

/// Construct all parameters for a configuration. Each component draws
/// from its own stream derived from the config seed, so the values of one
/// component do not depend on whether another is enabled.
pub fn init_model(cfg: &ModelConfig) -> Result<(ParamRegistry, ModelParams), ModelError> {
    cfg.validate()?;
    let mut reg = ParamRegistry::new();
    let backbone = init_backbone(&mut reg, cfg.d_in, cfg.d_s, &mut derive_rng(cfg.seed, "backbone"))?;
    let experts = (0..cfg.k)
        .map(|k| {
            init_expert(
                &mut reg,
                k,
                cfg.d_s,
                cfg.d,
                cfg.n_c,
                &mut derive_rng(cfg.seed, &format!("expert.{k}")),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let query = init_query_branch(&mut reg, cfg.d_s, cfg.d, &mut derive_rng(cfg.seed, "global.query"))?;
    let encoder = init_encoder_stack(
        &mut reg,
        "global.enc",
        cfg.l,
        cfg.d,
        cfg.d_ff,
        cfg.attn_bias,
        &mut derive_rng(cfg.seed, "global.enc"),
    )?;
    let decoder = init_decoder_stack(
        &mut reg,
        "global.dec",
        cfg.l,
        cfg.d,
        cfg.d_ff,
        cfg.attn_bias,
        &mut derive_rng(cfg.seed, "global.dec"),
    )?;
    let mut fc_rng = derive_rng(cfg.seed, "global.fc");
    let final_fc_w = reg.glorot("global.fc.w", cfg.d, cfg.n_c, &mut fc_rng)?;
    let final_fc_b = reg.zeros("global.fc.b", vec![cfg.n_c])?;
    let mut te_rng = derive_rng(cfg.seed, "global.te_head");
    let te_heads = (0..cfg.k)
        .map(|k| {
            let w = reg.glorot(&format!("global.te_head.{k}.w"), cfg.d, cfg.n_c, &mut te_rng)?;
            let b = reg.zeros(&format!("global.te_head.{k}.b"), vec![cfg.n_c])?;
            Ok::<_, ParamError>((w, b))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let domain_embed = reg.zeros("global.domain_embed", vec![cfg.k, cfg.d])?;
    Ok((
        reg,
        ModelParams {
            backbone,
            experts,
            query,
            encoder,
            decoder,
            final_fc_w,
            final_fc_b,
            te_heads,
            domain_embed,
            head_evals: Cell::new(0),
        },
    ))
}

/// Tape handles produced by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// h(x): logits of the global classifier, [B, N_C].
    pub global_logits: TensorId,
    /// g_k(x) for every expert, each [B, N_C]. Empty for ERM.
    pub expert_logits: Vec<TensorId>,
    /// The feature the global head consumed, [B, d], for variants that
    /// have such a single feature (Full, TD, ERM, WeightedMoE).
    pub decoded_feature: Option<TensorId>,
}

fn expert_tokens(
    fx: &mut Forward<'_>,
    mp: &ModelParams,
    shared: TensorId,
) -> Result<Vec<TensorId>, ModelError> {
    mp.experts
        .iter()
        .map(|e| expert_feature(fx, e, shared).map_err(ModelError::from))
        .collect()
}

fn all_expert_logits(
    fx: &mut Forward<'_>,
    mp: &ModelParams,
    features: &[TensorId],
) -> Result<Vec<TensorId>, ModelError> {
    mp.experts
        .iter()
        .zip(features)
        .map(|(e, &f)| {
            mp.head_evals.set(mp.head_evals.get() + 1);
            expert_head(fx, e, f).map_err(ModelError::from)
        })
        .collect()
}

/// Stack per-expert tokens into a [B, K, d] sequence, adding the learned
/// domain embedding when enabled.
fn token_sequence(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    features: &[TensorId],
) -> Result<TensorId, ModelError> {
    let stacked = fx.tape.stack(features)?;
    if cfg.domain_embedding {
        let embed = fx.bind(mp.domain_embed);
        Ok(fx.tape.add_broadcast(stacked, embed)?)
    } else {
        Ok(stacked)
    }
}

fn decode_and_classify(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    enc_layers: &[EncoderLayerParams],
    shared: TensorId,
    features: &[TensorId],
) -> Result<(TensorId, TensorId), ModelError> {
    let tokens = token_sequence(fx, cfg, mp, features)?;
    let memory = encoder_stack(fx, enc_layers, cfg.num_heads, tokens)?;
    let q = query_forward(fx, &mp.query, shared)?;
    let batch = fx.tape.value(q).shape()[0];
    let q_seq = fx.tape.reshape(q, vec![batch, 1, cfg.d])?;
    let decoded = decoder_stack(
        fx,
        &mp.decoder,
        cfg.num_heads,
        cfg.decoder_self_attn,
        q_seq,
        memory,
    )?;
    let decoded = fx.tape.reshape(decoded, vec![batch, cfg.d])?;
    let logits = fx.linear(decoded, mp.final_fc_w, Some(mp.final_fc_b))?;
    Ok((decoded, logits))
}

/// Full-model training forward: expert heads for the domain loss plus the
/// transformer path for the global loss.
pub fn d2sdk_forward(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    x: TensorId,
) -> Result<ForwardOutput, ModelError> {
    if cfg.variant != Variant::Full {
        return Err(ModelError::WrongVariant {
            expected: Variant::Full,
            got: cfg.variant,
        });
    }
    forward_with_encoder(fx, cfg, mp, x, &mp.encoder)
}

fn forward_with_encoder(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    x: TensorId,
    enc_layers: &[EncoderLayerParams],
) -> Result<ForwardOutput, ModelError> {
    let shared = backbone_forward(fx, &mp.backbone, x)?;
    let features = expert_tokens(fx, mp, shared)?;
    let expert_logits = all_expert_logits(fx, mp, &features)?;
    let (decoded, global_logits) = decode_and_classify(fx, cfg, mp, enc_layers, shared, &features)?;
    Ok(ForwardOutput {
        global_logits,
        expert_logits,
        decoded_feature: Some(decoded),
    })
}

fn sum_logits(fx: &mut Forward<'_>, logits: &[TensorId]) -> Result<TensorId, ModelError> {
    let mut iter = logits.iter().copied();
    let mut acc = iter.next().expect("at least one expert");
    for l in iter {
        acc = fx.tape.add(acc, l)?;
    }
    Ok(acc)
}

/// ConvExp, TEExp, TD, and ERM forwards (see [`Variant`]).
pub fn variant_forward(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    x: TensorId,
) -> Result<ForwardOutput, ModelError> {
    match cfg.variant {
        Variant::ConvExp => {
            let shared = backbone_forward(fx, &mp.backbone, x)?;
            let features = expert_tokens(fx, mp, shared)?;
            let expert_logits = all_expert_logits(fx, mp, &features)?;
            let global_logits = sum_logits(fx, &expert_logits)?;
            Ok(ForwardOutput {
                global_logits,
                expert_logits,
                decoded_feature: None,
            })
        }
        Variant::TEExp => {
            let shared = backbone_forward(fx, &mp.backbone, x)?;
            let features = expert_tokens(fx, mp, shared)?;
            let expert_logits = all_expert_logits(fx, mp, &features)?;
            let tokens = token_sequence(fx, cfg, mp, &features)?;
            let memory = encoder_stack(fx, &mp.encoder, cfg.num_heads, tokens)?;
            let per_token: Vec<TensorId> = mp
                .te_heads
                .iter()
                .enumerate()
                .map(|(k, &(w, b))| {
                    let tok = fx.tape.select_token(memory, k)?;
                    fx.linear(tok, w, Some(b))
                })
                .collect::<Result<_, _>>()?;
            let global_logits = sum_logits(fx, &per_token)?;
            Ok(ForwardOutput {
                global_logits,
                expert_logits,
                decoded_feature: None,
            })
        }
        Variant::TD => {
            let out = forward_with_encoder(fx, cfg, mp, x, &[])?;
            Ok(out)
        }
        Variant::ERM => {
            let shared = backbone_forward(fx, &mp.backbone, x)?;
            let q = query_forward(fx, &mp.query, shared)?;
            let global_logits = fx.linear(q, mp.final_fc_w, Some(mp.final_fc_b))?;
            Ok(ForwardOutput {
                global_logits,
                expert_logits: Vec::new(),
                decoded_feature: Some(q),
            })
        }
        other => Err(ModelError::WrongVariant {
            expected: Variant::ConvExp,
            got: other,
        }),
    }
}

/// Experts mixed by softmax over query–expert inner products.
pub fn weighted_moe_forward(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    x: TensorId,
) -> Result<ForwardOutput, ModelError> {
    if cfg.variant != Variant::WeightedMoE {
        return Err(ModelError::WrongVariant {
            expected: Variant::WeightedMoE,
            got: cfg.variant,
        });
    }
    let shared = backbone_forward(fx, &mp.backbone, x)?;
    let features = expert_tokens(fx, mp, shared)?;
    let expert_logits = all_expert_logits(fx, mp, &features)?;
    let q = query_forward(fx, &mp.query, shared)?;
    let batch = fx.tape.value(q).shape()[0];
    // ⟨q, f_k⟩ per row, via elementwise product against a ones column.
    let ones = fx.tape.constant(Tensor::new(vec![cfg.d, 1], vec![1.0; cfg.d]).expect("ones"));
    let scores: Vec<TensorId> = features
        .iter()
        .map(|&f| {
            let prod = fx.tape.mul(q, f)?;
            fx.tape.matmul(prod, ones)
        })
        .collect::<Result<_, _>>()?;
    let stacked = fx.tape.stack(&scores)?; // [B, K, 1]
    let score_mat = fx.tape.reshape(stacked, vec![batch, cfg.k])?;
    let weights = fx.tape.softmax(score_mat, 1)?;
    let w_row = fx.tape.reshape(weights, vec![batch, 1, cfg.k])?;
    let logits_seq = fx.tape.stack(&expert_logits)?; // [B, K, N_C]
    let mixed = fx.tape.matmul(w_row, logits_seq)?; // [B, 1, N_C]
    let global_logits = fx.tape.reshape(mixed, vec![batch, cfg.n_c])?;
    Ok(ForwardOutput {
        global_logits,
        expert_logits,
        decoded_feature: Some(q),
    })
}

/// Training forward for whatever variant the config selects.
pub fn forward(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    x: TensorId,
) -> Result<ForwardOutput, ModelError> {
    match cfg.variant {
        Variant::Full => d2sdk_forward(fx, cfg, mp, x),
        Variant::WeightedMoE => weighted_moe_forward(fx, cfg, mp, x),
        _ => variant_forward(fx, cfg, mp, x),
    }
}

/// Inference logits only. Variants whose prediction discards the expert
/// heads (Full, TD, TEExp, ERM) never evaluate them here; ConvExp and
/// WeightedMoE combine head outputs by definition and do evaluate them.
pub fn infer_logits(
    fx: &mut Forward<'_>,
    cfg: &ModelConfig,
    mp: &ModelParams,
    x: TensorId,
) -> Result<TensorId, ModelError> {
    match cfg.variant {
        Variant::Full | Variant::TD => {
            let enc: &[EncoderLayerParams] = if cfg.variant == Variant::Full {
                &mp.encoder
            } else {
                &[]
            };
            let shared = backbone_forward(fx, &mp.backbone, x)?;
            let features = expert_tokens(fx, mp, shared)?;
            let (_, logits) = decode_and_classify(fx, cfg, mp, enc, shared, &features)?;
            Ok(logits)
        }
        Variant::TEExp => {
            let shared = backbone_forward(fx, &mp.backbone, x)?;
            let features = expert_tokens(fx, mp, shared)?;
            let tokens = token_sequence(fx, cfg, mp, &features)?;
            let memory = encoder_stack(fx, &mp.encoder, cfg.num_heads, tokens)?;
            let per_token: Vec<TensorId> = mp
                .te_heads
                .iter()
                .enumerate()
                .map(|(k, &(w, b))| {
                    let tok = fx.tape.select_token(memory, k)?;
                    fx.linear(tok, w, Some(b))
                })
                .collect::<Result<_, _>>()?;
            sum_logits(fx, &per_token)
        }
        Variant::ERM => {
            let shared = backbone_forward(fx, &mp.backbone, x)?;
            let q = query_forward(fx, &mp.query, shared)?;
            Ok(fx.linear(q, mp.final_fc_w, Some(mp.final_fc_b))?)
        }
        Variant::ConvExp | Variant::WeightedMoE => {
            let out = forward(fx, cfg, mp, x)?;
            Ok(out.global_logits)
        }
    }
}

/// The two Eq. 1 terms and their weighted combination, all scalars on the
/// tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: TensorId,
    /// (1/B)·Σ CE(g_{zᵢ}(xᵢ), yᵢ); a zero constant when no experts exist.
    pub domain: TensorId,
    /// (1/B)·Σ CE(h(xᵢ), yᵢ).
    pub global: TensorId,
}

/// Assemble Eq. 1 from a forward output. `z` holds each sample's source
/// domain index.
pub fn compute_loss(
    fx: &mut Forward<'_>,
    out: &ForwardOutput,
    y: &[usize],
    z: &[usize],
    lambda: f64,
) -> Result<LossParts, ModelError> {
    let global = fx.tape.cross_entropy(out.global_logits, y)?;
    let domain = if out.expert_logits.is_empty() {
        fx.tape.constant(Tensor::scalar(0.0))
    } else {
        let picked = fx.tape.pick_rows(&out.expert_logits, z)?;
        fx.tape.cross_entropy(picked, y)?
    };
    let weighted_domain = fx.tape.scale(domain, lambda);
    let weighted_global = fx.tape.scale(global, 1.0 - lambda);
    let total = fx.tape.add(weighted_domain, weighted_global)?;
    Ok(LossParts {
        total,
        domain,
        global,
    })
}

/// Argmax per row with ties broken toward the lowest class index.
pub fn predict_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Class predictions from a forward output.
pub fn predict(tape: &Tape, out: &ForwardOutput) -> Vec<usize> {
    predict_rows(tape.value(out.global_logits))
}

/// Run inference on raw input rows and return predicted classes.
pub fn infer(
    cfg: &ModelConfig,
    reg: &ParamRegistry,
    mp: &ModelParams,
    x: &Tensor,
) -> Result<Vec<usize>, ModelError> {
    let mut tape = Tape::new();
    let mut sess = ParamSession::new();
    let mut fx = Forward::new(&mut tape, reg, &mut sess);
    let xid = fx.tape.leaf(x.clone(), false);
    let logits = infer_logits(&mut fx, cfg, mp, xid)?;
    Ok(predict_rows(tape.value(logits)))
}
