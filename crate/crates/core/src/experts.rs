//! Shared backbone, K domain-specific experts, and the domain-agnostic
//! query branch.
//!
//! The backbone maps inputs to shared features used by every branch. Each
//! expert is a neck (shared dim -> token dim, relu) plus a classification
//! head; the query branch is a neck with no head. Parameter names place
//! the backbone in `backbone.*`, expert k in `expert.k.*`, and the query
//! branch in `global.query.*`, which is exactly the θ^B / θ^D_k / θ^G
//! partition the loss relies on.

use crate::params::{Forward, ParamError, ParamId, ParamRegistry};
use crate::tensor::{TensorError, TensorId};
use rand_chacha::ChaCha8Rng;

/// Hidden width of the two-layer backbone extractor.
pub const BACKBONE_HIDDEN: usize = 64;

/// θ^B: two affine+relu layers, input dim -> hidden -> shared dim.
#[derive(Debug, Clone, Copy)]
pub struct BackboneParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// θ^D_k: an expert's neck (shared -> token dim) and classifier head.
#[derive(Debug, Clone, Copy)]
pub struct ExpertParams {
    pub neck_w: ParamId,
    pub neck_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Query branch neck (part of θ^G); deliberately has no head.
#[derive(Debug, Clone, Copy)]
pub struct QueryBranchParams {
    pub neck_w: ParamId,
    pub neck_b: ParamId,
}

pub fn init_backbone(
    reg: &mut ParamRegistry,
    d_in: usize,
    d_s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BackboneParams, ParamError> {
    Ok(BackboneParams {
        w1: reg.glorot("backbone.fc1.w", d_in, BACKBONE_HIDDEN, rng)?,
        b1: reg.zeros("backbone.fc1.b", vec![BACKBONE_HIDDEN])?,
        w2: reg.glorot("backbone.fc2.w", BACKBONE_HIDDEN, d_s, rng)?,
        b2: reg.zeros("backbone.fc2.b", vec![d_s])?,
    })
}

pub fn init_expert(
    reg: &mut ParamRegistry,
    k: usize,
    d_s: usize,
    d: usize,
    n_c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ExpertParams, ParamError> {
    Ok(ExpertParams {
        neck_w: reg.glorot(&format!("expert.{k}.neck.w"), d_s, d, rng)?,
        neck_b: reg.zeros(&format!("expert.{k}.neck.b"), vec![d])?,
        head_w: reg.glorot(&format!("expert.{k}.head.w"), d, n_c, rng)?,
        head_b: reg.zeros(&format!("expert.{k}.head.b"), vec![n_c])?,
    })
}

pub fn init_query_branch(
    reg: &mut ParamRegistry,
    d_s: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QueryBranchParams, ParamError> {
    Ok(QueryBranchParams {
        neck_w: reg.glorot("global.query.neck.w", d_s, d, rng)?,
        neck_b: reg.zeros("global.query.neck.b", vec![d])?,
    })
}

/// x [B, D_in] -> shared features [B, d_s].
pub fn backbone_forward(
    fx: &mut Forward<'_>,
    p: &BackboneParams,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let h = fx.linear(x, p.w1, Some(p.b1))?;
    let h = fx.tape.relu(h);
    let out = fx.linear(h, p.w2, Some(p.b2))?;
    Ok(fx.tape.relu(out))
}

/// shared [B, d_s] -> expert token [B, d].
pub fn expert_feature(
    fx: &mut Forward<'_>,
    p: &ExpertParams,
    shared: TensorId,
) -> Result<TensorId, TensorError> {
    let h = fx.linear(shared, p.neck_w, Some(p.neck_b))?;
    Ok(fx.tape.relu(h))
}

/// feature [B, d] -> g_k logits [B, N_C].
pub fn expert_head(
    fx: &mut Forward<'_>,
    p: &ExpertParams,
    feature: TensorId,
) -> Result<TensorId, TensorError> {
    fx.linear(feature, p.head_w, Some(p.head_b))
}

/// shared [B, d_s] -> (token [B, d], g_k logits [B, N_C]).
pub fn expert_forward(
    fx: &mut Forward<'_>,
    p: &ExpertParams,
    shared: TensorId,
) -> Result<(TensorId, TensorId), TensorError> {
    let feature = expert_feature(fx, p, shared)?;
    let logits = expert_head(fx, p, feature)?;
    Ok((feature, logits))
}

/// shared [B, d_s] -> query token [B, d].
pub fn query_forward(
    fx: &mut Forward<'_>,
    p: &QueryBranchParams,
    shared: TensorId,
) -> Result<TensorId, TensorError> {
    let h = fx.linear(shared, p.neck_w, Some(p.neck_b))?;
    Ok(fx.tape.relu(h))
}
