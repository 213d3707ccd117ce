//! The block-causal transformer trunk and the flow-matching action expert.
//!
//! The token sequence is five ordered groups: (1) 2D tokens (instruction +
//! image patches), (2) 3D history track tokens, (3) 3D query tokens (future
//! track queries then spatial queries), (4) the state token, (5) action-noise
//! tokens. Attention is bidirectional within a group and strictly causal
//! across groups. The action block has its own input/output projections and
//! its own layer-norm parameters at every normalization site; attention and
//! MLP weights are shared with the rest of the trunk.

use crate::encoding::{flow_time_embedding, TemporalEncoding};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GraphRef, Tensor};

pub const N_BLOCKS: usize = 5;

/// Ordered group sizes; `sizes[4]` is the action-noise block.
pub type BlockSizes = [usize; N_BLOCKS];

/// Which block a flat token index belongs to.
pub fn block_of(idx: usize, sizes: &BlockSizes) -> usize {
    let mut off = 0;
    for (b, &s) in sizes.iter().enumerate() {
        off += s;
        if idx < off {
            return b;
        }
    }
    panic!("token {} out of sequence of {}", idx, off);
}

/// Boolean attention matrix: entry (q, k) is true iff block(k) <= block(q).
pub fn block_mask_bool(sizes: &BlockSizes) -> Result<Vec<bool>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument {
            op: "build_block_mask",
            msg: "zero total sequence length".into(),
        });
    }
    let mut block_idx = Vec::with_capacity(total);
    for (b, &s) in sizes.iter().enumerate() {
        block_idx.extend(std::iter::repeat(b).take(s));
    }
    let mut mask = vec![false; total * total];
    for q in 0..total {
        for k in 0..total {
            mask[q * total + k] = block_idx[k] <= block_idx[q];
        }
    }
    Ok(mask)
}

/// Additive mask tensor (0 where allowed, -inf where forbidden).
pub fn build_block_mask<S: Scalar>(g: &GraphRef<S>, sizes: &BlockSizes) -> Result<Tensor<S>> {
    let allowed = block_mask_bool(sizes)?;
    let total: usize = sizes.iter().sum();
    let data: Vec<S> = allowed
        .iter()
        .map(|&a| if a { S::zero() } else { S::neg_infinity() })
        .collect();
    Ok(g.constant(data, &[total, total]))
}

/// A token tensor `[T, c]` plus the block partition it follows.
pub struct BlockMaskedSequence<S: Scalar> {
    pub tokens: Tensor<S>,
    pub sizes: BlockSizes,
}

impl<S: Scalar> BlockMaskedSequence<S> {
    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn context_len(&self) -> usize {
        self.total() - self.sizes[4]
    }

    /// Flat offset of the first token of `block`.
    pub fn block_offset(&self, block: usize) -> usize {
        self.sizes[..block].iter().sum()
    }
}

// ── Context embedders ────────────────────────────────────────────────

pub struct EmbedderParams<S: Scalar> {
    pub instr_table: Tensor<S>, // [n_tasks, c]
    pub patch_w: Tensor<S>,     // [p*p, c]
    pub patch_b: Tensor<S>,
    pub state_w: Tensor<S>, // [state_dim, c]
    pub state_b: Tensor<S>,
    /// One learned additive embedding per block.
    pub type_emb: Tensor<S>, // [5, c]
    /// Additive per-keypoint tags for history track tokens.
    pub kp_emb: Tensor<S>, // [k, c]
    /// Learnable future track queries.
    pub fut_query: Tensor<S>, // [k, c]
}

pub struct ContextInputs<'a, S: Scalar> {
    pub task_id: usize,
    /// One flattened grayscale image per camera view, `image_size^2` pixels.
    pub images: &'a [Vec<S>],
    pub image_size: usize,
    pub patch: usize,
    /// History track tokens `[K, c]`; `None` disables the history block.
    pub history_tokens: Option<Tensor<S>>,
    /// Assembled spatial query tokens `[Nq, c]`; `None` disables them.
    pub spatial_tokens: Option<Tensor<S>>,
    /// Whether the learnable future track queries join block 3.
    pub include_future_queries: bool,
    pub state: &'a [S],
}

/// Build the context blocks (1)-(4) of the sequence. The action block is
/// appended separately by [`assemble_sequence`] once noised actions exist.
pub fn embed_context<S: Scalar>(
    g: &GraphRef<S>,
    inputs: &ContextInputs<'_, S>,
    params: &EmbedderParams<S>,
) -> Result<BlockMaskedSequence<S>> {
    let c = params.type_emb.shape()[1];
    let n_tasks = params.instr_table.shape()[0];
    if inputs.task_id >= n_tasks {
        return Err(Error::InvalidArgument {
            op: "embed_context",
            msg: format!("unknown task id {} (have {})", inputs.task_id, n_tasks),
        });
    }
    if inputs.image_size % inputs.patch != 0 {
        return Err(Error::InvalidArgument {
            op: "embed_context",
            msg: format!(
                "image size {} not divisible by patch {}",
                inputs.image_size, inputs.patch
            ),
        });
    }

    let type_row = |b: usize| params.type_emb.slice(0, b, 1)?.reshape(&[c]);

    // Block 1: instruction token + image patches.
    let instr = params.instr_table.slice(0, inputs.task_id, 1)?;
    let mut block1_parts = vec![instr];
    let per_side = inputs.image_size / inputs.patch;
    for view in inputs.images {
        if view.len() != inputs.image_size * inputs.image_size {
            return Err(Error::InvalidArgument {
                op: "embed_context",
                msg: format!("image has {} pixels, expected {}", view.len(), inputs.image_size * inputs.image_size),
            });
        }
        let n_patches = per_side * per_side;
        let mut data = Vec::with_capacity(n_patches * inputs.patch * inputs.patch);
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..inputs.patch {
                    let row = py * inputs.patch + dy;
                    let start = row * inputs.image_size + px * inputs.patch;
                    data.extend_from_slice(&view[start..start + inputs.patch]);
                }
            }
        }
        let patches = g.constant(data, &[n_patches, inputs.patch * inputs.patch]);
        block1_parts.push(patches.matmul(&params.patch_w)?.add(&params.patch_b)?);
    }
    let b1_refs: Vec<&Tensor<S>> = block1_parts.iter().collect();
    let block1 = g.concat(&b1_refs, 0)?.add(&type_row(0)?)?;

    // Block 2: history track tokens with per-keypoint tags.
    let block2 = match &inputs.history_tokens {
        Some(h) => Some(h.add(&params.kp_emb)?.add(&type_row(1)?)?),
        None => None,
    };

    // Block 3: future track queries then spatial queries.
    let mut b3_parts: Vec<Tensor<S>> = Vec::new();
    if inputs.include_future_queries {
        b3_parts.push(params.fut_query.clone());
    }
    if let Some(sq) = &inputs.spatial_tokens {
        b3_parts.push(sq.clone());
    }
    let block3 = if b3_parts.is_empty() {
        None
    } else {
        let refs: Vec<&Tensor<S>> = b3_parts.iter().collect();
        Some(g.concat(&refs, 0)?.add(&type_row(2)?)?)
    };

    // Block 4: state token.
    let state = g.constant(inputs.state.to_vec(), &[1, inputs.state.len()]);
    let block4 = state
        .matmul(&params.state_w)?
        .add(&params.state_b)?
        .add(&type_row(3)?)?;

    let mut sizes: BlockSizes = [0; N_BLOCKS];
    sizes[0] = block1.shape()[0];
    let mut parts = vec![block1];
    if let Some(b2) = block2 {
        sizes[1] = b2.shape()[0];
        parts.push(b2);
    }
    if let Some(b3) = block3 {
        sizes[2] = b3.shape()[0];
        parts.push(b3);
    }
    sizes[3] = 1;
    parts.push(block4);
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    Ok(BlockMaskedSequence {
        tokens: g.concat(&refs, 0)?,
        sizes,
    })
}

/// Append embedded action-noise tokens as block 5.
pub fn assemble_sequence<S: Scalar>(
    ctx: &BlockMaskedSequence<S>,
    action_tokens: &Tensor<S>,
) -> Result<BlockMaskedSequence<S>> {
    let g = ctx.tokens.graph().clone();
    let mut sizes = ctx.sizes;
    sizes[4] = action_tokens.shape()[0];
    Ok(BlockMaskedSequence {
        tokens: g.concat(&[&ctx.tokens, action_tokens], 0)?,
        sizes,
    })
}

// ── Trunk ────────────────────────────────────────────────────────────

pub struct TrunkLayerParams<S: Scalar> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub ln1_act_g: Tensor<S>,
    pub ln1_act_b: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub ln2_act_g: Tensor<S>,
    pub ln2_act_b: Tensor<S>,
    pub mlp_w1: Tensor<S>,
    pub mlp_b1: Tensor<S>,
    pub mlp_w2: Tensor<S>,
    pub mlp_b2: Tensor<S>,
}

pub struct TrunkParams<S: Scalar> {
    pub layers: Vec<TrunkLayerParams<S>>,
    pub final_g: Tensor<S>,
    pub final_b: Tensor<S>,
    pub final_act_g: Tensor<S>,
    pub final_act_b: Tensor<S>,
    pub heads: usize,
}

/// Layer norm with context parameters on rows `[0, ctx)` and action-expert
/// parameters on rows `[ctx, T)`.
fn ln_split<S: Scalar>(
    x: &Tensor<S>,
    ctx_len: usize,
    g_ctx: &Tensor<S>,
    b_ctx: &Tensor<S>,
    g_act: &Tensor<S>,
    b_act: &Tensor<S>,
) -> Result<Tensor<S>> {
    let rows = x.shape()[0];
    if ctx_len == 0 {
        return x.layer_norm(g_act, b_act);
    }
    if ctx_len == rows {
        return x.layer_norm(g_ctx, b_ctx);
    }
    let ctx = x.slice(0, 0, ctx_len)?.layer_norm(g_ctx, b_ctx)?;
    let act = x
        .slice(0, ctx_len, rows - ctx_len)?
        .layer_norm(g_act, b_act)?;
    x.graph().concat(&[&ctx, &act], 0)
}

fn multi_head_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &Tensor<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    let c = q.shape()[1];
    assert_eq!(c % heads, 0, "dim {} not divisible by {} heads", c, heads);
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let scores = qh.matmul(&kh.t()?)?.scale(scale);
        let probs = scores.softmax_masked(mask)?;
        outs.push(probs.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<S>> = outs.iter().collect();
    q.graph().concat(&refs, 1)
}

/// Pre-norm transformer over the masked sequence; returns final-layer
/// normalized embeddings for every token.
pub fn trunk_forward<S: Scalar>(
    seq: &BlockMaskedSequence<S>,
    mask: &Tensor<S>,
    params: &TrunkParams<S>,
) -> Result<Tensor<S>> {
    let total = seq.total();
    if mask.shape() != [total, total] {
        return Err(Error::ShapeMismatch {
            op: "trunk_forward",
            lhs: mask.shape(),
            rhs: vec![total, total],
        });
    }
    let ctx_len = seq.context_len();
    let mut x = seq.tokens.clone();
    for layer in &params.layers {
        let h = ln_split(
            &x,
            ctx_len,
            &layer.ln1_g,
            &layer.ln1_b,
            &layer.ln1_act_g,
            &layer.ln1_act_b,
        )?;
        let q = h.matmul(&layer.wq)?.add(&layer.bq)?;
        let k = h.matmul(&layer.wk)?.add(&layer.bk)?;
        let v = h.matmul(&layer.wv)?.add(&layer.bv)?;
        let attn = multi_head_attention(&q, &k, &v, mask, params.heads)?;
        let attn = attn.matmul(&layer.wo)?.add(&layer.bo)?;
        x = x.add(&attn)?;
        let h2 = ln_split(
            &x,
            ctx_len,
            &layer.ln2_g,
            &layer.ln2_b,
            &layer.ln2_act_g,
            &layer.ln2_act_b,
        )?;
        let m = h2
            .matmul(&layer.mlp_w1)?
            .add(&layer.mlp_b1)?
            .tanh()
            .matmul(&layer.mlp_w2)?
            .add(&layer.mlp_b2)?;
        x = x.add(&m)?;
    }
    ln_split(
        &x,
        ctx_len,
        &params.final_g,
        &params.final_b,
        &params.final_act_g,
        &params.final_act_b,
    )
}

// ── KV cache ─────────────────────────────────────────────────────────

/// Per-layer key/value data of the context blocks, read-only once built.
/// Action-token passes attend to these plus their own block.
pub struct KVCache<S: Scalar> {
    layer_kv: Vec<(Vec<S>, Vec<S>)>,
    pub ctx_len: usize,
    pub dim: usize,
}

impl<S: Scalar> KVCache<S> {
    pub fn layers(&self) -> usize {
        self.layer_kv.len()
    }
}

/// Run the context-only forward and cache every layer's keys and values.
/// The context sequence must not contain action-noise tokens.
pub fn build_kv_cache<S: Scalar>(
    ctx: &BlockMaskedSequence<S>,
    params: &TrunkParams<S>,
) -> Result<KVCache<S>> {
    if ctx.sizes[4] != 0 {
        return Err(Error::InvalidArgument {
            op: "build_kv_cache",
            msg: "context must exclude action-noise tokens".into(),
        });
    }
    let g = ctx.tokens.graph().clone();
    let mask = build_block_mask(&g, &ctx.sizes)?;
    let mut x = ctx.tokens.clone();
    let mut layer_kv = Vec::with_capacity(params.layers.len());
    let c = x.shape()[1];
    for layer in &params.layers {
        let h = x.layer_norm(&layer.ln1_g, &layer.ln1_b)?;
        let q = h.matmul(&layer.wq)?.add(&layer.bq)?;
        let k = h.matmul(&layer.wk)?.add(&layer.bk)?;
        let v = h.matmul(&layer.wv)?.add(&layer.bv)?;
        layer_kv.push((k.value(), v.value()));
        let attn = multi_head_attention(&q, &k, &v, &mask, params.heads)?;
        let attn = attn.matmul(&layer.wo)?.add(&layer.bo)?;
        x = x.add(&attn)?;
        let h2 = x.layer_norm(&layer.ln2_g, &layer.ln2_b)?;
        let m = h2
            .matmul(&layer.mlp_w1)?
            .add(&layer.mlp_b1)?
            .tanh()
            .matmul(&layer.mlp_w2)?
            .add(&layer.mlp_b2)?;
        x = x.add(&m)?;
    }
    Ok(KVCache {
        layer_kv,
        ctx_len: ctx.total(),
        dim: c,
    })
}

/// Forward pass for embedded action tokens against a fixed cache. Follows
/// the same arithmetic as the uncached full forward: at 64-bit the outputs
/// are bit-identical.
pub fn trunk_action_forward<S: Scalar>(
    act_tokens: &Tensor<S>,
    cache: &KVCache<S>,
    params: &TrunkParams<S>,
) -> Result<Tensor<S>> {
    let g = act_tokens.graph().clone();
    let rows = act_tokens.shape()[0];
    let total = cache.ctx_len + rows;
    // Action tokens attend everywhere: a zero additive mask, kept explicit
    // so the softmax sees the same op as the full forward.
    let zero_mask = g.constant(vec![S::zero(); rows * total], &[rows, total]);
    let mut x = act_tokens.clone();
    for ((kc, vc), layer) in cache.layer_kv.iter().zip(&params.layers) {
        let h = x.layer_norm(&layer.ln1_act_g, &layer.ln1_act_b)?;
        let q = h.matmul(&layer.wq)?.add(&layer.bq)?;
        let k_act = h.matmul(&layer.wk)?.add(&layer.bk)?;
        let v_act = h.matmul(&layer.wv)?.add(&layer.bv)?;
        let k_ctx = g.constant(kc.clone(), &[cache.ctx_len, cache.dim]);
        let v_ctx = g.constant(vc.clone(), &[cache.ctx_len, cache.dim]);
        let k_full = g.concat(&[&k_ctx, &k_act], 0)?;
        let v_full = g.concat(&[&v_ctx, &v_act], 0)?;
        let attn = multi_head_attention(&q, &k_full, &v_full, &zero_mask, params.heads)?;
        let attn = attn.matmul(&layer.wo)?.add(&layer.bo)?;
        x = x.add(&attn)?;
        let h2 = x.layer_norm(&layer.ln2_act_g, &layer.ln2_act_b)?;
        let m = h2
            .matmul(&layer.mlp_w1)?
            .add(&layer.mlp_b1)?
            .tanh()
            .matmul(&layer.mlp_w2)?
            .add(&layer.mlp_b2)?;
        x = x.add(&m)?;
    }
    x.layer_norm(&params.final_act_g, &params.final_act_b)
}

// ── Action expert ────────────────────────────────────────────────────

pub struct ActionExpertParams<S: Scalar> {
    pub w_in: Tensor<S>, // [7, c]
    pub b_in: Tensor<S>,
    pub w_out: Tensor<S>, // [c, 7]
    pub b_out: Tensor<S>,
}

pub const ACTION_DIM: usize = 7;

/// Embed noised actions, one token per chunk step: input projection plus the
/// step's temporal encoding row, the sinusoidal embedding of the flow time
/// `s`, and the action-block type embedding.
pub fn embed_action_tokens<S: Scalar>(
    g: &GraphRef<S>,
    x_s: &[S],
    s: f64,
    pe: &TemporalEncoding<S>,
    expert: &ActionExpertParams<S>,
    type_emb: &Tensor<S>,
) -> Result<Tensor<S>> {
    let c = expert.b_in.shape()[0];
    let h = x_s.len() / ACTION_DIM;
    assert_eq!(x_s.len(), h * ACTION_DIM);
    let x = g.constant(x_s.to_vec(), &[h, ACTION_DIM]);
    let mut tok = x.matmul(&expert.w_in)?.add(&expert.b_in)?;
    let mut pe_rows = Vec::with_capacity(h * c);
    for tau in 0..h {
        pe_rows.extend_from_slice(pe.row(tau));
    }
    tok = tok.add(&g.constant(pe_rows, &[h, c]))?;
    let s_emb = g.constant(flow_time_embedding::<S>(s, c), &[c]);
    tok = tok.add(&s_emb)?;
    let type_row = type_emb.slice(0, 4, 1)?.reshape(&[c])?;
    tok.add(&type_row)
}

/// Read the predicted velocity field out of action-token trunk outputs.
pub fn action_readout<S: Scalar>(
    act_out: &Tensor<S>,
    expert: &ActionExpertParams<S>,
) -> Result<Tensor<S>> {
    act_out.matmul(&expert.w_out)?.add(&expert.b_out)
}

/// Linear interpolant between noise and the clean action chunk.
pub fn flow_interpolate<S: Scalar>(noise: &[S], action: &[S], s: f64) -> Vec<S> {
    let sv = S::from_f64(s);
    noise
        .iter()
        .zip(action)
        .map(|(&n, &a)| (S::one() - sv) * n + sv * a)
        .collect()
}

/// Flow-matching regression target: `action - noise`.
pub fn flow_target<S: Scalar>(noise: &[S], action: &[S]) -> Vec<S> {
    noise.iter().zip(action).map(|(&n, &a)| a - n).collect()
}

/// Mean squared error between the predicted velocity field and the target.
pub fn cfm_loss<S: Scalar>(v_hat: &Tensor<S>, target: &[S]) -> Result<Tensor<S>> {
    let g = v_hat.graph().clone();
    let t = g.constant(target.to_vec(), &v_hat.shape());
    Ok(v_hat.squared_err(&t)?.mean_all())
}

/// Weighted sum of the three training losses.
pub fn total_loss<S: Scalar>(
    action: &Tensor<S>,
    track: &Tensor<S>,
    depth: &Tensor<S>,
    lambdas: [f64; 3],
) -> Result<Tensor<S>> {
    action
        .scale(lambdas[0])
        .add(&track.scale(lambdas[1]))?
        .add(&depth.scale(lambdas[2]))
}

/// Euler integration of a velocity field from s=0 to s=1 in `steps` uniform
/// steps, starting from `noise`. The field is a closure so tests can force
/// zero or constant velocities.
pub fn euler_sample<S: Scalar>(
    noise: Vec<S>,
    steps: usize,
    mut velocity: impl FnMut(&[S], f64) -> Vec<S>,
) -> Vec<S> {
    assert!(steps >= 1, "need at least one denoising step");
    let dt = S::from_f64(1.0 / steps as f64);
    let mut x = noise;
    for k in 0..steps {
        let s = k as f64 / steps as f64;
        let v = velocity(&x, s);
        debug_assert_eq!(v.len(), x.len());
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi = *xi + dt * *vi;
        }
    }
    x
}

#[cfg(test)]
mod tests;
