//! Multi-head attention and the three layer types built on it: bidirectional
//! encoder layers, causal decoder layers, and gated cross-attention.

use dmlf_tensor::{Mask, Rng, TensorError, Var};

use crate::config::{GatingKind, NormKind};
use crate::error::{config_err, DmlfError, Result};
use crate::nn::{self, NormSpec};
use crate::params::{Ctx, ParamStore, ScoreKind, ScoreRecord};

/// Projection weights of one attention module, bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_kv_in: usize,
}

impl AttentionParams {
    /// Creates `{prefix}.{q,k,v,o}.{w,b}`. Keys/values read from `d_kv_in`.
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, d_kv_in: usize, rng: &Rng, frozen: bool) {
        nn::init_linear(store, &format!("{prefix}.q"), d_model, d_model, rng, frozen);
        nn::init_linear(store, &format!("{prefix}.k"), d_kv_in, d_model, rng, frozen);
        nn::init_linear(store, &format!("{prefix}.v"), d_kv_in, d_model, rng, frozen);
        nn::init_linear(store, &format!("{prefix}.o"), d_model, d_model, rng, frozen);
    }

    pub fn bind(ctx: &mut Ctx, prefix: &str, n_heads: usize) -> Result<Self> {
        let mut p = |s: &str| ctx.p(&format!("{prefix}.{s}"));
        let (wq, bq, wk, bk) = (p("q.w")?, p("q.b")?, p("k.w")?, p("k.b")?);
        let (wv, bv, wo, bo) = (p("v.w")?, p("v.b")?, p("o.w")?, p("o.b")?);
        let (d_model, _) = ctx.g.value(wq).dims2()?;
        let (d_kv_in, d_k_out) = ctx.g.value(wk).dims2()?;
        if n_heads == 0 || d_model % n_heads != 0 {
            return config_err(format!("d_model {d_model} not divisible by {n_heads} heads"));
        }
        if d_k_out != d_model || ctx.g.value(wv).dims2()? != (d_kv_in, d_model) {
            return config_err(format!("{prefix}: key/value projections do not map to d_model"));
        }
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            n_heads,
            d_model,
            d_kv_in,
        })
    }
}

/// Scaled dot-product attention with `1/sqrt(d_head)` scaling per head.
///
/// `q_in` is `[Lq, d_model]`, `kv_in` is `[Lk, d_kv_in]`, and `mask` (if any)
/// is `Lq x Lk` with `true` meaning "may attend".
pub fn multihead_attention(
    ctx: &mut Ctx,
    q_in: Var,
    kv_in: Var,
    params: &AttentionParams,
    mask: Option<&Mask>,
    kind: ScoreKind,
) -> Result<Var> {
    let (lq, dq) = ctx.g.value(q_in).dims2()?;
    let (lk, dkv) = ctx.g.value(kv_in).dims2()?;
    if dq != params.d_model || dkv != params.d_kv_in {
        return config_err(format!(
            "attention inputs [{lq}x{dq}], [{lk}x{dkv}] do not match d_model {} / d_kv_in {}",
            params.d_model, params.d_kv_in
        ));
    }
    if let Some(m) = mask {
        if m.shape() != [lq, lk] {
            return config_err(format!("mask {:?} is not {lq}x{lk}", m.shape()));
        }
    }
    let g = &mut ctx.g;
    let q = g.matmul(q_in, params.wq)?;
    let q = g.add(q, params.bq)?;
    let k = g.matmul(kv_in, params.wk)?;
    let k = g.add(k, params.bk)?;
    let v = g.matmul(kv_in, params.wv)?;
    let v = g.add(v, params.bv)?;
    let kt = g.transpose(k)?;

    let dh = params.d_model / params.n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kth = g.slice(kt, 0, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let s = g.matmul(qh, kth)?;
        let s = g.scale(s, scale)?;
        let p = g.softmax(s, mask)?;
        heads.push(g.matmul(p, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let out = g.matmul(cat, params.wo)?;
    let out = g.add(out, params.bo)?;
    ctx.record_scores(ScoreRecord {
        kind,
        rows: lq,
        cols: lk,
        heads: params.n_heads,
    });
    Ok(out)
}

/// Causal mask over `l_t` language positions followed by `n_f` fusion tokens:
/// position `i` may attend `j` iff `j <= i`.
pub fn causal_mask(l_t: usize, n_f: usize) -> Mask {
    let l = l_t + n_f;
    Mask::from_fn(l, l, |i, j| j <= i)
}

/// Parameters of a pre-norm transformer layer (`ln1`, `attn`, `ln2`, `ffw`).
pub fn init_transformer_layer(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    norm: NormKind,
    rng: &Rng,
    frozen: bool,
) {
    nn::init_norm(store, &format!("{prefix}.ln1"), d, norm, frozen);
    AttentionParams::init(store, &format!("{prefix}.attn"), d, d, rng, frozen);
    nn::init_norm(store, &format!("{prefix}.ln2"), d, norm, frozen);
    nn::init_ffw(store, &format!("{prefix}.ffw"), d, 4 * d, rng, frozen);
}

fn pre_norm_layer(
    ctx: &mut Ctx,
    h: Var,
    prefix: &str,
    n_heads: usize,
    norm: NormSpec,
    mask: Option<&Mask>,
    kind: ScoreKind,
) -> Result<Var> {
    let attn = AttentionParams::bind(ctx, &format!("{prefix}.attn"), n_heads)?;
    let x = nn::norm(ctx, h, &format!("{prefix}.ln1"), norm)?;
    let a = multihead_attention(ctx, x, x, &attn, mask, kind)?;
    let h = ctx.g.add(h, a)?;
    let x = nn::norm(ctx, h, &format!("{prefix}.ln2"), norm)?;
    let f = nn::ffw(ctx, x, &format!("{prefix}.ffw"), None)?;
    Ok(ctx.g.add(h, f)?)
}

/// Bidirectional pre-norm layer: `H + SA(Norm(H))`, then `+ FFW(Norm(·))`.
/// Keys at positions where `pad_mask` is false are never attended.
pub fn encoder_layer(
    ctx: &mut Ctx,
    h: Var,
    prefix: &str,
    n_heads: usize,
    norm: NormSpec,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let (l, _) = ctx.g.value(h).dims2()?;
    let mask = match pad_mask {
        Some(valid) => Some(Mask::full(l, l).with_key_padding(valid)?),
        None => None,
    };
    pre_norm_layer(ctx, h, prefix, n_heads, norm, mask.as_ref(), ScoreKind::EncoderSelf)
}

/// Causal pre-norm layer. `mask` defaults to [`causal_mask`] over all rows;
/// callers pass a fusion-aware mask with key padding when needed.
pub fn decoder_layer(
    ctx: &mut Ctx,
    h: Var,
    prefix: &str,
    n_heads: usize,
    norm: NormSpec,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (l, _) = ctx.g.value(h).dims2()?;
    let default_mask;
    let mask = match mask {
        Some(m) => m,
        None => {
            default_mask = causal_mask(l, 0);
            &default_mask
        }
    };
    pre_norm_layer(ctx, h, prefix, n_heads, norm, Some(mask), ScoreKind::CausalSelf)
}

/// Scalar gate applied to a residual branch.
pub fn gate_value(ctx: &mut Ctx, a: Var, kind: GatingKind) -> Result<Option<Var>> {
    use dmlf_tensor::Activation;
    Ok(match kind {
        GatingKind::Sigmoid => Some(ctx.g.activation(a, Activation::Sigmoid)?),
        GatingKind::Tanh => Some(ctx.g.activation(a, Activation::Tanh)?),
        GatingKind::None => None,
    })
}

/// Layer-wide settings shared by every gated cross-attention call.
#[derive(Clone, Copy, Debug)]
pub struct GcaSpec {
    pub n_heads: usize,
    pub norm: NormSpec,
    pub gating: GatingKind,
}

/// `Xq + gate(a) ⊙ MHA(Norm(Xq), Z)`: queries from `xq`, keys/values from `z`.
///
/// `prefix` holds `norm` and `attn` (with `d_kv_in = d_av`); `gate_name` is
/// the raw gate scalar.
pub fn gated_cross_attention(
    ctx: &mut Ctx,
    xq: Var,
    z: Var,
    prefix: &str,
    gate_name: &str,
    spec: GcaSpec,
) -> Result<Var> {
    let (rows, _) = ctx.g.value(xq).dims2()?;
    if rows == 0 {
        return Err(DmlfError::Tensor(TensorError::Contract(
            "gated cross-attention needs at least one query token".into(),
        )));
    }
    let attn = AttentionParams::bind(ctx, &format!("{prefix}.attn"), spec.n_heads)?;
    let (_, d_z) = ctx.g.value(z).dims2()?;
    if d_z != attn.d_kv_in {
        return config_err(format!(
            "AV width {d_z} does not match cross-attention key width {}",
            attn.d_kv_in
        ));
    }
    let x = nn::norm(ctx, xq, &format!("{prefix}.norm"), spec.norm)?;
    let ca = multihead_attention(ctx, x, z, &attn, None, ScoreKind::GatedCross)?;
    let a = ctx.p(gate_name)?;
    let branch = match gate_value(ctx, a, spec.gating)? {
        Some(gv) => ctx.g.mul(ca, gv)?,
        None => ca,
    };
    Ok(ctx.g.add(xq, branch)?)
}
