//! The multimodal LM: a frozen causal stack with fusion tokens appended after
//! the language tokens and trainable MM blocks after selected layers.

use std::collections::BTreeMap;

use dmlf_tensor::{Mask, Rng, Tensor, Var};
use serde::Serialize;

use crate::attention::{self, GcaSpec};
use crate::config::{FfwFineTune, FfwInit, FusionScheme, MlmConfig, ModelConfig, NormKind};
use crate::error::{config_err, DmlfError, Result};
use crate::nn::{self, LoraSpec, NormSpec};
use crate::params::{Ctx, ParamStore};

/// Positions `{N, N-k, N-2k, ...}` (`count` of them), ascending, 1-based.
pub fn build_mm_placement(n_layers: usize, count: usize, stride: usize) -> Result<Vec<usize>> {
    if count == 0 || stride == 0 {
        return config_err("MM placement needs count >= 1 and stride >= 1");
    }
    let span = (count - 1)
        .checked_mul(stride)
        .filter(|s| *s < n_layers)
        .ok_or_else(|| {
            DmlfError::Config(format!(
                "{count} MM blocks every {stride} layers do not fit in {n_layers} layers"
            ))
        })?;
    Ok((0..count).map(|i| n_layers - span + i * stride).collect())
}

pub fn lm_layer_prefix(layer: usize) -> String {
    format!("lm.layers.{layer}")
}

pub fn mm_prefix(layer: usize) -> String {
    format!("mm.{layer}")
}

/// The stand-in pretrained LM. Drawn from `lm_seed` and frozen.
pub fn init_lm(store: &mut ParamStore, cfg: &ModelConfig) {
    let m = &cfg.mlm;
    let d = m.d_model;
    let rng = Rng::new(m.lm_seed).fork("lm");
    let mut r = rng.fork("lm.tok_emb");
    store.insert("lm.tok_emb", Tensor::randn(&[m.vocab_size, d], 1.0, &mut r), true, true);
    let mut r = rng.fork("lm.pos_emb");
    store.insert("lm.pos_emb", Tensor::randn(&[m.max_len, d], 0.1, &mut r), true, true);
    for l in 1..=m.n_layers {
        attention::init_transformer_layer(store, &lm_layer_prefix(l), d, cfg.norm, &rng, true);
    }
    nn::init_norm(store, "lm.ln_f", d, cfg.norm, true);
    store.init_weight("lm.head.w", d, m.vocab_size, &rng, true);
}

/// Fusion tokens and one MM block per placement position.
pub fn init_mm(store: &mut ParamStore, cfg: &ModelConfig, rng: &Rng) -> Result<()> {
    let m = &cfg.mlm;
    let d = m.d_model;
    let mut r = rng.fork("fusion.tokens");
    store.insert("fusion.tokens", Tensor::randn(&[m.n_f, d], 1.0, &mut r), false, false);
    for l in m.mm_positions()? {
        let p = mm_prefix(l);
        nn::init_norm(store, &format!("{p}.gca.norm"), d, cfg.norm, false);
        attention::AttentionParams::init(store, &format!("{p}.gca.attn"), d, cfg.av.d_av, rng, false);
        store.init_const(&format!("{p}.gate_attn"), &[1], 0.0, false);
        store.init_const(&format!("{p}.gate_ffw"), &[1], 0.0, false);
        nn::init_norm(store, &format!("{p}.norm_ffw"), d, cfg.norm, false);
        ffw_init_from_lm(store, m, l, rng)?;
    }
    Ok(())
}

/// Initializes `mm.{layer}.ffw` by copying the paired LM FFW or drawing fresh
/// weights; with LoRA the base stays frozen and only the factors train.
pub fn ffw_init_from_lm(store: &mut ParamStore, cfg: &MlmConfig, layer: usize, rng: &Rng) -> Result<()> {
    let d = cfg.d_model;
    let hidden = cfg.d_ffw();
    let dst = format!("{}.ffw", mm_prefix(layer));
    let frozen_base = matches!(cfg.ffw_ft, FfwFineTune::Lora { .. });
    match cfg.ffw_init {
        FfwInit::FromLm => {
            let src = format!("{}.ffw", lm_layer_prefix(layer));
            for (part, shape) in [
                ("l1.w", vec![d, hidden]),
                ("l1.b", vec![hidden]),
                ("l2.w", vec![hidden, d]),
                ("l2.b", vec![d]),
            ] {
                let p = store.get(&format!("{src}.{part}"))?;
                if p.value.shape() != shape.as_slice() {
                    return config_err(format!(
                        "LM FFW {src}.{part} has shape {:?}, MM block expects {shape:?}",
                        p.value.shape()
                    ));
                }
                let value = p.value.clone();
                let decay = p.decay;
                store.insert(format!("{dst}.{part}"), value, frozen_base, decay);
            }
        }
        FfwInit::Random => nn::init_ffw(store, &dst, d, hidden, rng, frozen_base),
    }
    if let FfwFineTune::Lora { rank } = cfg.ffw_ft {
        nn::init_lora(store, &dst, d, hidden, rank, rng)?;
    }
    Ok(())
}

/// Token plus positional embeddings, `[L_t, d]`.
pub fn embed_tokens(store: &ParamStore, ids: &[usize], cfg: &MlmConfig) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(DmlfError::Data("empty token sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(DmlfError::Data(format!(
            "{} tokens exceed max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    let tok = store.tensor("lm.tok_emb")?;
    let pos = store.tensor("lm.pos_emb")?;
    let d = cfg.d_model;
    let mut out = Vec::with_capacity(ids.len() * d);
    for (i, &id) in ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(DmlfError::Vocabulary {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        out.extend(tok.row(id).iter().zip(pos.row(i)).map(|(a, b)| a + b));
    }
    Ok(Tensor::new(vec![ids.len(), d], out)?)
}

/// `H0 = [X_t^(0) || X_f]`; the fusion rows are the token parameters verbatim.
pub fn embed_input(ctx: &mut Ctx, x_t0: Tensor, x_f: Var) -> Result<Var> {
    let xt = ctx.constant(x_t0);
    Ok(ctx.g.concat(&[xt, x_f], 0)?)
}

/// Causal mask over language and fusion rows, with padded language keys removed.
pub fn fusion_mask(l_t: usize, n_f: usize, valid: Option<&[bool]>) -> Result<Mask> {
    let mask = attention::causal_mask(l_t, n_f);
    match valid {
        None => Ok(mask),
        Some(v) => {
            if v.len() != l_t {
                return Err(DmlfError::Data(format!(
                    "pad mask has {} entries for {l_t} tokens",
                    v.len()
                )));
            }
            let keys: Vec<bool> = v.iter().copied().chain(std::iter::repeat_n(true, n_f)).collect();
            Ok(mask.with_key_padding(&keys)?)
        }
    }
}

/// One frozen LM layer over language and fusion rows.
pub fn lm_block_forward(ctx: &mut Ctx, h: Var, layer: usize, mask: &Mask, cfg: &MlmConfig, norm: NormSpec) -> Result<Var> {
    attention::decoder_layer(ctx, h, &lm_layer_prefix(layer), cfg.n_heads, norm, Some(mask))
}

/// MM block: gated cross-attention on the rows picked by the fusion scheme,
/// then an optional gated position-wise FFW over every row.
pub fn mm_block_forward(
    ctx: &mut Ctx,
    h_hat: Var,
    z: Var,
    l_t: usize,
    layer: usize,
    cfg: &MlmConfig,
    norm: NormSpec,
) -> Result<Var> {
    let p = mm_prefix(layer);
    let parts = ctx.g.split(h_hat, &[l_t, cfg.n_f], 0)?;
    let (xt, xf) = (parts[0], parts[1]);
    let spec = GcaSpec {
        n_heads: cfg.n_heads,
        norm,
        gating: cfg.gating,
    };
    let gca_prefix = format!("{p}.gca");
    let gate_attn = format!("{p}.gate_attn");
    let gca = |ctx: &mut Ctx, q: Var| {
        attention::gated_cross_attention(ctx, q, z, &gca_prefix, &gate_attn, spec)
    };
    let h_bar = match cfg.fusion_scheme {
        FusionScheme::FOnly => {
            let xf = gca(ctx, xf)?;
            ctx.g.concat(&[xt, xf], 0)?
        }
        FusionScheme::TAndF => gca(ctx, h_hat)?,
        FusionScheme::TOnly => {
            let xt = gca(ctx, xt)?;
            ctx.g.concat(&[xt, xf], 0)?
        }
    };
    if !cfg.ffw_enabled {
        return Ok(h_bar);
    }
    let x = nn::norm(ctx, h_bar, &format!("{p}.norm_ffw"), norm)?;
    let lora = match cfg.ffw_ft {
        FfwFineTune::Full => None,
        FfwFineTune::Lora { rank } => Some(LoraSpec::new(rank)),
    };
    let f = nn::ffw(ctx, x, &format!("{p}.ffw"), lora)?;
    let a2 = ctx.p(&format!("{p}.gate_ffw"))?;
    let f = match attention::gate_value(ctx, a2, cfg.gating)? {
        Some(gv) => ctx.g.mul(f, gv)?,
        None => f,
    };
    Ok(ctx.g.add(h_bar, f)?)
}

/// Final-layer states and next-token logits.
#[derive(Clone, Copy, Debug)]
pub struct MlmOutput {
    /// `[L_t, d]` after the final norm.
    pub x_t: Var,
    /// `[n_f, d]` after the final norm.
    pub x_f: Var,
    /// `[L_t, vocab]` from the frozen LM head.
    pub logits: Var,
    pub mm_blocks_run: usize,
}

/// Runs `H0` through layers `1..=N`, inserting an MM block after every layer
/// listed in the placement. `valid` marks real (non-padding) language rows.
pub fn mlm_forward(
    ctx: &mut Ctx,
    h0: Var,
    z: Var,
    valid: Option<&[bool]>,
    cfg: &MlmConfig,
    norm: NormSpec,
) -> Result<MlmOutput> {
    let (rows, _) = ctx.g.value(h0).dims2()?;
    if rows <= cfg.n_f {
        return Err(DmlfError::Data("no language tokens".into()));
    }
    let l_t = rows - cfg.n_f;
    let mask = fusion_mask(l_t, cfg.n_f, valid)?;
    let positions = cfg.mm_positions()?;
    let mut h = h0;
    let mut mm_blocks_run = 0;
    for l in 1..=cfg.n_layers {
        h = lm_block_forward(ctx, h, l, &mask, cfg, norm)?;
        if positions.binary_search(&l).is_ok() {
            h = mm_block_forward(ctx, h, z, l_t, l, cfg, norm)?;
            mm_blocks_run += 1;
        }
    }
    let h = nn::norm(ctx, h, "lm.ln_f", norm)?;
    let parts = ctx.g.split(h, &[l_t, cfg.n_f], 0)?;
    let head = ctx.p("lm.head.w")?;
    let logits = ctx.g.matmul(parts[0], head)?;
    Ok(MlmOutput {
        x_t: parts[0],
        x_f: parts[1],
        logits,
        mm_blocks_run,
    })
}

/// Trainable parameter counts per group, with a closed-form cross-check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub groups: BTreeMap<String, usize>,
    pub total: usize,
    pub closed_form: BTreeMap<String, usize>,
    pub closed_form_total: usize,
    pub frozen: usize,
}

impl ParamCount {
    pub fn matches_closed_form(&self) -> bool {
        self.groups == self.closed_form && self.total == self.closed_form_total
    }
}

pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("fusion.") {
        "fusion_tokens"
    } else if name.starts_with("mm.") && (name.ends_with(".gate_attn") || name.ends_with(".gate_ffw")) {
        "gates"
    } else if name.starts_with("mm.") {
        "mm_blocks"
    } else if name.starts_with("av.") {
        "av_encoder"
    } else if name.starts_with("heads.") {
        "heads"
    } else if name.starts_with("lm.") {
        "lm"
    } else {
        "other"
    }
}

/// Counts trainable parameters by group. Frozen tensors count only toward
/// `frozen`. The closed form assumes the AV encoder is trainable unless every
/// `av.` tensor is frozen.
pub fn count_trainable_params(cfg: &ModelConfig, store: &ParamStore) -> Result<ParamCount> {
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let mut frozen = 0;
    for (name, p) in store.iter() {
        if p.frozen {
            frozen += p.value.numel();
        } else {
            *groups.entry(param_group(name).to_string()).or_default() += p.value.numel();
        }
    }
    let total = groups.values().sum();

    let m = &cfg.mlm;
    let d = m.d_model;
    let d_av = cfg.av.d_av;
    let e = cfg.av.d_enc();
    let blocks = m.mm_positions()?.len();
    let norm = |w: usize| match cfg.norm {
        NormKind::LayerNorm => 2 * w,
        NormKind::RmsNorm => w,
    };
    let ffw = match m.ffw_ft {
        FfwFineTune::Full => 8 * d * d + 5 * d,
        FfwFineTune::Lora { rank } => rank * (d + 4 * d) * 2,
    };
    let gca = 2 * d * d + 2 * d_av * d + 4 * d;
    let mut closed_form = BTreeMap::new();
    closed_form.insert("fusion_tokens".to_string(), m.n_f * d);
    closed_form.insert("mm_blocks".to_string(), blocks * (2 * norm(d) + gca + ffw));
    closed_form.insert("gates".to_string(), 2 * blocks);
    let av_frozen = store.iter().filter(|(n, _)| n.starts_with("av.")).all(|(_, p)| p.frozen);
    if !av_frozen {
        let enc_layer = 2 * norm(e) + (4 * e * e + 4 * e) + (8 * e * e + 5 * e);
        let per_modality = |d_in: usize| d_in * e + e + cfg.av.n_enc_layers * enc_layer;
        let fusion_ffw = 8 * d_av * d_av + 5 * d_av;
        closed_form.insert(
            "av_encoder".to_string(),
            per_modality(cfg.av.d_a_in) + per_modality(cfg.av.d_v_in) + fusion_ffw,
        );
    }
    let heads = ((2 * d + d_av) * d + d + d + 1) + (d_av + 1) + 2 * (d + 1);
    closed_form.insert("heads".to_string(), heads);
    let closed_form_total = closed_form.values().sum();
    Ok(ParamCount {
        groups,
        total,
        closed_form,
        closed_form_total,
        frozen,
    })
}
