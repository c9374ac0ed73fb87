//! Audiovisual encoder: one transformer encoder per modality, concatenated
//! along the feature axis and mixed by a residual fusion FFW into `Z`.

use dmlf_tensor::{Rng, Tensor, Var};

use crate::attention;
use crate::config::{AvEncoderConfig, AvInit, ModelConfig, NormKind};
use crate::error::{config_err, DmlfError, Result};
use crate::nn::{self, NormSpec};
use crate::params::{Ctx, ParamStore};

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    Tensor::new(vec![len, d], data).expect("sizes agree")
}

pub fn init_av_encoder(store: &mut ParamStore, cfg: &AvEncoderConfig, norm: NormKind, rng: &Rng) {
    let e = cfg.d_enc();
    for (m, d_in) in [("a", cfg.d_a_in), ("v", cfg.d_v_in)] {
        nn::init_linear(store, &format!("av.proj_{m}"), d_in, e, rng, false);
        for i in 0..cfg.n_enc_layers {
            attention::init_transformer_layer(store, &format!("av.enc_{m}.{i}"), e, norm, rng, false);
        }
    }
    nn::init_ffw(store, "av.fusion_ffw", cfg.d_av, 4 * cfg.d_av, rng, false);
}

/// Everything the encoder exposes; the per-modality streams are kept for probes.
#[derive(Clone, Copy, Debug)]
pub struct AvEncoding {
    pub enc_a: Var,
    pub enc_v: Var,
    pub z: Var,
}

fn modality_stream(ctx: &mut Ctx, x: Var, m: &str, cfg: &AvEncoderConfig, norm: NormSpec) -> Result<Var> {
    let (l, _) = ctx.g.value(x).dims2()?;
    let h = nn::linear(ctx, x, &format!("av.proj_{m}"))?;
    let pe = ctx.constant(sinusoidal_positions(l, cfg.d_enc()));
    let mut h = ctx.g.add(h, pe)?;
    for i in 0..cfg.n_enc_layers {
        h = attention::encoder_layer(ctx, h, &format!("av.enc_{m}.{i}"), cfg.n_heads, norm, None)?;
    }
    Ok(h)
}

/// `Z = C + FFW(C)` with `C = [Enc_a(proj(Xa)) || Enc_v(proj(Xv))]` per timestep.
pub fn av_encode(ctx: &mut Ctx, xa: Var, xv: Var, cfg: &AvEncoderConfig, norm: NormSpec) -> Result<AvEncoding> {
    let (la, da) = ctx.g.value(xa).dims2()?;
    let (lv, dv) = ctx.g.value(xv).dims2()?;
    if la != lv {
        return Err(DmlfError::Alignment(format!(
            "audio has {la} steps, vision {lv}"
        )));
    }
    if da != cfg.d_a_in || dv != cfg.d_v_in {
        return config_err(format!(
            "feature widths ({da}, {dv}) do not match config ({}, {})",
            cfg.d_a_in, cfg.d_v_in
        ));
    }
    let enc_a = modality_stream(ctx, xa, "a", cfg, norm)?;
    let enc_v = modality_stream(ctx, xv, "v", cfg, norm)?;
    let c = ctx.g.concat(&[enc_a, enc_v], 1)?;
    let f = nn::ffw(ctx, c, "av.fusion_ffw", None)?;
    let z = ctx.g.add(c, f)?;
    Ok(AvEncoding { enc_a, enc_v, z })
}

/// Applies an AV initialization mode to a freshly built model store.
///
/// `pre_*` modes copy every `av.` tensor from `snapshot`; `pre_freeze` then
/// freezes them. `random_tune` keeps the fresh draw.
pub fn init_av(store: &mut ParamStore, mode: AvInit, snapshot: Option<&ParamStore>) -> Result<()> {
    match mode {
        AvInit::RandomTune => {
            store.set_frozen_prefix("av.", false);
            Ok(())
        }
        AvInit::PreTune | AvInit::PreFreeze => {
            let snap = snapshot.ok_or_else(|| {
                DmlfError::Config(format!("AV init mode {mode:?} needs a pretrained snapshot"))
            })?;
            let expected = store.names().filter(|n| n.starts_with("av.")).count();
            let copied = store.copy_prefix_from(snap, "av.")?;
            if copied != expected {
                return config_err(format!(
                    "snapshot holds {copied} of {expected} AV encoder tensors"
                ));
            }
            store.set_frozen_prefix("av.", mode == AvInit::PreFreeze);
            Ok(())
        }
    }
}

/// Standalone AV model used for pretraining: encoder, mean pool, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct AvModel {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl AvModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(seed).fork("av_pretrain");
        let mut store = ParamStore::new();
        init_av_encoder(&mut store, &config.av, config.norm, &rng);
        nn::init_linear(&mut store, "av_head", config.av.d_av, 1, &rng, false);
        Ok(Self {
            config: config.clone(),
            store,
        })
    }

    pub fn norm_spec(&self) -> NormSpec {
        NormSpec {
            kind: self.config.norm,
            eps: self.config.norm_eps,
        }
    }

    /// Scalar prediction `[1, 1]` for one sample.
    pub fn forward(&self, ctx: &mut Ctx, audio: &Tensor, vision: &Tensor) -> Result<Var> {
        let xa = ctx.constant(audio.clone());
        let xv = ctx.constant(vision.clone());
        let enc = av_encode(ctx, xa, xv, &self.config.av, self.norm_spec())?;
        let pooled = ctx.g.mean_axis(enc.z, 0, None)?;
        let pooled = ctx.g.reshape(pooled, &[1, self.config.av.d_av])?;
        nn::linear(ctx, pooled, "av_head")
    }
}
