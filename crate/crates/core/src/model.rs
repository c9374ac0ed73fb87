//! The full model: AV encoder, multimodal LM and heads over one parameter store.

use dmlf_tensor::{Rng, Tensor, Var};
use serde::Serialize;

use crate::av_encoder::{self, AvEncoding};
use crate::config::{AugConfig, LossWeights, ModelConfig};
use crate::data::Sample;
use crate::error::{DmlfError, Result};
use crate::heads::{self, LossBreakdown, LossInputs};
use crate::mlm;
use crate::nn::NormSpec;
use crate::params::{Ctx, ParamStore};
use crate::regularization;

/// Which input an injected perturbation lands on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    /// Language embeddings `X_t^(0)`.
    Text,
    Audio,
    Vision,
    /// The fusion token parameters `X_f`.
    Fusion,
}

/// Adds `delta` to element `(row, col)` of one input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Perturbation {
    pub target: PerturbTarget,
    pub row: usize,
    pub col: usize,
    pub delta: f32,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Training-time augmentation of the language embeddings.
    pub aug: Option<(AugConfig, Rng)>,
    pub perturb: Option<Perturbation>,
    /// Real-token flags when `tokens` carries a padded tail.
    pub valid: Option<&'a [bool]>,
}

/// Every intermediate the heads, losses and probes look at.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub av: AvEncoding,
    pub z_mean: Var,
    pub x_t: Var,
    pub x_f: Var,
    pub logits: Var,
    pub x_tk: Var,
    pub xf_mean: Var,
    pub y_o: Var,
    pub y_av: Var,
    pub y_t: Var,
    pub y_f: Var,
    pub mm_blocks_run: usize,
}

/// Scalar predictions of the four heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeadValues {
    pub y_o: f32,
    pub y_av: f32,
    pub y_t: f32,
    pub y_f: f32,
}

fn perturbed(t: &Tensor, p: Option<Perturbation>, target: PerturbTarget) -> Result<Tensor> {
    let mut t = t.clone();
    if let Some(p) = p.filter(|p| p.target == target) {
        let (rows, cols) = t.dims2()?;
        if p.row >= rows || p.col >= cols {
            return Err(DmlfError::Config(format!(
                "perturbation ({}, {}) outside {rows}x{cols} {target:?} input",
                p.row, p.col
            )));
        }
        t.row_mut(p.row)[p.col] += p.delta;
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepMlf {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl DeepMlf {
    /// Frozen LM from `config.mlm.lm_seed`; everything trainable from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(seed).fork("model");
        let mut store = ParamStore::new();
        mlm::init_lm(&mut store, config);
        mlm::init_mm(&mut store, config, &rng)?;
        av_encoder::init_av_encoder(&mut store, &config.av, config.norm, &rng.fork("av"));
        heads::init_heads(&mut store, config.mlm.d_model, config.av.d_av, &rng.fork("heads"));
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

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        tokens: &[usize],
        audio: &Tensor,
        vision: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let norm = self.norm_spec();
        let n_valid = match opts.valid {
            Some(v) => {
                let n = v.iter().take_while(|b| **b).count();
                if v.len() != tokens.len() || v[n..].iter().any(|b| *b) || n == 0 {
                    return Err(DmlfError::Data(
                        "pad mask must be a non-empty run of real tokens followed by padding".into(),
                    ));
                }
                n
            }
            None => tokens.len(),
        };

        let mut x_t0 = mlm::embed_tokens(ctx.store(), tokens, &cfg.mlm)?;
        if let Some((aug, mut rng)) = opts.aug {
            let d = cfg.mlm.d_model;
            let real = Tensor::new(vec![n_valid, d], x_t0.data()[..n_valid * d].to_vec())?;
            let real = regularization::augment(&real, &aug, &mut rng)?;
            x_t0.data_mut()[..n_valid * d].copy_from_slice(real.data());
        }
        let x_t0 = perturbed(&x_t0, opts.perturb, PerturbTarget::Text)?;

        let mut x_f = ctx.p("fusion.tokens")?;
        if let Some(p) = opts.perturb.filter(|p| p.target == PerturbTarget::Fusion) {
            let zeros = Tensor::zeros(ctx.g.value(x_f).shape());
            let delta = ctx.constant(perturbed(&zeros, Some(p), PerturbTarget::Fusion)?);
            x_f = ctx.g.add(x_f, delta)?;
        }

        let xa = ctx.constant(perturbed(audio, opts.perturb, PerturbTarget::Audio)?);
        let xv = ctx.constant(perturbed(vision, opts.perturb, PerturbTarget::Vision)?);
        let av = av_encoder::av_encode(ctx, xa, xv, &cfg.av, norm)?;
        let z_mean = ctx.g.mean_axis(av.z, 0, None)?;

        let h0 = mlm::embed_input(ctx, x_t0, x_f)?;
        let out = mlm::mlm_forward(ctx, h0, av.z, opts.valid, &cfg.mlm, norm)?;
        let x_tk = ctx.g.slice(out.x_t, 0, n_valid - 1, 1)?;
        let xf_mean = ctx.g.mean_axis(out.x_f, 0, None)?;
        let y_o = heads::task_head(ctx, z_mean, x_tk, xf_mean)?;
        let (y_av, y_t, y_f) = heads::modality_heads(ctx, z_mean, x_tk, xf_mean)?;
        Ok(ForwardOutput {
            av,
            z_mean,
            x_t: out.x_t,
            x_f: out.x_f,
            logits: out.logits,
            x_tk,
            xf_mean,
            y_o,
            y_av,
            y_t,
            y_f,
            mm_blocks_run: out.mm_blocks_run,
        })
    }

    /// Forward plus the full objective for one sample.
    pub fn loss(
        &self,
        ctx: &mut Ctx,
        sample: &Sample,
        weights: LossWeights,
        opts: ForwardOptions,
    ) -> Result<(Var, LossBreakdown, ForwardOutput)> {
        let valid = opts.valid;
        let out = self.forward(ctx, &sample.tokens, &sample.audio, &sample.vision, opts)?;
        let lm = heads::lm_loss(&mut ctx.g, out.logits, &sample.tokens, valid)?;
        let inputs = LossInputs {
            label: sample.label,
            y_o: out.y_o,
            y_av: Some(out.y_av),
            y_t: Some(out.y_t),
            y_f: Some(out.y_f),
            lm: Some(lm),
        };
        let (loss, bd) = heads::total_loss(&mut ctx.g, &inputs, weights)?;
        Ok((loss, bd, out))
    }

    /// Inference-mode head outputs; no augmentation, no gradients.
    pub fn predict(&self, sample: &Sample) -> Result<HeadValues> {
        let mut ctx = Ctx::new(&self.store, false);
        let out = self.forward(&mut ctx, &sample.tokens, &sample.audio, &sample.vision, ForwardOptions::default())?;
        let v = |x: Var| ctx.g.value(x).item();
        Ok(HeadValues {
            y_o: v(out.y_o)?,
            y_av: v(out.y_av)?,
            y_t: v(out.y_t)?,
            y_f: v(out.y_f)?,
        })
    }
}
