//! Shared layer pieces: affine maps, norms and the position-wise FFW.

use dmlf_tensor::{Activation, Graph, Rng, Tensor, Var};

use crate::config::NormKind;
use crate::error::{config_err, Result};
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct NormSpec {
    pub kind: NormKind,
    pub eps: f32,
}

/// Gain (and, for LayerNorm, bias) under `prefix`.
pub fn init_norm(store: &mut ParamStore, prefix: &str, d: usize, kind: NormKind, frozen: bool) {
    store.init_const(&format!("{prefix}.gain"), &[d], 1.0, frozen);
    if kind == NormKind::LayerNorm {
        store.init_const(&format!("{prefix}.bias"), &[d], 0.0, frozen);
    }
}

pub fn norm(ctx: &mut Ctx, x: Var, prefix: &str, spec: NormSpec) -> Result<Var> {
    let gain = ctx.p(&format!("{prefix}.gain"))?;
    match spec.kind {
        NormKind::LayerNorm => {
            let bias = ctx.p(&format!("{prefix}.bias"))?;
            Ok(ctx.g.layer_norm(x, gain, bias, spec.eps)?)
        }
        NormKind::RmsNorm => Ok(ctx.g.rms_norm(x, gain, spec.eps)?),
    }
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &Rng, frozen: bool) {
    store.init_weight(&format!("{prefix}.w"), d_in, d_out, rng, frozen);
    store.init_const(&format!("{prefix}.b"), &[d_out], 0.0, frozen);
}

/// `x · W + b` over the last axis.
pub fn linear(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let xw = ctx.g.matmul(x, w)?;
    Ok(ctx.g.add(xw, b)?)
}

/// Low-rank adapter attached to one weight matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub scale: f32,
}

impl LoraSpec {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            scale: 1.0 / rank as f32,
        }
    }
}

/// `x · (W + scale · A · B)`, evaluated as `x·W + scale · (x·A)·B`.
pub fn lora_forward(g: &mut Graph, x: Var, base_w: Var, a: Var, b: Var, scale: f32) -> Result<Var> {
    let (wi, wo) = g.value(base_w).dims2()?;
    let (ai, r) = g.value(a).dims2()?;
    let (r2, bo) = g.value(b).dims2()?;
    if ai != wi || bo != wo || r2 != r {
        return config_err(format!(
            "LoRA factors [{ai}x{r}]·[{r2}x{bo}] do not match base [{wi}x{wo}]"
        ));
    }
    if r == 0 || r > wi.min(wo) {
        return config_err(format!("LoRA rank {r} exceeds min({wi}, {wo})"));
    }
    let base = g.matmul(x, base_w)?;
    let xa = g.matmul(x, a)?;
    let xab = g.matmul(xa, b)?;
    let delta = g.scale(xab, scale)?;
    Ok(g.add(base, delta)?)
}

/// Adds LoRA factors for both FFW matrices under `prefix`: `A` random, `B` zero.
pub fn init_lora(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rank: usize, rng: &Rng) -> Result<()> {
    for (layer, d_in, d_out) in [("l1", d, hidden), ("l2", hidden, d)] {
        if rank == 0 || rank > d_in.min(d_out) {
            return config_err(format!("LoRA rank {rank} exceeds min({d_in}, {d_out})"));
        }
        store.init_weight(&format!("{prefix}.{layer}.w.lora_a"), d_in, rank, rng, false);
        store.insert(
            format!("{prefix}.{layer}.w.lora_b"),
            Tensor::zeros(&[rank, d_out]),
            false,
            true,
        );
    }
    Ok(())
}

pub fn init_ffw(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &Rng, frozen: bool) {
    init_linear(store, &format!("{prefix}.l1"), d, hidden, rng, frozen);
    init_linear(store, &format!("{prefix}.l2"), hidden, d, rng, frozen);
}

fn ffw_affine(ctx: &mut Ctx, x: Var, prefix: &str, lora: Option<LoraSpec>) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let xw = match lora {
        None => ctx.g.matmul(x, w)?,
        Some(spec) => {
            let a = ctx.p(&format!("{prefix}.w.lora_a"))?;
            let bb = ctx.p(&format!("{prefix}.w.lora_b"))?;
            lora_forward(&mut ctx.g, x, w, a, bb, spec.scale)?
        }
    };
    Ok(ctx.g.add(xw, b)?)
}

/// `Linear(d→hidden) → GELU → Linear(hidden→d)`, optionally with LoRA on both maps.
pub fn ffw(ctx: &mut Ctx, x: Var, prefix: &str, lora: Option<LoraSpec>) -> Result<Var> {
    let h = ffw_affine(ctx, x, &format!("{prefix}.l1"), lora)?;
    let h = ctx.g.activation(h, Activation::Gelu)?;
    ffw_affine(ctx, h, &format!("{prefix}.l2"), lora)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_scale_is_inverse_rank() {
        assert_eq!(LoraSpec::new(4).scale, 0.25);
        assert_eq!(LoraSpec::new(1).scale, 1.0);
    }

    #[test]
    fn zero_b_leaves_ffw_unchanged() {
        let mut store = ParamStore::new();
        let rng = Rng::new(2);
        init_ffw(&mut store, "f", 4, 16, &rng, true);
        init_lora(&mut store, "f", 4, 16, 2, &rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut Rng::new(8));
        let run = |lora| {
            let mut ctx = Ctx::new(&store, false);
            let xv = ctx.constant(x.clone());
            let y = ffw(&mut ctx, xv, "f", lora).unwrap();
            ctx.g.value(y).clone()
        };
        assert!(run(None).bit_identical(&run(Some(LoraSpec::new(2)))));
    }

    #[test]
    fn lora_matches_merged_weight() {
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let x = g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let a = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = lora_forward(&mut g, x, w, av, bv, 0.5).unwrap();
        let mut merged = g.value(w).clone();
        for i in 0..3 {
            for j in 0..4 {
                let ab: f32 = (0..2).map(|k| a.row(i)[k] * b.row(k)[j]).sum();
                merged.row_mut(i)[j] += 0.5 * ab;
            }
        }
        let mv = g.constant(merged);
        let y2 = g.matmul(x, mv).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(y2)) < 1e-5);
    }

    #[test]
    fn lora_rejects_bad_rank_and_shapes() {
        let mut store = ParamStore::new();
        assert!(init_lora(&mut store, "f", 4, 16, 5, &Rng::new(0)).is_err());
        assert!(init_lora(&mut store, "f", 4, 16, 0, &Rng::new(0)).is_err());
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3]));
        let w = g.constant(Tensor::ones(&[3, 4]));
        let a = g.constant(Tensor::ones(&[2, 2]));
        let b = g.constant(Tensor::ones(&[2, 4]));
        assert!(lora_forward(&mut g, x, w, a, b, 1.0).is_err());
    }

    #[test]
    fn rms_norm_has_no_bias() {
        let mut store = ParamStore::new();
        init_norm(&mut store, "n", 3, NormKind::RmsNorm, false);
        assert!(store.contains("n.gain") && !store.contains("n.bias"));
        init_norm(&mut store, "m", 3, NormKind::LayerNorm, true);
        assert!(store.get("m.bias").unwrap().frozen);
    }
}
