//! Prediction heads and the combined objective.

use dmlf_tensor::{Graph, Rng, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{config_err, Result};
use crate::nn;
use crate::params::{Ctx, ParamStore};

pub fn init_heads(store: &mut ParamStore, d: usize, d_av: usize, rng: &Rng) {
    nn::init_linear(store, "heads.task.l1", 2 * d + d_av, d, rng, false);
    nn::init_linear(store, "heads.task.l2", d, 1, rng, false);
    nn::init_linear(store, "heads.av", d_av, 1, rng, false);
    nn::init_linear(store, "heads.t", d, 1, rng, false);
    nn::init_linear(store, "heads.f", d, 1, rng, false);
}

fn as_row(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    Ok(g.reshape(v, &[1, n])?)
}

/// `g([<z> || x_tK || <x_f>])` with `g = Linear -> GELU -> Linear`; returns `[1, 1]`.
pub fn task_head(ctx: &mut Ctx, z_mean: Var, x_tk: Var, xf_mean: Var) -> Result<Var> {
    let w1 = ctx.p("heads.task.l1.w")?;
    let (d_in, _) = ctx.g.value(w1).dims2()?;
    let parts = [
        as_row(&mut ctx.g, z_mean)?,
        as_row(&mut ctx.g, x_tk)?,
        as_row(&mut ctx.g, xf_mean)?,
    ];
    let width: usize = parts.iter().map(|p| ctx.g.value(*p).numel()).sum();
    if width != d_in {
        return config_err(format!("task head expects {d_in} inputs, got {width}"));
    }
    let x = ctx.g.concat(&parts, 1)?;
    let h = nn::linear(ctx, x, "heads.task.l1")?;
    let h = ctx.g.activation(h, dmlf_tensor::Activation::Gelu)?;
    nn::linear(ctx, h, "heads.task.l2")
}

/// `(y_av, y_t, y_f)`, three independent affine maps, each `[1, 1]`.
pub fn modality_heads(ctx: &mut Ctx, z_mean: Var, x_tk: Var, xf_mean: Var) -> Result<(Var, Var, Var)> {
    let z = as_row(&mut ctx.g, z_mean)?;
    let t = as_row(&mut ctx.g, x_tk)?;
    let f = as_row(&mut ctx.g, xf_mean)?;
    Ok((
        nn::linear(ctx, z, "heads.av")?,
        nn::linear(ctx, t, "heads.t")?,
        nn::linear(ctx, f, "heads.f")?,
    ))
}

/// Next-token targets: position `i` predicts `ids[i + 1]` when both are real tokens.
pub fn lm_targets(ids: &[usize], valid: Option<&[bool]>) -> Vec<Option<usize>> {
    let ok = |i: usize| valid.is_none_or(|v| v[i]);
    (0..ids.len())
        .map(|i| (i + 1 < ids.len() && ok(i) && ok(i + 1)).then(|| ids[i + 1]))
        .collect()
}

/// Mean next-token cross-entropy over real positions, excluding the last.
pub fn lm_loss(g: &mut Graph, logits: Var, ids: &[usize], valid: Option<&[bool]>) -> Result<Var> {
    let (l, _) = g.value(logits).dims2()?;
    if l != ids.len() || valid.is_some_and(|v| v.len() != l) {
        return config_err(format!("{l} logit rows for {} tokens", ids.len()));
    }
    let targets = lm_targets(ids, valid);
    if targets.iter().all(Option::is_none) {
        return Err(TensorError::Degenerate {
            op: "lm_loss",
            msg: "no position has a next-token target".into(),
        }
        .into());
    }
    Ok(g.cross_entropy(logits, &targets)?)
}

/// `|y - y_hat|` as a scalar.
pub fn l1(g: &mut Graph, pred: Var, label: f32) -> Result<Var> {
    let n = g.value(pred).numel();
    let y = g.constant(Tensor::full(g.value(pred).shape(), label));
    let diff = g.sub(pred, y)?;
    let a = g.abs(diff)?;
    let s = g.sum(a)?;
    Ok(if n == 1 { s } else { g.scale(s, 1.0 / n as f32)? })
}

/// Head outputs feeding the objective. `None` removes a term from the graph.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub label: f32,
    pub y_o: Var,
    pub y_av: Option<Var>,
    pub y_t: Option<Var>,
    pub y_f: Option<Var>,
    pub lm: Option<Var>,
}

/// Unweighted terms plus the weighted total. Removed terms read 0.
///
/// `total` is accumulated in f64 from the f32 term values; `graph_total` is
/// the f32 value the gradients were taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub msa: f64,
    pub av: f64,
    pub t: f64,
    pub f: f64,
    pub lm: f64,
    pub total: f64,
    pub graph_total: f64,
    pub weights: LossWeightsRecord,
}

/// Weights as recorded beside a breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeightsRecord {
    pub av: f64,
    pub t: f64,
    pub f: f64,
    pub lm: f64,
}

impl From<LossWeights> for LossWeightsRecord {
    fn from(w: LossWeights) -> Self {
        Self {
            av: w.lambda_av.into(),
            t: w.lambda_t.into(),
            f: w.lambda_f.into(),
            lm: w.lambda_lm.into(),
        }
    }
}

impl LossBreakdown {
    /// `L_msa + Σ λ_k L_k`, recomputed from the reported terms.
    pub fn sum_of_terms(&self) -> f64 {
        let w = &self.weights;
        self.msa + w.av * self.av + w.t * self.t + w.f * self.f + w.lm * self.lm
    }

    /// Element-wise mean of several breakdowns; weights taken from the first.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let Some(first) = items.first() else {
            return LossBreakdown::default();
        };
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            msa: avg(|b| b.msa),
            av: avg(|b| b.av),
            t: avg(|b| b.t),
            f: avg(|b| b.f),
            lm: avg(|b| b.lm),
            total: avg(|b| b.total),
            graph_total: avg(|b| b.graph_total),
            weights: first.weights,
        }
    }
}

/// `L_tot = L_msa + λ_av L1(y, y_av) + λ_t L1(y, y_t) + λ_f L1(y, y_f) + λ_lm L_lm`.
///
/// A term with weight 0 stays in the graph and contributes exact zeros.
pub fn total_loss(g: &mut Graph, inp: &LossInputs, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let msa = l1(g, inp.y_o, inp.label)?;
    let mut bd = LossBreakdown {
        msa: g.value(msa).item()?.into(),
        weights: w.into(),
        ..Default::default()
    };
    let mut total = msa;
    let terms = [
        (inp.y_av.map(|y| (y, true)), w.lambda_av, 0),
        (inp.y_t.map(|y| (y, true)), w.lambda_t, 1),
        (inp.y_f.map(|y| (y, true)), w.lambda_f, 2),
        (inp.lm.map(|y| (y, false)), w.lambda_lm, 3),
    ];
    for (term, lambda, slot) in terms {
        let Some((v, is_head)) = term else { continue };
        let raw = if is_head { l1(g, v, inp.label)? } else { v };
        let value: f64 = g.value(raw).item()?.into();
        match slot {
            0 => bd.av = value,
            1 => bd.t = value,
            2 => bd.f = value,
            _ => bd.lm = value,
        }
        let weighted = g.scale(raw, lambda)?;
        total = g.add(total, weighted)?;
    }
    bd.total = bd.sum_of_terms();
    bd.graph_total = g.value(total).item()?.into();
    Ok((total, bd))
}
