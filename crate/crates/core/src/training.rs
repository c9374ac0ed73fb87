//! Training and evaluation loops shared by the full model and the AV pretrainer.

use std::collections::BTreeMap;
use std::time::Instant;

use dmlf_tensor::{grad_check, grad_check_sampled, GradCheckReport, Graph, Rng, Tensor, TensorError, Var};
use rayon::prelude::*;
use serde::Serialize;

use crate::av_encoder::AvModel;
use crate::checkpoint::Checkpoint;
use crate::config::{AugKind, LossWeights, RunConfig};
use crate::data::{make_batches, Sample};
use crate::error::{DmlfError, Result};
use crate::heads::{self, LossBreakdown};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{DeepMlf, ForwardOptions};
use crate::optim::{lr_schedule, AdamW};
use crate::params::{Ctx, ParamStore};

/// One sample's loss graph output.
pub struct SampleLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub prediction: f32,
}

/// A model the generic loop can train.
pub trait Trainable: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Builds the loss of `sample` on `ctx`. `aug_rng` is `Some` only in training.
    fn sample_loss(&self, ctx: &mut Ctx, sample: &Sample, run: &RunConfig, aug_rng: Option<Rng>) -> Result<SampleLoss>;
}

impl Trainable for DeepMlf {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn sample_loss(&self, ctx: &mut Ctx, sample: &Sample, run: &RunConfig, aug_rng: Option<Rng>) -> Result<SampleLoss> {
        let aug = match aug_rng {
            Some(rng) if run.aug.kind != AugKind::None => Some((run.aug, rng)),
            _ => None,
        };
        let opts = ForwardOptions {
            aug,
            ..Default::default()
        };
        let (loss, breakdown, out) = self.loss(ctx, sample, run.loss, opts)?;
        Ok(SampleLoss {
            loss,
            breakdown,
            prediction: ctx.g.value(out.y_o).item()?,
        })
    }
}

impl Trainable for AvModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn sample_loss(&self, ctx: &mut Ctx, sample: &Sample, _run: &RunConfig, _aug_rng: Option<Rng>) -> Result<SampleLoss> {
        let y = self.forward(ctx, &sample.audio, &sample.vision)?;
        let loss = heads::l1(&mut ctx.g, y, sample.label)?;
        let value: f64 = ctx.g.value(loss).item()?.into();
        Ok(SampleLoss {
            loss,
            breakdown: LossBreakdown {
                msa: value,
                total: value,
                graph_total: value,
                ..Default::default()
            },
            prediction: ctx.g.value(y).item()?,
        })
    }
}

/// Loss breakdown and gradients of every trainable parameter for one sample.
pub fn sample_gradients<M: Trainable>(
    model: &M,
    sample: &Sample,
    run: &RunConfig,
    aug_rng: Option<Rng>,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut ctx = Ctx::new(model.store(), true);
    let sl = model.sample_loss(&mut ctx, sample, run, aug_rng)?;
    ctx.g.backward(sl.loss)?;
    Ok((sl.breakdown, ctx.param_grads()))
}

/// Mean loss and gradients over `samples`, summed in sample order so the
/// result does not depend on thread scheduling.
pub fn batch_gradients<M: Trainable>(
    model: &M,
    samples: &[&Sample],
    run: &RunConfig,
    aug_rngs: Option<Vec<Rng>>,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    if samples.is_empty() {
        return Err(DmlfError::Data("empty batch".into()));
    }
    let rngs: Vec<Option<Rng>> = match aug_rngs {
        Some(r) => r.into_iter().map(Some).collect(),
        None => vec![None; samples.len()],
    };
    let per: Vec<(LossBreakdown, BTreeMap<String, Tensor>)> = samples
        .par_iter()
        .zip(rngs.into_par_iter())
        .map(|(s, r)| sample_gradients(model, s, run, r))
        .collect::<Result<_>>()?;
    let scale = 1.0 / samples.len() as f32;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut bds = Vec::with_capacity(per.len());
    for (bd, grads) in per {
        bds.push(bd);
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok((LossBreakdown::mean(&bds), acc))
}

/// Inference over a split: mean loss, predictions and metrics.
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub predictions: Vec<f32>,
    pub metrics: MetricsReport,
}

pub fn evaluate<M: Trainable>(model: &M, samples: &[Sample], run: &RunConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(DmlfError::Data("cannot evaluate an empty dataset".into()));
    }
    let per: Vec<(LossBreakdown, f32)> = samples
        .par_iter()
        .map(|s| {
            let mut ctx = Ctx::new(model.store(), false);
            let sl = model.sample_loss(&mut ctx, s, run, None)?;
            Ok((sl.breakdown, sl.prediction))
        })
        .collect::<Result<_>>()?;
    let (bds, predictions): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let labels: Vec<f32> = samples.iter().map(|s| s.label).collect();
    Ok(Evaluation {
        loss: LossBreakdown::mean(&bds),
        metrics: compute_metrics(&predictions, &labels)?,
        predictions,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_metrics: MetricsReport,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: usize,
    pub optimizer: AdamW,
}

/// Seed of the shuffle for `epoch`.
pub fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    Rng::new(seed).fork("shuffle").fork_index(epoch as u64).next_u64()
}

/// AdamW with one epoch of linear warmup and cosine decay over `max_epochs`,
/// early-stopped on validation `L_tot`. Stops once the validation loss has
/// failed to improve for more than `early_stop_patience` consecutive epochs,
/// and leaves the best-validation parameters in `model`.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[Sample],
    val_set: &[Sample],
    run: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(DmlfError::Data("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(DmlfError::Data("empty validation set".into()));
    }
    let tc = &run.train;
    let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.max_epochs;
    lr_schedule(0, steps_per_epoch, total_steps, tc.lr, tc.lr_min())?;

    let aug_root = Rng::new(run.seed).fork("aug");
    let mut opt = AdamW::new(tc);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let mut seen = 0u64;
    let mut stopped_early = false;

    for epoch in 0..tc.max_epochs {
        let t0 = Instant::now();
        let batches = make_batches(train_set, tc.batch_size, usize::MAX, Some(shuffle_seed(run.seed, epoch)))?;
        let mut bds = Vec::with_capacity(batches.len());
        let mut lr = 0.0;
        for batch in &batches {
            let samples: Vec<&Sample> = batch.indices.iter().map(|&i| &train_set[i]).collect();
            let rngs = (0..samples.len() as u64).map(|k| aug_root.fork_index(seen + k)).collect();
            seen += samples.len() as u64;
            let (bd, grads) = batch_gradients(model, &samples, run, Some(rngs))?;
            lr = lr_schedule(step + 1, steps_per_epoch, total_steps, tc.lr, tc.lr_min())?;
            opt.step(model.store_mut(), &grads, lr)?;
            step += 1;
            bds.push(bd);
        }
        let ev = evaluate(model, val_set, run)?;
        let val_loss = ev.loss.total;
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.store().clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let log = EpochLog {
            epoch,
            lr,
            train: LossBreakdown::mean(&bds),
            val: ev.loss,
            val_metrics: ev.metrics,
            improved,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} val_mae {:.4}{}",
            log.train.total,
            log.val.total,
            log.val_metrics.mae,
            if improved { " *" } else { "" }
        );
        on_epoch(&log);
        epochs.push(log);
        if since_best > tc.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let (best_val_loss, best_epoch, store) = best.expect("at least one epoch ran");
    *model.store_mut() = store;
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        steps: step,
        optimizer: opt,
    })
}

/// Trains the standalone AV model (mean-pooled `Z` -> linear) on L1.
pub fn pretrain_av(
    train_set: &[Sample],
    val_set: &[Sample],
    run: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(AvModel, TrainOutcome)> {
    if train_set.is_empty() {
        return Err(DmlfError::Data("AV pretraining needs a non-empty dataset".into()));
    }
    let mut model = AvModel::new(&run.model, run.seed)?;
    let outcome = train(&mut model, train_set, val_set, run, on_epoch)?;
    Ok((model, outcome))
}

/// A tensor whose analytic gradient is zero, such as an attention key bias
/// (softmax is shift-invariant). Central differences cannot resolve a
/// relative error there, so only the numeric magnitude is checked.
#[derive(Clone, Debug)]
pub struct VanishingGrad {
    pub name: String,
    pub analytic_max: f64,
    pub numeric_max: f64,
}

/// Finite-difference report over every trainable tensor of a model.
pub struct ModelGradCheck {
    /// Tensors compared by relative error, indexed by `report.per_param`.
    pub names: Vec<String>,
    pub report: GradCheckReport,
    pub vanishing: Vec<VanishingGrad>,
    /// Largest numeric gradient still attributable to f32 rounding of the loss.
    pub noise_floor: f64,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.report.passed && self.vanishing.iter().all(|v| v.numeric_max <= self.noise_floor)
    }

    /// Name and relative error of the worst resolvable tensor.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.report
            .per_param
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .map(|p| (self.names[p.index].as_str(), p.rel_error))
    }
}

/// Analytic gradients at or below this max-norm count as zero.
const ZERO_GRAD: f64 = 1e-6;

/// Mean objective over `samples` with `names` bound to the checked leaves.
fn mean_objective<'a>(
    model: &'a DeepMlf,
    samples: &'a [Sample],
    weights: LossWeights,
    names: &'a [String],
) -> impl Fn(&mut Graph, &[Var]) -> dmlf_tensor::Result<Var> + 'a {
    move |g: &mut Graph, vars: &[Var]| {
        let mut ctx = Ctx::from_graph(std::mem::take(g), &model.store, true);
        for (n, v) in names.iter().zip(vars) {
            ctx.bind(n, *v);
        }
        let mut total: Option<Var> = None;
        for s in samples {
            let (loss, _, _) = model
                .loss(&mut ctx, s, weights, ForwardOptions::default())
                .map_err(|e| TensorError::Contract(e.to_string()))?;
            total = Some(match total {
                Some(t) => ctx.g.add(t, loss)?,
                None => loss,
            });
        }
        let loss = ctx.g.scale(total.expect("non-empty sample list"), 1.0 / samples.len() as f32)?;
        *g = ctx.into_graph();
        Ok(loss)
    }
}

/// Checks the gradient of the mean objective over `samples`. With
/// `per_tensor` set, only that many coordinates per tensor are differenced,
/// drawn from `seed`.
pub fn model_grad_check(
    model: &DeepMlf,
    samples: &[Sample],
    weights: LossWeights,
    eps: f32,
    tol: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<ModelGradCheck> {
    if samples.is_empty() {
        return Err(DmlfError::Data("grad check needs at least one sample".into()));
    }
    let all = model.store.trainable_names();
    if all.is_empty() {
        return Err(DmlfError::Config("model has no trainable parameters".into()));
    }

    let mut g = Graph::new();
    let leaves: Vec<Tensor> = all.iter().map(|n| model.store.tensor(n).cloned()).collect::<Result<_>>()?;
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = mean_objective(model, samples, weights, &all)(&mut g, &vars)?;
    let loss_value = g.value(loss).item()?;
    g.backward(loss)?;
    let analytic_max = |v: Var| g.grad(v).map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, x| m.max(f64::from(x.abs()))));

    let (mut names, mut flat) = (Vec::new(), Vec::new());
    for (n, v) in all.iter().zip(&vars) {
        let a = analytic_max(*v);
        if a <= ZERO_GRAD {
            flat.push((n.clone(), a));
        } else {
            names.push(n.clone());
        }
    }

    let mut rng = Rng::new(seed).fork("grad_check");
    let mut run = |subset: &[String]| -> Result<GradCheckReport> {
        let values: Vec<Tensor> = subset.iter().map(|n| model.store.tensor(n).cloned()).collect::<Result<_>>()?;
        let f = mean_objective(model, samples, weights, subset);
        Ok(match per_tensor {
            None => grad_check(f, &values, eps, tol)?,
            Some(k) => grad_check_sampled(f, &values, eps, tol, k, &mut rng)?,
        })
    };
    let report = run(&names)?;
    let flat_names: Vec<String> = flat.iter().map(|(n, _)| n.clone()).collect();
    let vanishing = if flat.is_empty() {
        Vec::new()
    } else {
        let r = run(&flat_names)?;
        flat.into_iter()
            .zip(&r.per_param)
            .map(|((name, analytic_max), p)| VanishingGrad {
                name,
                analytic_max,
                numeric_max: p.max_abs_diff,
            })
            .collect()
    };
    // A few ulps of the loss, divided by the central-difference step.
    let noise_floor = 8.0 * f64::from(loss_value.abs().max(1.0)) * f64::from(f32::EPSILON) / (2.0 * f64::from(eps));
    Ok(ModelGradCheck {
        names,
        report,
        vanishing,
        noise_floor,
    })
}

/// Packs a store and its run config into a checkpoint.
pub fn make_checkpoint(run: &RunConfig, store: &ParamStore, optimizer: Option<AdamW>) -> Checkpoint {
    Checkpoint {
        config_json: run.to_json_pretty(),
        rng: Rng::new(run.seed).state(),
        params: store.clone(),
        optimizer,
    }
}
