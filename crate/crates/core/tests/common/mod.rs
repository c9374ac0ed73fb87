#![allow(dead_code)]

use deepmlf::config::{AvEncoderConfig, MlmConfig, MmPlacement, ModelConfig, RunConfig};
use deepmlf::data::{generate_synthetic, Sample, SyntheticSpec};
use deepmlf::{Ctx, ParamStore};
use dmlf_tensor::{grad_check, GradCheckReport, Graph, Rng, Tensor, TensorError, Var};

/// d=16, four LM layers, two MM blocks, four fusion tokens, vocab 32.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        mlm: MlmConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            max_len: 16,
            n_f: 4,
            mm_placement: MmPlacement::Every { count: 2, stride: 2 },
            ..MlmConfig::default()
        },
        av: AvEncoderConfig {
            d_a_in: 3,
            d_v_in: 2,
            d_av: 8,
            n_enc_layers: 1,
            l_av: 4,
            n_heads: 1,
        },
        ..ModelConfig::default()
    }
}

pub fn toy_spec(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> SyntheticSpec {
    SyntheticSpec {
        d_a_in: 3,
        d_v_in: 2,
        l_av: 4,
        n_train,
        n_val,
        n_test,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Train/val/test samples shaped for [`toy_model`].
pub fn toy_data(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let data = generate_synthetic(&toy_spec(seed, n_train, n_val, n_test)).unwrap();
    (
        data.samples(&data.train).unwrap(),
        data.samples(&data.val).unwrap(),
        data.samples(&data.test).unwrap(),
    )
}

pub fn toy_run(seed: u64) -> RunConfig {
    let mut run = RunConfig {
        seed,
        model: toy_model(),
        ..RunConfig::default()
    };
    run.train.batch_size = 8;
    run
}

/// Finite-difference check of every trainable tensor in `store` on the
/// scalar `sum(R * build(ctx))`, with `R` a fixed random weighting so that
/// normalised outputs still carry a gradient.
pub fn store_grad_check(
    store: &ParamStore,
    eps: f32,
    tol: f64,
    build: impl Fn(&mut Ctx) -> deepmlf::Result<Var>,
) -> GradCheckReport {
    let shape = {
        let mut ctx = Ctx::new(store, false);
        let out = build(&mut ctx).unwrap();
        ctx.g.value(out).shape().to_vec()
    };
    let weights = Tensor::randn(&shape, 1.0, &mut Rng::new(77));
    let names = store.trainable_names();
    let values: Vec<Tensor> = names.iter().map(|n| store.tensor(n).unwrap().clone()).collect();
    let f = |g: &mut Graph, vars: &[Var]| -> dmlf_tensor::Result<Var> {
        let mut ctx = Ctx::from_graph(std::mem::take(g), store, true);
        for (n, v) in names.iter().zip(vars) {
            ctx.bind(n, *v);
        }
        let out = build(&mut ctx).map_err(|e| TensorError::Contract(e.to_string()))?;
        let r = ctx.constant(weights.clone());
        let prod = ctx.g.mul(out, r)?;
        let loss = ctx.g.sum(prod)?;
        *g = ctx.into_graph();
        Ok(loss)
    };
    grad_check(f, &values, eps, tol).unwrap()
}
