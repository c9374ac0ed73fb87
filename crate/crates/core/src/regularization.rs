//! Training-time augmentation of language embeddings.
//!
//! Only `X_t^(0)` is ever augmented; fusion tokens and AV features are not.

use dmlf_tensor::{Rng, Tensor};

use crate::config::{AugConfig, AugKind, SeqAugMode};
use crate::error::{config_err, Result};

/// Soft permutation along time.
///
/// Draw order: one uniform per feature dimension (in order) decides whether it
/// is selected (`u < p`); then, for each selected dimension in order, either a
/// Fisher-Yates shuffle of `0..L` or `L` draws of `below(L)`. Unselected
/// dimensions are copied untouched.
pub fn seqaug(x: &Tensor, p: f32, mode: SeqAugMode, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return config_err(format!("seqaug p = {p} outside [0, 1]"));
    }
    let (l, d) = x.dims2()?;
    let selected: Vec<usize> = (0..d).filter(|_| rng.uniform() < p).collect();
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    let mut order: Vec<usize> = Vec::with_capacity(l);
    for j in selected {
        order.clear();
        match mode {
            SeqAugMode::Permute => {
                order.extend(0..l);
                rng.shuffle(&mut order);
            }
            SeqAugMode::Resample => order.extend((0..l).map(|_| rng.below(l))),
        }
        for (t, &s) in order.iter().enumerate() {
            dst[t * d + j] = src[s * d + j];
        }
    }
    Ok(out)
}

/// Additive Gaussian noise with standard deviation `sigma`.
pub fn gaussian_noise(x: &Tensor, sigma: f32, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return config_err("noise sigma must be >= 0");
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += sigma * rng.normal();
    }
    Ok(out)
}

/// Inverted dropout: each element is zeroed with probability `q`, survivors
/// are scaled by `1 / (1 - q)`.
pub fn dropout(x: &Tensor, q: f32, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&q) {
        return config_err(format!("dropout q = {q} outside [0, 1)"));
    }
    if q == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - q);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = if rng.uniform() < q { 0.0 } else { *v * keep };
    }
    Ok(out)
}

/// Applies whichever augmentation `cfg` selects.
pub fn augment(x: &Tensor, cfg: &AugConfig, rng: &mut Rng) -> Result<Tensor> {
    match cfg.kind {
        AugKind::None => Ok(x.clone()),
        AugKind::Seqaug => seqaug(x, cfg.p, cfg.mode, rng),
        AugKind::Noise => gaussian_noise(x, cfg.sigma, rng),
        AugKind::Dropout => dropout(x, cfg.q, rng),
    }
}
