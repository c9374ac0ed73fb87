//! Structural probes: information flow, gate values, attention-score budgets
//! and ablation grids.

use std::collections::BTreeMap;

use dmlf_tensor::{Rng, Tensor, Var};
use serde::Serialize;

use crate::config::{AugKind, AvInit, FusionScheme, GatingKind, MmPlacement, ModelConfig, RunConfig};
use crate::data::Sample;
use crate::error::{config_err, DmlfError, Result};
use crate::mlm;
use crate::model::{DeepMlf, ForwardOptions, ForwardOutput, PerturbTarget, Perturbation};
use crate::params::{Ctx, ScoreKind, ScoreRecord};

/// Input stream a probe perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Text,
    Av,
    Fusion,
}

pub const PROBE_OUTPUTS: [&str; 8] = ["x_t", "lm_logits", "y_t", "z_mean", "y_av", "x_f", "y_f", "y_o"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub stream: Stream,
    pub perturbation: Perturbation,
    /// Output name -> whether any bit changed.
    pub changed: BTreeMap<String, bool>,
}

impl ProbeReport {
    pub fn changed(&self, output: &str) -> bool {
        self.changed.get(output).copied().unwrap_or(false)
    }

    /// Outputs that must stay bit-identical under this stream in the `f_only` scheme.
    pub fn must_not_change(stream: Stream) -> &'static [&'static str] {
        match stream {
            Stream::Av => &["x_t", "lm_logits", "y_t"],
            Stream::Text => &["z_mean", "y_av"],
            Stream::Fusion => &["x_t", "lm_logits", "y_t", "z_mean", "y_av"],
        }
    }

    /// Outputs expected to move for generic weights.
    pub fn should_change(stream: Stream) -> &'static [&'static str] {
        match stream {
            Stream::Av => &["z_mean", "y_av", "y_f", "y_o"],
            Stream::Text => &["x_t", "lm_logits", "y_t", "y_f", "y_o"],
            Stream::Fusion => &["y_f", "y_o"],
        }
    }

    pub fn isolation_holds(&self) -> bool {
        Self::must_not_change(self.stream).iter().all(|o| !self.changed(o))
    }

    pub fn pattern_holds(&self) -> bool {
        self.isolation_holds() && Self::should_change(self.stream).iter().all(|o| self.changed(o))
    }
}

fn snapshot(ctx: &Ctx, out: &ForwardOutput) -> Vec<Tensor> {
    let vars: [Var; 8] = [out.x_t, out.logits, out.y_t, out.z_mean, out.y_av, out.x_f, out.y_f, out.y_o];
    vars.iter().map(|v| ctx.g.value(*v).clone()).collect()
}

/// Runs `sample` clean and with `+1.0` on one random element of `stream`,
/// then compares every probed output bit for bit.
pub fn info_flow_probe(model: &DeepMlf, sample: &Sample, stream: Stream, rng: &mut Rng) -> Result<ProbeReport> {
    let cfg = &model.config;
    let (target, rows, cols) = match stream {
        Stream::Text => (PerturbTarget::Text, sample.tokens.len(), cfg.mlm.d_model),
        Stream::Fusion => (PerturbTarget::Fusion, cfg.mlm.n_f, cfg.mlm.d_model),
        Stream::Av => {
            if rng.below(2) == 0 {
                let (r, c) = sample.audio.dims2()?;
                (PerturbTarget::Audio, r, c)
            } else {
                let (r, c) = sample.vision.dims2()?;
                (PerturbTarget::Vision, r, c)
            }
        }
    };
    let perturbation = Perturbation {
        target,
        row: rng.below(rows),
        col: rng.below(cols),
        delta: 1.0,
    };
    let run = |p: Option<Perturbation>| -> Result<Vec<Tensor>> {
        let mut ctx = Ctx::new(&model.store, false);
        let opts = ForwardOptions {
            perturb: p,
            ..Default::default()
        };
        let out = model.forward(&mut ctx, &sample.tokens, &sample.audio, &sample.vision, opts)?;
        Ok(snapshot(&ctx, &out))
    };
    let clean = run(None)?;
    let dirty = run(Some(perturbation))?;
    let changed = PROBE_OUTPUTS
        .iter()
        .zip(clean.iter().zip(&dirty))
        .map(|(name, (a, b))| (name.to_string(), !a.bit_identical(b)))
        .collect();
    Ok(ProbeReport {
        stream,
        perturbation,
        changed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GateReading {
    pub layer: usize,
    pub attn: f32,
    pub ffw: f32,
}

/// Effective gate values of every MM block, in layer order.
pub fn gate_trace(model: &DeepMlf) -> Result<Vec<GateReading>> {
    let kind = model.config.mlm.gating;
    model
        .config
        .mlm
        .mm_positions()?
        .into_iter()
        .map(|l| {
            let p = mlm::mm_prefix(l);
            let a1 = model.store.tensor(&format!("{p}.gate_attn"))?.data()[0];
            let a2 = model.store.tensor(&format!("{p}.gate_ffw"))?.data()[0];
            Ok(GateReading {
                layer: l,
                attn: kind.gate(a1),
                ffw: kind.gate(a2),
            })
        })
        .collect()
}

/// Per-head attention-score element counts for one MM layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BudgetRow {
    pub layer: usize,
    pub gca: usize,
    pub csa: usize,
    /// Interleaved-input baseline attending over `L_t + L_av` positions.
    pub flamingo_style: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BudgetReport {
    pub l_t: usize,
    pub l_av: usize,
    pub n_f: usize,
    pub rows: Vec<BudgetRow>,
}

/// `GCA = n_f * L_av`, `CSA = (L_t + n_f)^2`, interleaved `(L_t + L_av)^2`.
/// Under the `t_and_f` and `t_only` schemes the GCA query count grows accordingly.
pub fn memory_budget(cfg: &ModelConfig, l_t: usize) -> Result<BudgetReport> {
    let m = &cfg.mlm;
    let l_av = cfg.av.l_av;
    let queries = match m.fusion_scheme {
        FusionScheme::FOnly => m.n_f,
        FusionScheme::TAndF => l_t + m.n_f,
        FusionScheme::TOnly => l_t,
    };
    let rows = m
        .mm_positions()?
        .into_iter()
        .map(|layer| BudgetRow {
            layer,
            gca: queries * l_av,
            csa: (l_t + m.n_f).pow(2),
            flamingo_style: (l_t + l_av).pow(2),
        })
        .collect();
    Ok(BudgetReport {
        l_t,
        l_av,
        n_f: m.n_f,
        rows,
    })
}

/// Score shapes recorded during a real forward of `sample`.
pub fn measured_scores(model: &DeepMlf, sample: &Sample) -> Result<Vec<ScoreRecord>> {
    let mut ctx = Ctx::new(&model.store, false).with_trace();
    model.forward(&mut ctx, &sample.tokens, &sample.audio, &sample.vision, ForwardOptions::default())?;
    Ok(ctx.take_trace())
}

/// Checks that every recorded GCA and LM causal score tensor matches the budget.
pub fn budget_matches(report: &BudgetReport, scores: &[ScoreRecord], n_lm_layers: usize) -> bool {
    let gca: Vec<_> = scores.iter().filter(|s| s.kind == ScoreKind::GatedCross).collect();
    let csa: Vec<_> = scores.iter().filter(|s| s.kind == ScoreKind::CausalSelf).collect();
    let Some(row) = report.rows.first() else {
        return false;
    };
    gca.len() == report.rows.len()
        && csa.len() == n_lm_layers
        && gca.iter().all(|s| s.elements_per_head() == row.gca)
        && csa.iter().all(|s| s.elements_per_head() == row.csa)
}

/// One axis of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Axis {
    NF(Vec<usize>),
    /// Rows of the fusion-block ablation: GCA query source and FFW on/off.
    FusionBlock(Vec<(FusionScheme, bool)>),
    FusionScheme(Vec<FusionScheme>),
    FfwEnabled(Vec<bool>),
    Gating(Vec<GatingKind>),
    /// Loss terms to drop, by name (`av`, `t`, `f`, `lm`); empty keeps all.
    LossMask(Vec<Vec<String>>),
    Aug(Vec<AugKind>),
    AvInit(Vec<AvInit>),
    /// `(count, stride)` placements.
    MmDepth(Vec<(usize, usize)>),
}

impl Axis {
    pub fn nf_default() -> Self {
        Axis::NF(vec![8, 12, 16, 20])
    }

    pub fn fusion_block_default() -> Self {
        Axis::FusionBlock(vec![
            (FusionScheme::FOnly, true),
            (FusionScheme::TAndF, true),
            (FusionScheme::TOnly, true),
            (FusionScheme::FOnly, false),
        ])
    }

    pub fn loss_mask_default() -> Self {
        let drop = |t: &[&str]| t.iter().map(|s| s.to_string()).collect();
        Axis::LossMask(vec![drop(&[]), drop(&["av"]), drop(&["t"]), drop(&["f"]), drop(&["lm"])])
    }

    fn len(&self) -> usize {
        match self {
            Axis::NF(v) => v.len(),
            Axis::FusionBlock(v) => v.len(),
            Axis::FusionScheme(v) => v.len(),
            Axis::FfwEnabled(v) => v.len(),
            Axis::Gating(v) => v.len(),
            Axis::LossMask(v) => v.len(),
            Axis::Aug(v) => v.len(),
            Axis::AvInit(v) => v.len(),
            Axis::MmDepth(v) => v.len(),
        }
    }

    /// Applies value `i` to `cfg` and returns its label.
    fn apply(&self, i: usize, cfg: &mut RunConfig) -> Result<String> {
        let m = &mut cfg.model.mlm;
        Ok(match self {
            Axis::NF(v) => {
                m.n_f = v[i];
                format!("n_f={}", v[i])
            }
            Axis::FusionBlock(v) => {
                let (s, ffw) = v[i];
                m.fusion_scheme = s;
                m.ffw_enabled = ffw;
                format!("gca={}+ffw={}", enum_label(&s), ffw)
            }
            Axis::FusionScheme(v) => {
                m.fusion_scheme = v[i];
                format!("scheme={}", enum_label(&v[i]))
            }
            Axis::FfwEnabled(v) => {
                m.ffw_enabled = v[i];
                format!("ffw={}", v[i])
            }
            Axis::Gating(v) => {
                m.gating = v[i];
                format!("gating={}", enum_label(&v[i]))
            }
            Axis::LossMask(v) => {
                for term in &v[i] {
                    let w = &mut cfg.loss;
                    match term.as_str() {
                        "av" => w.lambda_av = 0.0,
                        "t" => w.lambda_t = 0.0,
                        "f" => w.lambda_f = 0.0,
                        "lm" => w.lambda_lm = 0.0,
                        other => return config_err(format!("unknown loss term '{other}'")),
                    }
                }
                if v[i].is_empty() {
                    "loss=all".to_string()
                } else {
                    format!("loss=-{}", v[i].join("-"))
                }
            }
            Axis::Aug(v) => {
                cfg.aug.kind = v[i];
                format!("aug={}", enum_label(&v[i]))
            }
            Axis::AvInit(v) => {
                cfg.av_init = v[i];
                format!("av_init={}", enum_label(&v[i]))
            }
            Axis::MmDepth(v) => {
                let (count, stride) = v[i];
                m.mm_placement = MmPlacement::Every { count, stride };
                format!("mm={count}x{stride}")
            }
        })
    }

    /// Parses `name` or `name=v1,v2,...`. A bare name uses the axis defaults;
    /// a bare `fusion_scheme` expands to the four fusion-block rows.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, vals) = match spec.split_once('=') {
            Some((n, v)) => {
                let items: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if items.is_empty() {
                    return config_err(format!("axis '{}' has no values", n.trim()));
                }
                (n.trim(), Some(items))
            }
            None => (spec.trim(), None),
        };
        let or = |default: &[&str]| -> Vec<String> {
            vals.clone().unwrap_or_else(|| default.iter().map(|s| s.to_string()).collect())
        };
        Ok(match name {
            "n_f" => match &vals {
                None => Axis::nf_default(),
                Some(v) => Axis::NF(v.iter().map(|s| parse_num(name, s)).collect::<Result<_>>()?),
            },
            "fusion_block" => match vals {
                None => Axis::fusion_block_default(),
                Some(_) => return config_err("fusion_block takes no values"),
            },
            "fusion_scheme" => match &vals {
                None => Axis::fusion_block_default(),
                Some(v) => Axis::FusionScheme(parse_enums(name, v)?),
            },
            "ffw" => Axis::FfwEnabled(
                or(&["true", "false"])
                    .iter()
                    .map(|s| s.parse().map_err(|_| DmlfError::Config(format!("bad ffw flag '{s}'"))))
                    .collect::<Result<_>>()?,
            ),
            "gating" => Axis::Gating(parse_enums(name, &or(&["sigmoid", "tanh", "none"]))?),
            "loss_mask" => match &vals {
                None => Axis::loss_mask_default(),
                Some(v) => Axis::LossMask(
                    v.iter()
                        .map(|s| if s == "all" { vec![] } else { s.split('-').map(String::from).collect() })
                        .collect(),
                ),
            },
            "aug" => Axis::Aug(parse_enums(name, &or(&["seqaug", "noise", "dropout"]))?),
            "av_init" => Axis::AvInit(parse_enums(name, &or(&["pre_tune", "pre_freeze", "random_tune"]))?),
            "mm_depth" => {
                let v = vals.ok_or_else(|| DmlfError::Config("mm_depth needs count:stride values".into()))?;
                Axis::MmDepth(
                    v.iter()
                        .map(|s| {
                            let (c, k) = s
                                .split_once(':')
                                .ok_or_else(|| DmlfError::Config(format!("bad mm_depth '{s}', want count:stride")))?;
                            Ok((parse_num(name, c)?, parse_num(name, k)?))
                        })
                        .collect::<Result<_>>()?,
                )
            }
            other => return config_err(format!("unknown grid axis '{other}'")),
        })
    }
}

fn parse_num(axis: &str, s: &str) -> Result<usize> {
    s.parse().map_err(|_| DmlfError::Config(format!("axis '{axis}': bad number '{s}'")))
}

fn parse_enums<T: serde::de::DeserializeOwned>(axis: &str, items: &[String]) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| {
            serde_json::from_value(serde_json::Value::String(s.clone()))
                .map_err(|e| DmlfError::Config(format!("axis '{axis}': {e}")))
        })
        .collect()
}

fn enum_label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRun {
    pub id: String,
    pub labels: Vec<String>,
    pub config: RunConfig,
}

/// Cartesian product of `axes` over `base`, first axis varying slowest.
/// Ids are `run-NNN` plus the value labels, so they depend only on the inputs.
pub fn ablation_grid(base: &RunConfig, axes: &[Axis]) -> Result<Vec<GridRun>> {
    if axes.is_empty() {
        return config_err("ablation grid needs at least one axis");
    }
    if let Some(a) = axes.iter().find(|a| a.len() == 0) {
        return config_err(format!("empty grid axis {a:?}"));
    }
    let total: usize = axes.iter().map(Axis::len).product();
    let mut runs = Vec::with_capacity(total);
    for n in 0..total {
        let mut cfg = base.clone();
        let mut labels = Vec::with_capacity(axes.len());
        let mut rem = n;
        let mut idx = vec![0; axes.len()];
        for (k, a) in axes.iter().enumerate().rev() {
            idx[k] = rem % a.len();
            rem /= a.len();
        }
        for (a, &i) in axes.iter().zip(&idx) {
            labels.push(a.apply(i, &mut cfg)?);
        }
        cfg.validate()?;
        runs.push(GridRun {
            id: format!("run-{n:03}-{}", labels.join("_")),
            labels,
            config: cfg,
        });
    }
    Ok(runs)
}
