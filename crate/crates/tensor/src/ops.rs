//! Forward/backward kernels shared by the graph.

use std::str::FromStr;

use crate::error::{shape_err, Result, TensorError};

/// Element-wise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// GPT-2 style tanh approximation.
    Gelu,
    Sigmoid,
    Tanh,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(TensorError::Config(format!(
                "unknown activation kind '{other}'"
            ))),
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    op,
                    format!("shapes {a:?} and {b:?} are not broadcastable"),
                ))
            }
        };
    }
    Ok(out)
}

/// How the flat index of a broadcast output maps onto one of its inputs.
pub(crate) enum IndexMap {
    Identity,
    Constant,
    Modulo(usize),
    Table(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        let in_numel: usize = input.iter().product();
        if out == input {
            return IndexMap::Identity;
        }
        if in_numel == 1 {
            return IndexMap::Constant;
        }
        let mut trimmed = input;
        while trimmed.len() > 1 && trimmed[0] == 1 {
            trimmed = &trimmed[1..];
        }
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
            return IndexMap::Modulo(in_numel);
        }
        // General case: strides with zeros on broadcast axes.
        let n = out.len();
        let offset = n - input.len();
        let mut strides = vec![0usize; n];
        let mut s = 1;
        for i in (0..input.len()).rev() {
            strides[i + offset] = if input[i] == 1 { 0 } else { s };
            s *= input[i];
        }
        let out_numel: usize = out.iter().product();
        let mut table = Vec::with_capacity(out_numel);
        let mut idx = vec![0usize; n];
        for _ in 0..out_numel {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        IndexMap::Table(table)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Constant => 0,
            IndexMap::Modulo(m) => i % m,
            IndexMap::Table(t) => t[i],
        }
    }
}

/// `c += a[m,k] · b[k,n]`.
pub(crate) fn mm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]^T`.
pub(crate) fn mm_bt_acc(g: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f32 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]^T · g[m,n]`.
pub(crate) fn mm_at_acc(a: &[f32], g: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gj) in orow.iter_mut().zip(grow) {
                *o += aip * gj;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
