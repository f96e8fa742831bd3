//! Merge masks: sizing, generation, the recurrent update and the merge itself.
//!
//! These are plain-tensor reference implementations. The model evaluates the
//! same maths on the autodiff tape.

use crate::error::{Error, Result};
use crate::ib::{ibb_coefficient, psi, ClusterState, LabelTerm};
use crate::numerics::{sigmoid, Scalar, Tensor};

/// Slack absorbed before rounding up, so `0.3 · 10` counts as 3 tokens.
const CEIL_SLACK: f64 = 1e-9;

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("compression ratio {r} outside (0, 1]")))
    }
}

fn ceil_tokens(x: f64) -> usize {
    ((x - CEIL_SLACK).ceil() as usize).max(1)
}

/// `P = ⌈r·N⌉`.
pub fn merged_count(n: usize, r: f64) -> Result<usize> {
    check_ratio(r)?;
    if n == 0 {
        return Err(Error::invalid("token count must be positive"));
    }
    Ok(ceil_tokens(r * n as f64).min(n))
}

/// `(⌈H√r⌉, ⌈W√r⌉)` for grid-shaped tokens.
pub fn grid_dims(h: usize, w: usize, r: f64) -> Result<(usize, usize)> {
    check_ratio(r)?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("grid sides must be positive"));
    }
    let s = r.sqrt();
    Ok((ceil_tokens(h as f64 * s).min(h), ceil_tokens(w as f64 * s).min(w)))
}

/// A column-convex merge mask, `[N, P]` or batched `[B, N, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeMask<T: Scalar = f64> {
    pub weights: Tensor<T>,
    pub layer: usize,
}

impl<T: Scalar> MergeMask<T> {
    pub fn from_raw(raw: &Tensor<T>, layer: usize) -> Self {
        MergeMask {
            weights: normalize_mask(raw),
            layer,
        }
    }

    /// Largest deviation of any column sum from 1, or infinity if an entry is
    /// negative.
    pub fn convexity_error(&self) -> f64 {
        let w = &self.weights;
        if w.data().iter().any(|v| v.as_f64() < 0.0) {
            return f64::INFINITY;
        }
        let (n, p) = (w.shape()[w.rank() - 2], w.cols());
        let mut worst = 0.0f64;
        for mat in w.data().chunks(n * p) {
            for col in 0..p {
                let s: f64 = (0..n).map(|i| mat[i * p + col].as_f64()).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Softmax over the token axis of each column.
pub fn normalize_mask<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    raw.transpose().softmax_rows().transpose()
}

/// `X̃ = GᵀZ` for `[N, D]` tokens, or per sample for `[B, N, D]` with a
/// shared `[N, P]` or per-sample `[B, N, P]` mask.
pub fn merge_tokens<T: Scalar>(z: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let zn = z.shape()[z.rank().saturating_sub(2)];
    let gn = g.shape()[g.rank().saturating_sub(2)];
    if z.rank() < 2 || g.rank() < 2 || zn != gn {
        return Err(Error::shape("merge_tokens", z.shape(), g.shape()));
    }
    match (z.rank(), g.rank()) {
        (2, 2) => g.transpose().matmul(z),
        (3, 2) => {
            let gt = g.transpose();
            let rows = (0..z.shape()[0])
                .map(|i| gt.matmul(&z.slice0(i)))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&rows)
        }
        (3, 3) if z.shape()[0] == g.shape()[0] => {
            let rows = (0..z.shape()[0])
                .map(|i| g.slice0(i).transpose().matmul(&z.slice0(i)))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&rows)
        }
        _ => Err(Error::shape("merge_tokens", z.shape(), g.shape())),
    }
}

/// `G¹ = softmax_N(sigmoid((X/τ)·W + b))` for tokens `[B, N, D]`, weight
/// `[D, P]` and bias `[P]`.
pub fn init_mask(x: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>, tau: f64) -> Result<Tensor<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if weight.rank() != 2 || x.cols() != weight.rows() || bias.shape() != [weight.cols()] {
        return Err(Error::shape("init_mask", x.shape(), weight.shape()));
    }
    let logits = x.map(|v| v / tau).matmul(weight)?;
    let p = weight.cols();
    let mut act = logits;
    for row in act.data_mut().chunks_mut(p) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = sigmoid(*v + b);
        }
    }
    Ok(normalize_mask(&act))
}

/// The token transform applied inside the mask update.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskMlp {
    Identity,
    /// `relu(Z·W₁ + b₁)·W₂ + b₂`, all `D → D`.
    Mlp {
        w1: Tensor<f64>,
        b1: Tensor<f64>,
        w2: Tensor<f64>,
        b2: Tensor<f64>,
    },
}

impl MaskMlp {
    pub fn apply(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            MaskMlp::Identity => Ok(z.clone()),
            MaskMlp::Mlp { w1, b1, w2, b2 } => {
                let h = add_bias(&z.matmul(w1)?, b1)?.map(|v| v.max(0.0));
                add_bias(&h.matmul(w2)?, b2)
            }
        }
    }
}

fn add_bias(x: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    if b.shape() != [x.cols()] {
        return Err(Error::shape("bias", x.shape(), b.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(out)
}

/// How the per-sample update terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    /// `(2η/|B|) Σ_i` shared by the whole batch.
    Batch,
    /// Each sample moves by its own term, `2η · MLP(Z_i) M_iᵀ`.
    PerSample,
}

/// Parameters shared by every mask update.
#[derive(Clone, Debug)]
pub struct UpdateInputs<'a> {
    pub phi_input: &'a Tensor<f64>,
    pub labels: LabelTerm<'a>,
    pub state: &'a ClusterState,
    pub mlp: &'a MaskMlp,
    pub eta: f64,
    pub scope: UpdateScope,
}

/// One recurrent step before normalisation:
/// `G_prev − (2η/|B|) Σ_i MLP(Z_i)·M_iᵀ` where `M_i` is evaluated at the
/// merged tokens `G_prevᵀ Z_i`.
///
/// `g_prev` is `[N, P]` (shared) or `[B, N, P]`; `z` is `[B, N, D]`.
pub fn update_mask_raw(g_prev: &Tensor<f64>, z: &Tensor<f64>, inputs: &UpdateInputs<'_>) -> Result<Tensor<f64>> {
    if z.rank() != 3 {
        return Err(Error::shape("update_mask", g_prev.shape(), z.shape()));
    }
    let (b, n, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let p = g_prev.cols();
    let shared = g_prev.rank() == 2;
    if g_prev.shape()[g_prev.rank() - 2] != n || (!shared && (g_prev.rank() != 3 || g_prev.shape()[0] != b)) {
        return Err(Error::shape("update_mask", g_prev.shape(), z.shape()));
    }
    if inputs.state.merged_dim() != p * d {
        return Err(Error::shape(
            "update_mask",
            &[p, d],
            inputs.state.merged_centroids.shape(),
        ));
    }
    let merged = merge_tokens(z, g_prev)?;
    let psi = psi(inputs.phi_input, inputs.labels, inputs.state)?;
    let terms = (0..b)
        .map(|i| {
            let m = ibb_coefficient(merged.slice0(i).data(), psi.row(i), inputs.state, [p, d])?;
            inputs.mlp.apply(&z.slice0(i))?.matmul(&m.transpose())
        })
        .collect::<Result<Vec<_>>>()?;

    match inputs.scope {
        UpdateScope::Batch => {
            let scale = 2.0 * inputs.eta / b as f64;
            let mut delta = Tensor::<f64>::zeros(&[n, p]);
            for t in &terms {
                for (acc, v) in delta.data_mut().iter_mut().zip(t.data()) {
                    *acc += v;
                }
            }
            let mut out = g_prev.clone();
            for chunk in out.data_mut().chunks_mut(n * p) {
                for (o, dv) in chunk.iter_mut().zip(delta.data()) {
                    *o -= scale * dv;
                }
            }
            Ok(out)
        }
        UpdateScope::PerSample => {
            let scale = 2.0 * inputs.eta;
            let rows = terms
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let prev = if shared { g_prev.clone() } else { g_prev.slice0(i) };
                    prev.zip_map(t, |g, v| g - scale * v)
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&rows)
        }
    }
}

/// [`update_mask_raw`] followed by column normalisation.
pub fn update_mask(g_prev: &Tensor<f64>, z: &Tensor<f64>, inputs: &UpdateInputs<'_>) -> Result<Tensor<f64>> {
    Ok(normalize_mask(&update_mask_raw(g_prev, z, inputs)?))
}
