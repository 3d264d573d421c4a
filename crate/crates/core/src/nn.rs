//! Dense layer kernels with hand-derived backward passes, plus a
//! central-difference gradient checker.
//!
//! Shapes follow the row-per-node convention: an activation is `M×F`, a
//! weight is `F_in×F_out`, and a bias has length `F_out`.

use crate::error::{Error, Result};
use crate::graph::NormalizedOperator;
pub use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub grad_weights: Tensor2,
    /// Column sums of the upstream gradient; present even when the layer has no bias.
    pub grad_bias: Vec<f64>,
    pub grad_input: Tensor2,
}

fn check_bias(bias: Option<&[f64]>, width: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != width => Err(Error::Shape(format!(
            "bias of length {} for {width} outputs",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn add_bias(y: &mut Tensor2, bias: Option<&[f64]>) {
    if let Some(b) = bias {
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(b).for_each(|(v, bj)| *v += bj);
        }
    }
}

/// `y = x·W + bias`.
pub fn linear_forward(x: &Tensor2, w: &Tensor2, bias: Option<&[f64]>) -> Result<Tensor2> {
    check_bias(bias, w.cols())?;
    let mut y = x.matmul(w)?;
    add_bias(&mut y, bias);
    Ok(y)
}

/// Gradients of `linear_forward` for upstream gradient `g` (shape of `y`).
pub fn linear_backward(x: &Tensor2, w: &Tensor2, g: &Tensor2) -> Result<LayerGrads> {
    Ok(LayerGrads {
        grad_weights: x.t_matmul(g)?,
        grad_bias: g.column_sums(),
        grad_input: g.matmul_t(w)?,
    })
}

pub fn relu(z: &Tensor2) -> Tensor2 {
    let mut out = z.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
    out
}

/// `g ∘ [z > 0]`; the subgradient at 0 is 0.
pub fn relu_backward(z: &Tensor2, g: &Tensor2) -> Tensor2 {
    let mut out = g.clone();
    out.data_mut()
        .iter_mut()
        .zip(z.data())
        .for_each(|(gv, &zv)| {
            if zv <= 0.0 {
                *gv = 0.0
            }
        });
    out
}

/// Intermediates of one GCN layer needed by its backward pass.
#[derive(Debug, Clone)]
pub struct GcnCache {
    /// `Ĥ·C`.
    pub propagated: Tensor2,
    /// Pre-activation `Ĥ·C·W + bias`.
    pub pre_activation: Tensor2,
    /// `ReLU(pre_activation)`.
    pub output: Tensor2,
}

/// `ReLU(Ĥ·C·W + bias)`.
pub fn gcn_layer_forward(
    h: &NormalizedOperator,
    c: &Tensor2,
    w: &Tensor2,
    bias: Option<&[f64]>,
) -> Result<GcnCache> {
    let propagated = h.apply(c)?;
    let pre_activation = linear_forward(&propagated, w, bias)?;
    let output = relu(&pre_activation);
    Ok(GcnCache {
        propagated,
        pre_activation,
        output,
    })
}

/// Backward of [`gcn_layer_forward`]. Uses `Ĥᵀ = Ĥ`.
pub fn gcn_layer_backward(
    h: &NormalizedOperator,
    cache: &GcnCache,
    w: &Tensor2,
    g: &Tensor2,
) -> Result<LayerGrads> {
    let masked = relu_backward(&cache.pre_activation, g);
    let lin = linear_backward(&cache.propagated, w, &masked)?;
    Ok(LayerGrads {
        grad_weights: lin.grad_weights,
        grad_bias: lin.grad_bias,
        grad_input: h.apply(&lin.grad_input)?,
    })
}

/// Column-wise mean of the rows of `c`.
pub fn mean_pool_forward(c: &Tensor2) -> Result<Vec<f64>> {
    if c.rows() == 0 {
        return Err(Error::Shape("mean pool over zero rows".into()));
    }
    let inv = 1.0 / c.rows() as f64;
    Ok(c.column_sums().into_iter().map(|s| s * inv).collect())
}

/// Every row receives `g / rows`.
pub fn mean_pool_backward(g: &[f64], rows: usize) -> Tensor2 {
    let inv = 1.0 / rows as f64;
    let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
    let mut out = Tensor2::zeros(rows, g.len());
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(())
}

/// `−log softmax(logits)[label]`, shifted by the max logit.
pub fn softmax_ce_forward(logits: &[f64], label: usize) -> Result<f64> {
    check_label(logits, label)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `softmax(logits) − onehot(label)`.
pub fn softmax_ce_backward(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(logits, label)?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central differences `(L(θ + h·e_i) − L(θ − h·e_i)) / 2h` for every coordinate.
pub fn numerical_gradient<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {h} must be > 0")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = loss_fn(&theta);
        theta[i] = orig - h;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest [`relative_error`] between `analytic` and central differences of `loss_fn`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let numeric = numerical_gradient(loss_fn, params, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
