//! Decoupled cross-attention with the material transfer force and
//! per-query mask gating of the image term.
//!
//! Text and image-prompt tokens are attended separately from the same
//! queries and the two outputs are summed:
//!
//! `Z_new[q] = Attn(Q, K, V)[q] + lambda * m[q] * Attn(Q, K', V')[q]`
//!
//! where `m` is the object mask at the resolution of the attention layer.
//! Query rows outside the mask receive the text term only.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub struct AttentionInputs<'a> {
    /// Projected queries, one row per spatial position (row-major over the mask grid).
    pub queries: ArrayView2<'a, f64>,
    pub text_keys: ArrayView2<'a, f64>,
    pub text_values: ArrayView2<'a, f64>,
    pub image_keys: ArrayView2<'a, f64>,
    pub image_values: ArrayView2<'a, f64>,
    pub lambda: f64,
    pub mask: &'a BinaryMask,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `softmax(Q K^T / sqrt(d)) V`. Returns the output and the probabilities.
pub fn attention(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let probs = softmax_rows(&(q.dot(&k.t()) * scale));
    (probs.dot(&v), probs)
}

/// Gradient of a scalar through `softmax` rows: `dS = P * (dP - rowsum(dP * P))`.
pub fn softmax_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let inner: Array1<f64> = (dprobs * probs).sum_axis(Axis(1));
    let mut ds = dprobs - &inner.insert_axis(Axis(1));
    ds *= probs;
    ds
}

/// Gradients of a scalar w.r.t. queries and keys of [`attention`], given the
/// gradient `dout` w.r.t. its output.
pub fn attention_backward(
    dout: ArrayView2<'_, f64>,
    probs: &Array2<f64>,
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dprobs = dout.dot(&v.t());
    let ds = softmax_backward(probs, &dprobs) * scale;
    (ds.dot(&k), ds.t().dot(&q))
}

fn check(inputs: &AttentionInputs<'_>) -> Result<()> {
    let (nq, d) = inputs.queries.dim();
    let (mh, mw) = inputs.mask.dims();
    if nq != mh * mw {
        return Err(Error::Shape(format!("{nq} queries but the level mask has {} cells", mh * mw)));
    }
    for (name, k, v) in [
        ("text", inputs.text_keys, inputs.text_values),
        ("image", inputs.image_keys, inputs.image_values),
    ] {
        if k.ncols() != d {
            return Err(Error::Shape(format!("{name} key dim {} != query dim {d}", k.ncols())));
        }
        if k.nrows() != v.nrows() {
            return Err(Error::Shape(format!("{name} keys and values differ in token count")));
        }
    }
    if inputs.text_values.ncols() != inputs.image_values.ncols() {
        return Err(Error::Shape("text and image value dims differ".into()));
    }
    if !(inputs.lambda >= 0.0) {
        return Err(Error::Invalid(format!("transfer force must be >= 0, got {}", inputs.lambda)));
    }
    Ok(())
}

/// Intermediate values of one decoupled attention call, kept for the
/// backward pass.
pub struct DecoupledAttention {
    pub output: Array2<f64>,
    pub text_probs: Array2<f64>,
    /// `None` when the image term was skipped (`lambda == 0` or empty mask).
    pub image_probs: Option<Array2<f64>>,
}

pub fn decoupled_attention_full(inputs: &AttentionInputs<'_>) -> Result<DecoupledAttention> {
    check(inputs)?;
    let (mut output, text_probs) = attention(inputs.queries, inputs.text_keys, inputs.text_values);
    let gate: Vec<bool> = inputs.mask.values().iter().copied().collect();
    if inputs.lambda == 0.0 || !gate.iter().any(|g| *g) {
        return Ok(DecoupledAttention {
            output,
            text_probs,
            image_probs: None,
        });
    }
    let (image_out, image_probs) = attention(inputs.queries, inputs.image_keys, inputs.image_values);
    for (q, on) in gate.iter().enumerate() {
        if *on {
            let mut row = output.row_mut(q);
            row.scaled_add(inputs.lambda, &image_out.row(q));
        }
    }
    Ok(DecoupledAttention {
        output,
        text_probs,
        image_probs: Some(image_probs),
    })
}

pub fn decoupled_attention(inputs: &AttentionInputs<'_>) -> Result<Array2<f64>> {
    Ok(decoupled_attention_full(inputs)?.output)
}

/// Gradient w.r.t. the queries of [`decoupled_attention`], given `dout`.
pub fn decoupled_attention_backward_queries(
    inputs: &AttentionInputs<'_>,
    forward: &DecoupledAttention,
    dout: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (mut dq, _) = attention_backward(dout, &forward.text_probs, inputs.queries, inputs.text_keys, inputs.text_values);
    if let Some(image_probs) = &forward.image_probs {
        let mut gated = dout.to_owned();
        for (mut row, on) in gated.axis_iter_mut(Axis(0)).zip(inputs.mask.values().iter()) {
            if *on {
                row *= inputs.lambda;
            } else {
                row.fill(0.0);
            }
        }
        let (dq_img, _) = attention_backward(gated.view(), image_probs, inputs.queries, inputs.image_keys, inputs.image_values);
        dq += &dq_img;
    }
    dq
}

/// Per-step material transfer force.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    #[default]
    Constant,
    /// Rises linearly from 0 at the first step to the base force at the last.
    LinearRamp { steps: usize },
}

impl LambdaSchedule {
    /// Force at sampling step `step_index` (0 = first denoising step).
    pub fn at(&self, lambda_base: f64, step_index: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant => lambda_base,
            LambdaSchedule::LinearRamp { steps } if steps <= 1 => lambda_base,
            LambdaSchedule::LinearRamp { steps } => {
                lambda_base * (step_index.min(steps - 1) as f64 / (steps - 1) as f64)
            }
        }
    }
}

pub fn lambda_schedule(lambda_base: f64, step_index: usize) -> f64 {
    LambdaSchedule::Constant.at(lambda_base, step_index)
}
