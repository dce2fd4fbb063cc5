//! Layer primitives with their exact reverse-mode derivatives.
//!
//! Frame-level activations are `T x D` matrices, one row per frame.

use nalgebra::{DMatrix, DVector};

use super::Context;
use crate::error::{Error, Result};

/// Variance floor inside statistics pooling.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Batch-norm epsilon.
pub const BN_EPSILON: f64 = 1e-5;

/// Stacks the context-shifted copies of `input` side by side.
///
/// Row `t'` of the result is `[x(t'+o_1-o_min), ..., x(t'+o_m-o_min)]`, so
/// the output has `T - span` rows and `m * D` columns.
pub fn splice(input: &DMatrix<f64>, context: &Context) -> Result<DMatrix<f64>> {
    let (rows, dim) = input.shape();
    let span = context.span();
    if rows <= span {
        return Err(Error::invalid(format!(
            "{rows} frames cannot cover a context span of {span}"
        )));
    }
    let out_rows = rows - span;
    let mut out = DMatrix::zeros(out_rows, dim * context.len());
    let lo = context.min();
    for (block, &offset) in context.offsets().iter().enumerate() {
        let start = (offset - lo) as usize;
        out.view_mut((0, block * dim), (out_rows, dim))
            .copy_from(&input.view((start, 0), (out_rows, dim)));
    }
    Ok(out)
}

/// Adjoint of [`splice`]: folds a spliced gradient back onto `rows` input frames.
pub fn unsplice(grad: &DMatrix<f64>, context: &Context, rows: usize) -> DMatrix<f64> {
    let dim = grad.ncols() / context.len();
    let out_rows = grad.nrows();
    let mut out = DMatrix::zeros(rows, dim);
    let lo = context.min();
    for (block, &offset) in context.offsets().iter().enumerate() {
        let start = (offset - lo) as usize;
        let mut dst = out.view_mut((start, 0), (out_rows, dim));
        dst += grad.view((0, block * dim), (out_rows, dim));
    }
    out
}

/// `x W^T + 1 b^T`.
pub fn affine(
    x: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    bias: Option<&DVector<f64>>,
) -> DMatrix<f64> {
    let mut out = x * weight.transpose();
    if let Some(b) = bias {
        for mut row in out.row_iter_mut() {
            row += b.transpose();
        }
    }
    out
}

/// Valid temporal convolution: spliced input times `weight`, plus `bias`.
pub fn tdnn_forward(
    weight: &DMatrix<f64>,
    bias: &DVector<f64>,
    context: &Context,
    input: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_cols(weight, input.ncols() * context.len(), "tdnn weight columns")?;
    let spliced = splice(input, context)?;
    Ok(affine(&spliced, weight, Some(bias)))
}

/// Gradients of an affine map `y = x W^T + b` given `dy`:
/// returns `(dW, db, dx)`.
pub fn affine_backward(
    x: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    grad_out: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let d_weight = grad_out.tr_mul(x);
    let d_bias = DVector::from_iterator(grad_out.ncols(), grad_out.column_iter().map(|c| c.sum()));
    let d_x = grad_out * weight;
    (d_weight, d_bias, d_x)
}

/// Splits a factorized layer's context between its two factors.
///
/// `{-k, 0, k}` becomes `{-k, 0}` then `{0, k}`; `{0}` stays `{0}` for both.
pub fn split_context(context: &Context) -> Result<(Context, Context)> {
    match context.offsets() {
        [0] => Ok((Context::single(), Context::single())),
        [a, 0, b] if *a == -*b && *b > 0 => {
            Ok((Context::new(vec![*a, 0])?, Context::new(vec![0, *b])?))
        }
        other => Err(Error::invalid(format!(
            "factorized layers need a context of {{0}} or {{-k,0,k}}, got {other:?}"
        ))),
    }
}

/// Factorized TDNN: a bias-free convolution into the bottleneck followed
/// by a second convolution back out, with the bias on the output.
pub fn factorized_tdnn_forward(
    factor1: &DMatrix<f64>,
    factor2: &DMatrix<f64>,
    bias: &DVector<f64>,
    context: &Context,
    input: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (c1, c2) = split_context(context)?;
    check_cols(factor1, input.ncols() * c1.len(), "factor1 columns")?;
    check_cols(factor2, factor1.nrows() * c2.len(), "factor2 columns")?;
    let inner = affine(&splice(input, &c1)?, factor1, None);
    Ok(affine(&splice(&inner, &c2)?, factor2, Some(bias)))
}

fn check_cols(m: &DMatrix<f64>, want: usize, context: &'static str) -> Result<()> {
    if m.ncols() != want {
        return Err(Error::Dimension {
            expected: want,
            actual: m.ncols(),
            context,
        });
    }
    Ok(())
}

/// Nearest matrix (Frobenius norm) with orthonormal rows: `U V^T` from the
/// thin SVD `M = U S V^T`.
pub fn semi_orthogonalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if rows > cols {
        return Err(Error::invalid(format!(
            "cannot give a {rows}x{cols} matrix orthonormal rows"
        )));
    }
    if rows == 0 {
        return Ok(m.clone());
    }
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv <= max_sv * 1e-12 {
        return Err(Error::Numerical(format!(
            "matrix is rank deficient (singular values {min_sv:e}..{max_sv:e})"
        )));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    Ok(u * v_t)
}

/// `||M M^T - I||_F`.
pub fn orthonormality_residual(m: &DMatrix<f64>) -> f64 {
    let gram = m * m.transpose();
    (gram - DMatrix::identity(m.nrows(), m.nrows())).norm()
}

/// Per-dimension mean followed by per-dimension population standard
/// deviation, `sqrt(max(var, 1e-10))`.
pub fn stats_pool(frames: &DMatrix<f64>) -> DVector<f64> {
    let (n, d) = frames.shape();
    let mut out = DVector::zeros(2 * d);
    let inv = 1.0 / n as f64;
    for c in 0..d {
        let col = frames.column(c);
        let mean = col.sum() * inv;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() * inv;
        out[c] = mean;
        out[d + c] = var.max(VARIANCE_FLOOR).sqrt();
    }
    out
}

/// Adjoint of [`stats_pool`] for the frames it pooled.
pub fn stats_pool_backward(
    frames: &DMatrix<f64>,
    pooled: &DVector<f64>,
    grad: &DVector<f64>,
) -> DMatrix<f64> {
    let (n, d) = frames.shape();
    let inv = 1.0 / n as f64;
    let mut out = DMatrix::zeros(n, d);
    for c in 0..d {
        let mean = pooled[c];
        let std = pooled[d + c];
        let g_mean = grad[c] * inv;
        // the floor is active when std^2 equals it; no gradient flows there
        let g_std = if std * std > VARIANCE_FLOOR * (1.0 + 1e-9) {
            grad[d + c] * inv / std
        } else {
            0.0
        };
        for r in 0..n {
            out[(r, c)] = g_mean + g_std * (frames[(r, c)] - mean);
        }
    }
    out
}

/// Cached quantities of a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: DMatrix<f64>,
    pub inv_std: DVector<f64>,
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// Batch norm over rows using the batch's own moments.
pub fn batch_norm_train(
    x: &DMatrix<f64>,
    scale: &DVector<f64>,
    shift: &DVector<f64>,
) -> (DMatrix<f64>, BatchNormCache) {
    let (n, d) = x.shape();
    let inv_n = 1.0 / n as f64;
    let mut mean = DVector::zeros(d);
    let mut var = DVector::zeros(d);
    let mut inv_std = DVector::zeros(d);
    let mut normalized = DMatrix::zeros(n, d);
    let mut out = DMatrix::zeros(n, d);
    for c in 0..d {
        let col = x.column(c);
        let m = col.sum() * inv_n;
        let v = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() * inv_n;
        let is = 1.0 / (v + BN_EPSILON).sqrt();
        mean[c] = m;
        var[c] = v;
        inv_std[c] = is;
        for r in 0..n {
            let h = (x[(r, c)] - m) * is;
            normalized[(r, c)] = h;
            out[(r, c)] = scale[c] * h + shift[c];
        }
    }
    (
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
        },
    )
}

/// Batch norm with stored moments.
pub fn batch_norm_infer(
    x: &DMatrix<f64>,
    scale: &DVector<f64>,
    shift: &DVector<f64>,
    mean: &DVector<f64>,
    var: &DVector<f64>,
) -> DMatrix<f64> {
    let mut out = x.clone();
    for c in 0..x.ncols() {
        let is = 1.0 / (var[c] + BN_EPSILON).sqrt();
        for v in out.column_mut(c).iter_mut() {
            *v = scale[c] * (*v - mean[c]) * is + shift[c];
        }
    }
    out
}

/// Returns `(d_scale, d_shift, d_x)`.
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    scale: &DVector<f64>,
    grad: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let (n, d) = grad.shape();
    let nf = n as f64;
    let mut d_scale = DVector::zeros(d);
    let mut d_shift = DVector::zeros(d);
    let mut d_x = DMatrix::zeros(n, d);
    for c in 0..d {
        let g = grad.column(c);
        let h = cache.normalized.column(c);
        let sum_g = g.sum();
        let sum_gh = g.dot(&h);
        d_scale[c] = sum_gh;
        d_shift[c] = sum_g;
        let k = scale[c] * cache.inv_std[c] / nf;
        for r in 0..n {
            d_x[(r, c)] = k * (nf * g[r] - sum_g - h[r] * sum_gh);
        }
    }
    (d_scale, d_shift, d_x)
}

pub fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(
    logits: &DMatrix<f64>,
    labels: &[usize],
) -> Result<(f64, DMatrix<f64>)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: labels.len(),
            context: "labels per logit row",
        });
    }
    let mut grad = DMatrix::zeros(n, k);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::invalid(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.max();
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for c in 0..k {
            grad[(r, c)] = (row[c] - log_z).exp() / n as f64;
        }
        grad[(r, label)] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}
