//! Untaped elementwise functions, losses, and the dense affine kernel.

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;
/// Norms at or below this are treated as zero by cosine similarity.
pub const NORM_EPS: f64 = 1e-12;
/// Beyond `|beta * x| > SOFTPLUS_BRANCH` softplus switches to its asymptotic forms.
pub const SOFTPLUS_BRANCH: f64 = 30.0;

/// `out[b, o] = sum_i input[b, i] * weight[i, o] + bias[o]`.
pub fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, i) = matrix_dims(input, "affine input")?;
    let (wi, o) = matrix_dims(weight, "affine weight")?;
    if wi != i || bias.len() != o {
        return Err(Error::Dimension(format!(
            "affine: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; b * o];
    affine_kernel(input.data(), weight.data(), bias.data(), &mut out, b, i, o);
    Tensor::new(vec![b, o], out)
}

pub(crate) fn affine_kernel(x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64], b: usize, i: usize, o: usize) {
    for r in 0..b {
        let orow = &mut out[r * o..(r + 1) * o];
        orow.copy_from_slice(bias);
        let xrow = &x[r * i..(r + 1) * i];
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[k * o..(k + 1) * o];
            for (acc, &wv) in orow.iter_mut().zip(wrow) {
                *acc += xv * wv;
            }
        }
    }
}

pub(crate) fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over a slice, shifted by the maximum for stability.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `(1/beta) * ln(1 + exp(beta * x))`.
///
/// For `beta * x > 30` this returns `x + exp(-beta x) / beta` and for
/// `beta * x < -30` it returns `exp(beta x) / beta`; both agree with the
/// direct form to well below one ulp of the result there.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > SOFTPLUS_BRANCH {
        x + (-bx).exp() / beta
    } else if bx < -SOFTPLUS_BRANCH {
        bx.exp() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Two-term binary cross-entropy on a clamped probability.
pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Cosine similarity; 0 when either operand has (near) zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= NORM_EPS || nb <= NORM_EPS {
        log::debug!("degenerate cosine similarity: zero-norm operand");
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
