//! Forward and backward kernels for the layer types in the projection MLP.
//! Row-major batches: one sample per row.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::Float;

/// `x · W + b` with `W` stored `in × out`.
pub fn linear_forward<F: Float>(x: ArrayView2<F>, weight: ArrayView2<F>, bias: ArrayView1<F>) -> Array2<F> {
    let mut y = x.dot(&weight);
    y += &bias;
    y
}

/// Returns `(dW, db)` and, when `need_input_grad`, `dx`.
pub fn linear_backward<F: Float>(
    x: ArrayView2<F>,
    weight: ArrayView2<F>,
    dy: ArrayView2<F>,
    need_input_grad: bool,
) -> (Array2<F>, Array1<F>, Option<Array2<F>>) {
    let dw = x.t().dot(&dy);
    let db = dy.sum_axis(Axis(0));
    let dx = need_input_grad.then(|| dy.dot(&weight.t()));
    (dw, db, dx)
}

/// Per-feature batch statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormStats<F> {
    pub mean: Array1<F>,
    /// Biased (1/B) variance, used for normalization.
    pub var: Array1<F>,
    pub inv_std: Array1<F>,
}

/// Training-mode batch normalization. Returns the normalized input `x̂`
/// (before scale and shift), the output `γ·x̂ + β`, and the batch statistics.
pub fn batchnorm_train<F: Float>(
    x: ArrayView2<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    eps: F,
) -> (Array2<F>, Array2<F>, BatchNormStats<F>) {
    let n = F::from(x.nrows()).unwrap();
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &gamma + &beta;
    (xhat, y, BatchNormStats { mean, var, inv_std })
}

pub fn batchnorm_eval<F: Float>(
    x: ArrayView2<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    running_mean: ArrayView1<F>,
    running_var: ArrayView1<F>,
    eps: F,
) -> Array2<F> {
    let scale = Zip::from(&gamma).and(&running_var).map_collect(|&g, &v| g / (v + eps).sqrt());
    let shift = Zip::from(&beta).and(&running_mean).and(&scale).map_collect(|&b, &m, &s| b - m * s);
    &x * &scale + &shift
}

/// Backward through training-mode batch normalization using batch
/// statistics: `dx = inv_std/B · (B·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))`.
pub fn batchnorm_backward<F: Float>(
    dy: ArrayView2<F>,
    xhat: ArrayView2<F>,
    gamma: ArrayView1<F>,
    inv_std: ArrayView1<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let n = F::from(dy.nrows()).unwrap();
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (&dy * &xhat).sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &xhat).sum_axis(Axis(0));
    let mut dx = dxhat * n - &sum_dxhat - &(&xhat * &sum_dxhat_xhat);
    dx *= &(inv_std.mapv(|s| s / n));
    (dx, dgamma, dbeta)
}

/// NaN passes through so that divergence is not masked.
pub fn relu<F: Float>(x: &mut Array2<F>) {
    x.mapv_inplace(|v| if v < F::zero() { F::zero() } else { v });
}

/// Gradient through ReLU given its input.
pub fn relu_backward<F: Float>(dy: &mut Array2<F>, pre: ArrayView2<F>) {
    Zip::from(dy).and(pre).for_each(|d, &p| {
        if p <= F::zero() {
            *d = F::zero();
        }
    });
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise
/// `1/(1−p)`, so the masked activation keeps its expectation.
pub fn dropout_mask<F: Float, R: Rng>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<F> {
    let keep = F::from(1.0 / (1.0 - p)).unwrap();
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { F::zero() } else { keep })
}
