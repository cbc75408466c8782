//! Elementwise activations with explicit backward rules.

use ndarray::Array4;

/// ReLU. The returned mask marks the positive entries for the backward pass.
pub fn relu_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<bool>) {
    let mask = x.mapv(|v| v > 0.0);
    let y = x.mapv(|v| v.max(0.0));
    (y, mask)
}

pub fn relu_backward(mask: &Array4<bool>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    for (g, m) in gx.iter_mut().zip(mask.iter()) {
        if !*m {
            *g = 0.0;
        }
    }
    gx
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(sigmoid_scalar)
}

/// Backward through sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    for (g, s) in gx.iter_mut().zip(y.iter()) {
        *g *= s * (1.0 - s);
    }
    gx
}
