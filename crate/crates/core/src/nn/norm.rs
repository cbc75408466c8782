//! Batch and instance normalization over `(batch, channels, height, width)`.

use ndarray::{Array1, Array2, Array4, ArrayD, Ix1, IxDyn};
use serde::{Deserialize, Serialize};

use super::{join, Visit};
use crate::tensor::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone)]
enum InvStd {
    /// Training-mode batch norm: one inverse std per channel.
    PerChannel(Array1<f64>),
    /// Instance norm: one inverse std per (sample, channel).
    PerInstance(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Array4<f64>,
    inv: InvStd,
}

/// Normalization layer with learnable scale and shift.
///
/// Batch mode keeps running statistics (updated in training, used in
/// evaluation). Instance mode normalizes each sample independently and
/// behaves identically in both modes.
#[derive(Debug, Clone)]
pub struct Norm2d {
    pub kind: NormKind,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl Norm2d {
    pub fn new(channels: usize, kind: NormKind) -> Self {
        Norm2d {
            kind,
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "norm input channels");
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        match self.kind {
            NormKind::Batch => {
                let rm = self.running_mean.view().into_dimensionality::<Ix1>().unwrap();
                let rv = self.running_var.view().into_dimensionality::<Ix1>().unwrap();
                let mut y = x.clone();
                for ci in 0..c {
                    let inv = 1.0 / (rv[ci] + self.eps).sqrt();
                    let (g, bi, m) = (gamma[ci], beta[ci], rm[ci]);
                    for v in y.index_axis_mut(ndarray::Axis(1), ci).iter_mut() {
                        *v = g * (*v - m) * inv + bi;
                    }
                }
                y
            }
            NormKind::Instance => {
                let mut y = Array4::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = x.index_axis(ndarray::Axis(0), bi);
                        let plane = plane.index_axis(ndarray::Axis(0), ci);
                        let n = (h * w) as f64;
                        let mean = plane.sum() / n;
                        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + self.eps).sqrt();
                        for yy in 0..h {
                            for xx in 0..w {
                                y[[bi, ci, yy, xx]] =
                                    gamma[ci] * (x[[bi, ci, yy, xx]] - mean) * inv + beta[ci];
                            }
                        }
                    }
                }
                y
            }
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, NormCache) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "norm input channels");
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        match self.kind {
            NormKind::Batch => {
                let n = (b * h * w) as f64;
                let mut xhat = Array4::zeros((b, c, h, w));
                let mut inv_std = Array1::zeros(c);
                let mut y = Array4::zeros((b, c, h, w));
                for ci in 0..c {
                    let lane = x.index_axis(ndarray::Axis(1), ci);
                    let mean = lane.sum() / n;
                    let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std[ci] = inv;
                    for bi in 0..b {
                        for yy in 0..h {
                            for xx in 0..w {
                                let xh = (x[[bi, ci, yy, xx]] - mean) * inv;
                                xhat[[bi, ci, yy, xx]] = xh;
                                y[[bi, ci, yy, xx]] = gamma[ci] * xh + beta[ci];
                            }
                        }
                    }
                    // Running variance uses the unbiased estimate, matching
                    // the usual deep learning convention.
                    let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                    self.running_mean[[ci]] =
                        (1.0 - self.momentum) * self.running_mean[[ci]] + self.momentum * mean;
                    self.running_var[[ci]] =
                        (1.0 - self.momentum) * self.running_var[[ci]] + self.momentum * unbiased;
                }
                (y, NormCache { xhat, inv: InvStd::PerChannel(inv_std) })
            }
            NormKind::Instance => {
                let n = (h * w) as f64;
                let mut xhat = Array4::zeros((b, c, h, w));
                let mut inv_std = Array2::zeros((b, c));
                let mut y = Array4::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = x.index_axis(ndarray::Axis(0), bi);
                        let plane = plane.index_axis(ndarray::Axis(0), ci);
                        let mean = plane.sum() / n;
                        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + self.eps).sqrt();
                        inv_std[[bi, ci]] = inv;
                        for yy in 0..h {
                            for xx in 0..w {
                                let xh = (x[[bi, ci, yy, xx]] - mean) * inv;
                                xhat[[bi, ci, yy, xx]] = xh;
                                y[[bi, ci, yy, xx]] = gamma[ci] * xh + beta[ci];
                            }
                        }
                    }
                }
                (y, NormCache { xhat, inv: InvStd::PerInstance(inv_std) })
            }
        }
    }

    pub fn backward(&mut self, cache: &NormCache, gy: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = gy.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut gx = Array4::zeros((b, c, h, w));
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        match &cache.inv {
            InvStd::PerChannel(inv_std) => {
                let n = (b * h * w) as f64;
                for ci in 0..c {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bi in 0..b {
                        for yy in 0..h {
                            for xx in 0..w {
                                let g = gy[[bi, ci, yy, xx]];
                                let xh = cache.xhat[[bi, ci, yy, xx]];
                                dbeta[ci] += g;
                                dgamma[ci] += g * xh;
                                sum_g += g;
                                sum_gx += g * xh;
                            }
                        }
                    }
                    let inv = inv_std[ci];
                    for bi in 0..b {
                        for yy in 0..h {
                            for xx in 0..w {
                                let g = gy[[bi, ci, yy, xx]];
                                let xh = cache.xhat[[bi, ci, yy, xx]];
                                gx[[bi, ci, yy, xx]] =
                                    gamma[ci] * inv / n * (n * g - sum_g - xh * sum_gx);
                            }
                        }
                    }
                }
            }
            InvStd::PerInstance(inv_std) => {
                let n = (h * w) as f64;
                for bi in 0..b {
                    for ci in 0..c {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for yy in 0..h {
                            for xx in 0..w {
                                let g = gy[[bi, ci, yy, xx]];
                                let xh = cache.xhat[[bi, ci, yy, xx]];
                                dbeta[ci] += g;
                                dgamma[ci] += g * xh;
                                sum_g += g;
                                sum_gx += g * xh;
                            }
                        }
                        let inv = inv_std[[bi, ci]];
                        for yy in 0..h {
                            for xx in 0..w {
                                let g = gy[[bi, ci, yy, xx]];
                                let xh = cache.xhat[[bi, ci, yy, xx]];
                                gx[[bi, ci, yy, xx]] =
                                    gamma[ci] * inv / n * (n * g - sum_g - xh * sum_gx);
                            }
                        }
                    }
                }
            }
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        gx
    }
}

impl Visit for Norm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn train_output_is_normalized() {
        let mut norm = Norm2d::new(2, NormKind::Batch);
        let x = Array::from_shape_fn((3, 2, 4, 4), |(b, c, y, xx)| {
            (b * 32 + c * 16 + y * 4 + xx) as f64 * 0.3 + 5.0
        });
        let (y, _) = norm.forward_train(&x);
        for ci in 0..2 {
            let lane = y.index_axis(ndarray::Axis(1), ci);
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut norm = Norm2d::new(1, NormKind::Batch);
        let x = Array::from_shape_fn((4, 1, 3, 3), |(b, _, y, xx)| (b + y + xx) as f64);
        for _ in 0..400 {
            let _ = norm.forward_train(&x);
        }
        // Feeding the same batch repeatedly converges the running stats to
        // the batch mean and the unbiased batch variance.
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let y_eval = norm.forward_eval(&x);
        for (y, v) in y_eval.iter().zip(x.iter()) {
            let want = (v - mean) / (var + norm.eps).sqrt();
            assert!((y - want).abs() < 1e-6, "{y} vs {want}");
        }
    }

    #[test]
    fn instance_norm_is_mode_independent() {
        let mut norm = Norm2d::new(2, NormKind::Instance);
        let x = Array::from_shape_fn((2, 2, 4, 4), |(b, c, y, xx)| {
            ((b * 7 + c * 3 + y * 5 + xx) % 11) as f64 - 4.0
        });
        let (y_train, _) = norm.forward_train(&x);
        let y_eval = norm.forward_eval(&x);
        assert_eq!(y_train, y_eval);
    }
}
