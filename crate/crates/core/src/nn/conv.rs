//! Stride-1, same-padding 2D convolutions.
//!
//! The full convolution lowers each input window into a row of a column
//! matrix and performs one matrix product per batch (im2col). The depthwise
//! variant uses direct loops since its kernels are tiny.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix4};
use rand::Rng;

use super::init::{kaiming_normal, trunc_normal};
use super::{join, Visit};
use crate::tensor::Param;

/// Initialization scheme for convolution and linear weights.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal { std: f64 },
    Kaiming,
}

pub(crate) fn init_weight<R: Rng>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> ArrayD<f64> {
    match init {
        Init::TruncNormal { std } => trunc_normal(shape, std, rng),
        Init::Kaiming => kaiming_normal(shape, fan_in, rng),
    }
}

/// im2col for stride 1 and symmetric zero padding `(ph, pw)`.
/// Output shape: `(batch * height * width, channels * kh * kw)`.
fn im2col(x: &Array4<f64>, kh: usize, kw: usize, ph: usize, pw: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut cols = Array2::zeros((b * h * w, c * kh * kw));
    for bi in 0..b {
        for oy in 0..h {
            for ox in 0..w {
                let row = (bi * h + oy) * w + ox;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = oy + ky;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if iy >= ph && iy < h + ph && ix >= pw && ix < w + pw {
                                cols[[row, col]] = x[[bi, ci, iy - ph, ix - pw]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) -> Array4<f64> {
    let (b, c, h, w) = shape;
    let mut x = Array4::zeros(shape);
    for bi in 0..b {
        for oy in 0..h {
            for ox in 0..w {
                let row = (bi * h + oy) * w + ox;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = oy + ky;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if iy >= ph && iy < h + ph && ix >= pw && ix < w + pw {
                                x[[bi, ci, iy - ph, ix - pw]] += cols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    x_shape: (usize, usize, usize, usize),
}

/// Full 2D convolution, stride 1, same padding, with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, kh: usize, kw: usize, init: Init, rng: &mut R) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sides must be odd");
        let weight = init_weight(&[out_c, in_c, kh, kw], in_c * kh * kw, init, rng);
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(ArrayD::zeros(ndarray::IxDyn(&[out_c]))),
            in_c,
            out_c,
            kh,
            kw,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    fn weight2(&self) -> Array2<f64> {
        let v = self.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        v.to_shape((self.out_c, self.in_c * self.kh * self.kw))
            .unwrap()
            .to_owned()
    }

    fn run(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let cols = im2col(x, self.kh, self.kw, self.kh / 2, self.kw / 2);
        let mut y2 = cols.dot(&self.weight2().t());
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        y2 += &bias.broadcast((b * h * w, self.out_c)).unwrap();
        let y = y2
            .into_shape_with_order((b, h, w, self.out_c))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (y, cols)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.run(x).0
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (y, cols) = self.run(x);
        (y, ConvCache { cols, x_shape: x.dim() })
    }

    pub fn backward(&mut self, cache: &ConvCache, gy: &Array4<f64>) -> Array4<f64> {
        let (b, _, h, w) = cache.x_shape;
        let gy2 = gy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * h * w, self.out_c))
            .unwrap();
        let gw = gy2.t().dot(&cache.cols);
        self.weight.grad += &gw
            .into_shape_with_order((self.out_c, self.in_c, self.kh, self.kw))
            .unwrap()
            .into_dyn();
        self.bias.grad += &gy2.sum_axis(Axis(0)).into_dyn();
        let gcols = gy2.dot(&self.weight2());
        col2im(&gcols, cache.x_shape, self.kh, self.kw, self.kh / 2, self.kw / 2)
    }
}

impl Visit for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct DwConvCache {
    x: Array4<f64>,
}

/// Depthwise 2D convolution, stride 1, same padding, with bias.
/// Weight layout is `(channels, 1, kh, kw)`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: Param,
    pub bias: Param,
    channels: usize,
    kh: usize,
    kw: usize,
}

impl DepthwiseConv2d {
    pub fn new<R: Rng>(channels: usize, kh: usize, kw: usize, init: Init, rng: &mut R) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sides must be odd");
        let weight = init_weight(&[channels, 1, kh, kw], kh * kw, init, rng);
        DepthwiseConv2d {
            weight: Param::new(weight),
            bias: Param::new(ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            channels,
            kh,
            kw,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "depthwise input channels");
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let wv = self.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bias[ci];
                        for ky in 0..self.kh {
                            let iy = (oy + ky).wrapping_sub(ph);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let ix = (ox + kx).wrapping_sub(pw);
                                if ix >= w {
                                    continue;
                                }
                                acc += wv[[ci, 0, ky, kx]] * x[[bi, ci, iy, ix]];
                            }
                        }
                        y[[bi, ci, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, DwConvCache) {
        (self.forward(x), DwConvCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &DwConvCache, gy: &Array4<f64>) -> Array4<f64> {
        let x = &cache.x;
        let (b, c, h, w) = x.dim();
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let wv = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let mut gx = Array4::zeros((b, c, h, w));
        let mut gw = Array4::zeros((c, 1, self.kh, self.kw));
        let mut gb = Array1::zeros(c);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..h {
                    for ox in 0..w {
                        let g = gy[[bi, ci, oy, ox]];
                        gb[ci] += g;
                        for ky in 0..self.kh {
                            let iy = (oy + ky).wrapping_sub(ph);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let ix = (ox + kx).wrapping_sub(pw);
                                if ix >= w {
                                    continue;
                                }
                                gw[[ci, 0, ky, kx]] += g * x[[bi, ci, iy, ix]];
                                gx[[bi, ci, iy, ix]] += g * wv[[ci, 0, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        self.weight.grad += &gw.into_dyn();
        self.bias.grad += &gb.into_dyn();
        gx
    }
}

impl Visit for DepthwiseConv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
