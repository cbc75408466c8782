//! Slice interaction module.
//!
//! Three light branches refine a stack of adjacent slices before it enters
//! the encoder: channel attention reweights whole slices, spatial attention
//! reweights pixels, and a depthwise relation branch mixes information along
//! the slice axis. The branch outputs are blended back into the input as a
//! weighted residual:
//!
//! `out = x + alpha * x_ca + beta * x_sa + gamma * x_rel`

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::nn::conv::Init;
use crate::nn::{
    join, relu_backward, relu_forward, sigmoid, sigmoid_backward, Conv2d, ConvCache,
    DepthwiseConv2d, DwConvCache, Linear, LinearCache, Norm2d, NormCache, NormKind, Visit,
};
use crate::tensor::{FeatureStack, Param};

/// Standard deviation for the truncated normal init of all SIM weights.
const SIM_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Fusion weight of the channel attention branch.
    pub alpha: f64,
    /// Fusion weight of the spatial attention branch.
    pub beta: f64,
    /// Fusion weight of the slice relation branch.
    pub gamma: f64,
    /// Bottleneck reduction in the channel attention MLP.
    pub reduction_ratio: usize,
    /// Side length of the spatial attention convolution kernel.
    pub spatial_kernel: usize,
    /// Kernel sides of the two depthwise convolutions in the relation branch.
    pub relation_kernels: (usize, usize),
    /// Normalization used inside the spatial and relation branches.
    pub norm: NormKind,
    /// Treat the fusion weights as trainable parameters instead of constants.
    pub learnable_weights: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.4,
            reduction_ratio: 2,
            spatial_kernel: 7,
            relation_kernels: (1, 3),
            norm: NormKind::Batch,
            learnable_weights: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels == 0 {
            return Err(SegError::config("sim requires at least one channel"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(SegError::config(format!(
                    "sim fusion weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.reduction_ratio == 0 {
            return Err(SegError::config("sim reduction_ratio must be at least 1"));
        }
        if self.reduction_ratio > channels {
            return Err(SegError::config(format!(
                "sim reduction_ratio {} exceeds channel count {}",
                self.reduction_ratio, channels
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(SegError::config("sim spatial_kernel must be odd"));
        }
        let (k1, k2) = self.relation_kernels;
        if k1 % 2 == 0 || k2 % 2 == 0 {
            return Err(SegError::config("sim relation_kernels must be odd"));
        }
        Ok(())
    }

    /// Hidden width of the channel attention MLP: `ceil(channels / ratio)`,
    /// never below one.
    pub fn hidden_width(&self, channels: usize) -> usize {
        ((channels + self.reduction_ratio - 1) / self.reduction_ratio).max(1)
    }
}

/// Trainable state of one slice interaction block.
#[derive(Debug, Clone)]
pub struct SimParams {
    /// Channel attention bottleneck, `(hidden, channels)`, no bias.
    pub w1: Linear,
    /// Channel attention expansion, `(channels, hidden)`, no bias.
    pub w2: Linear,
    /// Spatial attention convolution collapsing channels to one map.
    pub spatial_conv: Conv2d,
    pub spatial_norm: Norm2d,
    /// Pointwise depthwise convolution opening the relation branch.
    pub rel_dw1: DepthwiseConv2d,
    pub rel_norm: Norm2d,
    /// Wider depthwise convolution closing the relation branch.
    pub rel_dw3: DepthwiseConv2d,
    /// Present only when the fusion weights are learnable; layout `[alpha, beta, gamma]`.
    pub fusion_weights: Option<Param>,
    channels: usize,
}

/// Build freshly initialized SIM parameters for the given channel count.
pub fn init_sim_params(channels: usize, cfg: &SimConfig, seed: u64) -> Result<SimParams> {
    cfg.validate(channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = cfg.hidden_width(channels);
    let init = Init::TruncNormal { std: SIM_INIT_STD };
    let (k1, k2) = cfg.relation_kernels;
    let fusion_weights = cfg.learnable_weights.then(|| {
        let mut w = ArrayD::zeros(IxDyn(&[3]));
        w[[0]] = cfg.alpha;
        w[[1]] = cfg.beta;
        w[[2]] = cfg.gamma;
        Param::new(w)
    });
    Ok(SimParams {
        w1: Linear::new(channels, hidden, false, init, &mut rng),
        w2: Linear::new(hidden, channels, false, init, &mut rng),
        spatial_conv: Conv2d::new(channels, 1, cfg.spatial_kernel, cfg.spatial_kernel, init, &mut rng),
        spatial_norm: Norm2d::new(1, cfg.norm),
        rel_dw1: DepthwiseConv2d::new(channels, k1, k1, init, &mut rng),
        rel_norm: Norm2d::new(channels, cfg.norm),
        rel_dw3: DepthwiseConv2d::new(channels, k2, k2, init, &mut rng),
        fusion_weights,
        channels,
    })
}

impl SimParams {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Current fusion weights `(alpha, beta, gamma)`, taken from the
    /// trainable parameter when present and from the config otherwise.
    pub fn fusion(&self, cfg: &SimConfig) -> (f64, f64, f64) {
        match &self.fusion_weights {
            Some(p) => (p.value[[0]], p.value[[1]], p.value[[2]]),
            None => (cfg.alpha, cfg.beta, cfg.gamma),
        }
    }

    fn check_input(&self, channels: usize) -> Result<()> {
        if channels != self.channels {
            return Err(SegError::config(format!(
                "sim params built for {} channels, input has {}",
                self.channels, channels
            )));
        }
        Ok(())
    }
}

fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut gap = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), bi);
            gap[[bi, ci]] = plane.index_axis(ndarray::Axis(0), ci).sum() / n;
        }
    }
    gap
}

fn sigmoid2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(crate::nn::act::sigmoid_scalar)
}

fn scale_by_channel(x: &Array4<f64>, a: &Array2<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let s = a[[bi, ci]];
            for yy in 0..h {
                for xx in 0..w {
                    y[[bi, ci, yy, xx]] *= s;
                }
            }
        }
    }
    y
}

fn scale_by_map(x: &Array4<f64>, a: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    y[[bi, ci, yy, xx]] *= a[[bi, 0, yy, xx]];
                }
            }
        }
    }
    y
}

/// Channel attention: squeeze each slice to a scalar, pass it through a
/// bottleneck MLP, and reweight the slices with the resulting sigmoid gates.
/// Returns the gates as `(batch, channels, 1, 1)` plus the reweighted stack.
pub fn channel_attention(x: &FeatureStack, p: &SimParams) -> Result<(Array4<f64>, FeatureStack)> {
    p.check_input(x.channels())?;
    let xv = x.values();
    let gap = global_avg_pool(xv);
    let hidden = p.w1.forward(&gap).mapv(|v| v.max(0.0));
    let attn = sigmoid2(&p.w2.forward(&hidden));
    let y = scale_by_channel(xv, &attn);
    let attn4 = attn.insert_axis(ndarray::Axis(2)).insert_axis(ndarray::Axis(3));
    Ok((attn4, FeatureStack::from_trusted(y)))
}

/// Spatial attention: collapse the stack to one map with a wide convolution,
/// normalize, gate with a sigmoid, and reweight every pixel. Returns the
/// attention map `(batch, 1, height, width)` and the reweighted stack.
pub fn spatial_attention(x: &FeatureStack, p: &SimParams) -> Result<(Array4<f64>, FeatureStack)> {
    p.check_input(x.channels())?;
    let xv = x.values();
    let t = p.spatial_conv.forward(xv);
    let attn = sigmoid(&p.spatial_norm.forward_eval(&t));
    let y = scale_by_map(xv, &attn);
    Ok((attn, FeatureStack::from_trusted(y)))
}

/// Slice relation: a pointwise depthwise convolution, normalization and ReLU,
/// then a wider depthwise convolution. Each channel keeps its own filters, so
/// the branch models per-slice spatial context rather than channel mixing.
pub fn slice_relation(x: &FeatureStack, p: &SimParams) -> Result<FeatureStack> {
    p.check_input(x.channels())?;
    let xv = x.values();
    let t = p.rel_dw1.forward(xv);
    let (r, _) = relu_forward(&p.rel_norm.forward_eval(&t));
    Ok(FeatureStack::from_trusted(p.rel_dw3.forward(&r)))
}

/// Full slice interaction block in inference mode.
pub fn sim_forward(x: &FeatureStack, p: &SimParams, cfg: &SimConfig) -> Result<FeatureStack> {
    cfg.validate(x.channels())?;
    let (alpha, beta, gamma) = p.fusion(cfg);
    let (_, x_ca) = channel_attention(x, p)?;
    let (_, x_sa) = spatial_attention(x, p)?;
    let x_rel = slice_relation(x, p)?;
    let mut y = x.values().clone();
    y.scaled_add(alpha, x_ca.values());
    y.scaled_add(beta, x_sa.values());
    y.scaled_add(gamma, x_rel.values());
    Ok(FeatureStack::from_trusted(y))
}

#[derive(Debug, Clone)]
struct ChanCache {
    attn: Array2<f64>,
    relu_mask: Array2<bool>,
    w1c: LinearCache,
    w2c: LinearCache,
}

#[derive(Debug, Clone)]
struct SpatCache {
    attn: Array4<f64>,
    convc: ConvCache,
    normc: NormCache,
}

#[derive(Debug, Clone)]
struct RelCache {
    dw1c: DwConvCache,
    normc: NormCache,
    relu_mask: Array4<bool>,
    dw3c: DwConvCache,
}

/// Everything the backward pass needs from one training-mode forward.
#[derive(Debug, Clone)]
pub struct SimCache {
    x: Array4<f64>,
    x_ca: Array4<f64>,
    x_sa: Array4<f64>,
    x_rel: Array4<f64>,
    ca: ChanCache,
    sa: SpatCache,
    rel: RelCache,
}

impl SimParams {
    /// Training-mode forward: same math as [`sim_forward`] but normalization
    /// layers use batch statistics and update their running averages.
    pub fn forward_train(&mut self, x: &Array4<f64>, cfg: &SimConfig) -> (Array4<f64>, SimCache) {
        let (alpha, beta, gamma) = self.fusion(cfg);

        // Channel branch.
        let gap = global_avg_pool(x);
        let (pre, w1c) = self.w1.forward_train(&gap);
        let relu_mask = pre.mapv(|v| v > 0.0);
        let hidden = pre.mapv(|v| v.max(0.0));
        let (logits, w2c) = self.w2.forward_train(&hidden);
        let attn_c = sigmoid2(&logits);
        let x_ca = scale_by_channel(x, &attn_c);

        // Spatial branch.
        let (t, convc) = self.spatial_conv.forward_train(x);
        let (u, normc_s) = self.spatial_norm.forward_train(&t);
        let attn_s = sigmoid(&u);
        let x_sa = scale_by_map(x, &attn_s);

        // Relation branch.
        let (t1, dw1c) = self.rel_dw1.forward_train(x);
        let (u1, normc_r) = self.rel_norm.forward_train(&t1);
        let (r, rel_mask) = relu_forward(&u1);
        let (x_rel, dw3c) = self.rel_dw3.forward_train(&r);

        let mut y = x.clone();
        y.scaled_add(alpha, &x_ca);
        y.scaled_add(beta, &x_sa);
        y.scaled_add(gamma, &x_rel);

        let cache = SimCache {
            x: x.clone(),
            x_ca,
            x_sa,
            x_rel,
            ca: ChanCache { attn: attn_c, relu_mask, w1c, w2c },
            sa: SpatCache { attn: attn_s, convc, normc: normc_s },
            rel: RelCache { dw1c, normc: normc_r, relu_mask: rel_mask, dw3c },
        };
        (y, cache)
    }

    /// Backward pass: accumulates parameter gradients and returns the
    /// gradient with respect to the block input.
    pub fn backward(&mut self, cfg: &SimConfig, cache: &SimCache, gy: &Array4<f64>) -> Array4<f64> {
        let (alpha, beta, gamma) = self.fusion(cfg);
        let (b, c, h, w) = cache.x.dim();
        let mut gx = gy.clone();

        if let Some(fw) = &mut self.fusion_weights {
            let da = (gy * &cache.x_ca).sum();
            let db = (gy * &cache.x_sa).sum();
            let dg = (gy * &cache.x_rel).sum();
            fw.grad[[0]] += da;
            fw.grad[[1]] += db;
            fw.grad[[2]] += dg;
        }

        // Channel branch, fed by alpha * gy.
        {
            let g_out = gy.mapv(|v| v * alpha);
            // x_ca = x * a  =>  da = sum_hw(g * x), gx += g * a.
            let mut ga = Array2::zeros((b, c));
            for bi in 0..b {
                for ci in 0..c {
                    let a = cache.ca.attn[[bi, ci]];
                    for yy in 0..h {
                        for xx in 0..w {
                            let g = g_out[[bi, ci, yy, xx]];
                            ga[[bi, ci]] += g * cache.x[[bi, ci, yy, xx]];
                            gx[[bi, ci, yy, xx]] += g * a;
                        }
                    }
                }
            }
            let gz = &ga * &cache.ca.attn.mapv(|a| a * (1.0 - a));
            let gh = self.w2.backward(&cache.ca.w2c, &gz);
            let mut gh = gh;
            for (g, m) in gh.iter_mut().zip(cache.ca.relu_mask.iter()) {
                if !*m {
                    *g = 0.0;
                }
            }
            let g_gap = self.w1.backward(&cache.ca.w1c, &gh);
            let n = (h * w) as f64;
            for bi in 0..b {
                for ci in 0..c {
                    let g = g_gap[[bi, ci]] / n;
                    for yy in 0..h {
                        for xx in 0..w {
                            gx[[bi, ci, yy, xx]] += g;
                        }
                    }
                }
            }
        }

        // Spatial branch, fed by beta * gy.
        {
            let g_out = gy.mapv(|v| v * beta);
            let mut ga = Array4::zeros((b, 1, h, w));
            for bi in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        let a = cache.sa.attn[[bi, 0, yy, xx]];
                        let mut acc = 0.0;
                        for ci in 0..c {
                            let g = g_out[[bi, ci, yy, xx]];
                            acc += g * cache.x[[bi, ci, yy, xx]];
                            gx[[bi, ci, yy, xx]] += g * a;
                        }
                        ga[[bi, 0, yy, xx]] = acc;
                    }
                }
            }
            let gu = sigmoid_backward(&cache.sa.attn, &ga);
            let gt = self.spatial_norm.backward(&cache.sa.normc, &gu);
            gx += &self.spatial_conv.backward(&cache.sa.convc, &gt);
        }

        // Relation branch, fed by gamma * gy.
        {
            let g_out = gy.mapv(|v| v * gamma);
            let gr = self.rel_dw3.backward(&cache.rel.dw3c, &g_out);
            let gu = relu_backward(&cache.rel.relu_mask, &gr);
            let gt = self.rel_norm.backward(&cache.rel.normc, &gu);
            gx += &self.rel_dw1.backward(&cache.rel.dw1c, &gt);
        }

        gx
    }

    /// Inference-mode forward on a bare array, used inside the network.
    pub fn forward_eval(&self, x: &Array4<f64>, cfg: &SimConfig) -> Array4<f64> {
        let (alpha, beta, gamma) = self.fusion(cfg);
        let gap = global_avg_pool(x);
        let hidden = self.w1.forward(&gap).mapv(|v| v.max(0.0));
        let attn_c = sigmoid2(&self.w2.forward(&hidden));
        let x_ca = scale_by_channel(x, &attn_c);
        let attn_s = sigmoid(&self.spatial_norm.forward_eval(&self.spatial_conv.forward(x)));
        let x_sa = scale_by_map(x, &attn_s);
        let t = self.rel_dw1.forward(x);
        let (r, _) = relu_forward(&self.rel_norm.forward_eval(&t));
        let x_rel = self.rel_dw3.forward(&r);
        let mut y = x.clone();
        y.scaled_add(alpha, &x_ca);
        y.scaled_add(beta, &x_sa);
        y.scaled_add(gamma, &x_rel);
        y
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }
}

impl Visit for SimParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.w1.visit_params(&join(prefix, "w1"), f);
        self.w2.visit_params(&join(prefix, "w2"), f);
        self.spatial_conv.visit_params(&join(prefix, "spatial_conv"), f);
        self.spatial_norm.visit_params(&join(prefix, "spatial_norm"), f);
        self.rel_dw1.visit_params(&join(prefix, "rel_dw1"), f);
        self.rel_norm.visit_params(&join(prefix, "rel_norm"), f);
        self.rel_dw3.visit_params(&join(prefix, "rel_dw3"), f);
        if let Some(fw) = &mut self.fusion_weights {
            f(&join(prefix, "fusion_weights"), fw);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.spatial_norm.visit_buffers(&join(prefix, "spatial_norm"), f);
        self.rel_norm.visit_buffers(&join(prefix, "rel_norm"), f);
    }
}
