//! Dual-branch PET/CT encoder-decoder.
//!
//! Two identical convolutional encoders (one per modality) feed a fusion
//! stage at the bottleneck; a single decoder with skip connections from
//! both branches restores full resolution and a 1x1 head emits one logit
//! channel. In 2.5D mode each branch sees a 3-slice stack and carries SIM
//! blocks; 2D mode is single-slice and has none.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::nn::{
    join, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, upsample2_backward,
    upsample2_forward, Conv2d, ConvCache, Init, Norm2d, NormCache, NormKind, Param, PoolCache,
    Visit,
};
use crate::sim::{init_sim_params, SimCache, SimConfig, SimParams};
use crate::tensor::FeatureStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "2.5d")]
    TwoPointFiveD,
}

impl Mode {
    /// The stack depth this mode requires.
    pub fn stack_depth(self) -> usize {
        match self {
            Mode::TwoD => 1,
            Mode::TwoPointFiveD => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPlacement {
    /// One SIM per branch, applied to the raw slice stack.
    Input,
    /// One SIM per branch per encoder stage, applied to the stage input.
    AllEncoderStages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Concat,
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub mode: Mode,
    pub stack_depth: usize,
    pub base_width: usize,
    /// Number of encoder stages; resolution halves between stages.
    pub depth: usize,
    pub sim_placement: SimPlacement,
    pub fusion: Fusion,
    pub norm: NormKind,
    pub sim: SimConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            mode: Mode::TwoPointFiveD,
            stack_depth: 3,
            base_width: 16,
            depth: 4,
            sim_placement: SimPlacement::Input,
            fusion: Fusion::Concat,
            norm: NormKind::Batch,
            sim: SimConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn two_d() -> Self {
        NetworkConfig { mode: Mode::TwoD, stack_depth: 1, ..NetworkConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stack_depth != self.mode.stack_depth() {
            return Err(SegError::config(format!(
                "stack_depth {} is incompatible with mode {:?} (expected {})",
                self.stack_depth,
                self.mode,
                self.mode.stack_depth()
            )));
        }
        if self.depth < 2 {
            return Err(SegError::config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_width == 0 {
            return Err(SegError::config("base_width must be positive"));
        }
        if self.mode == Mode::TwoPointFiveD {
            for c in self.sim_channel_counts() {
                self.sim.validate(c)?;
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Channel counts the SIM blocks see, in branch order.
    fn sim_channel_counts(&self) -> Vec<usize> {
        if self.mode != Mode::TwoPointFiveD {
            return Vec::new();
        }
        match self.sim_placement {
            SimPlacement::Input => vec![self.stack_depth],
            SimPlacement::AllEncoderStages => {
                let mut out = vec![self.stack_depth];
                for i in 0..self.depth - 1 {
                    out.push(self.width(i));
                }
                out
            }
        }
    }

    /// Input H and W must be divisible by this.
    pub fn resolution_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

// ---------------------------------------------------------------------------
// Conv block: (conv -> norm -> relu) x 2
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv2d,
    norm1: Norm2d,
    conv2: Conv2d,
    norm2: Norm2d,
}

#[derive(Debug)]
struct ConvBlockCache {
    c1: ConvCache,
    n1: NormCache,
    m1: Array4<bool>,
    c2: ConvCache,
    n2: NormCache,
    m2: Array4<bool>,
}

impl ConvBlock {
    fn new<R: Rng>(in_c: usize, out_c: usize, norm: NormKind, rng: &mut R) -> Self {
        ConvBlock {
            conv1: Conv2d::new(in_c, out_c, 3, 3, Init::Kaiming, rng),
            norm1: Norm2d::new(out_c, norm),
            conv2: Conv2d::new(out_c, out_c, 3, 3, Init::Kaiming, rng),
            norm2: Norm2d::new(out_c, norm),
        }
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let y = self.norm1.forward_eval(&self.conv1.forward(x));
        let (y, _) = relu_forward(&y);
        let y = self.norm2.forward_eval(&self.conv2.forward(&y));
        relu_forward(&y).0
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, ConvBlockCache) {
        let (y, c1) = self.conv1.forward_train(x);
        let (y, n1) = self.norm1.forward_train(&y);
        let (y, m1) = relu_forward(&y);
        let (y, c2) = self.conv2.forward_train(&y);
        let (y, n2) = self.norm2.forward_train(&y);
        let (y, m2) = relu_forward(&y);
        (y, ConvBlockCache { c1, n1, m1, c2, n2, m2 })
    }

    fn backward(&mut self, cache: &ConvBlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = relu_backward(&cache.m2, gy);
        let g = self.norm2.backward(&cache.n2, &g);
        let g = self.conv2.backward(&cache.c2, &g);
        let g = relu_backward(&cache.m1, &g);
        let g = self.norm1.backward(&cache.n1, &g);
        self.conv1.backward(&cache.c1, &g)
    }
}

impl Visit for ConvBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.norm1.visit_buffers(&join(prefix, "norm1"), f);
        self.norm2.visit_buffers(&join(prefix, "norm2"), f);
    }
}

// ---------------------------------------------------------------------------
// Encoder branch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Branch {
    stages: Vec<ConvBlock>,
    /// Empty in 2D mode; one block (input placement) or one per stage.
    sims: Vec<SimParams>,
}

#[derive(Debug)]
struct BranchCache {
    sims: Vec<Option<SimCache>>,
    blocks: Vec<ConvBlockCache>,
    pools: Vec<PoolCache>,
}

impl Branch {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.depth);
        let mut in_c = cfg.stack_depth;
        for i in 0..cfg.depth {
            let out_c = cfg.width(i);
            stages.push(ConvBlock::new(in_c, out_c, cfg.norm, rng));
            in_c = out_c;
        }
        let mut sims = Vec::new();
        for channels in cfg.sim_channel_counts() {
            sims.push(init_sim_params(channels, &cfg.sim, rng.gen())?);
        }
        Ok(Branch { stages, sims })
    }

    fn sim_index(&self, stage: usize) -> Option<usize> {
        match self.sims.len() {
            0 => None,
            1 => (stage == 0).then_some(0),
            _ => Some(stage),
        }
    }

    /// Returns per-stage outputs for skip connections (all but the last
    /// stage) and the bottleneck feature map.
    fn forward_eval(&self, x: &Array4<f64>, cfg: &NetworkConfig) -> (Vec<Array4<f64>>, Array4<f64>) {
        let n = self.stages.len();
        let mut skips = Vec::with_capacity(n - 1);
        let mut cur = x.clone();
        for i in 0..n {
            if i > 0 {
                cur = maxpool2_forward(&cur).0;
            }
            if let Some(j) = self.sim_index(i) {
                cur = self.sims[j].forward_eval(&cur, &cfg.sim);
            }
            cur = self.stages[i].forward_eval(&cur);
            if i + 1 < n {
                skips.push(cur.clone());
            }
        }
        (skips, cur)
    }

    fn forward_train(
        &mut self,
        x: &Array4<f64>,
        cfg: &NetworkConfig,
    ) -> (Vec<Array4<f64>>, Array4<f64>, BranchCache) {
        let n = self.stages.len();
        let mut cache = BranchCache {
            sims: Vec::with_capacity(n),
            blocks: Vec::with_capacity(n),
            pools: Vec::with_capacity(n - 1),
        };
        let mut skips = Vec::with_capacity(n - 1);
        let mut cur = x.clone();
        for i in 0..n {
            if i > 0 {
                let (p, pc) = maxpool2_forward(&cur);
                cache.pools.push(pc);
                cur = p;
            }
            if let Some(j) = self.sim_index(i) {
                let (y, sc) = self.sims[j].forward_train(&cur, &cfg.sim);
                cache.sims.push(Some(sc));
                cur = y;
            } else {
                cache.sims.push(None);
            }
            let (y, bc) = self.stages[i].forward_train(&cur);
            cache.blocks.push(bc);
            cur = y;
            if i + 1 < n {
                skips.push(cur.clone());
            }
        }
        (skips, cur, cache)
    }

    /// `skip_grads[i]` is the decoder's gradient at stage `i`'s output.
    /// Returns the gradient with respect to the branch input.
    fn backward(
        &mut self,
        cfg: &NetworkConfig,
        cache: &BranchCache,
        skip_grads: &[Array4<f64>],
        g_bottleneck: Array4<f64>,
    ) -> Array4<f64> {
        let n = self.stages.len();
        let mut g = g_bottleneck;
        for i in (0..n).rev() {
            let mut g_in = self.stages[i].backward(&cache.blocks[i], &g);
            if let Some(j) = self.sim_index(i) {
                let sc = cache.sims[i].as_ref().expect("sim cache recorded in forward");
                g_in = self.sims[j].backward(&cfg.sim, sc, &g_in);
            }
            if i > 0 {
                g = maxpool2_backward(&cache.pools[i - 1], &g_in) + &skip_grads[i - 1];
            } else {
                g = g_in;
            }
        }
        g
    }
}

impl Visit for Branch {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let single = self.sims.len() == 1;
        for (j, sim) in self.sims.iter_mut().enumerate() {
            let name = if single {
                join(prefix, "sim")
            } else {
                join(&join(prefix, &format!("enc{j}")), "sim")
            };
            sim.visit_params(&name, f);
        }
        for (i, block) in self.stages.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("enc{i}")), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        let single = self.sims.len() == 1;
        for (j, sim) in self.sims.iter_mut().enumerate() {
            let name = if single {
                join(prefix, "sim")
            } else {
                join(&join(prefix, &format!("enc{j}")), "sim")
            };
            sim.visit_buffers(&name, f);
        }
        for (i, block) in self.stages.iter_mut().enumerate() {
            block.visit_buffers(&join(prefix, &format!("enc{i}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Whole network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SegNetwork {
    pub config: NetworkConfig,
    pet: Branch,
    ct: Branch,
    fuse: ConvBlock,
    /// Decoder blocks ordered by level: `dec[i]` restores resolution level `i`.
    dec: Vec<ConvBlock>,
    head: Conv2d,
}

#[derive(Debug)]
pub struct NetCache {
    pet: BranchCache,
    ct: BranchCache,
    fuse: ConvBlockCache,
    /// Per-branch bottleneck channel count, for splitting concat gradients.
    bottleneck_c: usize,
    /// One per decoder level, deepest first, with the concat split sizes.
    dec: Vec<(ConvBlockCache, (usize, usize))>,
    head: ConvCache,
    skip_dims: Vec<(usize, usize, usize, usize)>,
}

/// Build with deterministic initialization: the same `(cfg, seed)` yields
/// identical parameters.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<SegNetwork> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pet = Branch::new(cfg, &mut rng)?;
    let ct = Branch::new(cfg, &mut rng)?;
    let w_last = cfg.width(cfg.depth - 1);
    let fuse_in = match cfg.fusion {
        Fusion::Concat => 2 * w_last,
        Fusion::Sum => w_last,
    };
    let fuse = ConvBlock::new(fuse_in, w_last, cfg.norm, &mut rng);
    let mut dec = Vec::with_capacity(cfg.depth - 1);
    for i in 0..cfg.depth - 1 {
        // Upsampled deeper feature plus one skip from each branch.
        let in_c = cfg.width(i + 1) + 2 * cfg.width(i);
        dec.push(ConvBlock::new(in_c, cfg.width(i), cfg.norm, &mut rng));
    }
    let head = Conv2d::new(cfg.base_width, 1, 1, 1, Init::Kaiming, &mut rng);
    Ok(SegNetwork { config: cfg.clone(), pet, ct, fuse, dec, head })
}

impl SegNetwork {
    fn check_inputs(&self, pet: &FeatureStack, ct: &FeatureStack) -> Result<()> {
        let (pb, pc, ph, pw) = pet.values().dim();
        let (cb, cc, ch, cw) = ct.values().dim();
        if (pb, ph, pw) != (cb, ch, cw) || pc != cc {
            return Err(SegError::input(format!(
                "PET {:?} and CT {:?} shapes do not match",
                pet.values().dim(),
                ct.values().dim()
            )));
        }
        if pc != self.config.stack_depth {
            return Err(SegError::input(format!(
                "expected {} channels per modality, got {pc}",
                self.config.stack_depth
            )));
        }
        let d = self.config.resolution_divisor();
        if ph % d != 0 || pw % d != 0 {
            return Err(SegError::input(format!(
                "input {ph}x{pw} must be divisible by {d} for depth {}",
                self.config.depth
            )));
        }
        Ok(())
    }

    fn fuse_inputs(&self, pet_bn: &Array4<f64>, ct_bn: &Array4<f64>) -> Array4<f64> {
        match self.config.fusion {
            Fusion::Concat => {
                concatenate(Axis(1), &[pet_bn.view(), ct_bn.view()]).expect("bottlenecks align")
            }
            Fusion::Sum => pet_bn + ct_bn,
        }
    }

    /// Evaluation-mode forward: deterministic, no parameter mutation.
    pub fn forward(&self, pet: &FeatureStack, ct: &FeatureStack) -> Result<Array4<f64>> {
        self.check_inputs(pet, ct)?;
        let (pet_skips, pet_bn) = self.pet.forward_eval(pet.values(), &self.config);
        let (ct_skips, ct_bn) = self.ct.forward_eval(ct.values(), &self.config);
        let mut x = self.fuse.forward_eval(&self.fuse_inputs(&pet_bn, &ct_bn));
        for i in (0..self.config.depth - 1).rev() {
            let up = upsample2_forward(&x);
            let xc = concatenate(Axis(1), &[up.view(), pet_skips[i].view(), ct_skips[i].view()])
                .expect("skip resolutions align");
            x = self.dec[i].forward_eval(&xc);
        }
        Ok(self.head.forward(&x))
    }

    /// Training-mode forward; caches everything backward needs.
    pub fn forward_train(
        &mut self,
        pet: &FeatureStack,
        ct: &FeatureStack,
    ) -> Result<(Array4<f64>, NetCache)> {
        self.check_inputs(pet, ct)?;
        let cfg = self.config.clone();
        let (pet_skips, pet_bn, pet_cache) = self.pet.forward_train(pet.values(), &cfg);
        let (ct_skips, ct_bn, ct_cache) = self.ct.forward_train(ct.values(), &cfg);
        let bottleneck_c = pet_bn.dim().1;
        let (mut x, fuse_cache) = self.fuse.forward_train(&self.fuse_inputs(&pet_bn, &ct_bn));
        let mut dec_caches = Vec::with_capacity(cfg.depth - 1);
        let skip_dims = pet_skips.iter().map(|sk| sk.dim()).collect();
        for i in (0..cfg.depth - 1).rev() {
            let up = upsample2_forward(&x);
            let split = (up.dim().1, pet_skips[i].dim().1);
            let xc = concatenate(Axis(1), &[up.view(), pet_skips[i].view(), ct_skips[i].view()])
                .expect("skip resolutions align");
            let (y, c) = self.dec[i].forward_train(&xc);
            dec_caches.push((c, split));
            x = y;
        }
        let (logits, head_cache) = self.head.forward_train(&x);
        Ok((
            logits,
            NetCache {
                pet: pet_cache,
                ct: ct_cache,
                fuse: fuse_cache,
                bottleneck_c,
                dec: dec_caches,
                head: head_cache,
                skip_dims,
            },
        ))
    }

    /// Accumulate gradients for a logits gradient. Must follow the
    /// `forward_train` call that produced `cache`.
    pub fn backward(&mut self, cache: &NetCache, g_logits: &Array4<f64>) {
        let depth = self.config.depth;
        let mut g = self.head.backward(&cache.head, g_logits);
        let mut pet_skip_grads: Vec<Array4<f64>> =
            cache.skip_dims.iter().map(|d| Array4::zeros(*d)).collect();
        let mut ct_skip_grads = pet_skip_grads.clone();
        // Decoder caches are stored deepest level first.
        for (j, (dc, (up_c, skip_c))) in cache.dec.iter().enumerate().rev() {
            let level = depth - 2 - j;
            let gxc = self.dec[level].backward(dc, &g);
            let g_up = gxc.slice(s![.., 0..*up_c, .., ..]).to_owned();
            pet_skip_grads[level] += &gxc.slice(s![.., *up_c..up_c + skip_c, .., ..]);
            ct_skip_grads[level] += &gxc.slice(s![.., up_c + skip_c.., .., ..]);
            g = upsample2_backward(&g_up);
        }
        let g_merged = self.fuse.backward(&cache.fuse, &g);
        let c = cache.bottleneck_c;
        let (g_pet_bn, g_ct_bn) = match self.config.fusion {
            Fusion::Concat => (
                g_merged.slice(s![.., 0..c, .., ..]).to_owned(),
                g_merged.slice(s![.., c.., .., ..]).to_owned(),
            ),
            Fusion::Sum => (g_merged.clone(), g_merged),
        };
        let cfg = self.config.clone();
        self.pet.backward(&cfg, &cache.pet, &pet_skip_grads, g_pet_bn);
        self.ct.backward(&cfg, &cache.ct, &ct_skip_grads, g_ct_bn);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.numel());
        n
    }

    /// Order-sensitive FNV-1a hash over parameter names and value bits.
    pub fn param_checksum(&mut self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        self.visit_params("", &mut |name, p| {
            mix(name.as_bytes());
            for v in p.value.iter() {
                mix(&v.to_bits().to_le_bytes());
            }
        });
        h
    }

    /// Named parameter tensors, cloned.
    pub fn param_map(&mut self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.visit_params("", &mut |name, p| {
            out.insert(name.to_string(), p.value.clone());
        });
        out
    }

    pub fn buffer_map(&mut self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.visit_buffers("", &mut |name, b| {
            out.insert(name.to_string(), b.clone());
        });
        out
    }
}

impl Visit for SegNetwork {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.pet.visit_params(&join(prefix, "pet"), f);
        self.ct.visit_params(&join(prefix, "ct"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        for (i, block) in self.dec.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("dec{i}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.pet.visit_buffers(&join(prefix, "pet"), f);
        self.ct.visit_buffers(&join(prefix, "ct"), f);
        self.fuse.visit_buffers(&join(prefix, "fuse"), f);
        for (i, block) in self.dec.iter_mut().enumerate() {
            block.visit_buffers(&join(prefix, &format!("dec{i}")), f);
        }
    }
}

/// Threshold sigmoid probabilities into a binary mask.
pub fn predict_mask(logits: &Array4<f64>, threshold: f64) -> Array4<bool> {
    logits.mapv(|v| crate::nn::sigmoid_scalar(v) >= threshold)
}

/// Transplant a trained 2D network into a 2.5D architecture.
///
/// First-layer kernels are inflated by replicating the single-slice kernel
/// across the three slice channels at 1/3 weight, so a stack of identical
/// slices reproduces the 2D response exactly. SIM blocks (absent in 2D)
/// are freshly initialized from `seed`; everything else is copied verbatim.
pub fn inflate_2d_to_25d(
    net2d: &mut SegNetwork,
    cfg25d: &NetworkConfig,
    seed: u64,
) -> Result<SegNetwork> {
    if net2d.config.mode != Mode::TwoD {
        return Err(SegError::config("inflation source must be a 2D network"));
    }
    if cfg25d.mode != Mode::TwoPointFiveD {
        return Err(SegError::config("inflation target must be a 2.5D config"));
    }
    if cfg25d.depth != net2d.config.depth || cfg25d.base_width != net2d.config.base_width {
        return Err(SegError::config(format!(
            "architecture mismatch: source depth {} width {}, target depth {} width {}",
            net2d.config.depth, net2d.config.base_width, cfg25d.depth, cfg25d.base_width
        )));
    }
    let mut target = build_network(cfg25d, seed)?;
    let src_params = net2d.param_map();
    let src_buffers = net2d.buffer_map();
    let first_layers = ["pet.enc0.conv1.weight", "ct.enc0.conv1.weight"];
    let mut mismatches = Vec::new();
    target.visit_params("", &mut |name, p| {
        if name.contains(".sim.") {
            return;
        }
        let Some(src) = src_params.get(name) else {
            mismatches.push(name.to_string());
            return;
        };
        if first_layers.contains(&name) {
            let depth = p.value.shape()[1];
            for s in 0..depth {
                let mut lane = p.value.slice_mut(s![.., s, .., ..]);
                lane.assign(&src.slice(s![.., 0, .., ..]));
                lane.mapv_inplace(|v| v / depth as f64);
            }
        } else if p.value.shape() == src.shape() {
            p.value.assign(src);
        } else {
            mismatches.push(name.to_string());
        }
    });
    target.visit_buffers("", &mut |name, b| {
        if name.contains(".sim.") {
            return;
        }
        match src_buffers.get(name) {
            Some(src) if src.shape() == b.shape() => b.assign(src),
            _ => mismatches.push(name.to_string()),
        }
    });
    if !mismatches.is_empty() {
        return Err(SegError::config(format!(
            "transplantation failed for parameters: {}",
            mismatches.join(", ")
        )));
    }
    Ok(target)
}
