//! Training-time augmentation.
//!
//! Every transform is applied jointly to all image channels and the target
//! mask: parameters are drawn once per sample, images are resampled with
//! bilinear interpolation, masks with nearest-neighbor so they stay binary.
//! The draw step is separated from the apply step (`PipelineDraw`) so tests
//! can replay the exact parameters a pipeline used.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::error::{Result, SegError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Max shift as a fraction of each image dimension.
    pub shift_frac: f64,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    /// Crop area as a fraction of the original area.
    pub crop_area_range: (f64, f64),
    /// Gate probability for each pipeline op.
    pub per_op_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_frac: 0.10,
            scale_range: (0.9, 1.1),
            hflip_prob: 0.5,
            crop_area_range: (0.70, 0.90),
            per_op_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shift_frac >= 0.0 && self.shift_frac < 1.0) {
            return Err(SegError::config(format!(
                "shift_frac must be in [0, 1), got {}",
                self.shift_frac
            )));
        }
        let (slo, shi) = self.scale_range;
        if !(slo > 0.0 && slo <= shi) {
            return Err(SegError::config(format!("invalid scale_range ({slo}, {shi})")));
        }
        let (clo, chi) = self.crop_area_range;
        if !(clo > 0.0 && clo <= chi && chi < 1.0) {
            return Err(SegError::config(format!(
                "crop_area_range must satisfy 0 < lo <= hi < 1, got ({clo}, {chi})"
            )));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("per_op_prob", self.per_op_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SegError::config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Per-sample rng stream: deterministic in (seed, sample index), so parallel
/// loaders agree with a sequential one.
pub fn sample_rng(seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index);
    rng
}

// ---------------------------------------------------------------------------
// Resampling primitives (zero fill outside the frame)
// ---------------------------------------------------------------------------

fn bilinear_at(img: &ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let yy = y0 as isize + dy;
            let xx = x0 as isize + dx;
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                acc += wy * wx * img[[yy as usize, xx as usize]];
            }
        }
    }
    acc
}

fn nearest_at(img: &ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let yy = y.round();
    let xx = x.round();
    if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
        img[[yy as usize, xx as usize]]
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    /// Shift in pixels, applied to content (positive moves content down/right).
    pub dy: f64,
    pub dx: f64,
    pub scale: f64,
}

pub fn draw_affine(cfg: &AugmentConfig, dims: (usize, usize), rng: &mut impl Rng) -> AffineDraw {
    let (h, w) = dims;
    let sy = cfg.shift_frac * h as f64;
    let sx = cfg.shift_frac * w as f64;
    AffineDraw {
        dy: if sy > 0.0 { rng.gen_range(-sy..=sy) } else { 0.0 },
        dx: if sx > 0.0 { rng.gen_range(-sx..=sx) } else { 0.0 },
        scale: rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1),
    }
}

/// Shift-and-scale about the image center. Inverse mapping: each output
/// pixel samples `src = (dst - center - shift) / scale + center`.
pub fn affine_with(sample: &SliceSample, draw: AffineDraw) -> SliceSample {
    let (c, h, w) = sample.input.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = |y: usize, x: usize| {
        (
            (y as f64 - cy - draw.dy) / draw.scale + cy,
            (x as f64 - cx - draw.dx) / draw.scale + cx,
        )
    };
    let mut input = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane = sample.input.index_axis(ndarray::Axis(0), ch);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                input[[ch, y, x]] = bilinear_at(&plane, sy, sx);
            }
        }
    }
    let mut target = Array2::zeros((h, w));
    let tv = sample.target.view();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            target[[y, x]] = nearest_at(&tv, sy, sx);
        }
    }
    SliceSample {
        input,
        target,
        patient_id: sample.patient_id.clone(),
        slice_index: sample.slice_index,
    }
}

pub fn random_affine(sample: &SliceSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SliceSample {
    let (_, h, w) = sample.input.dim();
    affine_with(sample, draw_affine(cfg, (h, w), rng))
}

// ---------------------------------------------------------------------------
// Horizontal flip
// ---------------------------------------------------------------------------

pub fn hflip(sample: &SliceSample) -> SliceSample {
    SliceSample {
        input: sample.input.slice(s![.., .., ..;-1]).to_owned(),
        target: sample.target.slice(s![.., ..;-1]).to_owned(),
        patient_id: sample.patient_id.clone(),
        slice_index: sample.slice_index,
    }
}

pub fn random_hflip(sample: &SliceSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SliceSample {
    if rng.gen::<f64>() < cfg.hflip_prob {
        hflip(sample)
    } else {
        sample.clone()
    }
}

// ---------------------------------------------------------------------------
// Crop and resize back
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropDraw {
    pub y0: usize,
    pub x0: usize,
    pub ch: usize,
    pub cw: usize,
}

impl CropDraw {
    pub fn area_fraction(&self, dims: (usize, usize)) -> f64 {
        (self.ch * self.cw) as f64 / (dims.0 * dims.1) as f64
    }
}

pub fn draw_crop(cfg: &AugmentConfig, dims: (usize, usize), rng: &mut impl Rng) -> CropDraw {
    let (h, w) = dims;
    let (lo, hi) = cfg.crop_area_range;
    let frac = rng.gen_range(lo..=hi);
    let side = frac.sqrt();
    let mut ch = ((side * h as f64).round() as usize).clamp(1, h);
    let mut cw = ((side * w as f64).round() as usize).clamp(1, w);
    // Rounding can push the realized area outside the configured range;
    // nudge one axis at a time back inside when the grid allows it.
    let area = |ch: usize, cw: usize| (ch * cw) as f64 / (h * w) as f64;
    let mut guard = 0;
    while area(ch, cw) < lo && (ch < h || cw < w) && guard < 8 {
        if ch <= cw && ch < h {
            ch += 1;
        } else {
            cw += 1;
        }
        guard += 1;
    }
    while area(ch, cw) > hi && (ch > 1 || cw > 1) && guard < 16 {
        if ch >= cw && ch > 1 {
            ch -= 1;
        } else {
            cw -= 1;
        }
        guard += 1;
    }
    let y0 = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
    let x0 = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
    CropDraw { y0, x0, ch, cw }
}

pub fn crop_resize_with(sample: &SliceSample, draw: CropDraw) -> SliceSample {
    let (c, h, w) = sample.input.dim();
    let mut input = Array3::zeros((c, h, w));
    for ch in 0..c {
        let crop = sample
            .input
            .slice(s![ch, draw.y0..draw.y0 + draw.ch, draw.x0..draw.x0 + draw.cw])
            .to_owned();
        input
            .index_axis_mut(ndarray::Axis(0), ch)
            .assign(&crate::data::preprocess::bilinear_resize2(&crop, h, w));
    }
    let crop = sample
        .target
        .slice(s![draw.y0..draw.y0 + draw.ch, draw.x0..draw.x0 + draw.cw])
        .to_owned();
    let target = crate::data::preprocess::nearest_resize2(&crop, h, w);
    SliceSample {
        input,
        target,
        patient_id: sample.patient_id.clone(),
        slice_index: sample.slice_index,
    }
}

pub fn random_crop_resize(
    sample: &SliceSample,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> SliceSample {
    let (_, h, w) = sample.input.dim();
    crop_resize_with(sample, draw_crop(cfg, (h, w), rng))
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Everything one pipeline invocation drew, in application order:
/// affine, then flip, then crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineDraw {
    pub affine: Option<AffineDraw>,
    pub flip: Option<bool>,
    pub crop: Option<CropDraw>,
}

pub fn draw_pipeline(
    cfg: &AugmentConfig,
    dims: (usize, usize),
    rng: &mut impl Rng,
) -> PipelineDraw {
    let affine = if rng.gen::<f64>() < cfg.per_op_prob {
        Some(draw_affine(cfg, dims, rng))
    } else {
        None
    };
    let flip = if rng.gen::<f64>() < cfg.per_op_prob {
        Some(rng.gen::<f64>() < cfg.hflip_prob)
    } else {
        None
    };
    let crop = if rng.gen::<f64>() < cfg.per_op_prob {
        Some(draw_crop(cfg, dims, rng))
    } else {
        None
    };
    PipelineDraw { affine, flip, crop }
}

pub fn apply_draw(sample: &SliceSample, draw: &PipelineDraw) -> SliceSample {
    let mut out = sample.clone();
    if let Some(a) = draw.affine {
        out = affine_with(&out, a);
    }
    if draw.flip == Some(true) {
        out = hflip(&out);
    }
    if let Some(c) = draw.crop {
        out = crop_resize_with(&out, c);
    }
    out
}

/// Gate each op independently at `per_op_prob`, then apply the survivors
/// in fixed order. Deterministic given the rng state.
pub fn apply_pipeline(sample: &SliceSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SliceSample {
    let (_, h, w) = sample.input.dim();
    let draw = draw_pipeline(cfg, (h, w), rng);
    apply_draw(sample, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toy_sample(h: usize, w: usize) -> SliceSample {
        let input = Array3::from_shape_fn((2, h, w), |(c, y, x)| {
            (c * 1000 + y * w + x) as f64 / (2 * h * w) as f64 * 255.0
        });
        let mut target = Array2::zeros((h, w));
        for y in h / 4..h / 2 {
            for x in w / 4..w / 2 {
                target[[y, x]] = 1.0;
            }
        }
        SliceSample { input, target, patient_id: "p".into(), slice_index: 3 }
    }

    fn delta_sample(h: usize, w: usize, py: usize, px: usize) -> SliceSample {
        let mut input = Array3::zeros((2, h, w));
        input[[0, py, px]] = 1.0;
        input[[1, py, px]] = 1.0;
        let mut target = Array2::zeros((h, w));
        target[[py, px]] = 1.0;
        SliceSample { input, target, patient_id: "p".into(), slice_index: 0 }
    }

    #[test]
    fn identity_affine_is_exact() {
        let s = toy_sample(16, 16);
        let out = affine_with(&s, AffineDraw { dy: 0.0, dx: 0.0, scale: 1.0 });
        assert!(out.input.iter().zip(s.input.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(out.target, s.target);
    }

    #[test]
    fn integer_shift_moves_delta_exactly() {
        let s = delta_sample(16, 16, 5, 6);
        let out = affine_with(&s, AffineDraw { dy: 3.0, dx: -2.0, scale: 1.0 });
        assert!((out.input[[0, 8, 4]] - 1.0).abs() < 1e-12);
        assert_eq!(out.input[[0, 5, 6]], 0.0);
        assert_eq!(out.target[[8, 4]], 1.0);
        assert_eq!(out.target.sum(), 1.0);
    }

    #[test]
    fn drawn_shift_respects_bound() {
        let cfg = AugmentConfig::default();
        let mut rng = sample_rng(7, 0);
        for _ in 0..500 {
            let d = draw_affine(&cfg, (32, 48), &mut rng);
            assert!(d.dy.abs() <= 0.10 * 32.0 + 1e-12);
            assert!(d.dx.abs() <= 0.10 * 48.0 + 1e-12);
            assert!((0.9..=1.1).contains(&d.scale));
        }
    }

    #[test]
    fn hflip_is_involution_and_moves_mask_with_image() {
        let s = toy_sample(12, 10);
        let once = hflip(&s);
        assert_eq!(once.input[[0, 0, 0]], s.input[[0, 0, 9]]);
        assert_eq!(once.target[[3, 2]], s.target[[3, 7]]);
        let twice = hflip(&once);
        assert_eq!(twice.input, s.input);
        assert_eq!(twice.target, s.target);
    }

    #[test]
    fn crop_fraction_stays_in_range_and_shape_is_preserved() {
        let cfg = AugmentConfig::default();
        let mut rng = sample_rng(11, 0);
        let s = toy_sample(64, 64);
        for _ in 0..300 {
            let d = draw_crop(&cfg, (64, 64), &mut rng);
            let f = d.area_fraction((64, 64));
            assert!((0.70..=0.90).contains(&f), "fraction {f} out of range");
            let out = crop_resize_with(&s, d);
            assert_eq!(out.input.dim(), s.input.dim());
            assert_eq!(out.target.dim(), s.target.dim());
        }
    }

    #[test]
    fn mask_stays_binary_through_pipeline() {
        let cfg = AugmentConfig { per_op_prob: 1.0, ..AugmentConfig::default() };
        let s = toy_sample(32, 32);
        let mut rng = sample_rng(3, 0);
        for _ in 0..20 {
            let out = apply_pipeline(&s, &cfg, &mut rng);
            assert!(out.target.iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }

    #[test]
    fn zero_gate_probability_is_identity() {
        let cfg = AugmentConfig { per_op_prob: 0.0, ..AugmentConfig::default() };
        let s = toy_sample(16, 16);
        let mut rng = sample_rng(5, 0);
        let out = apply_pipeline(&s, &cfg, &mut rng);
        assert_eq!(out.input, s.input);
        assert_eq!(out.target, s.target);
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let cfg = AugmentConfig::default();
        let s = toy_sample(24, 24);
        let a = apply_pipeline(&s, &cfg, &mut sample_rng(9, 4));
        let b = apply_pipeline(&s, &cfg, &mut sample_rng(9, 4));
        assert_eq!(a.input, b.input);
        assert_eq!(a.target, b.target);
        let c = apply_pipeline(&s, &cfg, &mut sample_rng(9, 5));
        assert_ne!(a.input, c.input);
    }

    #[test]
    fn pipeline_equals_manual_composition_of_drawn_ops() {
        let cfg = AugmentConfig { per_op_prob: 1.0, ..AugmentConfig::default() };
        let s = toy_sample(32, 32);
        let draw = draw_pipeline(&cfg, (32, 32), &mut sample_rng(13, 0));
        let auto = apply_draw(&s, &draw);
        let mut manual = affine_with(&s, draw.affine.unwrap());
        if draw.flip.unwrap() {
            manual = hflip(&manual);
        }
        manual = crop_resize_with(&manual, draw.crop.unwrap());
        assert_eq!(auto.input, manual.input);
        assert_eq!(auto.target, manual.target);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = AugmentConfig::default();
        cfg.crop_area_range = (0.7, 1.0);
        assert_eq!(cfg.validate().unwrap_err().category(), "config");
        let mut cfg = AugmentConfig::default();
        cfg.hflip_prob = 1.5;
        assert_eq!(cfg.validate().unwrap_err().category(), "config");
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
