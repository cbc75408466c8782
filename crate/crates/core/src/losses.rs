//! Training objectives: soft Dice loss plus binary cross-entropy.
//!
//! The Dice term is computed per sample and averaged over the batch, so a
//! small lesion in one sample cannot be drowned out by a large one in
//! another. BCE is a plain mean over all pixels. The composite objective is
//! their unweighted sum.

use ndarray::Array4;

use crate::error::{Result, SegError};

/// Smoothing constant in the Dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// Probability clip for the BCE logarithms.
pub const BCE_CLIP: f64 = 1e-7;

/// Predicted foreground probabilities, layout `(B, 1, H, W)`, entries in [0,1].
#[derive(Debug, Clone)]
pub struct ProbMap(Array4<f64>);

impl ProbMap {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.shape()[1] != 1 {
            return Err(SegError::input(format!(
                "probability map must have one channel, got {}",
                values.shape()[1]
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(SegError::input("probabilities must lie in [0, 1]"));
        }
        Ok(ProbMap(values))
    }

    /// Wrap values already known to be valid probabilities (sigmoid output).
    pub(crate) fn from_trusted(values: Array4<f64>) -> Self {
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        ProbMap(values)
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.0
    }
}

/// Binary ground-truth masks, layout `(B, 1, H, W)`, entries exactly 0 or 1.
#[derive(Debug, Clone)]
pub struct TargetMask(Array4<f64>);

impl TargetMask {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.shape()[1] != 1 {
            return Err(SegError::input(format!(
                "target mask must have one channel, got {}",
                values.shape()[1]
            )));
        }
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(SegError::input("target mask must be binary"));
        }
        Ok(TargetMask(values))
    }

    pub(crate) fn from_trusted(values: Array4<f64>) -> Self {
        debug_assert!(values.iter().all(|v| *v == 0.0 || *v == 1.0));
        TargetMask(values)
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.0
    }
}

fn check_shapes(p: &ProbMap, y: &TargetMask) -> Result<()> {
    if p.0.dim() != y.0.dim() {
        return Err(SegError::input(format!(
            "loss shape mismatch: probabilities {:?} vs targets {:?}",
            p.0.dim(),
            y.0.dim()
        )));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`,
/// evaluated per sample and averaged over the batch.
pub fn dice_loss(p: &ProbMap, y: &TargetMask) -> Result<f64> {
    check_shapes(p, y)?;
    Ok(dice_loss_raw(&p.0, &y.0))
}

pub(crate) fn dice_loss_raw(p: &Array4<f64>, y: &Array4<f64>) -> f64 {
    let b = p.dim().0;
    let mut total = 0.0;
    for bi in 0..b {
        let ps = p.index_axis(ndarray::Axis(0), bi);
        let ys = y.index_axis(ndarray::Axis(0), bi);
        let inter: f64 = ps.iter().zip(ys.iter()).map(|(a, t)| a * t).sum();
        let sums: f64 = ps.sum() + ys.sum();
        total += 1.0 - (2.0 * inter + DICE_EPS) / (sums + DICE_EPS);
    }
    total / b as f64
}

/// Binary cross-entropy with probabilities clipped to `[BCE_CLIP, 1 - BCE_CLIP]`,
/// averaged over every pixel in the batch.
pub fn bce_loss(p: &ProbMap, y: &TargetMask) -> Result<f64> {
    check_shapes(p, y)?;
    Ok(bce_loss_raw(&p.0, &y.0))
}

pub(crate) fn bce_loss_raw(p: &Array4<f64>, y: &Array4<f64>) -> f64 {
    let n = p.len() as f64;
    let mut total = 0.0;
    for (a, t) in p.iter().zip(y.iter()) {
        let pc = a.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
    }
    total / n
}

/// The training objective: `dice_loss + bce_loss`, unweighted.
pub fn composite_loss(p: &ProbMap, y: &TargetMask) -> Result<f64> {
    check_shapes(p, y)?;
    Ok(composite_loss_raw(&p.0, &y.0))
}

pub(crate) fn composite_loss_raw(p: &Array4<f64>, y: &Array4<f64>) -> f64 {
    dice_loss_raw(p, y) + bce_loss_raw(p, y)
}

/// Analytic gradient of [`composite_loss`] with respect to the probabilities.
pub fn composite_loss_grad(p: &ProbMap, y: &TargetMask) -> Result<Array4<f64>> {
    check_shapes(p, y)?;
    Ok(composite_loss_grad_raw(&p.0, &y.0))
}

pub(crate) fn composite_loss_grad_raw(p: &Array4<f64>, y: &Array4<f64>) -> Array4<f64> {
    let (b, _, _, _) = p.dim();
    let n = p.len() as f64;
    let mut g = Array4::zeros(p.dim());
    for bi in 0..b {
        let ps = p.index_axis(ndarray::Axis(0), bi);
        let ys = y.index_axis(ndarray::Axis(0), bi);
        let inter: f64 = ps.iter().zip(ys.iter()).map(|(a, t)| a * t).sum();
        let sums: f64 = ps.sum() + ys.sum();
        let denom = sums + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        let mut gs = g.index_axis_mut(ndarray::Axis(0), bi);
        for ((gv, a), t) in gs.iter_mut().zip(ps.iter()).zip(ys.iter()) {
            // Dice term, averaged over the batch.
            *gv += -(2.0 * t * denom - num) / (denom * denom) / b as f64;
            // BCE term; the clip zeroes the gradient outside its range.
            if *a > BCE_CLIP && *a < 1.0 - BCE_CLIP {
                *gv += (-t / a + (1.0 - t) / (1.0 - a)) / n;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn prob(vals: Array4<f64>) -> ProbMap {
        ProbMap::new(vals).unwrap()
    }

    fn target(vals: Array4<f64>) -> TargetMask {
        TargetMask::new(vals).unwrap()
    }

    #[test]
    fn perfect_overlap_has_near_zero_dice_loss() {
        let y = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| ((r + c) % 2) as f64);
        let loss = dice_loss(&prob(y.clone()), &target(y)).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn disjoint_supports_have_dice_loss_near_one() {
        let p = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, _)| if r < 2 { 1.0 } else { 0.0 });
        let y = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, _)| if r >= 2 { 1.0 } else { 0.0 });
        let loss = dice_loss(&prob(p), &target(y)).unwrap();
        assert!(loss > 1.0 - 1e-6, "loss {loss}");
    }

    #[test]
    fn half_probability_case_matches_direct_formula() {
        let p = Array::from_elem((1, 1, 4, 4), 0.5);
        let y = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, _)| if r < 2 { 1.0 } else { 0.0 });
        let loss = dice_loss(&prob(p), &target(y)).unwrap();
        let want = 1.0 - (2.0 * 4.0 + DICE_EPS) / (8.0 + 8.0 + DICE_EPS);
        assert!((loss - want).abs() < 1e-15);
    }

    #[test]
    fn uniform_half_probability_bce_is_ln_two() {
        let p = Array::from_elem((1, 1, 4, 4), 0.5);
        let y = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| ((r * c) % 2) as f64);
        let loss = bce_loss(&prob(p), &target(y)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_binary_prediction_bce_is_clip_limited() {
        let y = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| ((r + c) % 2) as f64);
        let loss = bce_loss(&prob(y.clone()), &target(y)).unwrap();
        // Each pixel contributes -ln(1 - clip), about 1e-7.
        assert!(loss <= 2e-7, "loss {loss}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn composite_is_exactly_the_sum() {
        let p = Array::from_shape_fn((2, 1, 4, 4), |(b, _, r, c)| {
            (((b + r) * 7 + c * 3) % 10) as f64 / 10.0
        });
        let y = Array::from_shape_fn((2, 1, 4, 4), |(b, _, r, c)| (((b + r + c) % 3) == 0) as u8 as f64);
        let pm = prob(p);
        let tm = target(y);
        let total = composite_loss(&pm, &tm).unwrap();
        let parts = dice_loss(&pm, &tm).unwrap() + bce_loss(&pm, &tm).unwrap();
        assert_eq!(total, parts);
    }

    #[test]
    fn dice_term_is_permutation_invariant() {
        let p = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| ((r * 4 + c) as f64) / 16.0);
        let y = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| ((r + c) % 2) as f64);
        let base = dice_loss(&prob(p.clone()), &target(y.clone())).unwrap();
        // Reverse both arrays with the same permutation.
        let pr = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| p[[0, 0, 3 - r, 3 - c]]);
        let yr = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| y[[0, 0, 3 - r, 3 - c]]);
        let permuted = dice_loss(&prob(pr), &target(yr)).unwrap();
        assert!((base - permuted).abs() < 1e-15);
    }

    #[test]
    fn losses_are_nonnegative() {
        let p = Array::from_shape_fn((1, 1, 3, 3), |(_, _, r, c)| ((r * 3 + c) as f64) / 9.0);
        let y = Array::from_shape_fn((1, 1, 3, 3), |(_, _, r, c)| ((r ^ c) & 1) as f64);
        let pm = prob(p);
        let tm = target(y);
        assert!(dice_loss(&pm, &tm).unwrap() >= 0.0);
        assert!(bce_loss(&pm, &tm).unwrap() >= 0.0);
        assert!(composite_loss(&pm, &tm).unwrap() >= 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let p = prob(Array::from_elem((1, 1, 4, 4), 0.5));
        let y = target(Array::from_elem((1, 1, 3, 3), 0.0));
        assert!(matches!(dice_loss(&p, &y), Err(SegError::Input(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ProbMap::new(Array::from_elem((1, 1, 2, 2), 1.5)).is_err());
        assert!(TargetMask::new(Array::from_elem((1, 1, 2, 2), 0.5)).is_err());
        assert!(ProbMap::new(Array::from_elem((1, 2, 2, 2), 0.5)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p0 = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| {
            0.05 + 0.9 * (((r * 4 + c) as f64) / 16.0)
        });
        let y = Array::from_shape_fn((1, 1, 4, 4), |(_, _, r, c)| ((r + c) % 2) as f64);
        let g = composite_loss_grad_raw(&p0, &y);
        let eps = 1e-7;
        for r in 0..4 {
            for c in 0..4 {
                let mut pp = p0.clone();
                pp[[0, 0, r, c]] += eps;
                let mut pm = p0.clone();
                pm[[0, 0, r, c]] -= eps;
                let fd = (composite_loss_raw(&pp, &y) - composite_loss_raw(&pm, &y)) / (2.0 * eps);
                let a = g[[0, 0, r, c]];
                let rel = (a - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5, "rel {rel} at ({r},{c}): analytic {a} fd {fd}");
            }
        }
    }
}
