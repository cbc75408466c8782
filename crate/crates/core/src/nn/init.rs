//! Weight initialization helpers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// Standard normal sample via the Box-Muller transform.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Truncated normal init: N(0, std^2) with samples outside two standard
/// deviations redrawn.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        let z = loop {
            let z = standard_normal(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = z * std;
    }
    out
}

/// Kaiming normal init for layers followed by a ReLU: N(0, 2 / fan_in).
pub fn kaiming_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = standard_normal(rng) * std;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = trunc_normal(&[64, 64], 0.02, &mut rng);
        assert!(w.iter().all(|v| v.abs() <= 0.04 + 1e-12));
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 5e-3, "mean {mean} too far from zero");
    }

    #[test]
    fn kaiming_std_tracks_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = kaiming_normal(&[32, 128], 128, &mut rng);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 128.0;
        assert!((var - expect).abs() < 0.2 * expect, "var {var} vs {expect}");
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = trunc_normal(&[3, 3], 0.02, &mut ChaCha8Rng::seed_from_u64(5));
        let b = trunc_normal(&[3, 3], 0.02, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
