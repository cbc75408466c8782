//! Deterministic patient-level splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SplitSpec;
use crate::error::{Result, SegError};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// Shuffle patient ids with a seeded generator and partition them.
///
/// Validation and test sizes are `floor(n * ratio)`; the remainder goes to
/// train. Ids are sorted within each partition so manifests are stable.
pub fn patient_split(
    patient_ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec> {
    let n = patient_ids.len();
    if n < 3 {
        return Err(SegError::data(format!("need at least 3 patients to split, got {n}")));
    }
    let (r_train, r_val, r_test) = ratios;
    for r in [r_train, r_val, r_test] {
        if !(0.0..=1.0).contains(&r) {
            return Err(SegError::config(format!("split ratio {r} outside [0, 1]")));
        }
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(SegError::config(format!(
            "split ratios must sum to 1, got {}",
            r_train + r_val + r_test
        )));
    }
    let mut unique = patient_ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != n {
        return Err(SegError::data("duplicate patient ids in split input"));
    }

    // Shuffle a sorted copy so the result is independent of input order.
    let mut shuffled = unique;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n_val = (n as f64 * r_val).floor() as usize;
    let n_test = (n as f64 * r_test).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut train: Vec<String> = shuffled[..n_train].to_vec();
    let mut val: Vec<String> = shuffled[n_train..n_train + n_val].to_vec();
    let mut test: Vec<String> = shuffled[n_train + n_val..].to_vec();
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitSpec { seed, train, val, test })
}
