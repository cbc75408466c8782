//! Shared fixtures and brute-force oracles for the integration suites.
//!
//! The oracles here deliberately avoid the library's own code paths: overlap
//! metrics recount pixels with explicit loops, HD95 builds the full pairwise
//! distance matrix, and convolutions are evaluated with nested loops. When a
//! suite compares the two implementations it is comparing genuinely
//! independent arithmetic.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sliceseg::data::cohort::{process_study, PreprocessConfig, ProcessOutcome};
use sliceseg::data::stack::ProcessedStudy;
use sliceseg::data::SliceSample;
use sliceseg::metrics::BinaryMask;
use sliceseg::phantom::{phantom_cohort, CohortDistribution, PhantomConfig};

// ---------------------------------------------------------------------------
// Brute-force overlap metrics
// ---------------------------------------------------------------------------

/// (iou, dice, accuracy) by direct pixel counting. Empty-union and
/// empty-total cases report perfect agreement, matching the documented
/// convention.
pub fn brute_overlap(p: &Array2<bool>, g: &Array2<bool>) -> (f64, f64, f64) {
    assert_eq!(p.dim(), g.dim());
    let mut inter = 0u64;
    let mut union = 0u64;
    let mut p_count = 0u64;
    let mut g_count = 0u64;
    let mut agree = 0u64;
    for (a, b) in p.iter().zip(g.iter()) {
        if *a && *b {
            inter += 1;
        }
        if *a || *b {
            union += 1;
        }
        if *a {
            p_count += 1;
        }
        if *b {
            g_count += 1;
        }
        if a == b {
            agree += 1;
        }
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let total = p_count + g_count;
    let dice = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
    let acc = agree as f64 / p.len() as f64;
    (iou, dice, acc)
}

// ---------------------------------------------------------------------------
// Brute-force HD95
// ---------------------------------------------------------------------------

/// Surface pixels in mm: foreground with a background or out-of-grid
/// 4-neighbor, centers at index * spacing.
pub fn brute_surface(m: &Array2<bool>, spacing: [f64; 2]) -> Vec<[f64; 2]> {
    let (h, w) = m.dim();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m[[y, x]] {
                continue;
            }
            let mut boundary = y == 0 || y + 1 == h || x == 0 || x + 1 == w;
            if !boundary {
                boundary =
                    !m[[y - 1, x]] || !m[[y + 1, x]] || !m[[y, x - 1]] || !m[[y, x + 1]];
            }
            if boundary {
                pts.push([y as f64 * spacing[0], x as f64 * spacing[1]]);
            }
        }
    }
    pts
}

/// Linearly interpolated percentile at rank q/100 * (n-1).
pub fn brute_percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// HD95 from the full pairwise distance matrix between the two surfaces.
/// Both masks empty gives 0; exactly one empty is undefined.
pub fn brute_hd95(p: &Array2<bool>, g: &Array2<bool>, spacing: [f64; 2]) -> Option<f64> {
    let p_empty = p.iter().all(|v| !*v);
    let g_empty = g.iter().all(|v| !*v);
    match (p_empty, g_empty) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        (false, false) => {}
    }
    let sp = brute_surface(p, spacing);
    let sg = brute_surface(g, spacing);
    let mut matrix = vec![vec![0.0f64; sg.len()]; sp.len()];
    for (i, a) in sp.iter().enumerate() {
        for (j, b) in sg.iter().enumerate() {
            let dy = a[0] - b[0];
            let dx = a[1] - b[1];
            matrix[i][j] = (dy * dy + dx * dx).sqrt();
        }
    }
    let forward: Vec<f64> = matrix
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    let backward: Vec<f64> = (0..sg.len())
        .map(|j| (0..sp.len()).map(|i| matrix[i][j]).fold(f64::INFINITY, f64::min))
        .collect();
    let d1 = brute_percentile(&forward, 95.0);
    let d2 = brute_percentile(&backward, 95.0);
    Some(d1.max(d2))
}

// ---------------------------------------------------------------------------
// Mask and sample builders
// ---------------------------------------------------------------------------

pub fn mask2(values: &Array2<bool>, spacing: [f64; 2]) -> BinaryMask {
    BinaryMask::new(values.clone().into_dyn(), &spacing).unwrap()
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p_fg: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() < p_fg)
}

/// Synthetic 16x16 slice samples with a bright square whose position tracks
/// the sample index; the target marks the square. Inputs live in [0, 255]
/// like real exported slices.
pub fn square_samples(n: usize, channels: usize) -> Vec<SliceSample> {
    (0..n)
        .map(|i| {
            let off = i % 6;
            let mut input = Array3::from_elem((channels, 16, 16), 30.0);
            let mut target = Array2::zeros((16, 16));
            for y in 4..12 {
                for x in (2 + off)..(10 + off) {
                    for c in 0..channels {
                        input[[c, y, x]] = 220.0;
                    }
                    target[[y, x]] = 1.0;
                }
            }
            SliceSample {
                input,
                target,
                patient_id: format!("pt{:03}", i / 6),
                slice_index: i,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Phantom fixtures
// ---------------------------------------------------------------------------

/// A phantom geometry small enough for test-time training: 32 slices of
/// 48x48 pixels, tumor centered in the grid.
pub fn small_phantom_config() -> PhantomConfig {
    PhantomConfig {
        dims: (32, 48, 48),
        spacing_mm: [2.0, 2.0, 2.5],
        tumor_center_mm: [48.0, 48.0, 40.0],
        confounders: vec![],
        ..PhantomConfig::default()
    }
}

pub fn small_cohort_dist() -> CohortDistribution {
    CohortDistribution { base: small_phantom_config(), ..CohortDistribution::default() }
}

/// Generate and preprocess a phantom cohort entirely in memory. The cohort
/// distribution is designed to clear QC, so every patient must survive.
pub fn processed_cohort(n: usize, seed: u64) -> Vec<ProcessedStudy> {
    let dist = small_cohort_dist();
    let phantoms = phantom_cohort(n, &dist, seed).unwrap();
    let pre = PreprocessConfig::default();
    let mut out = Vec::with_capacity(n);
    for ph in &phantoms {
        match process_study(&ph.to_raw_study(), &pre).unwrap() {
            ProcessOutcome::Accepted(study) => out.push(*study),
            ProcessOutcome::Rejected { patient_id, rejections } => {
                panic!("phantom {patient_id} unexpectedly failed QC: {rejections:?}")
            }
        }
    }
    out
}

/// Per-patient in-plane spacing map for metric evaluation.
pub fn spacing_map(studies: &[ProcessedStudy]) -> BTreeMap<String, [f64; 2]> {
    studies.iter().map(|s| (s.patient_id.clone(), s.slice_spacing())).collect()
}
