//! Cohort preprocessing: raw studies in, processed PNG studies plus split
//! and stats manifests out.

use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{read_cohort_manifest, read_raw_study, write_split, write_stats, RawStudy};
use super::preprocess::{normalize_pet_by, qc_filter_values, resample_to_grid, window_ct, QcDecision, QcReason};
use super::raster::{compute_volume, rasterize_contours};
use super::split::{patient_split, DEFAULT_RATIOS};
use super::stack::{ProcessedStudy, RoiMeta};
use super::stats::dataset_stats;
use super::{PatientStudy, Roi, SliceContour, TargetKind, Volume};
use crate::error::{Result, SegError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// CT window (lo, hi) in HU.
    pub ct_window: (f64, f64),
    /// Output PNG side length; `None` keeps the native grid.
    pub png_size: Option<usize>,
    /// Seed for the patient-level split.
    pub split_seed: u64,
    pub ratios: (f64, f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            ct_window: super::preprocess::LUNG_WINDOW,
            png_size: None,
            split_seed: 0,
            ratios: DEFAULT_RATIOS,
        }
    }
}

/// One rejected ROI with the failing check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRejection {
    pub kind: TargetKind,
    pub reason: QcReason,
}

#[derive(Debug)]
pub enum ProcessOutcome {
    Accepted(Box<ProcessedStudy>),
    Rejected { patient_id: String, rejections: Vec<QcRejection> },
}

fn roi_from_contours(
    patient_id: &str,
    kind: TargetKind,
    contours: &[SliceContour],
    pet: &Array3<f64>,
    dims: (usize, usize, usize),
    spacing_mm: [f64; 3],
) -> Result<(Roi, RoiMeta)> {
    let mask = rasterize_contours(contours, dims, spacing_mm)?;
    let n_fg = mask.iter().filter(|v| **v).count();
    if n_fg == 0 {
        return Err(SegError::data(format!(
            "{patient_id}: {kind:?} contours rasterize to an empty mask"
        )));
    }
    let volume_cc = compute_volume(&mask, spacing_mm);
    let mut suv_max = f64::NEG_INFINITY;
    for (m, v) in mask.iter().zip(pet.iter()) {
        if *m && *v > suv_max {
            suv_max = *v;
        }
    }
    let mut z_min = usize::MAX;
    let mut z_max = 0;
    let mut n_slices = 0;
    for (z, plane) in mask.outer_iter().enumerate() {
        if plane.iter().any(|v| *v) {
            z_min = z_min.min(z);
            z_max = z_max.max(z);
            n_slices += 1;
        }
    }
    let roi = Roi {
        kind,
        contours: contours.to_vec(),
        mask3d: mask,
        volume_cc,
        suv_max,
        n_slices,
        z_min,
        z_max,
    };
    let meta = RoiMeta { volume_cc, suv_max, n_slices, z_min, z_max };
    Ok((roi, meta))
}

/// Run the full per-study pipeline: PET resampling onto the CT grid, mask
/// rasterization, ROI statistics, QC, CT windowing, and PET normalization.
/// QC rejections are reported, not errors; malformed inputs are errors.
pub fn process_study(raw: &RawStudy, cfg: &PreprocessConfig) -> Result<ProcessOutcome> {
    let dims = raw.ct.dims();
    let pet_on_ct = resample_to_grid(&raw.pet, dims, raw.ct.spacing_mm)?.values;
    let spacing = raw.ct.spacing_mm;

    let (gtv, gtv_meta) = roi_from_contours(
        &raw.patient_id,
        TargetKind::Gtv,
        &raw.contours.gtv,
        &pet_on_ct,
        dims,
        spacing,
    )?;
    let (igtv, igtv_meta) = roi_from_contours(
        &raw.patient_id,
        TargetKind::Igtv,
        &raw.contours.igtv,
        &pet_on_ct,
        dims,
        spacing,
    )?;

    let mut rejections = Vec::new();
    for roi in [&gtv, &igtv] {
        if let QcDecision::Reject(reason) = qc_filter_values(roi.volume_cc, roi.suv_max) {
            rejections.push(QcRejection { kind: roi.kind, reason });
        }
    }
    if !rejections.is_empty() {
        return Ok(ProcessOutcome::Rejected { patient_id: raw.patient_id.clone(), rejections });
    }

    let ct = window_ct(&raw.ct.values, cfg.ct_window.0, cfg.ct_window.1)?;
    // Normalize against the IGTV maximum: GTV is a subset, so both targets
    // stay anchored to the same intensity scale.
    let suv_norm_max = igtv.suv_max;
    let pet = normalize_pet_by(&pet_on_ct, suv_norm_max)?;

    let study = ProcessedStudy {
        patient_id: raw.patient_id.clone(),
        scanner: raw.scanner.clone(),
        spacing_mm: spacing,
        ct,
        pet,
        gtv_mask: gtv.mask3d,
        igtv_mask: igtv.mask3d,
        gtv_meta,
        igtv_meta,
        suv_norm_max,
    };
    Ok(ProcessOutcome::Accepted(Box::new(study)))
}

/// In-memory form used for dataset statistics.
pub fn to_patient_study(raw: &RawStudy) -> Result<PatientStudy> {
    let dims = raw.ct.dims();
    let pet_on_ct = resample_to_grid(&raw.pet, dims, raw.ct.spacing_mm)?.values;
    let spacing = raw.ct.spacing_mm;
    let (gtv, _) = roi_from_contours(
        &raw.patient_id,
        TargetKind::Gtv,
        &raw.contours.gtv,
        &pet_on_ct,
        dims,
        spacing,
    )?;
    let (igtv, _) = roi_from_contours(
        &raw.patient_id,
        TargetKind::Igtv,
        &raw.contours.igtv,
        &pet_on_ct,
        dims,
        spacing,
    )?;
    Ok(PatientStudy {
        patient_id: raw.patient_id.clone(),
        scanner: raw.scanner.clone(),
        ct: Volume::new(raw.ct.values.clone(), spacing)?,
        pet: Volume::new(pet_on_ct, spacing)?,
        rois: vec![gtv, igtv],
    })
}

#[derive(Debug, Serialize)]
pub struct PreprocessReport {
    pub n_raw: usize,
    pub accepted: Vec<String>,
    pub rejected: Vec<(String, Vec<QcRejection>)>,
    pub split: super::SplitSpec,
    pub stats: super::stats::DatasetStats,
}

/// Preprocess every patient listed in the cohort manifest. Studies are
/// processed in parallel; all outputs (per-patient directories, split
/// manifest, stats) are keyed and ordered by patient id, so the result is
/// independent of worker count.
pub fn preprocess_cohort(
    raw_root: &Path,
    out_root: &Path,
    cfg: &PreprocessConfig,
) -> Result<PreprocessReport> {
    let manifest = read_cohort_manifest(raw_root)?;
    let mut ids = manifest.patients.clone();
    ids.sort();

    let outcomes: Vec<Result<(String, ProcessOutcome, Option<PatientStudy>)>> = ids
        .par_iter()
        .map(|id| {
            let raw = read_raw_study(&raw_root.join(id))?;
            if raw.patient_id != *id {
                return Err(SegError::data(format!(
                    "{id}: study.json declares patient_id {:?}",
                    raw.patient_id
                )));
            }
            let outcome = process_study(&raw, cfg)?;
            let stats_view = match &outcome {
                ProcessOutcome::Accepted(study) => {
                    super::io::export_study(study, &out_root.join(id), cfg.png_size)?;
                    Some(to_patient_study(&raw)?)
                }
                ProcessOutcome::Rejected { .. } => None,
            };
            Ok((id.clone(), outcome, stats_view))
        })
        .collect();

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut stats_studies = Vec::new();
    for item in outcomes {
        let (id, outcome, stats_view) = item?;
        match outcome {
            ProcessOutcome::Accepted(_) => {
                accepted.push(id);
                stats_studies.push(stats_view.expect("accepted study has stats view"));
            }
            ProcessOutcome::Rejected { rejections, .. } => rejected.push((id, rejections)),
        }
    }
    if accepted.len() < 3 {
        return Err(SegError::data(format!(
            "only {} studies passed QC; need at least 3 to split",
            accepted.len()
        )));
    }

    let split = patient_split(&accepted, cfg.ratios, cfg.split_seed)?;
    write_split(out_root, &split)?;
    let stats = dataset_stats(&stats_studies, Some(TargetKind::Igtv))?;
    write_stats(out_root, &stats)?;

    Ok(PreprocessReport { n_raw: ids.len(), accepted, rejected, split, stats })
}

#[cfg(test)]
mod tests {
    use super::super::io::RawContours;
    use super::*;
    use ndarray::Array3;

    // A block tumor: rectangles over slices [z0, z1], sized in pixels.
    fn rect_contours(z0: usize, z1: usize, x0: f64, y0: f64, x1: f64, y1: f64, s: f64) -> Vec<SliceContour> {
        (z0..=z1)
            .map(|z| SliceContour {
                slice: z,
                points: vec![
                    [x0 * s, y0 * s],
                    [x1 * s, y0 * s],
                    [x1 * s, y1 * s],
                    [x0 * s, y1 * s],
                    [x0 * s, y0 * s],
                ],
            })
            .collect()
    }

    fn block_raw(patient_id: &str, suv_peak: f64) -> RawStudy {
        let dims = (6, 16, 16);
        let spacing = [2.0, 2.0, 2.5];
        let ct = Volume::new(Array3::from_elem(dims, -400.0), spacing).unwrap();
        // PET on the same grid for simplicity; peak inside the tumor block.
        let mut pet_vals = Array3::from_elem(dims, 0.5);
        for z in 1..=4 {
            for y in 4..=10 {
                for x in 4..=10 {
                    pet_vals[[z, y, x]] = suv_peak * 0.8;
                }
            }
        }
        pet_vals[[2, 7, 7]] = suv_peak;
        let pet = Volume::new(pet_vals, spacing).unwrap();
        // 13x13 pixel rectangles (centers 1..=13): 1.69 cc per slice, so
        // both ROIs clear the 3 cc volume floor.
        let contours = RawContours {
            gtv: rect_contours(2, 3, 0.8, 0.8, 13.2, 13.2, 2.0),
            igtv: rect_contours(1, 4, 0.8, 0.8, 13.2, 13.2, 2.0),
        };
        RawStudy {
            patient_id: patient_id.into(),
            scanner: "sim-a".into(),
            ct,
            pet,
            contours,
        }
    }

    #[test]
    fn block_study_is_accepted_with_expected_stats() {
        let raw = block_raw("p001", 9.0);
        let out = process_study(&raw, &PreprocessConfig::default()).unwrap();
        let study = match out {
            ProcessOutcome::Accepted(s) => s,
            ProcessOutcome::Rejected { rejections, .. } => panic!("rejected: {rejections:?}"),
        };
        // 13x13 pixel rectangle per slice (centers 1..=13), 4 IGTV slices.
        let per_slice = 169.0 * 2.0 * 2.0 * 2.5 / 1000.0;
        assert!((study.igtv_meta.volume_cc - 4.0 * per_slice).abs() < 1e-9);
        assert!((study.gtv_meta.volume_cc - 2.0 * per_slice).abs() < 1e-9);
        assert_eq!(study.igtv_meta.suv_max, 9.0);
        assert_eq!(study.igtv_meta.z_min, 1);
        assert_eq!(study.igtv_meta.z_max, 4);
        assert_eq!(study.gtv_meta.n_slices, 2);
        // PET normalized by IGTV suv_max: the peak voxel maps to 255.
        assert!((study.pet[[2, 7, 7]] - 255.0).abs() < 1e-9);
        assert_eq!(study.suv_norm_max, 9.0);
        // CT windowed: -400 HU inside the lung window.
        let expect = 255.0 * (-400.0 + 1350.0) / 1500.0;
        assert!((study.ct[[0, 0, 0]] - expect).abs() < 1e-9);
    }

    #[test]
    fn low_uptake_study_is_rejected_with_suv_reason() {
        let raw = block_raw("p002", 2.0);
        let out = process_study(&raw, &PreprocessConfig::default()).unwrap();
        match out {
            ProcessOutcome::Rejected { patient_id, rejections } => {
                assert_eq!(patient_id, "p002");
                assert!(rejections.iter().all(|r| matches!(r.reason, QcReason::Suv { .. })));
                assert_eq!(rejections.len(), 2);
            }
            ProcessOutcome::Accepted(_) => panic!("expected rejection"),
        }
    }

    #[test]
    fn empty_contours_are_a_data_error() {
        let mut raw = block_raw("p003", 9.0);
        raw.contours.gtv.clear();
        let err = process_study(&raw, &PreprocessConfig::default()).unwrap_err();
        assert_eq!(err.category(), "data");
    }

    #[test]
    fn gtv_never_fails_qc_when_it_matches_igtv_uptake() {
        // Tiny GTV below the volume threshold still rejects the patient.
        let mut raw = block_raw("p004", 9.0);
        raw.contours.gtv = rect_contours(2, 2, 6.8, 6.8, 8.2, 8.2, 2.0);
        let out = process_study(&raw, &PreprocessConfig::default()).unwrap();
        match out {
            ProcessOutcome::Rejected { rejections, .. } => {
                assert_eq!(rejections.len(), 1);
                assert_eq!(rejections[0].kind, TargetKind::Gtv);
                assert!(matches!(rejections[0].reason, QcReason::Volume { .. }));
            }
            ProcessOutcome::Accepted(_) => panic!("expected volume rejection"),
        }
    }
}
