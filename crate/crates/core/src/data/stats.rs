//! Cohort summary statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PatientStudy, TargetKind};
use crate::error::{Result, SegError};

/// Five-number style summary of one quantity across the cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    /// Population standard deviation; a single observation has sd 0.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl Distribution {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        Some(Distribution {
            mean,
            sd: var.sqrt(),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            median,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_patients: usize,
    pub n_rois: usize,
    pub total_annotated_slices: usize,
    pub slices_per_roi: Distribution,
    pub volume_cc: Distribution,
    pub suv_max: Distribution,
    pub scanner_counts: BTreeMap<String, usize>,
}

/// Summarize a cohort. `kind` restricts the summary to one ROI type;
/// `None` pools every ROI.
pub fn dataset_stats(studies: &[PatientStudy], kind: Option<TargetKind>) -> Result<DatasetStats> {
    if studies.is_empty() {
        return Err(SegError::data("cannot summarize an empty cohort"));
    }
    let mut slice_counts = Vec::new();
    let mut volumes = Vec::new();
    let mut suvs = Vec::new();
    let mut scanner_counts = BTreeMap::new();
    for study in studies {
        *scanner_counts.entry(study.scanner.clone()).or_insert(0) += 1;
        for roi in &study.rois {
            if kind.is_some_and(|k| k != roi.kind) {
                continue;
            }
            slice_counts.push(roi.n_slices as f64);
            volumes.push(roi.volume_cc);
            suvs.push(roi.suv_max);
        }
    }
    if slice_counts.is_empty() {
        return Err(SegError::data("no ROIs matched the requested kind"));
    }
    Ok(DatasetStats {
        n_patients: studies.len(),
        n_rois: slice_counts.len(),
        total_annotated_slices: slice_counts.iter().map(|v| *v as usize).sum(),
        slices_per_roi: Distribution::from_values(&slice_counts).unwrap(),
        volume_cc: Distribution::from_values(&volumes).unwrap(),
        suv_max: Distribution::from_values(&suvs).unwrap(),
        scanner_counts,
    })
}
