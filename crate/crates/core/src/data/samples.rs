//! Slice-sample loading for training and evaluation.

use std::path::Path;

use super::io::import_study;
use super::stack::{assemble_stack, ProcessedStudy};
use super::{SliceSample, TargetKind};
use crate::error::{Result, SegError};

/// Load the processed studies for the given patients, sorted by patient id.
pub fn load_studies(root: &Path, ids: &[String]) -> Result<Vec<ProcessedStudy>> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut studies = Vec::with_capacity(sorted.len());
    for id in sorted {
        let study = import_study(&root.join(id))?;
        if study.patient_id != *id {
            return Err(SegError::data(format!(
                "{id}: sidecar declares patient_id {:?}",
                study.patient_id
            )));
        }
        studies.push(study);
    }
    Ok(studies)
}

/// Assemble slice samples for one study over the ROI's annotated slice
/// range. `depth` of 1 yields 2-channel 2D samples; 3 yields the 6-channel
/// stacks with replicate-padded neighbors.
pub fn study_samples(
    study: &ProcessedStudy,
    kind: TargetKind,
    depth: usize,
) -> Result<Vec<SliceSample>> {
    let meta = study.meta(kind);
    let mut out = Vec::with_capacity(meta.z_max - meta.z_min + 1);
    for t in meta.z_min..=meta.z_max {
        out.push(assemble_stack(study, kind, t, depth)?);
    }
    Ok(out)
}

/// Samples for a set of patients, ordered by (patient id, slice index).
/// The order is a pure function of the inputs, so repeated loads see the
/// same sequence.
pub fn build_samples(
    studies: &[ProcessedStudy],
    kind: TargetKind,
    depth: usize,
) -> Result<Vec<SliceSample>> {
    let mut order: Vec<usize> = (0..studies.len()).collect();
    order.sort_by(|a, b| studies[*a].patient_id.cmp(&studies[*b].patient_id));
    let mut out = Vec::new();
    for i in order {
        out.extend(study_samples(&studies[i], kind, depth)?);
    }
    Ok(out)
}

/// Convenience: load + assemble in one call.
pub fn load_samples(
    root: &Path,
    ids: &[String],
    kind: TargetKind,
    depth: usize,
) -> Result<Vec<SliceSample>> {
    let studies = load_studies(root, ids)?;
    build_samples(&studies, kind, depth)
}
