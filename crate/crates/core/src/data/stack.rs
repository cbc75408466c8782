//! Preprocessed studies and 2.5D sample assembly.

use ndarray::{Array2, Array3};

use super::{SliceSample, TargetKind};
use crate::error::{Result, SegError};

/// Summary of one ROI carried alongside the processed volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiMeta {
    pub volume_cc: f64,
    pub suv_max: f64,
    /// Number of axial slices containing foreground.
    pub n_slices: usize,
    pub z_min: usize,
    pub z_max: usize,
}

/// A study after preprocessing: byte-range CT/PET volumes plus binary masks,
/// ready for sample assembly or PNG export.
#[derive(Debug, Clone)]
pub struct ProcessedStudy {
    pub patient_id: String,
    pub scanner: String,
    /// Exported pixel spacing in mm, ordered `(x, y, z)`.
    pub spacing_mm: [f64; 3],
    /// Windowed CT in `[0, 255]`, `(z, y, x)`.
    pub ct: Array3<f64>,
    /// Normalized PET in `[0, 255]`, `(z, y, x)`.
    pub pet: Array3<f64>,
    pub gtv_mask: Array3<bool>,
    pub igtv_mask: Array3<bool>,
    pub gtv_meta: RoiMeta,
    pub igtv_meta: RoiMeta,
    /// SUV value mapped to 255 during PET normalization.
    pub suv_norm_max: f64,
}

impl ProcessedStudy {
    pub fn mask(&self, kind: TargetKind) -> &Array3<bool> {
        match kind {
            TargetKind::Gtv => &self.gtv_mask,
            TargetKind::Igtv => &self.igtv_mask,
        }
    }

    pub fn meta(&self, kind: TargetKind) -> &RoiMeta {
        match kind {
            TargetKind::Gtv => &self.gtv_meta,
            TargetKind::Igtv => &self.igtv_meta,
        }
    }

    /// In-plane spacing `(y, x)` for slice-level metrics.
    pub fn slice_spacing(&self) -> [f64; 2] {
        [self.spacing_mm[1], self.spacing_mm[0]]
    }
}

/// Assemble the input stack for slice `t`.
///
/// `depth` consecutive slices per modality are stacked as channels, CT block
/// first: `[CT_{t-1}, CT_t, CT_{t+1}, PET_{t-1}, PET_t, PET_{t+1}]` at depth
/// 3 and `[CT_t, PET_t]` at depth 1. Neighbors past the volume boundary
/// replicate the boundary slice so every channel keeps its meaning.
pub fn assemble_stack(
    study: &ProcessedStudy,
    kind: TargetKind,
    t: usize,
    depth: usize,
) -> Result<SliceSample> {
    if depth == 0 || depth % 2 == 0 {
        return Err(SegError::config(format!("stack depth must be odd and positive, got {depth}")));
    }
    let (nz, ny, nx) = study.ct.dim();
    if t >= nz {
        return Err(SegError::input(format!("slice {t} outside volume with {nz} slices")));
    }
    let half = (depth / 2) as isize;
    let mut input = Array3::zeros((2 * depth, ny, nx));
    for (block, vol) in [(0, &study.ct), (depth, &study.pet)] {
        for (k, off) in (-half..=half).enumerate() {
            let z = (t as isize + off).clamp(0, nz as isize - 1) as usize;
            let mut ch = input.index_axis_mut(ndarray::Axis(0), block + k);
            ch.assign(&vol.index_axis(ndarray::Axis(0), z));
        }
    }
    let mask = study.mask(kind);
    let mut target = Array2::zeros((ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            target[[y, x]] = mask[[t, y, x]] as u8 as f64;
        }
    }
    Ok(SliceSample { input, target, patient_id: study.patient_id.clone(), slice_index: t })
}
