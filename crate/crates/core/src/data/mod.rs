//! Data pipeline: raw study ingestion, preprocessing, QC, rasterization,
//! sample assembly, and patient-level splitting.

pub mod cohort;
pub mod io;
pub mod preprocess;
pub mod raster;
pub mod samples;
pub mod split;
pub mod stack;
pub mod stats;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

/// A scalar volume in `(z, y, x)` index order with physical voxel spacing.
#[derive(Debug, Clone)]
pub struct Volume {
    pub values: Array3<f64>,
    /// Voxel spacing in mm, ordered `(x, y, z)`.
    pub spacing_mm: [f64; 3],
}

impl Volume {
    pub fn new(values: Array3<f64>, spacing_mm: [f64; 3]) -> Result<Self> {
        if spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(SegError::data(format!("nonpositive voxel spacing {spacing_mm:?}")));
        }
        Ok(Volume { values, spacing_mm })
    }

    /// Grid dims in `(z, y, x)` order.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm[0] * self.spacing_mm[1] * self.spacing_mm[2]
    }
}

/// Which ground-truth volume a mask or sample refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// Gross tumor volume at the reference respiratory phase.
    Gtv,
    /// Internal gross tumor volume: the motion envelope.
    Igtv,
}

impl TargetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            TargetKind::Gtv => "mask_gtv",
            TargetKind::Igtv => "mask_igtv",
        }
    }
}

/// One closed polygon on one axial slice, vertices in physical mm `(x, y)`.
/// Closure is explicit: the last vertex must repeat the first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceContour {
    pub slice: usize,
    pub points: Vec<[f64; 2]>,
}

/// A delineated region with its rasterized mask and summary statistics.
#[derive(Debug, Clone)]
pub struct Roi {
    pub kind: TargetKind,
    pub contours: Vec<SliceContour>,
    pub mask3d: Array3<bool>,
    pub volume_cc: f64,
    pub suv_max: f64,
    pub n_slices: usize,
    /// Inclusive axial slice range containing foreground.
    pub z_min: usize,
    pub z_max: usize,
}

/// A patient study after ingestion: CT and PET on a shared grid plus ROIs.
#[derive(Debug, Clone)]
pub struct PatientStudy {
    pub patient_id: String,
    pub scanner: String,
    pub ct: Volume,
    /// PET resampled onto the CT grid.
    pub pet: Volume,
    pub rois: Vec<Roi>,
}

impl PatientStudy {
    pub fn roi(&self, kind: TargetKind) -> Option<&Roi> {
        self.rois.iter().find(|r| r.kind == kind)
    }
}

/// One training sample: stacked CT/PET channels and the middle-slice mask.
#[derive(Debug, Clone)]
pub struct SliceSample {
    /// `(channels, H, W)`; channel order `[CT_{t-1}, CT_t, CT_{t+1},
    /// PET_{t-1}, PET_t, PET_{t+1}]` at depth 3, `[CT_t, PET_t]` at depth 1.
    pub input: Array3<f64>,
    /// Binary `{0,1}` mask of slice `t`.
    pub target: Array2<f64>,
    pub patient_id: String,
    pub slice_index: usize,
}

/// Patient-level partition of a cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn all_ids(&self) -> Vec<&str> {
        self.train
            .iter()
            .chain(self.val.iter())
            .chain(self.test.iter())
            .map(|s| s.as_str())
            .collect()
    }
}
