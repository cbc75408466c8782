//! On-disk formats.
//!
//! Raw layout (one directory per patient, emitted by the phantom generator
//! and accepted by preprocessing):
//!
//! ```text
//! raw_root/
//!   cohort.json            cohort manifest: seed + patient ids
//!   <patient>/
//!     study.json           dims, spacing, scanner
//!     ct.f32               little-endian f32 voxels, (z, y, x) order
//!     pet.f32              same layout, PET grid may differ from CT
//!     contours.json        per-slice closed polygons for GTV and IGTV
//! ```
//!
//! Processed layout (emitted by preprocessing, consumed by training):
//!
//! ```text
//! data_root/
//!   split.json             patient-level partition manifest
//!   stats.json             cohort statistics
//!   <patient>/
//!     meta.toml            sidecar: spacing_mm, suv_max, volume_cc,
//!                          n_slices, scanner, plus per-ROI tables
//!     ct/slice_XXX.png     8-bit grayscale, one file per axial slice
//!     pet/slice_XXX.png
//!     mask_gtv/slice_XXX.png
//!     mask_igtv/slice_XXX.png
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{GrayImage, Luma};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::preprocess::{bilinear_resize2, nearest_resize2};
use super::stack::{ProcessedStudy, RoiMeta};
use super::stats::DatasetStats;
use super::{SliceContour, SplitSpec, Volume};
use crate::error::{Result, SegError};

fn io_ctx(path: &Path, err: std::io::Error) -> SegError {
    SegError::Data(format!("{}: {err}", path.display()))
}

fn json_ctx(path: &Path, err: serde_json::Error) -> SegError {
    SegError::Data(format!("{}: {err}", path.display()))
}

// ---------------------------------------------------------------------------
// Raw studies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawVolumeMeta {
    /// Grid dims in `(z, y, x)` order.
    pub dims: [usize; 3],
    /// Voxel spacing in mm, `(x, y, z)` order.
    pub spacing_mm: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawStudyMeta {
    pub patient_id: String,
    pub scanner: String,
    pub ct: RawVolumeMeta,
    pub pet: RawVolumeMeta,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawContours {
    pub gtv: Vec<SliceContour>,
    pub igtv: Vec<SliceContour>,
}

/// A study as stored on disk before any preprocessing.
#[derive(Debug, Clone)]
pub struct RawStudy {
    pub patient_id: String,
    pub scanner: String,
    pub ct: Volume,
    pub pet: Volume,
    pub contours: RawContours,
}

fn write_f32_volume(path: &Path, vol: &Array3<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_ctx(path, e))?;
    let mut w = BufWriter::new(file);
    for v in vol.iter() {
        w.write_f32::<LittleEndian>(*v as f32).map_err(|e| io_ctx(path, e))?;
    }
    w.flush().map_err(|e| io_ctx(path, e))?;
    Ok(())
}

fn read_f32_volume(path: &Path, dims: [usize; 3]) -> Result<Array3<f64>> {
    let file = fs::File::open(path).map_err(|e| io_ctx(path, e))?;
    let mut r = BufReader::new(file);
    let n = dims[0] * dims[1] * dims[2];
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.read_f32::<LittleEndian>().map_err(|e| io_ctx(path, e))? as f64);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| io_ctx(path, e))? != 0 {
        return Err(SegError::data(format!(
            "{}: file longer than the declared {n} voxels",
            path.display()
        )));
    }
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
        .map_err(|e| SegError::data(format!("{}: {e}", path.display())))
}

pub fn write_raw_study(dir: &Path, study: &RawStudy) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_ctx(dir, e))?;
    let (cz, cy, cx) = study.ct.dims();
    let (pz, py, px) = study.pet.dims();
    let meta = RawStudyMeta {
        patient_id: study.patient_id.clone(),
        scanner: study.scanner.clone(),
        ct: RawVolumeMeta { dims: [cz, cy, cx], spacing_mm: study.ct.spacing_mm },
        pet: RawVolumeMeta { dims: [pz, py, px], spacing_mm: study.pet.spacing_mm },
    };
    let meta_path = dir.join("study.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| json_ctx(&meta_path, e))?;
    fs::write(&meta_path, text).map_err(|e| io_ctx(&meta_path, e))?;
    write_f32_volume(&dir.join("ct.f32"), &study.ct.values)?;
    write_f32_volume(&dir.join("pet.f32"), &study.pet.values)?;
    let contours_path = dir.join("contours.json");
    let text =
        serde_json::to_string_pretty(&study.contours).map_err(|e| json_ctx(&contours_path, e))?;
    fs::write(&contours_path, text).map_err(|e| io_ctx(&contours_path, e))?;
    Ok(())
}

pub fn read_raw_study(dir: &Path) -> Result<RawStudy> {
    let meta_path = dir.join("study.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_ctx(&meta_path, e))?;
    let meta: RawStudyMeta = serde_json::from_str(&text).map_err(|e| json_ctx(&meta_path, e))?;
    let ct = Volume::new(read_f32_volume(&dir.join("ct.f32"), meta.ct.dims)?, meta.ct.spacing_mm)?;
    let pet =
        Volume::new(read_f32_volume(&dir.join("pet.f32"), meta.pet.dims)?, meta.pet.spacing_mm)?;
    let contours_path = dir.join("contours.json");
    let text = fs::read_to_string(&contours_path).map_err(|e| io_ctx(&contours_path, e))?;
    let contours: RawContours =
        serde_json::from_str(&text).map_err(|e| json_ctx(&contours_path, e))?;
    Ok(RawStudy { patient_id: meta.patient_id, scanner: meta.scanner, ct, pet, contours })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub patients: Vec<String>,
}

pub fn write_cohort_manifest(root: &Path, manifest: &CohortManifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| io_ctx(root, e))?;
    let path = root.join("cohort.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| json_ctx(&path, e))?;
    fs::write(&path, text).map_err(|e| io_ctx(&path, e))?;
    Ok(())
}

pub fn read_cohort_manifest(root: &Path) -> Result<CohortManifest> {
    let path = root.join("cohort.json");
    let text = fs::read_to_string(&path).map_err(|e| io_ctx(&path, e))?;
    serde_json::from_str(&text).map_err(|e| json_ctx(&path, e))
}

// ---------------------------------------------------------------------------
// PNG slices
// ---------------------------------------------------------------------------

/// Save a `[0, 255]` image as 8-bit grayscale PNG, rounding to the nearest
/// integer level.
pub fn save_gray_png(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = img[[y, x]].round().clamp(0.0, 255.0) as u8;
            out.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    out.save(path).map_err(|e| SegError::Data(format!("{}: {e}", path.display())))
}

pub fn load_gray_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| SegError::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            out[[y as usize, x as usize]] = img.get_pixel(x, y)[0] as f64;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Processed studies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoiMetaFile {
    pub volume_cc: f64,
    pub suv_max: f64,
    pub n_slices: usize,
    pub z_min: usize,
    pub z_max: usize,
}

impl From<&RoiMeta> for RoiMetaFile {
    fn from(m: &RoiMeta) -> Self {
        RoiMetaFile {
            volume_cc: m.volume_cc,
            suv_max: m.suv_max,
            n_slices: m.n_slices,
            z_min: m.z_min,
            z_max: m.z_max,
        }
    }
}

impl From<&RoiMetaFile> for RoiMeta {
    fn from(m: &RoiMetaFile) -> Self {
        RoiMeta {
            volume_cc: m.volume_cc,
            suv_max: m.suv_max,
            n_slices: m.n_slices,
            z_min: m.z_min,
            z_max: m.z_max,
        }
    }
}

/// Sidecar metadata. Top-level `suv_max`, `volume_cc`, and `n_slices`
/// describe the primary (IGTV) ROI; the per-ROI tables carry the same keys
/// for each ROI individually.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyMeta {
    pub patient_id: String,
    pub scanner: String,
    /// Exported pixel spacing `(x, y, z)` mm; rescaled if the PNGs were resized.
    pub spacing_mm: [f64; 3],
    pub suv_max: f64,
    pub volume_cc: f64,
    pub n_slices: usize,
    pub suv_norm_max: f64,
    /// Exported image size `(height, width)`.
    pub png_size: [usize; 2],
    /// "native" when the grid was exported as-is, otherwise
    /// "bilinear+nearest" for image/mask resizing.
    pub resize_method: String,
    pub gtv: RoiMetaFile,
    pub igtv: RoiMetaFile,
}

fn slice_path(dir: &Path, sub: &str, z: usize) -> PathBuf {
    dir.join(sub).join(format!("slice_{z:03}.png"))
}

/// Export a processed study: one PNG per slice per channel plus the sidecar.
/// `png_size` of `None` exports the native grid; `Some(s)` resizes every
/// slice to `s x s` (bilinear for images, nearest for masks) and rescales
/// the recorded pixel spacing to keep physical extents truthful.
pub fn export_study(study: &ProcessedStudy, dir: &Path, png_size: Option<usize>) -> Result<()> {
    let (nz, ny, nx) = study.ct.dim();
    let (oh, ow, resized) = match png_size {
        Some(s) if s != ny || s != nx => (s, s, true),
        _ => (ny, nx, false),
    };
    for sub in ["ct", "pet", "mask_gtv", "mask_igtv"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_ctx(&dir.join(sub), e))?;
    }
    for z in 0..nz {
        for (sub, vol) in [("ct", &study.ct), ("pet", &study.pet)] {
            let slice = vol.index_axis(ndarray::Axis(0), z).to_owned();
            let img = if resized { bilinear_resize2(&slice, oh, ow) } else { slice };
            save_gray_png(&slice_path(dir, sub, z), &img)?;
        }
        for (sub, mask) in [("mask_gtv", &study.gtv_mask), ("mask_igtv", &study.igtv_mask)] {
            let slice = mask.index_axis(ndarray::Axis(0), z).mapv(|v| v as u8 as f64 * 255.0);
            let img = if resized { nearest_resize2(&slice, oh, ow) } else { slice };
            save_gray_png(&slice_path(dir, sub, z), &img)?;
        }
    }
    let spacing_mm = if resized {
        [
            study.spacing_mm[0] * nx as f64 / ow as f64,
            study.spacing_mm[1] * ny as f64 / oh as f64,
            study.spacing_mm[2],
        ]
    } else {
        study.spacing_mm
    };
    let meta = StudyMeta {
        patient_id: study.patient_id.clone(),
        scanner: study.scanner.clone(),
        spacing_mm,
        suv_max: study.igtv_meta.suv_max,
        volume_cc: study.igtv_meta.volume_cc,
        n_slices: study.igtv_meta.n_slices,
        suv_norm_max: study.suv_norm_max,
        png_size: [oh, ow],
        resize_method: if resized { "bilinear+nearest".into() } else { "native".into() },
        gtv: (&study.gtv_meta).into(),
        igtv: (&study.igtv_meta).into(),
    };
    let meta_path = dir.join("meta.toml");
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| SegError::Data(format!("{}: {e}", meta_path.display())))?;
    fs::write(&meta_path, text).map_err(|e| io_ctx(&meta_path, e))?;
    Ok(())
}

pub fn read_study_meta(dir: &Path) -> Result<StudyMeta> {
    let meta_path = dir.join("meta.toml");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_ctx(&meta_path, e))?;
    toml::from_str(&text).map_err(|e| SegError::Data(format!("{}: {e}", meta_path.display())))
}

/// Load a processed study back from its PNG-per-slice directory.
pub fn import_study(dir: &Path) -> Result<ProcessedStudy> {
    let meta = read_study_meta(dir)?;
    let [oh, ow] = meta.png_size;
    let nz = count_slices(dir, "ct")?;
    if nz == 0 {
        return Err(SegError::data(format!("{}: no CT slices found", dir.display())));
    }
    let mut ct = Array3::zeros((nz, oh, ow));
    let mut pet = Array3::zeros((nz, oh, ow));
    let mut gtv = Array3::from_elem((nz, oh, ow), false);
    let mut igtv = Array3::from_elem((nz, oh, ow), false);
    for z in 0..nz {
        let img = load_gray_png(&slice_path(dir, "ct", z))?;
        check_size(dir, "ct", &img, oh, ow)?;
        ct.index_axis_mut(ndarray::Axis(0), z).assign(&img);
        let img = load_gray_png(&slice_path(dir, "pet", z))?;
        check_size(dir, "pet", &img, oh, ow)?;
        pet.index_axis_mut(ndarray::Axis(0), z).assign(&img);
        let img = load_gray_png(&slice_path(dir, "mask_gtv", z))?;
        check_size(dir, "mask_gtv", &img, oh, ow)?;
        gtv.index_axis_mut(ndarray::Axis(0), z).assign(&img.mapv(|v| v > 127.0));
        let img = load_gray_png(&slice_path(dir, "mask_igtv", z))?;
        check_size(dir, "mask_igtv", &img, oh, ow)?;
        igtv.index_axis_mut(ndarray::Axis(0), z).assign(&img.mapv(|v| v > 127.0));
    }
    Ok(ProcessedStudy {
        patient_id: meta.patient_id,
        scanner: meta.scanner,
        spacing_mm: meta.spacing_mm,
        ct,
        pet,
        gtv_mask: gtv,
        igtv_mask: igtv,
        gtv_meta: (&meta.gtv).into(),
        igtv_meta: (&meta.igtv).into(),
        suv_norm_max: meta.suv_norm_max,
    })
}

fn count_slices(dir: &Path, sub: &str) -> Result<usize> {
    let mut z = 0;
    while slice_path(dir, sub, z).exists() {
        z += 1;
    }
    Ok(z)
}

fn check_size(dir: &Path, sub: &str, img: &Array2<f64>, oh: usize, ow: usize) -> Result<()> {
    if img.dim() != (oh, ow) {
        return Err(SegError::data(format!(
            "{}/{sub}: slice size {:?} does not match sidecar {:?}",
            dir.display(),
            img.dim(),
            (oh, ow)
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

pub fn write_split(root: &Path, split: &SplitSpec) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| io_ctx(root, e))?;
    let path = root.join("split.json");
    let text = serde_json::to_string_pretty(split).map_err(|e| json_ctx(&path, e))?;
    fs::write(&path, text).map_err(|e| io_ctx(&path, e))?;
    Ok(())
}

pub fn read_split(root: &Path) -> Result<SplitSpec> {
    let path = root.join("split.json");
    let text = fs::read_to_string(&path).map_err(|e| io_ctx(&path, e))?;
    serde_json::from_str(&text).map_err(|e| json_ctx(&path, e))
}

pub fn write_stats(root: &Path, stats: &DatasetStats) -> Result<()> {
    let path = root.join("stats.json");
    let text = serde_json::to_string_pretty(stats).map_err(|e| json_ctx(&path, e))?;
    fs::write(&path, text).map_err(|e| io_ctx(&path, e))?;
    Ok(())
}

pub fn read_stats(root: &Path) -> Result<DatasetStats> {
    let path = root.join("stats.json");
    let text = fs::read_to_string(&path).map_err(|e| io_ctx(&path, e))?;
    serde_json::from_str(&text).map_err(|e| json_ctx(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::TempDir;

    fn sample_study() -> ProcessedStudy {
        let ct = Array3::from_shape_fn((3, 8, 8), |(z, y, x)| ((z * 31 + y * 8 + x) % 256) as f64);
        let pet = Array3::from_shape_fn((3, 8, 8), |(z, y, x)| ((z * 17 + y * 3 + x * 5) % 256) as f64);
        let mut gtv = Array3::from_elem((3, 8, 8), false);
        gtv[[1, 3, 3]] = true;
        gtv[[1, 3, 4]] = true;
        let mut igtv = gtv.clone();
        igtv[[2, 3, 3]] = true;
        let gtv_meta = RoiMeta { volume_cc: 4.0, suv_max: 7.5, n_slices: 1, z_min: 1, z_max: 1 };
        let igtv_meta = RoiMeta { volume_cc: 6.0, suv_max: 7.5, n_slices: 2, z_min: 1, z_max: 2 };
        ProcessedStudy {
            patient_id: "p007".into(),
            scanner: "sim-b".into(),
            spacing_mm: [2.0, 2.0, 2.5],
            ct,
            pet,
            gtv_mask: gtv,
            igtv_mask: igtv,
            gtv_meta,
            igtv_meta,
            suv_norm_max: 7.5,
        }
    }

    #[test]
    fn png_round_trip_is_lossless_for_byte_values() {
        let dir = TempDir::new().unwrap();
        let img = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 40 + x * 3) % 256) as f64);
        let path = dir.path().join("t.png");
        save_gray_png(&path, &img).unwrap();
        let back = load_gray_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_preserves_boundary_values() {
        let dir = TempDir::new().unwrap();
        let mut img = Array2::zeros((2, 2));
        img[[0, 0]] = 0.0;
        img[[0, 1]] = 255.0;
        img[[1, 0]] = 255.4;
        img[[1, 1]] = -0.4;
        let path = dir.path().join("t.png");
        save_gray_png(&path, &img).unwrap();
        let back = load_gray_png(&path).unwrap();
        assert_eq!(back[[0, 0]], 0.0);
        assert_eq!(back[[0, 1]], 255.0);
        assert_eq!(back[[1, 0]], 255.0);
        assert_eq!(back[[1, 1]], 0.0);
    }

    #[test]
    fn processed_study_round_trips_exactly_at_native_size() {
        let dir = TempDir::new().unwrap();
        let study = sample_study();
        export_study(&study, dir.path(), None).unwrap();
        let back = import_study(dir.path()).unwrap();
        assert_eq!(back.patient_id, study.patient_id);
        assert_eq!(back.scanner, study.scanner);
        assert_eq!(back.spacing_mm, study.spacing_mm);
        assert_eq!(back.ct, study.ct);
        assert_eq!(back.pet, study.pet);
        assert_eq!(back.gtv_mask, study.gtv_mask);
        assert_eq!(back.igtv_mask, study.igtv_mask);
        assert_eq!(back.igtv_meta, study.igtv_meta);
    }

    #[test]
    fn sidecar_records_documented_keys() {
        let dir = TempDir::new().unwrap();
        let study = sample_study();
        export_study(&study, dir.path(), None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("meta.toml")).unwrap();
        for key in ["spacing_mm", "suv_max", "volume_cc", "n_slices", "scanner"] {
            assert!(text.contains(key), "missing sidecar key {key}");
        }
        let meta = read_study_meta(dir.path()).unwrap();
        assert_eq!(meta.volume_cc, study.igtv_meta.volume_cc);
        assert_eq!(meta.suv_max, 7.5);
    }

    #[test]
    fn resized_export_scales_spacing() {
        let dir = TempDir::new().unwrap();
        let study = sample_study();
        export_study(&study, dir.path(), Some(16)).unwrap();
        let meta = read_study_meta(dir.path()).unwrap();
        assert_eq!(meta.png_size, [16, 16]);
        assert_eq!(meta.resize_method, "bilinear+nearest");
        // 8 pixels at 2 mm become 16 pixels at 1 mm; extent unchanged.
        assert!((meta.spacing_mm[0] - 1.0).abs() < 1e-12);
        assert!((meta.spacing_mm[2] - 2.5).abs() < 1e-12);
        let back = import_study(dir.path()).unwrap();
        assert_eq!(back.ct.dim(), (3, 16, 16));
        assert!(back.gtv_mask.iter().any(|v| *v));
    }

    #[test]
    fn raw_study_round_trips() {
        let dir = TempDir::new().unwrap();
        let ct = Volume::new(
            Array3::from_shape_fn((2, 3, 4), |(z, y, x)| z as f64 - y as f64 * 0.5 + x as f64 * 0.25),
            [1.0, 1.5, 2.0],
        )
        .unwrap();
        let pet = Volume::new(Array3::from_elem((2, 2, 2), 1.5), [2.0, 2.25, 2.0]).unwrap();
        let contours = RawContours {
            gtv: vec![SliceContour {
                slice: 0,
                points: vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 0.0]],
            }],
            igtv: vec![],
        };
        let study = RawStudy {
            patient_id: "p001".into(),
            scanner: "sim-a".into(),
            ct,
            pet,
            contours,
        };
        write_raw_study(dir.path(), &study).unwrap();
        let back = read_raw_study(dir.path()).unwrap();
        assert_eq!(back.patient_id, "p001");
        assert_eq!(back.ct.dims(), (2, 3, 4));
        assert_eq!(back.pet.spacing_mm, [2.0, 2.25, 2.0]);
        // f32 storage: values survive within single precision.
        for (a, b) in back.ct.values.iter().zip(study.ct.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(back.contours.gtv.len(), 1);
    }

    #[test]
    fn split_and_stats_round_trip() {
        let dir = TempDir::new().unwrap();
        let split = SplitSpec {
            seed: 9,
            train: vec!["a".into()],
            val: vec!["b".into()],
            test: vec!["c".into()],
        };
        write_split(dir.path(), &split).unwrap();
        assert_eq!(read_split(dir.path()).unwrap(), split);
    }
}
