//! Synthetic PET/CT phantoms with respiratory motion.
//!
//! Each phantom carries an ellipsoidal tumor whose uptake follows a
//! paraboloid profile, moving sinusoidally along the superior-inferior
//! axis. The GTV is the tumor at the reference (zero-displacement) phase;
//! the IGTV is the swept envelope of the ellipsoid over the full
//! displacement range `[-A, A]`. PET is rendered as a phase average of the
//! displaced uptake map (motion blur), followed by Gaussian system blur and
//! additive noise, on a coarser grid than CT so ingestion has to resample.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::io::{RawContours, RawStudy};
use crate::data::{SliceContour, Volume};
use crate::error::{Result, SegError};

/// A static high-uptake organ (e.g. myocardium) that PET normalization
/// must clamp rather than let compress the tumor's dynamic range.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    /// Center in physical mm, `(x, y, z)`.
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub suv: f64,
    pub hu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// CT grid dims `(nz, ny, nx)`.
    pub dims: (usize, usize, usize),
    /// CT voxel spacing mm, `(x, y, z)`.
    pub spacing_mm: [f64; 3],
    /// PET grid is coarser by this factor in x and y.
    pub pet_downsample: usize,
    pub tumor_center_mm: [f64; 3],
    pub tumor_semi_axes_mm: [f64; 3],
    /// Peak superior-inferior displacement in mm.
    pub motion_amplitude_mm: f64,
    pub n_phases: usize,
    pub tumor_suv_peak: f64,
    pub background_suv: f64,
    pub confounders: Vec<OrganSpec>,
    pub lung_hu: f64,
    pub tumor_hu: f64,
    /// Gaussian system blur applied to PET, in mm.
    pub blur_sigma_mm: f64,
    /// Additive Gaussian noise on PET (SUV units) and CT (HU).
    pub pet_noise_suv: f64,
    pub ct_noise_hu: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (48, 64, 64),
            spacing_mm: [2.0, 2.0, 2.5],
            pet_downsample: 2,
            tumor_center_mm: [64.0, 64.0, 58.0],
            tumor_semi_axes_mm: [12.0, 12.0, 12.0],
            motion_amplitude_mm: 6.0,
            n_phases: 8,
            tumor_suv_peak: 9.0,
            background_suv: 0.5,
            confounders: vec![OrganSpec {
                center_mm: [98.0, 88.0, 58.0],
                semi_axes_mm: [14.0, 14.0, 18.0],
                suv: 5.0,
                hu: 40.0,
            }],
            lung_hu: -750.0,
            tumor_hu: 30.0,
            blur_sigma_mm: 2.0,
            pet_noise_suv: 0.05,
            ct_noise_hu: 15.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (nz, ny, nx) = self.dims;
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(SegError::config("phantom grid dims must be positive"));
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return Err(SegError::config(format!("nonpositive spacing {:?}", self.spacing_mm)));
        }
        if self.pet_downsample == 0 || ny % self.pet_downsample != 0 || nx % self.pet_downsample != 0
        {
            return Err(SegError::config(format!(
                "pet_downsample {} must divide the in-plane dims ({ny}, {nx})",
                self.pet_downsample
            )));
        }
        if self.tumor_semi_axes_mm.iter().any(|a| !(*a > 0.0)) {
            return Err(SegError::config(format!(
                "nonpositive tumor semi-axes {:?}",
                self.tumor_semi_axes_mm
            )));
        }
        if !(self.motion_amplitude_mm >= 0.0) {
            return Err(SegError::config(format!(
                "motion amplitude must be nonnegative, got {}",
                self.motion_amplitude_mm
            )));
        }
        if self.n_phases < 1 {
            return Err(SegError::config("n_phases must be at least 1"));
        }
        if !(self.tumor_suv_peak > self.background_suv) {
            return Err(SegError::config(format!(
                "tumor_suv_peak {} must exceed background_suv {}",
                self.tumor_suv_peak, self.background_suv
            )));
        }
        // The swept tumor must stay on the grid, or the ground truth would
        // be silently truncated.
        let extent = [
            (nx - 1) as f64 * self.spacing_mm[0],
            (ny - 1) as f64 * self.spacing_mm[1],
            (nz - 1) as f64 * self.spacing_mm[2],
        ];
        for axis in 0..3 {
            let margin = if axis == 2 { self.motion_amplitude_mm } else { 0.0 };
            let lo = self.tumor_center_mm[axis] - self.tumor_semi_axes_mm[axis] - margin;
            let hi = self.tumor_center_mm[axis] + self.tumor_semi_axes_mm[axis] + margin;
            if lo < 0.0 || hi > extent[axis] {
                return Err(SegError::config(format!(
                    "tumor envelope [{lo:.1}, {hi:.1}] mm exceeds grid extent \
                     [0, {:.1}] mm on axis {axis}",
                    extent[axis]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomStudy {
    pub patient_id: String,
    pub scanner: String,
    pub ct: Volume,
    pub pet: Volume,
    pub gtv_mask: Array3<bool>,
    pub igtv_mask: Array3<bool>,
    pub contours: RawContours,
    pub config: PhantomConfig,
}

impl PhantomStudy {
    pub fn to_raw_study(&self) -> RawStudy {
        RawStudy {
            patient_id: self.patient_id.clone(),
            scanner: self.scanner.clone(),
            ct: self.ct.clone(),
            pet: self.pet.clone(),
            contours: self.contours.clone(),
        }
    }
}

/// Normalized squared radius of point `p` (mm) in the ellipsoid at `center`.
fn rho2(p: [f64; 3], center: [f64; 3], semi: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        let d = (p[i] - center[i]) / semi[i];
        acc += d * d;
    }
    acc
}

/// Squared radius against the motion envelope: the nearest displaced center
/// over the continuous displacement range `[-amp, amp]` along z.
fn rho2_envelope(p: [f64; 3], center: [f64; 3], semi: [f64; 3], amp: f64) -> f64 {
    let dz = (p[2] - center[2]).clamp(-amp, amp);
    rho2(p, [center[0], center[1], center[2] + dz], semi)
}

fn voxel_center(x: usize, y: usize, z: usize, spacing: [f64; 3]) -> [f64; 3] {
    [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]
}

/// Separable Gaussian blur with replicate edges; `sigma` per axis in voxels.
fn gaussian_blur3(vol: &Array3<f64>, sigma: [f64; 3]) -> Array3<f64> {
    let mut out = vol.clone();
    let dims = vol.dim();
    let shape = [dims.0, dims.1, dims.2];
    for axis in 0..3 {
        let s = sigma[axis];
        if s <= 0.0 {
            continue;
        }
        let radius = (3.0 * s).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for k in -radius..=radius {
            kernel.push((-0.5 * (k as f64 / s).powi(2)).exp());
        }
        let norm: f64 = kernel.iter().sum();
        for k in kernel.iter_mut() {
            *k /= norm;
        }
        let src = out.clone();
        let n = shape[axis] as isize;
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let idx = [z as isize, y as isize, x as isize];
                    let mut acc = 0.0;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let mut j = idx;
                        j[axis] = (idx[axis] + ki as isize - radius).clamp(0, n - 1);
                        acc += kw * src[[j[0] as usize, j[1] as usize, j[2] as usize]];
                    }
                    out[[z, y, x]] = acc;
                }
            }
        }
    }
    out
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Cross-section contour of the envelope at slice `z`: a closed polygon
/// approximating the ellipse the envelope cuts at that height, or `None`
/// when the slice misses the envelope.
fn slice_contour(
    z: usize,
    center: [f64; 3],
    semi: [f64; 3],
    amp: f64,
    spacing: [f64; 3],
) -> Option<SliceContour> {
    let zp = z as f64 * spacing[2];
    let dz = (zp - center[2]).clamp(-amp, amp);
    let rel = (zp - center[2] - dz) / semi[2];
    let r2 = 1.0 - rel * rel;
    if r2 <= 0.0 {
        return None;
    }
    let r = r2.sqrt();
    let (ax, ay) = (semi[0] * r, semi[1] * r);
    const N_VERTICES: usize = 64;
    let mut points = Vec::with_capacity(N_VERTICES + 1);
    for i in 0..N_VERTICES {
        let th = std::f64::consts::TAU * i as f64 / N_VERTICES as f64;
        points.push([center[0] + ax * th.cos(), center[1] + ay * th.sin()]);
    }
    points.push(points[0]);
    Some(SliceContour { slice: z, points })
}

/// Generate one phantom study. Deterministic: the same `(cfg, seed)` pair
/// always yields bit-identical volumes.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<PhantomStudy> {
    cfg.validate()?;
    let (nz, ny, nx) = cfg.dims;
    let sp = cfg.spacing_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Ground-truth masks on the CT grid.
    let mut gtv = Array3::from_elem((nz, ny, nx), false);
    let mut igtv = Array3::from_elem((nz, ny, nx), false);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = voxel_center(x, y, z, sp);
                if rho2(p, cfg.tumor_center_mm, cfg.tumor_semi_axes_mm) <= 1.0 {
                    gtv[[z, y, x]] = true;
                }
                if rho2_envelope(
                    p,
                    cfg.tumor_center_mm,
                    cfg.tumor_semi_axes_mm,
                    cfg.motion_amplitude_mm,
                ) <= 1.0
                {
                    igtv[[z, y, x]] = true;
                }
            }
        }
    }

    // PET on the coarse grid: phase-averaged paraboloid uptake.
    let f = cfg.pet_downsample;
    let (pny, pnx) = (ny / f, nx / f);
    let pet_sp = [sp[0] * f as f64, sp[1] * f as f64, sp[2]];
    let mut uptake = Array3::from_elem((nz, pny, pnx), cfg.background_suv);
    let phase_shift: Vec<f64> = (0..cfg.n_phases)
        .map(|k| {
            cfg.motion_amplitude_mm
                * (std::f64::consts::TAU * k as f64 / cfg.n_phases as f64).sin()
        })
        .collect();
    for z in 0..nz {
        for y in 0..pny {
            for x in 0..pnx {
                let p = voxel_center(x, y, z, pet_sp);
                let mut acc = 0.0;
                for shift in &phase_shift {
                    let c = [
                        cfg.tumor_center_mm[0],
                        cfg.tumor_center_mm[1],
                        cfg.tumor_center_mm[2] + shift,
                    ];
                    let r2 = rho2(p, c, cfg.tumor_semi_axes_mm);
                    if r2 < 1.0 {
                        acc += cfg.tumor_suv_peak * (1.0 - r2);
                    }
                }
                let mut v = cfg.background_suv + acc / cfg.n_phases as f64;
                for organ in &cfg.confounders {
                    if rho2(p, organ.center_mm, organ.semi_axes_mm) <= 1.0 {
                        v = v.max(organ.suv);
                    }
                }
                uptake[[z, y, x]] = v;
            }
        }
    }
    let sigma_vox = [
        cfg.blur_sigma_mm / pet_sp[2],
        cfg.blur_sigma_mm / pet_sp[1],
        cfg.blur_sigma_mm / pet_sp[0],
    ];
    let mut pet_vals = gaussian_blur3(&uptake, sigma_vox);
    if cfg.pet_noise_suv > 0.0 {
        for v in pet_vals.iter_mut() {
            *v = (*v + cfg.pet_noise_suv * standard_normal(&mut rng)).max(0.0);
        }
    }

    // CT at the reference phase.
    let mut ct_vals = Array3::from_elem((nz, ny, nx), cfg.lung_hu);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = voxel_center(x, y, z, sp);
                let mut v = cfg.lung_hu;
                for organ in &cfg.confounders {
                    if rho2(p, organ.center_mm, organ.semi_axes_mm) <= 1.0 {
                        v = organ.hu;
                    }
                }
                if rho2(p, cfg.tumor_center_mm, cfg.tumor_semi_axes_mm) <= 1.0 {
                    v = cfg.tumor_hu;
                }
                ct_vals[[z, y, x]] = v;
            }
        }
    }
    if cfg.ct_noise_hu > 0.0 {
        for v in ct_vals.iter_mut() {
            *v += cfg.ct_noise_hu * standard_normal(&mut rng);
        }
    }

    // Contours of the analytic shapes, one closed polygon per slice.
    let mut contours = RawContours::default();
    for z in 0..nz {
        if let Some(c) = slice_contour(z, cfg.tumor_center_mm, cfg.tumor_semi_axes_mm, 0.0, sp) {
            contours.gtv.push(c);
        }
        if let Some(c) = slice_contour(
            z,
            cfg.tumor_center_mm,
            cfg.tumor_semi_axes_mm,
            cfg.motion_amplitude_mm,
            sp,
        ) {
            contours.igtv.push(c);
        }
    }

    Ok(PhantomStudy {
        patient_id: String::new(),
        scanner: String::new(),
        ct: Volume::new(ct_vals, sp)?,
        pet: Volume::new(pet_vals, pet_sp)?,
        gtv_mask: gtv,
        igtv_mask: igtv,
        contours,
        config: cfg.clone(),
    })
}

/// Parameter ranges for cohort generation. Draws are sized so every study
/// passes QC by construction: semi-axes at least 10 mm put the GTV well
/// over the 3 cc floor, and the amplitude cap keeps phase-averaged peak
/// uptake above the 3.0 SUV floor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortDistribution {
    pub base: PhantomConfig,
    pub semi_axis_range_mm: (f64, f64),
    /// Amplitude drawn from [0, cap * z semi-axis].
    pub amplitude_frac_cap: f64,
    pub suv_peak_range: (f64, f64),
    pub background_suv_range: (f64, f64),
    /// In-plane center jitter, mm.
    pub center_jitter_mm: f64,
}

impl Default for CohortDistribution {
    fn default() -> Self {
        CohortDistribution {
            base: PhantomConfig::default(),
            semi_axis_range_mm: (10.0, 16.0),
            amplitude_frac_cap: 0.6,
            suv_peak_range: (6.0, 12.0),
            background_suv_range: (0.3, 0.8),
            center_jitter_mm: 6.0,
        }
    }
}

/// Generate `n` phantoms with per-patient parameters drawn from
/// `dist`. Patient `i` uses rng stream `i` of `seed`, so any subset can be
/// regenerated independently and in parallel.
pub fn phantom_cohort(
    n: usize,
    dist: &CohortDistribution,
    seed: u64,
) -> Result<Vec<PhantomStudy>> {
    if n == 0 {
        return Err(SegError::config("cohort size must be at least 1"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut cfg = dist.base.clone();
        let (lo, hi) = dist.semi_axis_range_mm;
        cfg.tumor_semi_axes_mm = [
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
        ];
        cfg.motion_amplitude_mm =
            rng.gen_range(0.0..=dist.amplitude_frac_cap * cfg.tumor_semi_axes_mm[2]);
        cfg.tumor_suv_peak = rng.gen_range(dist.suv_peak_range.0..=dist.suv_peak_range.1);
        cfg.background_suv =
            rng.gen_range(dist.background_suv_range.0..=dist.background_suv_range.1);
        let j = dist.center_jitter_mm;
        if j > 0.0 {
            cfg.tumor_center_mm[0] += rng.gen_range(-j..=j);
            cfg.tumor_center_mm[1] += rng.gen_range(-j..=j);
        }
        let study_seed = rng.gen::<u64>();
        let mut study = generate_phantom(&cfg, study_seed)?;
        study.patient_id = format!("p{:03}", i + 1);
        study.scanner = if i % 2 == 0 { "sim-a".into() } else { "sim-b".into() };
        out.push(study);
    }
    Ok(out)
}
