//! Contour rasterization: even-odd point-in-polygon over pixel centers.
//!
//! Pixel centers sit at `(x * sx, y * sy)` in physical mm, matching the
//! coordinate convention used everywhere else in the pipeline.

use ndarray::Array3;

use super::SliceContour;
use crate::error::{Result, SegError};

/// Even-odd rule: a point is inside when a ray to the right crosses the
/// polygon boundary an odd number of times.
pub fn point_in_polygon(px: f64, py: f64, poly: &[[f64; 2]]) -> bool {
    // The polygon is closed (last == first), so consecutive pairs cover
    // every edge exactly once.
    let mut inside = false;
    for pair in poly.windows(2) {
        let [x1, y1] = pair[0];
        let [x2, y2] = pair[1];
        if (y1 > py) != (y2 > py) {
            let x_cross = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn validate_contour(c: &SliceContour, nz: usize) -> Result<()> {
    if c.points.len() < 4 {
        return Err(SegError::data(format!(
            "contour on slice {} has {} points; a closed polygon needs at least 4",
            c.slice,
            c.points.len()
        )));
    }
    let first = c.points[0];
    let last = c.points[c.points.len() - 1];
    if first != last {
        return Err(SegError::data(format!(
            "contour on slice {} is not closed: first {:?} != last {:?}",
            c.slice, first, last
        )));
    }
    if c.slice >= nz {
        return Err(SegError::data(format!(
            "contour slice {} outside volume with {} slices",
            c.slice, nz
        )));
    }
    Ok(())
}

/// Rasterize per-slice closed polygons into a 3D mask on a `(nz, ny, nx)`
/// grid with spacing `(sx, sy, sz)` mm. Multiple contours on one slice are
/// combined with logical OR.
pub fn rasterize_contours(
    contours: &[SliceContour],
    dims: (usize, usize, usize),
    spacing_mm: [f64; 3],
) -> Result<Array3<bool>> {
    let (nz, ny, nx) = dims;
    let (sx, sy) = (spacing_mm[0], spacing_mm[1]);
    let mut mask = Array3::from_elem(dims, false);
    for c in contours {
        validate_contour(c, nz)?;
        // Restrict the scan to the polygon's bounding box.
        let min_x = c.points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = c.points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = c.points.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = c.points.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = ((min_x / sx).floor().max(0.0)) as usize;
        let x1 = (((max_x / sx).ceil() as isize).min(nx as isize - 1)).max(0) as usize;
        let y0 = ((min_y / sy).floor().max(0.0)) as usize;
        let y1 = (((max_y / sy).ceil() as isize).min(ny as isize - 1)).max(0) as usize;
        if min_x > (nx - 1) as f64 * sx || min_y > (ny - 1) as f64 * sy || max_x < 0.0 || max_y < 0.0
        {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !mask[[c.slice, y, x]] && point_in_polygon(x as f64 * sx, y as f64 * sy, &c.points)
                {
                    mask[[c.slice, y, x]] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// Foreground voxel count times voxel volume, in cubic centimeters.
pub fn compute_volume(mask: &Array3<bool>, spacing_mm: [f64; 3]) -> f64 {
    let count = mask.iter().filter(|v| **v).count();
    count as f64 * spacing_mm[0] * spacing_mm[1] * spacing_mm[2] / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(slice: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> SliceContour {
        SliceContour {
            slice,
            points: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]],
        }
    }

    #[test]
    fn rectangle_covers_enclosed_pixel_centers() {
        // Centers at integer mm; the rectangle strictly contains centers 1..=4.
        let c = rect(0, 0.5, 0.5, 4.5, 4.5);
        let mask = rasterize_contours(&[c], (1, 8, 8), [1.0, 1.0, 1.0]).unwrap();
        let count = mask.iter().filter(|v| **v).count();
        assert_eq!(count, 16);
        assert!(mask[[0, 1, 1]]);
        assert!(mask[[0, 4, 4]]);
        assert!(!mask[[0, 0, 0]]);
        assert!(!mask[[0, 5, 5]]);
    }

    #[test]
    fn empty_contour_list_gives_empty_mask() {
        let mask = rasterize_contours(&[], (2, 4, 4), [1.0, 1.0, 1.0]).unwrap();
        assert!(mask.iter().all(|v| !*v));
    }

    #[test]
    fn polygon_outside_grid_gives_empty_mask() {
        let c = rect(0, 100.0, 100.0, 110.0, 110.0);
        let mask = rasterize_contours(&[c], (1, 8, 8), [1.0, 1.0, 1.0]).unwrap();
        assert!(mask.iter().all(|v| !*v));
    }

    #[test]
    fn open_polygon_is_a_data_error() {
        let c = SliceContour { slice: 0, points: vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]] };
        let err = rasterize_contours(&[c], (1, 4, 4), [1.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, SegError::Data(_)));
    }

    #[test]
    fn rasterization_matches_brute_force_point_test() {
        // An irregular pentagon, checked against a direct center-by-center scan.
        let poly = vec![[1.2, 0.8], [6.3, 1.1], [6.9, 4.7], [3.5, 6.8], [0.7, 3.9], [1.2, 0.8]];
        let c = SliceContour { slice: 0, points: poly.clone() };
        let sp = [0.9, 1.1, 1.0];
        let mask = rasterize_contours(&[c], (1, 9, 9), sp).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let want = point_in_polygon(x as f64 * sp[0], y as f64 * sp[1], &poly);
                assert_eq!(mask[[0, y, x]], want, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn volume_accounts_for_anisotropic_voxels() {
        let mut mask = Array3::from_elem((4, 5, 5), false);
        for i in 0..100 {
            mask[[i / 25, (i % 25) / 5, i % 5]] = true;
        }
        let v = compute_volume(&mask, [0.98, 0.98, 2.8]);
        assert!((v - 0.268912).abs() < 1e-9);
        let empty = Array3::from_elem((2, 2, 2), false);
        assert_eq!(compute_volume(&empty, [1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn thousand_unit_voxels_is_one_cc() {
        let mask = Array3::from_elem((10, 10, 10), true);
        assert!((compute_volume(&mask, [1.0, 1.0, 1.0]) - 1.0).abs() < 1e-12);
    }
}
