//! 2x2 max pooling and nearest-neighbor 2x upsampling.

use ndarray::Array4;

/// Indices of the winning element within each 2x2 window, stored as the
/// flattened offset `dy * 2 + dx`. Ties resolve to the first element in
/// row-major scan order, which keeps replays bit-for-bit reproducible.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Array4<u8>,
    pub in_shape: (usize, usize, usize, usize),
}

/// Max pool with window 2 and stride 2. Spatial sides must be even.
pub fn maxpool2_forward(x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial sides");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((b, c, oh, ow));
    let mut argmax = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[[bi, ci, oy * 2 + dy, ox * 2 + dx]];
                            if v > best {
                                best = v;
                                best_k = (dy * 2 + dx) as u8;
                            }
                        }
                    }
                    y[[bi, ci, oy, ox]] = best;
                    argmax[[bi, ci, oy, ox]] = best_k;
                }
            }
        }
    }
    (y, PoolCache { argmax, in_shape: (b, c, h, w) })
}

pub fn maxpool2_backward(cache: &PoolCache, gy: &Array4<f64>) -> Array4<f64> {
    let (b, c, _, _) = cache.in_shape;
    let (_, _, oh, ow) = gy.dim();
    let mut gx = Array4::zeros(cache.in_shape);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = cache.argmax[[bi, ci, oy, ox]] as usize;
                    let (dy, dx) = (k / 2, k % 2);
                    gx[[bi, ci, oy * 2 + dy, ox * 2 + dx]] += gy[[bi, ci, oy, ox]];
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h * 2 {
                for xx in 0..w * 2 {
                    y[[bi, ci, yy, xx]] = x[[bi, ci, yy / 2, xx / 2]];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = gy.dim();
    let mut gx = Array4::zeros((b, c, h2 / 2, w2 / 2));
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    gx[[bi, ci, yy / 2, xx / 2]] += gy[[bi, ci, yy, xx]];
                }
            }
        }
    }
    gx
}
