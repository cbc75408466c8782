//! Fully connected layer over `(batch, features)` inputs.

use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;

use super::conv::{init_weight, Init};
use super::{join, Visit};
use crate::tensor::Param;

#[derive(Debug, Clone)]
pub struct LinearCache {
    x: Array2<f64>,
}

/// Dense layer `y = x W^T (+ b)`. Weight layout is `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    in_f: usize,
    out_f: usize,
}

impl Linear {
    pub fn new<R: Rng>(in_f: usize, out_f: usize, with_bias: bool, init: Init, rng: &mut R) -> Self {
        let weight = init_weight(&[out_f, in_f], in_f, init, rng);
        let bias = with_bias.then(|| Param::new(ArrayD::zeros(ndarray::IxDyn(&[out_f]))));
        Linear { weight: Param::new(weight), bias, in_f, out_f }
    }

    pub fn in_features(&self) -> usize {
        self.in_f
    }

    pub fn out_features(&self) -> usize {
        self.out_f
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_f, "linear input features");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.dot(&w.t());
        if let Some(b) = &self.bias {
            let bv = b.value.view().into_dimensionality::<Ix1>().unwrap();
            y += &bv.broadcast((x.nrows(), self.out_f)).unwrap();
        }
        y
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        (self.forward(x), LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, gy: &Array2<f64>) -> Array2<f64> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        self.weight.grad += &gy.t().dot(&cache.x).into_dyn();
        if let Some(b) = &mut self.bias {
            b.grad += &gy.sum_axis(Axis(0)).into_dyn();
        }
        gy.dot(&w)
    }
}

impl Visit for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_manual_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(2, 3, true, Init::Kaiming, &mut rng);
        lin.weight.value = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].into_dyn();
        if let Some(b) = &mut lin.bias {
            b.value = array![0.5, -0.5, 1.0].into_dyn();
        }
        let x = array![[1.0, -1.0]];
        let y = lin.forward(&x);
        assert_eq!(y, array![[-0.5, -1.5, 0.0]]);
    }

    #[test]
    fn backward_accumulates_weight_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(2, 1, false, Init::Kaiming, &mut rng);
        let x = array![[3.0, 4.0]];
        let (_, cache) = lin.forward_train(&x);
        let gy = array![[2.0]];
        let gx = lin.backward(&cache, &gy);
        assert_eq!(lin.weight.grad, array![[6.0, 8.0]].into_dyn());
        let w = lin.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert!((gx[[0, 0]] - 2.0 * w[[0, 0]]).abs() < 1e-12);
    }
}
