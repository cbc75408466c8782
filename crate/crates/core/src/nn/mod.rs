//! Minimal neural network substrate: layers with explicit forward caches and
//! hand-written backward passes, all in f64.
//!
//! Every layer follows the same shape: `forward` for inference,
//! `forward_train` returning `(output, cache)`, and `backward` consuming the
//! cache, accumulating parameter gradients, and returning the input gradient.

pub mod act;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod pool;

pub use act::{relu_backward, relu_forward, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use conv::{Conv2d, ConvCache, DepthwiseConv2d, DwConvCache, Init};
pub use init::{kaiming_normal, trunc_normal};
pub use linear::{Linear, LinearCache};
pub use norm::{Norm2d, NormCache, NormKind};
pub use pool::{
    maxpool2_backward, maxpool2_forward, upsample2_backward, upsample2_forward, PoolCache,
};
pub use crate::tensor::Param;

use ndarray::ArrayD;

/// Visitor over the named state of a module tree.
///
/// Parameter names are hierarchical dotted paths ("pet.enc0.conv1.weight").
/// The visit order is fixed by construction, which checkpointing and the
/// optimizer rely on.
pub trait Visit {
    /// Visit every trainable parameter.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Visit non-trainable state (normalization running statistics).
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {}
}

/// Join a dotted prefix and a leaf name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
