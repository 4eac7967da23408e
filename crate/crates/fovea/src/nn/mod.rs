//! Minimal CPU neural-network layers with hand-written backpropagation.
//!
//! Everything computes in `f64`. Forward passes come in two flavors:
//! `forward_train` caches what backward needs and (for batch norm) uses
//! batch statistics, `forward_eval` is a pure function of the parameters
//! and uses running statistics, so evaluation on a parameter snapshot is
//! side-effect free and thread safe.
//!
//! Gradient accumulation across the batch is chunked with a fixed chunk
//! size and the partial sums are combined in chunk order, so results do
//! not depend on how many worker threads rayon happens to use.

pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod ops;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use ops::{global_avg_pool, global_avg_pool_backward, relu, relu_backward};

use ndarray::ArrayD;

/// Fixed batch-chunk size for deterministic parallel reductions.
pub const DET_CHUNK: usize = 16;

/// What a parameter is, for optimizer policy: weight matrices get weight
/// decay and LARS trust scaling, biases and normalization gains do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    BiasOrGain,
}

/// One trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            kind,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Round the value to what survives f32 checkpoint storage.
    ///
    /// Called whenever a checkpoint is written, so an uninterrupted run and
    /// a run resumed from that checkpoint continue from bit-identical state.
    pub fn round_to_f32(&mut self) {
        self.value.mapv_inplace(|v| v as f32 as f64);
    }
}

/// Simple FNV-1a over the raw f64 bytes; used by tests and freeze contracts
/// to assert that a parameter set did not change.
pub fn params_checksum<'a>(params: impl IntoIterator<Item = &'a Param>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for &v in p.value.iter() {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    hash
}
