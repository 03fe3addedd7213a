//! Minimal CPU neural-network engine: sequential networks of conv / pool /
//! upsample / dense layers with explicit forward tapes and backward passes.
//!
//! Everything is generic over the element type so the same code path can run
//! in `f32` for training speed and in `f64` for finite-difference gradient
//! checks. Image tensors use NHWC layout; convolutions lower to im2col plus
//! one GEMM per layer, which is where essentially all the arithmetic happens.

mod adam;
mod layers;
mod network;

#[cfg(test)]
mod tests;

pub use adam::{Adam, LrSchedule};
pub use layers::{Conv2d, Dense, Layer, PadMode, Tape};
pub use network::{InputShape, LayerSpec, Network, NetworkSpec, ParamGrads};

use ndarray::NdFloat;

/// Element type of all tensors in the engine.
pub trait Elem: NdFloat {
    fn from_f64_c(v: f64) -> Self;
    fn to_f64_c(self) -> f64;
}

impl Elem for f32 {
    fn from_f64_c(v: f64) -> Self {
        v as f32
    }
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64_c(v: f64) -> Self {
        v
    }
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals into the generic element type.
pub(crate) fn c<F: Elem>(v: f64) -> F {
    F::from_f64_c(v)
}

/// Batched tensor flowing through a network: either a flat feature matrix
/// `[N, d]` or an NHWC image batch `[N, H, W, C]`.
#[derive(Debug, Clone)]
pub enum Tensor<F> {
    D2(ndarray::Array2<F>),
    D4(ndarray::Array4<F>),
}

impl<F: Elem> Tensor<F> {
    pub fn batch_len(&self) -> usize {
        match self {
            Tensor::D2(a) => a.nrows(),
            Tensor::D4(a) => a.shape()[0],
        }
    }

    pub fn into_d2(self) -> ndarray::Array2<F> {
        match self {
            Tensor::D2(a) => a,
            Tensor::D4(a) => {
                let (n, h, w, ch) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
                a.into_shape_with_order((n, h * w * ch))
                    .expect("contiguous NHWC tensor")
            }
        }
    }

    pub fn as_d2(&self) -> &ndarray::Array2<F> {
        match self {
            Tensor::D2(a) => a,
            Tensor::D4(_) => panic!("expected flat tensor, found image tensor"),
        }
    }

    pub fn as_d4(&self) -> &ndarray::Array4<F> {
        match self {
            Tensor::D4(a) => a,
            Tensor::D2(_) => panic!("expected image tensor, found flat tensor"),
        }
    }
}
