//! Numeric substrate: dense matrices, perceptrons, Adam, finite-difference
//! gradient checks and the binary checkpoint container.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod linalg;
mod matrix;
mod mlp;
mod normalizer;

pub use adam::{Adam, AdamConfig};
pub use matrix::{dot, gemm, Matrix};
pub use mlp::{Activation, MlpCache, MlpParams};
pub use normalizer::Normalizer;

/// A bundle of trainable tensors exposed as flat slices in a fixed order.
///
/// Gradients are represented by a value of the same type, so optimizers can
/// zip parameter and gradient slices.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for Vec<f64> {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl Parameters for Matrix {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.data()]
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.data_mut()]
    }
}

/// Concatenates every parameter slice.
pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    p.slices().concat()
}

/// Inverse of [`flatten`]; panics if `values` has the wrong length.
pub fn unflatten_into<P: Parameters + ?Sized>(p: &mut P, values: &[f64]) {
    let mut offset = 0;
    for s in p.slices_mut() {
        let n = s.len();
        s.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, values.len(), "flat parameter length mismatch");
}

/// Euclidean norm over all slices of several parameter sets.
pub fn global_norm(sets: &[&dyn ParametersDyn]) -> f64 {
    sets.iter()
        .flat_map(|p| p.dyn_slices())
        .flat_map(|s| s.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Object-safe view used for norm computations across heterogeneous sets.
pub trait ParametersDyn {
    fn dyn_slices(&self) -> Vec<&[f64]>;
}

impl<P: Parameters> ParametersDyn for P {
    fn dyn_slices(&self) -> Vec<&[f64]> {
        self.slices()
    }
}

/// Multiplies every entry by `s`.
pub fn scale_params<P: Parameters + ?Sized>(p: &mut P, s: f64) {
    for sl in p.slices_mut() {
        sl.iter_mut().for_each(|v| *v *= s);
    }
}

/// `acc += s * other`, slice by slice.
pub fn axpy<P: Parameters + ?Sized>(acc: &mut P, s: f64, other: &P) {
    let src = other.slices();
    for (dst, src) in acc.slices_mut().into_iter().zip(src) {
        dst.iter_mut().zip(src).for_each(|(d, v)| *d += s * v);
    }
}

pub fn all_finite<P: Parameters + ?Sized>(p: &P) -> bool {
    p.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
}
