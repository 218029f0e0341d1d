use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor};

/// Normal(0, std) samples redrawn until they fall inside two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}
