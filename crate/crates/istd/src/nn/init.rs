//! Weight initialization: Kaiming fan-in scaling for conv/dense weights
//! feeding ReLU stacks, zeros for biases, ones/zeros for batchnorm.

use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::scalar::Scalar;

/// Normal weights with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming<F: Scalar, R: Rng>(
    shape: (usize, usize, usize, usize),
    fan_in: usize,
    rng: &mut R,
) -> Array4<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array4::from_shape_simple_fn(shape, || {
        let z: f64 = rng.sample(StandardNormal);
        F::from_f64(z * std)
    })
}

pub fn zeros<F: Scalar>(shape: (usize, usize, usize, usize)) -> Array4<F> {
    Array4::zeros(shape)
}

pub fn full<F: Scalar>(shape: (usize, usize, usize, usize), value: f64) -> Array4<F> {
    Array4::from_elem(shape, F::from_f64(value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kaiming_scale_tracks_fan_in() {
        let mut rng = crate::nn::rng::rng_for(0, "init-test", 0);
        let w: Array4<f64> = kaiming((64, 16, 3, 3), 16 * 9, &mut rng);
        let n = w.len() as f64;
        let var = w.iter().map(|x| x * x).sum::<f64>() / n;
        let expected = 2.0 / (16.0 * 9.0);
        assert!(
            (var - expected).abs() < expected * 0.2,
            "sample variance {var} too far from {expected}"
        );
    }
}
