use ndarray::{ArrayView, Dimension};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean squared error over all elements.
pub fn mse_loss<T: Scalar, D: Dimension>(
    prediction: &ArrayView<T, D>,
    target: &ArrayView<T, D>,
) -> Result<T> {
    if prediction.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "loss".into(),
            expected: target.shape().to_vec(),
            found: prediction.shape().to_vec(),
        });
    }
    let n = T::from_usize_lossy(prediction.len().max(1));
    let sum: T = prediction
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_is_zero_and_offset_is_one() {
        let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i + j * k) as f64);
        assert_eq!(mse_loss(&a.view(), &a.view()).unwrap(), 0.0);
        let b = &a + 1.0;
        assert_eq!(mse_loss(&b.view(), &a.view()).unwrap(), 1.0);
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array3::from_shape_simple_fn((3, 5, 7), || rng.random_range(-2.0..2.0f64));
        let b = Array3::from_shape_simple_fn((3, 5, 7), || rng.random_range(-2.0..2.0f64));
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..7 {
                    let d = a[[i, j, k]] - b[[i, j, k]];
                    acc += d * d;
                }
            }
        }
        let got = mse_loss(&a.view(), &b.view()).unwrap();
        assert!((got - acc / 105.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = Array3::<f32>::zeros((2, 2, 2));
        let b = Array3::<f32>::zeros((2, 2, 3));
        assert!(mse_loss(&a.view(), &b.view()).is_err());
    }
}
