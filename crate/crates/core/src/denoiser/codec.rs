//! Affine identity codec between `[0, 1]` pixels and `[-1, 1]` latents.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `S x S` (or `S x S x 1`) grayscale pixels to an `S x S x 1` latent.
pub fn encode(image: &Tensor, size: usize) -> Result<Tensor> {
    let ok = match image.dims() {
        [h, w] => *h == size && *w == size,
        [h, w, 1] => *h == size && *w == size,
        _ => false,
    };
    if !ok {
        return Err(Error::shape(format!(
            "expected a {size}x{size} grayscale image, got {:?}",
            image.dims()
        )));
    }
    image.map(|v| 2.0 * v - 1.0).reshape(&[size, size, 1])
}

/// Latent back to `S x S` pixels, clamped to `[0, 1]`.
pub fn decode(latent: &Tensor) -> Result<Tensor> {
    latent.expect_rank(3)?;
    let (h, w) = (latent.dims()[0], latent.dims()[1]);
    if latent.dims()[2] != 1 {
        return Err(Error::shape(format!(
            "decode expects a single-channel latent, got {:?}",
            latent.dims()
        )));
    }
    latent
        .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
        .reshape(&[h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn zeros_encode_to_minus_one() {
        let z = encode(&Tensor::zeros(&[8, 8]), 8).unwrap();
        assert!(z.data().iter().all(|&v| v == -1.0));
        assert_eq!(z.dims(), &[8, 8, 1]);
    }

    #[test]
    fn round_trip_on_random_images() {
        let mut rng = SeededRng::new(1);
        for _ in 0..10 {
            let img = Tensor::from_fn(&[16, 16], |_| rng.uniform() as f32);
            let back = decode(&encode(&img, 16).unwrap()).unwrap();
            assert!(back.max_abs_diff(&img).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn decode_clamps() {
        let l = Tensor::new(vec![1, 3, 1], vec![-3.0, 0.0, 5.0]).unwrap();
        assert_eq!(decode(&l).unwrap().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        assert!(matches!(encode(&Tensor::zeros(&[8, 9]), 8), Err(Error::Shape(_))));
        assert!(matches!(encode(&Tensor::zeros(&[16, 16]), 8), Err(Error::Shape(_))));
    }
}
