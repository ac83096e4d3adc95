//! Conversion of samples into per-timestep network input.

use backeisnn::{Element, SpikeBatch, Tensor};
use rand::Rng;

use crate::{DataError, Result};

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(DataError::NoTimeBins);
    }
    Ok(())
}

/// Rate coding: at each of `steps` timesteps every pixel fires iff its
/// value exceeds a fresh uniform draw from `[0, 1)`. Returns
/// `[steps, ...pixels.shape]`.
pub fn encode_bernoulli<T: Element, R: Rng + ?Sized>(
    pixels: &Tensor<T>,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_steps(steps)?;
    let values: Vec<f64> = pixels.data().iter().map(|&p| Element::to_f64(p)).collect();
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(DataError::PixelRange { index, value });
    }
    let (one, zero) = (T::from_f64(1.0), T::from_f64(0.0));
    let mut data = Vec::with_capacity(steps * values.len());
    for _ in 0..steps {
        data.extend(
            values
                .iter()
                .map(|&p| if p > rng.random::<f64>() { one } else { zero }),
        );
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(pixels.shape());
    Ok(Tensor::from_vec(shape, data).expect("shape matches length"))
}

/// Real-valued pixels repeated at every timestep.
pub fn encode_direct<T: Element>(pixels: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    check_steps(steps)?;
    let mut data = Vec::with_capacity(steps * pixels.len());
    for _ in 0..steps {
        data.extend_from_slice(pixels.data());
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(pixels.shape());
    Ok(Tensor::from_vec(shape, data).expect("shape matches length"))
}

/// Interleaves per-sample `[T, ...]` sequences into a `[T, B, ...]` batch.
pub fn collate<T: Element>(samples: &[Tensor<T>]) -> Result<SpikeBatch<T>> {
    let first = samples
        .first()
        .ok_or_else(|| DataError::Invalid("cannot collate an empty batch".into()))?;
    if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
        return Err(DataError::Invalid(format!(
            "sample shapes differ: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let steps = first.shape()[0];
    let per_step = first.len() / steps;
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for t in 0..steps {
        for s in samples {
            data.extend_from_slice(&s.data()[t * per_step..(t + 1) * per_step]);
        }
    }
    let mut shape = vec![steps, samples.len()];
    shape.extend_from_slice(&first.shape()[1..]);
    let tensor = Tensor::from_vec(shape, data).expect("shape matches length");
    SpikeBatch::new(tensor).map_err(|e| DataError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn endpoints_are_deterministic() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let px = Tensor::from_vec([2], vec![0.0f32, 1.0]).unwrap();
        let s = encode_bernoulli(&px, 500, &mut rng).unwrap();
        for t in 0..500 {
            assert_eq!(&s.data()[2 * t..2 * t + 2], &[0.0, 1.0]);
        }
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let px = Tensor::from_vec([3], vec![0.0f64, 1.5, 0.2]).unwrap();
        assert!(matches!(
            encode_bernoulli(&px, 1, &mut rng),
            Err(DataError::PixelRange { index: 1, .. })
        ));
    }

    #[test]
    fn collate_interleaves_time_and_batch() {
        let a = Tensor::from_vec([2, 1], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec([2, 1], vec![3.0, 4.0]).unwrap();
        let batch = collate(&[a, b]).unwrap();
        assert_eq!(batch.tensor().shape(), &[2, 2, 1]);
        assert_eq!(batch.tensor().data(), &[1.0, 3.0, 2.0, 4.0]);
        let direct = encode_direct(&Tensor::from_vec([1], vec![0.3f64]).unwrap(), 3).unwrap();
        assert_eq!(direct.data(), &[0.3; 3]);
    }
}
