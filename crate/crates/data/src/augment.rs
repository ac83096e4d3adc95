//! Random crop and horizontal flip for 32x32 colour images.

use backeisnn::{Element, Tensor};
use rand::Rng;

use crate::ImageSample;

/// Zero padding added on each side before cropping.
pub const PAD: usize = 4;

/// Shifts the image by cropping the zero-padded image at `(dy, dx)`
/// (each in `0..=2*PAD`) and optionally mirrors it left to right.
pub fn crop_flip<T: Element>(pixels: &Tensor<T>, dy: usize, dx: usize, flip: bool) -> Tensor<T> {
    let [c, h, w] = [pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]];
    assert!(
        dy <= 2 * PAD && dx <= 2 * PAD,
        "crop offset ({dy}, {dx}) out of range"
    );
    let src = pixels.data();
    let mut out = vec![T::from_f64(0.0); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + dx) as isize - PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::from_vec([c, h, w], out).expect("same shape")
}

/// Pad-4 random crop followed by a horizontal flip with probability 1/2.
pub fn augment_cifar<T: Element, R: Rng + ?Sized>(
    sample: &ImageSample<T>,
    rng: &mut R,
) -> ImageSample<T> {
    let dy = rng.random_range(0..=2 * PAD);
    let dx = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    ImageSample {
        pixels: crop_flip(&sample.pixels, dy, dx, flip),
        label: sample.label,
    }
}
