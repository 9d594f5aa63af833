//! Procedural grayscale images: smooth shading, hard-edged shapes and
//! oriented textures. Used as a self-contained training corpus.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// One `height×width` image with values in `[0, 1]`.
pub fn synthetic_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Tensor {
    let (h, w) = (height as f64, width as f64);
    let (gx, gy, g0) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.2..0.8));
    let mut img: Vec<f64> = (0..height * width)
        .map(|i| g0 + gx * ((i % width) as f64 / w - 0.5) + gy * ((i / width) as f64 / h - 0.5))
        .collect();

    for _ in 0..rng.random_range(3..8) {
        let (cy, cx) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let level = rng.random_range(0.0..1.0);
        let alpha = rng.random_range(0.4..1.0);
        if rng.random_bool(0.5) {
            let r = rng.random_range(0.05..0.3) * h.min(w);
            for y in 0..height {
                for x in 0..width {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    if d < r {
                        let v = &mut img[y * width + x];
                        *v = (1.0 - alpha) * *v + alpha * level;
                    }
                }
            }
        } else {
            let (hh, hw) = (rng.random_range(0.05..0.3) * h, rng.random_range(0.05..0.3) * w);
            for y in 0..height {
                for x in 0..width {
                    if (y as f64 - cy).abs() < hh && (x as f64 - cx).abs() < hw {
                        let v = &mut img[y * width + x];
                        *v = (1.0 - alpha) * *v + alpha * level;
                    }
                }
            }
        }
    }

    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(0.05..0.4);
    let amp = rng.random_range(0.0..0.12);
    let (c, s) = (theta.cos(), theta.sin());
    for y in 0..height {
        for x in 0..width {
            img[y * width + x] += amp * (freq * (c * x as f64 + s * y as f64)).sin();
        }
    }
    Tensor::from_fn(&[height, width, 1], |i| img[i].clamp(0.0, 1.0))
}

/// `count` images from a fixed seed.
pub fn synthetic_corpus(count: usize, height: usize, width: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(height, width, &mut rng)).collect()
}
