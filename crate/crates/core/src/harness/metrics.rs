//! Reconstruction quality metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [h, w, 1] => Ok((h, w)),
        ref s => Err(Error::Usage(format!("expected a single-channel image, got {s:?}"))),
    }
}

fn same_plane(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::Usage(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    plane(a)
}

/// `10·log10(peak²/MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Usage(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for xo in 0..ow {
            tmp[y * ow + xo] = g.iter().zip(&row[xo..xo + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(yo + k) * ow + xo]).sum();
        }
    }
    out
}

/// Mean local SSIM over every valid 11×11 Gaussian-weighted window
/// (σ = 1.5, K1 = 0.01, K2 = 0.03, peak 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = same_plane(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let g = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: fn(f64, f64) -> f64| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, &g);
    let mu_y = filter_valid(y, h, w, &g);
    let xx = filter_valid(&prod(|p, _| p * p), h, w, &g);
    let yy = filter_valid(&prod(|_, q| q * q), h, w, &g);
    let xy = filter_valid(&prod(|p, q| p * q), h, w, &g);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let (vx, vy, cov) = (xx[i] - mx * mx, yy[i] - my * my, xy[i] - mx * my);
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Direct (`β_i = 1`) and size-weighted (`β_i = n_i`) averages of
/// per-dataset scores given as `(score, dataset size)`.
pub fn average_report(scores: &[(f64, usize)]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Usage("average_report needs at least one dataset".into()));
    }
    if scores.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Usage("dataset sizes must be positive".into()));
    }
    let direct = scores.iter().map(|&(s, _)| s).sum::<f64>() / scores.len() as f64;
    let mass: f64 = scores.iter().map(|&(_, n)| n as f64).sum();
    let weighted = scores.iter().map(|&(s, n)| s * n as f64).sum::<f64>() / mass;
    Ok((direct, weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_values() {
        let a = Tensor::full(&[4, 4, 1], 0.5);
        let b = Tensor::full(&[4, 4, 1], 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::zeros(&[4, 4]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::rand_uniform(&[24, 20, 1], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&Tensor::zeros(&[10, 30]), &Tensor::zeros(&[10, 30])).is_err());
    }

    #[test]
    fn window_is_normalised_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn equal_scores_average_to_themselves() {
        assert_eq!(average_report(&[(3.5, 2), (3.5, 9)]).unwrap(), (3.5, 3.5));
        assert!(average_report(&[]).is_err());
    }
}
