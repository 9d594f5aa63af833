//! Independent reference implementations checked against the library.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csformer::harness::checkpoint::Checkpoint;
use csformer::harness::{psnr, ssim};
use csformer::ops::conv2d;
use csformer::{CsFormer, Mode, ModelConfig, Tape, Tensor};

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, h, wd, cin] = *x.shape() else { panic!() };
    let [cout, kh, kw, _] = *w.shape() else { panic!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * oh * ow * cout);
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (iy, ix) = (
                                (oy * stride + ky) as isize - pad as isize,
                                (ox * stride + kx) as isize - pad as isize,
                            );
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += w.at(&[co, ky, kx, ci]) * x.at(&[img, iy as usize, ix as usize, ci]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, cout], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        seed in 0u64..1000,
        n in 1usize..3,
        h in 3usize..9,
        w in 3usize..9,
        cin in 1usize..4,
        cout in 1usize..4,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
    ) {
        let pad = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, h, w, cin], 1.0, &mut rng);
        let kern = Tensor::randn(&[cout, k, k, cin], 1.0, &mut rng);
        let bias = Tensor::randn(&[cout], 1.0, &mut rng);
        let fast = conv2d(&x, &kern, stride, pad, Some(&bias)).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_conv(&x, &kern, &bias, stride, pad)).unwrap() < 1e-12);
    }
}

fn pinv_svd(phi: &Tensor) -> DMatrix<f64> {
    let [m, n] = *phi.shape() else { panic!() };
    DMatrix::from_row_slice(m, n, phi.data()).pseudo_inverse(1e-12).unwrap()
}

#[test]
fn initial_estimate_matches_svd_pseudo_inverse() {
    for ratio in [0.01, 0.10, 0.25, 0.50] {
        let model = CsFormer::new(ModelConfig::desk().with_ratio(ratio), 3).unwrap();
        let phi = model.sampling_operator().phi_as_matrix();
        let pinv = pinv_svd(&phi);
        let head = model.initialization_matrix();
        let [rows, cols] = *head.shape() else { panic!() };
        let head = DMatrix::from_row_slice(rows, cols, head.data());
        assert!((&head - &pinv).abs().max() < 1e-8, "ratio {ratio}");

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(&[2, 64, 64, 1], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let ctx = model.bind(&tape, Mode::Eval, false);
        let initial = model.forward_patches(&ctx, tape.constant(x.clone())).unwrap().initial.value();
        let phi_m = DMatrix::from_row_slice(phi.shape()[0], phi.shape()[1], phi.data());
        let projector = &pinv * &phi_m;
        let mut worst = 0.0f64;
        for n in 0..2 {
            for by in 0..4 {
                for bx in 0..4 {
                    let v = DMatrix::from_fn(256, 1, |k, _| x.at(&[n, by * 16 + k / 16, bx * 16 + k % 16, 0]));
                    let r = &projector * v;
                    for k in 0..256 {
                        let got = initial.at(&[n, by * 16 + k / 16, bx * 16 + k % 16, 0]);
                        worst = worst.max((got - r[(k, 0)]).abs());
                    }
                }
            }
        }
        assert!(worst < 1e-8, "ratio {ratio}: {worst}");
    }
}

/// SSIM by explicit per-window weighted statistics with a 2-D Gaussian.
fn brute_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wgt = g[dy] * g[dx] / norm;
                    let (p, q) = (a.at(&[y0 + dy, x0 + dx, 0]), b.at(&[y0 + dy, x0 + dx, 0]));
                    mx += wgt * p;
                    my += wgt * q;
                    sxx += wgt * p * p;
                    syy += wgt * q * q;
                    sxy += wgt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_windowed_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (h, w) in [(11, 11), (17, 23), (32, 20)] {
        let a = Tensor::rand_uniform(&[h, w, 1], 0.0, 1.0, &mut rng);
        let noise = Tensor::randn(&[h, w, 1], 0.1, &mut rng);
        let b = a.add(&noise).unwrap();
        assert!((ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn reconstruction_is_bounded_and_untrained_model_returns_initial_estimate() {
    let model = CsFormer::new(ModelConfig::desk().with_ratio(0.5), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = Tensor::rand_uniform(&[90, 70, 1], 0.0, 1.0, &mut rng);
    let rec = model.reconstruct(&image).unwrap();
    assert_eq!(rec.image.shape(), &[90, 70, 1]);
    assert!(rec.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(rec.residual.max_abs(), 0.0);
    let clamped_initial = rec.initial.map(|v| v.clamp(0.0, 1.0));
    assert_eq!(psnr(&rec.image, &clamped_initial, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn checkpoint_files_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = CsFormer::new(ModelConfig::reduced(), 9).unwrap();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    Checkpoint::capture(&model, 0, None).save(&first).unwrap();
    Checkpoint::load(&first).unwrap().save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let bytes = std::fs::read(&first).unwrap();
    std::fs::write(&second, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Checkpoint::load(&second).is_err());
}
