//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the summary lines always reach the
//! terminal. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use csformer::cnn_stem::ConvBlock;
use csformer::gradcheck::{grad_check, Coordinates};
use csformer::harness::synthetic::synthetic_corpus;
use csformer::harness::{average_report, psnr, TrainConfig, Trainer};
use csformer::ops::{pixel_shuffle, pixel_unshuffle};
use csformer::params::{Ctx, ParamStore};
use csformer::pipeline::{merge_patches, split_patches};
use csformer::sampling::SamplingOperator;
use csformer::transformer::{AttentionParams, TransformerLayer};
use csformer::{AttentionProjection, CsFormer, FusionMode, LossTarget, Mode, ModelConfig, Result, Tape, Tensor};

const OVERFIT_ITERATIONS: u64 = 3000;
const OVERFIT_LR: (f64, f64) = (1e-3, 1e-5);
const OVERFIT_TARGET_DB: f64 = 40.0;

/// Desk geometry widened to C0 = 64; C0 = 16 plateaus near 35 dB and
/// C0 = 32 near 39 dB on the overfit image, and at C0 = 16 the corpus runs
/// do not separate the 1% and 10% ratios within 2000 iterations.
fn overfit_config() -> ModelConfig {
    ModelConfig { base_channels: 64, ..ModelConfig::desk() }.with_ratio(0.25)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

// 1. Strided-convolution sampling against explicit per-block Φ·vec(x).
fn sampling_equivalence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let patches = Tensor::rand_uniform(&[100, 64, 64, 1], 0.0, 1.0, &mut rng);
    let mut worst = 0.0f64;
    for ratio in [0.01, 0.04, 0.10, 0.25, 0.50] {
        let op = SamplingOperator::random(ratio, 16, &mut rng)?;
        let phi = op.phi_as_matrix();
        let m = op.measurements();
        let y = op.sample_patch(&patches)?;
        let y = y.values();
        for n in 0..100 {
            for by in 0..4 {
                for bx in 0..4 {
                    for k in 0..m {
                        let mut acc = 0.0;
                        for i in 0..16 {
                            for j in 0..16 {
                                acc += phi.at(&[k, i * 16 + j]) * patches.at(&[n, by * 16 + i, bx * 16 + j, 0]);
                            }
                        }
                        worst = worst.max((acc - y.at(&[n, by, bx, k])).abs());
                    }
                }
            }
        }
    }
    outcome(worst < 1e-10, format!("max abs diff {worst:.2e} (< 1e-10)"))
}

// 2. Every intermediate shape of the default model at ratio 25%.
fn shape_contract() -> Result<Outcome> {
    let model = CsFormer::new(ModelConfig::default().with_ratio(0.25), 2)?;
    let tape = Tape::new();
    let ctx = model.bind(&tape, Mode::Eval, false);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fwd = model.forward_patches(&ctx, tape.constant(Tensor::rand_uniform(&[1, 64, 64, 1], 0.0, 1.0, &mut rng)))?;
    let got: Vec<Vec<usize>> = [fwd.measurements, fwd.initial, fwd.input_feature]
        .into_iter()
        .chain(fwd.cnn_pyramid.iter().copied())
        .chain(fwd.transformer_trace.iter().copied())
        .chain([fwd.output])
        .map(|v| v.shape()[1..].to_vec())
        .collect();
    let want: Vec<Vec<usize>> = vec![
        vec![4, 4, 64],
        vec![64, 64, 1],
        vec![8, 8, 128],
        vec![8, 8, 128],
        vec![16, 16, 64],
        vec![32, 32, 32],
        vec![64, 64, 16],
        vec![64, 256],
        vec![256, 128],
        vec![1024, 64],
        vec![4096, 32],
        vec![64, 64, 1],
    ];
    let detail = if got == want { "all 12 shapes match".to_string() } else { format!("got {got:?}") };
    outcome(got == want, detail)
}

/// Naive multi-head attention with explicit loops and a materialised bias.
fn naive_attention(att: &AttentionParams, store: &ParamStore, x: &Tensor) -> Tensor {
    let (nw, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h, p) = (att.heads, att.window);
    let d = c / h;
    let span = 2 * p - 1;
    let (wq, wk, wv) = (store.get(att.w_q), store.get(att.w_k), store.get(att.w_v));
    let (wo, bo, table) = (store.get(att.w_o), store.get(att.b_o), store.get(att.rel_table));
    // Per-head projection of token `i`, output column `e` of head `head`.
    let proj = |w: &Tensor, n: usize, i: usize, head: usize, e: usize| -> f64 {
        match att.projection {
            AttentionProjection::Full => (0..c).map(|k| x.at(&[n, i, k]) * w.at(&[k, head * d + e])).sum(),
            AttentionProjection::Split => (0..d).map(|k| x.at(&[n, i, head * d + k]) * w.at(&[head, k, e])).sum(),
        }
    };
    let mut out = vec![0.0; nw * t * c];
    for n in 0..nw {
        let mut merged = vec![vec![0.0; c]; t];
        for head in 0..h {
            let q: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|e| proj(wq, n, i, head, e)).collect()).collect();
            let k: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|e| proj(wk, n, i, head, e)).collect()).collect();
            let v: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|e| proj(wv, n, i, head, e)).collect()).collect();
            let mut bias = vec![vec![0.0; t]; t];
            for (i, row) in bias.iter_mut().enumerate() {
                for (j, b) in row.iter_mut().enumerate() {
                    let (r1, c1, r2, c2) = (i / p, i % p, j / p, j % p);
                    let dr = r1 + p - 1 - r2;
                    let dc = c1 + p - 1 - c2;
                    *b = table.at(&[head, dr * span + dc]);
                }
            }
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..d).map(|e| q[i][e] * k[j][e]).sum::<f64>() / (d as f64).sqrt() + bias[i][j])
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..d {
                    merged[i][head * d + e] = (0..t).map(|j| exps[j] / z * v[j][e]).sum();
                }
            }
        }
        for (i, row) in merged.iter().enumerate() {
            for o in 0..c {
                let val: f64 = (0..c).map(|k| row[k] * wo.at(&[k, o])).sum::<f64>() + bo.at(&[o]);
                out[(n * t + i) * c + o] = val;
            }
        }
    }
    Tensor::new(&[nw, t, c], out).expect("shape matches data")
}

// 3. Windowed MSA against the naive oracle.
fn attention_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let heads = rng.random_range(1..=4);
        let width = heads * rng.random_range(1..=6);
        let window = rng.random_range(1..=4);
        let projection = if case % 2 == 0 { AttentionProjection::Full } else { AttentionProjection::Split };
        let mut store = ParamStore::new();
        let att = AttentionParams::register(&mut store, "a", width, heads, window, projection, &mut rng)?;
        let span = 2 * window - 1;
        store.set(att.rel_table, Tensor::randn(&[heads, span * span], 1.0, &mut rng))?;
        store.set(att.b_o, Tensor::randn(&[width], 0.5, &mut rng))?;
        let nw = rng.random_range(1..=3);
        let x = Tensor::randn(&[nw, window * window, width], 1.0, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
        let fast = att.forward(&ctx, tape.constant(x.clone()))?.value();
        worst = worst.max(fast.max_abs_diff(&naive_attention(&att, &store, &x))?);
    }
    outcome(worst < 1e-8, format!("50 cases, max abs diff {worst:.2e} (< 1e-8)"))
}

/// Gradient check of a scalar `Σ w ⊙ f(params)` with fixed random weights.
fn check_scalar<F>(params: &[Tensor], out_shape: &[usize], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[csformer::Var<'t>]) -> Result<csformer::Var<'t>>,
{
    let weights = Tensor::randn(out_shape, 1.0, &mut ChaCha8Rng::seed_from_u64(99));
    grad_check(|tape, vars| f(tape, vars)?.dot_const(&weights), params, 1e-5)
}

// 4. Gradient suite.
fn gradient_suite() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let conv = [
        Tensor::randn(&[2, 5, 6, 3], 1.0, &mut rng),
        Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng),
        Tensor::randn(&[4], 0.5, &mut rng),
    ];
    for (stride, pad, shape) in [(1, 1, [2, 5, 6, 4]), (2, 1, [2, 3, 3, 4]), (2, 0, [2, 2, 2, 4])] {
        let e = check_scalar(&conv, &shape, |_, v| v[0].conv2d(v[1], Some(v[2]), stride, pad))?;
        errors.push(("conv2d", e));
    }

    let x = [Tensor::randn(&[2, 3, 3, 8], 1.0, &mut rng)];
    errors.push(("pixel_shuffle", check_scalar(&x, &[2, 6, 6, 2], |_, v| v[0].pixel_shuffle(2))?));

    let norm = [
        Tensor::randn(&[3, 4, 6], 1.0, &mut rng),
        Tensor::randn(&[6], 1.0, &mut rng),
        Tensor::randn(&[6], 1.0, &mut rng),
    ];
    errors.push(("layer_norm", check_scalar(&norm, &[3, 4, 6], |_, v| v[0].layer_norm(v[1], v[2], 1e-5))?));
    errors.push((
        "batch_norm",
        check_scalar(&norm, &[3, 4, 6], |_, v| Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.output))?,
    ));

    let cfg = ModelConfig { window_size: 2, ..ModelConfig::reduced() };
    for projection in [AttentionProjection::Full, AttentionProjection::Split] {
        let mut store = ParamStore::new();
        let att = AttentionParams::register(&mut store, "a", 8, 2, 2, projection, &mut rng)?;
        store.set(att.rel_table, Tensor::randn(&[2, 9], 0.5, &mut rng))?;
        let mut params = store.values();
        params.push(Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
        let e = check_scalar(&params, &[2, 4, 8], |tape, v| {
            let (p, x) = v.split_at(v.len() - 1);
            att.forward(&Ctx::with_vars(tape, &store, p.to_vec(), Mode::Eval), x[0])
        })?;
        errors.push(("msa", e));
    }

    let mut store = ParamStore::new();
    let layer = TransformerLayer::register(&mut store, "l", 8, 2, &cfg, &mut rng)?;
    randomize_zeros(&mut store, &mut rng)?;
    let mut params = store.values();
    params.push(Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
    let e = check_scalar(&params, &[2, 4, 8], |tape, v| {
        let (p, x) = v.split_at(v.len() - 1);
        layer.forward(&Ctx::with_vars(tape, &store, p.to_vec(), Mode::Eval), x[0])
    })?;
    errors.push(("transformer_layer", e));

    let mut store = ParamStore::new();
    let block = ConvBlock::register(&mut store, "b", 3, &cfg, &mut rng);
    randomize_zeros(&mut store, &mut rng)?;
    let mut params = store.values();
    params.push(Tensor::randn(&[2, 5, 5, 3], 1.0, &mut rng));
    let e = check_scalar(&params, &[2, 5, 5, 3], |tape, v| {
        let (p, x) = v.split_at(v.len() - 1);
        block.forward(&Ctx::with_vars(tape, &store, p.to_vec(), Mode::Train), x[0])
    })?;
    errors.push(("conv_block", e));

    let primitive_worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let model = CsFormer::new(ModelConfig::reduced(), 1)?;
    let crops = synthetic_corpus(1, 16, 16, 3).pop().unwrap().reshape(&[1, 16, 16, 1])?;
    let report = model.grad_check(&crops, Coordinates::Sample { per_tensor: 8, seed: 7 }, 11)?;
    let pass = primitive_worst < 1e-4 && report.max_rel_error < 1e-3;
    let listing: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        pass,
        format!(
            "primitives max {primitive_worst:.2e} (< 1e-4) [{}]; reduced model {:.2e} over {} coordinates (< 1e-3)",
            listing.join(", "),
            report.max_rel_error,
            report.checked
        ),
    )
}

fn randomize_zeros(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).max_abs() == 0.0 {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.1, rng))?;
        }
    }
    Ok(())
}

// 5. Direct and size-weighted dataset averages of the published table rows.
fn average_rows() -> Result<Outcome> {
    let sizes = [11, 68, 100, 5, 14];
    let rows =
        [([41.04, 37.16, 39.46, 43.55, 40.41], (40.32, 38.93)), ([30.66, 28.28, 29.61, 34.20, 30.85], (30.72, 29.42))];
    let round = |v: f64| (v * 100.0).round() / 100.0;
    let mut pass = true;
    let mut parts = Vec::new();
    for (scores, (direct, weighted)) in rows {
        let pairs: Vec<(f64, usize)> = scores.iter().copied().zip(sizes).collect();
        let (d, w) = average_report(&pairs)?;
        pass &= round(d) == direct && round(w) == weighted;
        parts.push(format!("{d:.4}/{w:.4} vs {direct}/{weighted}"));
    }
    outcome(pass, parts.join("; "))
}

// 6. Default parameter count (ratio 50%) against the published 6.71M.
fn parameter_count() -> Result<Outcome> {
    let n = CsFormer::new(ModelConfig::default().with_ratio(0.5), 0)?.param_count();
    let delta = (n as f64 - 6.71e6) / 6.71e6;
    outcome(delta.abs() <= 0.10, format!("{n} parameters, {:+.2}% vs 6.71M (within ±10%)", delta * 100.0))
}

// 7. Pixel-shuffle inverse and patch split/merge identities.
fn round_trips() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for r in [1, 2, 4, 8] {
        let x = Tensor::randn(&[2, 3, 5, 4 * r * r], 1.0, &mut rng);
        worst = worst.max(pixel_unshuffle(&pixel_shuffle(&x, r)?, r)?.max_abs_diff(&x)?);
        let y = Tensor::randn(&[2, 3 * r, 5 * r, 3], 1.0, &mut rng);
        worst = worst.max(pixel_shuffle(&pixel_unshuffle(&y, r)?, r)?.max_abs_diff(&y)?);
    }
    let mut sizes = Vec::new();
    for _ in 0..20 {
        let (h, w) = (rng.random_range(9..=200), rng.random_range(9..=200));
        let stride = [8, 16, 24, 32, 48, 64][rng.random_range(0..6)];
        let image = Tensor::rand_uniform(&[h, w, 1], 0.0, 1.0, &mut rng);
        let (patches, layout) = split_patches(&image, 64, stride)?;
        worst = worst.max(merge_patches(&patches, &layout)?.max_abs_diff(&image)?);
        sizes.push(format!("{h}x{w}"));
    }
    outcome(worst < 1e-12, format!("max abs diff {worst:.2e} (< 1e-12) over sizes {}", sizes.join(" ")))
}

fn overfit_run(cfg: ModelConfig, iterations: u64) -> Result<(Vec<f64>, f64)> {
    let image = synthetic_corpus(1, 128, 128, 0).pop().unwrap();
    let model = CsFormer::new(cfg, 0)?;
    let tc = TrainConfig {
        crop_size: 128,
        batch_size: 1,
        iterations,
        lr_start: OVERFIT_LR.0,
        lr_end: OVERFIT_LR.1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, tc, vec![image.clone()])?;
    let losses = trainer.run(|_, _| Ok(()))?;
    // Tiling matches the training split, so this is the training image's PSNR.
    let rec = trainer.model.reconstruct_with_stride(&image, 64)?;
    Ok((losses, psnr(&rec.image, &image, 1.0)?))
}

fn held_out_psnr(ratio: f64, corpus: &[Tensor], held_out: &[Tensor]) -> Result<f64> {
    let model = CsFormer::new(overfit_config().with_ratio(ratio), 8)?;
    let tc = TrainConfig {
        crop_size: 64,
        batch_size: 4,
        iterations: 2000,
        lr_start: 1e-3,
        lr_end: 1e-5,
        seed: 8,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, tc, corpus.to_vec())?;
    trainer.run(|_, _| Ok(()))?;
    let mut total = 0.0;
    for img in held_out {
        total += psnr(&trainer.model.reconstruct(img)?.image, img, 1.0)?;
    }
    Ok(total / held_out.len() as f64)
}

// 8. Overfit one image, then train per ratio on a small corpus.
fn learning_signal() -> Result<Outcome> {
    let (_, overfit_db) = overfit_run(overfit_config(), OVERFIT_ITERATIONS)?;
    let corpus = synthetic_corpus(200, 64, 64, 81);
    let held_out = synthetic_corpus(4, 128, 128, 82);
    let mut scores = Vec::new();
    for ratio in [0.01, 0.10, 0.50] {
        scores.push(held_out_psnr(ratio, &corpus, &held_out)?);
    }
    let monotone = scores.windows(2).all(|w| w[0] < w[1]);
    outcome(
        overfit_db >= OVERFIT_TARGET_DB && monotone,
        format!(
            "(a) overfit {overfit_db:.2} dB after {OVERFIT_ITERATIONS} iterations (>= {OVERFIT_TARGET_DB}); \
             (b) held-out PSNR 1%/10%/50% = {:.2}/{:.2}/{:.2} dB (strictly increasing: {monotone})",
            scores[0], scores[1], scores[2]
        ),
    )
}

// 9. The fusion and loss ablation switches train on the overfit setup.
fn ablation_switches() -> Result<Outcome> {
    let base = overfit_config();
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, cfg) in [
        ("fusion_mode=add", ModelConfig { fusion_mode: FusionMode::Add, ..base.clone() }),
        ("loss_target=patch", ModelConfig { loss_target: LossTarget::Patch, ..base.clone() }),
    ] {
        let (losses, db) = overfit_run(cfg, 300)?;
        let (first, last) = (losses[0], *losses.last().unwrap());
        let ok = losses.iter().all(|l| l.is_finite()) && last < first;
        pass &= ok;
        parts.push(format!("{name}: loss {first:.3e} -> {last:.3e}, {db:.2} dB"));
    }
    outcome(pass, parts.join("; "))
}

// 10. Seeded training and evaluation are bit-for-bit repeatable.
fn determinism() -> Result<Outcome> {
    let corpus = synthetic_corpus(6, 96, 96, 10);
    let run = || -> Result<(Vec<f64>, CsFormer)> {
        let model = CsFormer::new(ModelConfig::desk(), 10)?;
        let tc = TrainConfig { crop_size: 64, batch_size: 2, iterations: 25, seed: 10, ..TrainConfig::default() };
        let mut trainer = Trainer::new(model, tc, corpus.clone())?;
        let losses = trainer.run(|_, _| Ok(()))?;
        Ok((losses, trainer.model))
    };
    let (a, model) = run()?;
    let (b, _) = run()?;
    let same_curve = a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()));
    let first = model.reconstruct(&corpus[0])?.image;
    let second = model.reconstruct(&corpus[0])?.image;
    let same_eval = first.data().iter().map(|v| v.to_bits()).eq(second.data().iter().map(|v| v.to_bits()));
    outcome(
        same_curve && same_eval,
        format!("{} losses identical: {same_curve}; reconstructions identical: {same_eval}", a.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("sampling equivalence", sampling_equivalence),
        ("shape contract", shape_contract),
        ("attention oracle", attention_oracle),
        ("gradient suite", gradient_suite),
        ("dataset averages", average_rows),
        ("parameter count", parameter_count),
        ("round trips", round_trips),
        ("learning signal", learning_signal),
        ("ablation switches", ablation_switches),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "criterion {n:>2} {:<4} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
