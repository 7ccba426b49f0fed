//! Acceptance suite: one test per criterion, each printing a single
//! `[PASS]` / `[FAIL]` line (written straight to stdout so it shows even
//! when test output is captured).

mod common;

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use vitok::autoencoder::{
    canvas_to_image, compression_ratio, count_parameters, make_config, regularize_latent, regularize_tape, Autoencoder, LatentGrid, ModelConfig,
    Reconstructor, Regularizer, SCALES,
};
use vitok::autodiff::Tape;
use vitok::backbone::{apply_rope2d, attention, attention_pairs, attention_param_specs, AttnContext, BlockConfig, Neighbors, TokenBatch};
use vitok::flowgen::{euler_sample, fm_loss, FlowConfig, FlowState, SampleOptions};
use vitok::imagedata::{generate_synthetic, load_image, save_image, DatasetSpec, Image};
use vitok::losses::{ExtractorConfig, FrozenExtractor, LossWeights};
use vitok::metrics::{bench_latency, eval_reconstruction, frechet_distance, loglog_slope, psnr, AttentionMode, BenchOptions, EvalOptions, ExtractorSet, FeatureStats};
use vitok::naflex::{fit_grid, patchify, resize_pad, unpatchify, GridFit, PackedImage};
use vitok::params::ParameterStore;
use vitok::trainer::{budget_at, train_autoencoder, train_flow, TrainConfig, TrainOutputs};
use vitok::{rng, Tensor};

use common::grads::{CASES, SUITE};

fn verdict(id: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] criterion {id:>2} {name}: {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_image(r: &mut impl Rng, h: usize, w: usize) -> Image<f64> {
    Image::new(h, w, (0..h * w * 3).map(|_| r.gen::<f64>()).collect()).unwrap()
}

#[test]
fn c01_round_trip_identities() {
    let start = Instant::now();
    let mut r = rng::seeded(101);
    let mut exact = 0;
    for _ in 0..200 {
        let (h, w) = (r.gen_range(1..48), r.gen_range(1..48));
        let p = [1, 2, 4, 8, 16][r.gen_range(0..5)];
        let budget = r.gen_range(1..80);
        let img = random_image(&mut r, h, w);
        let fit = fit_grid(h, w, p, budget).unwrap();
        let (padded, _) = resize_pad(&img, &fit).unwrap();
        let tokens = patchify(&padded, p).unwrap();
        let back = unpatchify(&tokens, &fit).unwrap();
        if back.data().iter().zip(padded.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            exact += 1;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (h, w) = (r.gen_range(1..40), r.gen_range(1..40));
        let img = random_image(&mut r, h, w);
        let path = dir.path().join(format!("{i}.ppm"));
        save_image(&img, &path).unwrap();
        let back: Image<f64> = load_image(&path).unwrap();
        assert_eq!((back.height(), back.width()), (h, w));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = exact == 200 && worst <= 1.0 / 255.0 && secs < 10.0;
    verdict(1, "round-trip identities", pass, &format!("{exact}/200 bit-exact, PPM max error {worst:.5} (<= {:.5}), {secs:.2}s", 1.0 / 255.0));
}

#[test]
fn c02_gradient_suite() {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, f) in SUITE {
        for case in 0..CASES {
            let rep = f(case);
            let rel = rep.max_rel();
            let vanishing = rep.groups.iter().any(|g| g.norm <= 1e-8);
            if rel >= common::GRAD_TOL || vanishing {
                failures.push(format!("{name}#{case} rel {rel:.2e}"));
            }
            if rel > worst.0 {
                worst = (rel, name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    verdict(
        2,
        "gradient suite",
        pass,
        &format!("{} ops x {CASES} shapes, worst rel error {:.2e} ({}), failures {:?}, {secs:.1}s", SUITE.len(), worst.0, worst.1, failures),
    );
}

#[test]
fn c03_swa_equivalence() {
    let start = Instant::now();
    let mut r = rng::seeded(303);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let (gh, gw) = (r.gen_range(1..9), r.gen_range(1..9));
        let heads = r.gen_range(1..4);
        let hd = [4, 8][r.gen_range(0..2)];
        let cfg = BlockConfig::new(heads * hd, heads);
        let n = gh * gw;
        let mut valid: Vec<bool> = (0..n).map(|_| r.gen_bool(0.8)).collect();
        valid[r.gen_range(0..n)] = true;
        let mut params = ParameterStore::<f64>::init(&attention_param_specs("a", cfg.width, hd), &mut rng::seeded(trial)).unwrap();
        common::jitter(&mut params, 0.3, trial + 7);
        let values = Tensor::new(vec![n, cfg.width], rng::normal_vec::<f64, _>(&mut r, n * cfg.width)).unwrap();
        let batch = TokenBatch::new(values, common::grid_positions(gh, gw), valid).unwrap();
        let full = attention(&batch, &params, "a", &cfg, None).unwrap();
        let radius = gh.max(gw) + r.gen_range(0..3);
        let swa = attention(&batch, &params, "a", &cfg, Some(radius)).unwrap();
        let num: f64 = full.values.data().iter().zip(swa.values.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = full.values.data().iter().map(|a| a * a).sum();
        worst = worst.max((num / den.max(1e-300)).sqrt());
    }
    let (gh, gw) = (40, 40);
    let nb = Neighbors::window(&common::grid_positions(gh, gw), &vec![true; gh * gw], 8);
    let interior: Vec<usize> = (8..gh - 8).flat_map(|y| (8..gw - 8).map(move |x| y * gw + x)).collect();
    let counts_ok = interior.iter().all(|&q| nb.of(q).len() == 289) && (2 * 8 + 1) * (2 * 8 + 1) == 289;
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && counts_ok && secs < 30.0;
    verdict(
        3,
        "SWA equivalence",
        pass,
        &format!("20 configs worst rel diff {worst:.2e}, {} interior queries with 289 keys: {counts_ok}, {secs:.2}s", interior.len()),
    );
}

#[test]
fn c04_rope_relative_invariance() {
    let mut r = rng::seeded(404);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let hd = [4, 8, 16, 32][r.gen_range(0..4)];
        let heads = r.gen_range(1..4);
        let width = hd * heads;
        let q = Tensor::new(vec![1, width], rng::normal_vec::<f64, _>(&mut r, width)).unwrap();
        let k = Tensor::new(vec![1, width], rng::normal_vec::<f64, _>(&mut r, width)).unwrap();
        let p1 = (r.gen_range(-40..40), r.gen_range(-40..40));
        let p2 = (r.gen_range(-40..40), r.gen_range(-40..40));
        let d = (r.gen_range(-60..60), r.gen_range(-60..60));
        let logits = |a: (i32, i32), b: (i32, i32)| -> Vec<f64> {
            let qa = apply_rope2d(&q, &[a], hd, 10_000.0).unwrap();
            let kb = apply_rope2d(&k, &[b], hd, 10_000.0).unwrap();
            qa.data().chunks(hd).zip(kb.data().chunks(hd)).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum()).collect()
        };
        let base = logits(p1, p2);
        let moved = logits((p1.0 + d.0, p1.1 + d.1), (p2.0 + d.0, p2.1 + d.1));
        for (a, b) in base.iter().zip(&moved) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    verdict(4, "RoPE relative-position invariance", worst <= 1e-6, &format!("100 trials, worst logit change {worst:.2e}"));
}

/// Grid-first oracle: every grid within budget admits the scale
/// `min(gh*p/h, gw*p/w, 1)`; the fit is the largest such scale.
/// Scales are compared as exact rationals.
fn oracle_fit(h: usize, w: usize, p: usize, budget: usize) -> (usize, usize, usize, usize) {
    let (h, w, p) = (h as u128, w as u128, p as u128);
    let mut best: (u128, u128) = (0, 1);
    for gh in 1..=budget as u128 {
        for gw in 1..=(budget as u128 / gh) {
            let mut s = (gh * p, h);
            if gw * p * s.1 < s.0 * w {
                s = (gw * p, w);
            }
            if s.0 > s.1 {
                s = (1, 1);
            }
            if s.0 * best.1 > best.0 * s.1 {
                best = s;
            }
        }
    }
    let (num, den) = best;
    let grid = |dim: u128| (num * dim).div_ceil(den * p) as usize;
    let round = |dim: u128| ((2 * num * dim + den) / (2 * den)).max(1) as usize;
    (grid(h), grid(w), round(h), round(w))
}

#[test]
fn c05_naflex_maximality() {
    let dims = [1, 7, 33, 100, 257, 512, 999, 2048];
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for &h in &dims {
        for &w in &dims {
            for p in [8, 16] {
                for budget in [64, 256] {
                    let fit = fit_grid(h, w, p, budget).unwrap();
                    let got = (fit.grid_h, fit.grid_w, fit.resized_h, fit.resized_w);
                    let want = oracle_fit(h, w, p, budget);
                    checked += 1;
                    if got != want {
                        mismatches.push(format!("({h},{w},{p},{budget}) got {got:?} want {want:?}"));
                    }
                }
            }
        }
    }
    let named = fit_grid(512, 256, 16, 256).unwrap();
    let named_ok = (named.grid_h, named.grid_w, named.resized_h, named.resized_w) == (22, 11, 352, 176)
        && oracle_fit(512, 256, 16, 256) == (22, 11, 352, 176);
    let pass = mismatches.is_empty() && named_ok;
    verdict(
        5,
        "NaFlex maximality",
        pass,
        &format!("{checked} cases vs exhaustive grid oracle, mismatches {:?}; (512,256,16,256) -> {}x{} resized {}x{}", mismatches, named.grid_h, named.grid_w, named.resized_h, named.resized_w),
    );
}

#[test]
fn c06_compression_ratio_table() {
    let table = [((16, 64), 12.0), ((16, 32), 24.0), ((16, 16), 48.0), ((8, 16), 12.0), ((32, 128), 24.0), ((32, 64), 48.0)];
    let rows: Vec<String> = table.iter().map(|&((p, c), _)| format!("{p}x{c}={}", compression_ratio(p, c))).collect();
    let pass = table.iter().all(|&((p, c), r)| compression_ratio(p, c) == r);
    verdict(6, "compression-ratio table", pass, &rows.join(" "));
}

fn stats(mean: &[f64], cov: &[f64]) -> FeatureStats {
    FeatureStats {
        mean: mean.to_vec(),
        cov: cov.to_vec(),
        count: 100,
    }
}

#[test]
fn c07_frechet_oracle() {
    let a = stats(&[0.3, -1.2, 0.75], &[2.0, 0.3, -0.4, 0.3, 1.5, 0.2, -0.4, 0.2, 0.8]);
    let b = stats(&[-0.4, 0.5, 1.1], &[1.1, -0.5, 0.1, -0.5, 2.4, 0.6, 0.1, 0.6, 0.9]);
    let near_singular = stats(&[0.3, -1.2, 0.75], &[1.0, 0.999, 0.0, 0.999, 1.0, 0.0, 0.0, 0.0, 1e-6]);
    // 50-digit mpmath values of |ma - mb|^2 + tr(A + B - 2 sqrtm(A B)).
    const AB: f64 = 4.118_829_013_937_661_943_902_337_294_64;
    const CB: f64 = 6.651_680_550_849_560_981_286_479_975_86;

    let identical = frechet_distance(&a, &a).unwrap();
    let shift = frechet_distance(&stats(&[0.5], &[4.0]), &stats(&[2.0], &[4.0])).unwrap();
    let shift_odd = frechet_distance(&stats(&[-1.0], &[3.0]), &stats(&[0.25], &[3.0])).unwrap();
    let ab = frechet_distance(&a, &b).unwrap();
    let cb = frechet_distance(&near_singular, &b).unwrap();
    let rel_ab = (ab - AB).abs() / AB;
    let rel_cb = (cb - CB).abs() / CB;

    let mut r = rng::seeded(707);
    let mut asym = 0.0f64;
    for _ in 0..10 {
        let d = 6;
        let rows = |r: &mut rng::StreamRng| -> Vec<Vec<f64>> { (0..20).map(|_| rng::normal_vec::<f64, _>(r, d)).collect() };
        let sa = FeatureStats::from_features(&rows(&mut r)).unwrap();
        let sb = FeatureStats::from_features(&rows(&mut r)).unwrap();
        asym = asym.max((frechet_distance(&sa, &sb).unwrap() - frechet_distance(&sb, &sa).unwrap()).abs());
    }
    let pass = identical <= 1e-8 && shift == 2.25 && (shift_odd - 1.5625).abs() <= 1e-12 && rel_ab <= 1e-6 && rel_cb <= 1e-6 && asym <= 1e-8;
    verdict(
        7,
        "Frechet oracle",
        pass,
        &format!("identical {identical:.1e}, 1-D shift {shift} (want 2.25), 3-D rel err {rel_ab:.1e} / near-singular {rel_cb:.1e}, asymmetry {asym:.1e}"),
    );
}

fn toy_model(reg: Regularizer) -> ModelConfig {
    ModelConfig {
        enc_depth: 1,
        dec_depth: 1,
        width: 32,
        heads: 2,
        patch: 8,
        latent_channels: 8,
        regularizer: reg,
        reg_param: reg.default_param(),
        name: format!("toy-{}", reg.name()),
        mlp_multiple: 16,
        ..ModelConfig::desk()
    }
}

fn synthetic(count: usize, size: (usize, usize), aspect: (f64, f64), seed: u64) -> Vec<Image<f32>> {
    let spec = DatasetSpec {
        count,
        seed,
        size_range: size,
        aspect_range: aspect,
        class_count: 4,
    };
    generate_synthetic::<f32>(&spec).unwrap().into_iter().map(|(img, _)| img).collect()
}

#[test]
fn c08_regularizer_contracts() {
    // KL closed form: mu = 0, logvar = 0 gives 0; mu = 1, logvar = 0 gives 0.5 per dim.
    let kl_cfg = ModelConfig {
        regularizer: Regularizer::Kl,
        reg_param: 0.01,
        ..toy_model(Regularizer::Kl)
    };
    let c = kl_cfg.latent_channels;
    let kl_at = |mu: f64| -> f64 {
        let n = 5;
        let mut h = vec![0.0; n * 2 * c];
        for row in h.chunks_mut(2 * c) {
            row[..c].iter_mut().for_each(|v| *v = mu);
        }
        let mut tape = Tape::<f64>::new();
        let hv = tape.constant(Tensor::new(vec![n, 2 * c], h).unwrap());
        let (_, reg) = regularize_tape::<f64, rng::StreamRng>(&mut tape, &kl_cfg, hv, None).unwrap();
        tape.value(reg.unwrap()).item() / kl_cfg.reg_param
    };
    let (kl0, kl1) = (kl_at(0.0), kl_at(1.0));

    let ln_cfg = toy_model(Regularizer::LayerNorm);
    let grid = GridFit::exact(3, 4, 8);
    let h = Tensor::new(vec![12, ln_cfg.latent_channels], rng::normal_vec::<f64, _>(&mut rng::seeded(8), 12 * ln_cfg.latent_channels).into_iter().map(|v| 3.0 * v + 1.5).collect()).unwrap();
    let (z, _) = regularize_latent::<f64, rng::StreamRng>(&LatentGrid::new(h, grid).unwrap(), &ln_cfg, None).unwrap();
    let mut ln_err = 0.0f64;
    for row in z.latents.data().chunks(ln_cfg.latent_channels) {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
        ln_err = ln_err.max(m.abs()).max((v - 1.0).abs());
    }

    let images = synthetic(4, (64, 80), (0.75, 1.33), 8);
    let tanh_ae = Autoencoder::<f32>::init(toy_model(Regularizer::TanhNoise), 3).unwrap();
    let mut tanh_max = 0.0f32;
    for img in &images {
        let packed = PackedImage::pack(img, 8, 64).unwrap();
        let (_, z) = tanh_ae.reconstruct(&packed, None).unwrap();
        tanh_max = z.unwrap().data().iter().fold(tanh_max, |m, v| m.max(v.abs()));
    }

    let tcfg = TrainConfig {
        total_steps: 1,
        batch_size: 4,
        budgets: (64, 256),
        ..TrainConfig::default()
    };
    let ex = FrozenExtractor::<f32>::new(ExtractorConfig::desk(0)).unwrap();
    let mut step_losses = Vec::new();
    for reg in Regularizer::ALL {
        let mut ae = Autoencoder::<f32>::init(toy_model(reg), 1).unwrap();
        let logs = train_autoencoder(&mut ae, &images, &tcfg, &LossWeights::default(), Some(&ex), &mut TrainOutputs::default()).unwrap();
        let finite_params = ae.params.iter().all(|(_, p)| p.value.is_finite());
        step_losses.push((reg.name(), logs[0].loss_total, logs[0].loss_total.is_finite() && finite_params));
    }
    let trained_ok = step_losses.iter().all(|s| s.2);
    let pass = kl0.abs() <= 1e-12 && (kl1 - 0.5).abs() <= 1e-12 && ln_err <= 1e-5 && tanh_max < 1.0 && trained_ok;
    let losses: Vec<String> = step_losses.iter().map(|(n, l, _)| format!("{n}={l:.4}")).collect();
    verdict(
        8,
        "regularizer contracts",
        pass,
        &format!("KL {kl0:.2e} / {kl1:.6} per dim, layernorm max dev {ln_err:.1e}, tanh max |z| {tanh_max:.4}, one step: {}", losses.join(" ")),
    );
}

fn masked_psnr(ae: &dyn Reconstructor<f32>, images: &[Image<f32>], budget: usize) -> f64 {
    let mut total = 0.0;
    for img in images {
        let packed = PackedImage::pack(img, ae.patch_size(), budget).unwrap();
        let (canvas, _) = ae.reconstruct(&packed, None).unwrap();
        let out = canvas_to_image(&canvas).unwrap().to_tensor();
        total += psnr(&packed.canvas(), &out, &packed.pad_mask).unwrap();
    }
    total / images.len() as f64
}

#[test]
fn c09_overfit_desk_autoencoder() {
    let start = Instant::now();
    let images = synthetic(8, (64, 64), (1.0, 1.0), 0);
    let cfg = ModelConfig::desk();
    let desk_ok = cfg.width == 128 && cfg.dec_depth == 6 && cfg.patch == 8 && cfg.latent_channels == 16 && cfg.regularizer == Regularizer::LayerNorm;
    let mut ae = Autoencoder::<f32>::init(cfg, 0).unwrap();
    let ex = FrozenExtractor::<f32>::new(ExtractorConfig::desk(0)).unwrap();
    let tcfg = TrainConfig {
        total_steps: 2000,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let logs = train_autoencoder(&mut ae, &images, &tcfg, &LossWeights::default(), Some(&ex), &mut TrainOutputs::default()).unwrap();
    let db = masked_psnr(&ae, &images, 256);
    let char_drop = logs[499].loss_char < logs[9].loss_char;
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let pass = desk_ok && db >= 27.0 && char_drop && mins < 15.0;
    let target = if db >= 30.0 { "target 30 dB met" } else { "below 30 dB target" };
    verdict(
        9,
        "overfit quantitative check",
        pass,
        &format!(
            "masked PSNR {db:.2} dB ({target}, floor 27), charbonnier step 10 {:.4} -> step 500 {:.4}, final loss {:.4}, {mins:.1} min",
            logs[9].loss_char,
            logs[499].loss_char,
            logs.last().unwrap().loss_total
        ),
    );
}

#[test]
fn c10_two_stage_schedule() {
    let mut boundary_ok = true;
    for (total, (num, den)) in [(200usize, (9usize, 10usize)), (2000, (9, 10)), (7, (1, 2)), (1000, (3, 4)), (33, (2, 3))] {
        let cfg = TrainConfig {
            total_steps: total,
            stage_split: num as f64 / den as f64,
            budgets: (1, 2),
            ..TrainConfig::default()
        };
        let first_second = (total * num).div_ceil(den);
        for step in 1..=total {
            let want = if step < first_second { 1 } else { 2 };
            boundary_ok &= budget_at(step, &cfg) == want;
        }
    }

    let images = synthetic(8, (96, 128), (0.75, 1.33), 10);
    let mut ae = Autoencoder::<f32>::init(toy_model(Regularizer::LayerNorm), 10).unwrap();
    let ex = FrozenExtractor::<f32>::new(ExtractorConfig::desk(0)).unwrap();
    let tcfg = TrainConfig {
        total_steps: 200,
        batch_size: 4,
        budgets: (64, 256),
        ..TrainConfig::default()
    };
    let logs = train_autoencoder(&mut ae, &images, &tcfg, &LossWeights::default(), Some(&ex), &mut TrainOutputs::default()).unwrap();
    let stage1: Vec<_> = logs.iter().filter(|l| l.budget == 64).collect();
    let stage2: Vec<_> = logs.iter().filter(|l| l.budget == 256).collect();
    let finite = logs.iter().all(|l| l.loss_total.is_finite() && l.grad_norm.is_finite());
    let switch = stage2.first().map_or(0, |l| l.step);
    let pass = boundary_ok && stage1.len() == 179 && stage2.len() == 21 && switch == 180 && finite;
    verdict(
        10,
        "two-stage schedule",
        pass,
        &format!(
            "boundaries exact: {boundary_ok}; 200-step run: {} steps at 64 tokens, {} at 256 (switch at step {switch}), last losses {:.4} / {:.4}, finite: {finite}",
            stage1.len(),
            stage2.len(),
            stage1.last().map_or(f64::NAN, |l| l.loss_total),
            stage2.last().map_or(f64::NAN, |l| l.loss_total)
        ),
    );
}

#[test]
fn c11_flow_sanity() {
    let start = Instant::now();
    let cfg = FlowConfig::default();
    let zero = FlowState::<f64>::init(cfg.clone(), 0).unwrap();
    let grid = GridFit::exact(4, 4, 1);
    let dims = grid.tokens() * cfg.latent_channels;
    let calls = 100_000usize.div_ceil(dims);
    let mut r = rng::seeded(1111);
    let mut sum = 0.0;
    for i in 0..calls {
        let z1 = LatentGrid::new(Tensor::new(vec![grid.tokens(), cfg.latent_channels], rng::normal_vec::<f64, _>(&mut r, dims)).unwrap(), grid).unwrap();
        sum += fm_loss(&z1, i % cfg.class_count, &zero.params, &cfg, &mut r).unwrap();
    }
    let zero_loss = sum / calls as f64;

    // Four fixed per-token-standardized latents, one per class.
    let c = cfg.latent_channels;
    let latents: Vec<(LatentGrid<f32>, usize)> = (0..4)
        .map(|k| {
            let mut v = rng::normal_vec::<f64, _>(&mut rng::seeded(500 + k as u64), dims);
            for row in v.chunks_mut(c) {
                let m = row.iter().sum::<f64>() / c as f64;
                let s = (row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c as f64).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - m) / s);
            }
            let t = Tensor::new(vec![grid.tokens(), c], v.into_iter().map(|x| x as f32).collect()).unwrap();
            (LatentGrid::new(t, grid).unwrap(), k)
        })
        .collect();
    let mut state = FlowState::<f32>::init(cfg.clone(), 1).unwrap();
    let tcfg = TrainConfig {
        total_steps: 2000,
        batch_size: 4,
        peak_lr: 1e-3,
        ..TrainConfig::default()
    };
    let logs = train_flow(&mut state, &latents, &tcfg, &mut TrainOutputs::default()).unwrap();

    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let nearest = |z: &[f32]| latents.iter().map(|(l, _)| dist(z, l.latents.data())).fold(f64::INFINITY, f64::min);
    let opts = SampleOptions {
        steps: 50,
        cfg_scale: 1.0,
        force_blend: false,
    };
    let mut sample_d = Vec::new();
    for k in 0..8 {
        let mut sr = rng::stream(77, 0, k as u64);
        let z = euler_sample(k % 4, &opts, grid, &state.ema, &state.cfg, &mut sr).unwrap();
        sample_d.push(nearest(z.latents.data()));
    }
    let mut br = rng::seeded(78);
    let baseline: f64 = (0..256)
        .map(|_| {
            let g: Vec<f32> = rng::normal_vec::<f64, _>(&mut br, dims).into_iter().map(|x| x as f32).collect();
            nearest(&g)
        })
        .sum::<f64>()
        / 256.0;
    let mean_d = sample_d.iter().sum::<f64>() / sample_d.len() as f64;
    let max_d = sample_d.iter().cloned().fold(0.0, f64::max);
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let pass = (zero_loss - 2.0).abs() <= 0.1 && mean_d < 0.25 * baseline && mins < 10.0;
    verdict(
        11,
        "flow sanity",
        pass,
        &format!(
            "zero-model loss {zero_loss:.4} over {} draws; overfit final loss {:.4}; sample NN distance mean {mean_d:.3} max {max_d:.3} vs baseline {baseline:.3} (ratio {:.3}), {mins:.1} min",
            calls * dims,
            logs.last().unwrap().loss_total,
            mean_d / baseline
        ),
    );
}

#[test]
fn c12_latency_scaling_shape() {
    let mut pairs_ok = true;
    for (gh, gw) in [(1, 1), (3, 7), (16, 16), (9, 20), (32, 5)] {
        for window in [None, Some(0), Some(1), Some(3), Some(8), Some(40)] {
            let ctx = AttnContext::<f32>::all_valid(common::grid_positions(gh, gw), window, 4, 10_000.0).unwrap();
            pairs_ok &= ctx.pair_count() as u64 == attention_pairs(gh, gw, window);
        }
    }

    let cfg = ModelConfig {
        enc_depth: 1,
        dec_depth: 1,
        width: 16,
        heads: 4,
        patch: 8,
        latent_channels: 16,
        regularizer: Regularizer::LayerNorm,
        reg_param: 0.0,
        name: "bench-narrow".into(),
        mlp_multiple: 8,
        ..ModelConfig::desk()
    };
    let ae = Autoencoder::<f32>::init(cfg, 0).unwrap();
    let sides = [16usize, 32, 64];
    let resolutions: Vec<usize> = sides.iter().map(|s| s * 8).collect();
    let opts = BenchOptions {
        repeats: 5,
        warmup: 1,
        ..BenchOptions::default()
    };
    let rows = bench_latency(&ae, &resolutions, &[AttentionMode::Full, AttentionMode::Swa(8)], &opts).unwrap();
    let series = |mode: &str| -> (Vec<f64>, Vec<f64>) {
        rows.iter().filter(|r| r.mode == mode).map(|r| (r.tokens as f64, r.median)).unzip()
    };
    let (tf, yf) = series("full");
    let (ts, ys) = series("swa");
    let rows_ok = rows.iter().all(|r| r.error.is_none() && r.pairs == attention_pairs(r.resolution / 8, r.resolution / 8, if r.mode == "full" { None } else { Some(8) }));
    let full_slope = loglog_slope(&tf, &yf).unwrap();
    let swa_slope = loglog_slope(&ts, &ys).unwrap();
    let pass = pairs_ok && rows_ok && swa_slope <= 1.3 && full_slope >= 1.7;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/");
    verdict(
        12,
        "latency scaling shape",
        pass,
        &format!("pair counts exact: {pairs_ok}; medians ms full {} swa {}; slopes full {full_slope:.2} (>= 1.7) swa {swa_slope:.2} (<= 1.3)", fmt(&yf), fmt(&ys)),
    );
}

#[test]
fn c13_parameter_accounting() {
    let targets = [("B", 88e6), ("L", 302e6), ("G", 1.1e9), ("T", 4.5e9)];
    let mut parts = Vec::new();
    let mut pass = true;
    for (scale, target) in targets {
        assert!(SCALES.iter().any(|s| s.0 == scale));
        let cfg = make_config(scale, 4, 16, 64, Regularizer::LayerNorm).unwrap();
        let n = count_parameters(&cfg).decoder as f64;
        let dev = n / target - 1.0;
        pass &= dev.abs() <= 0.2;
        parts.push(format!("{scale} {:.3e} ({:+.1}%)", n, 100.0 * dev));
    }
    let linear = make_config("B", 0, 16, 64, Regularizer::LayerNorm).unwrap();
    let enc = count_parameters(&linear).encoder as f64;
    let dev = enc / 49e3 - 1.0;
    pass &= dev.abs() <= 0.2;
    parts.push(format!("linear encoder {enc} ({:+.1}%)", 100.0 * dev));
    verdict(13, "parameter accounting", pass, &parts.join(", "));
}

#[test]
fn c14_determinism() {
    let images = synthetic(6, (64, 96), (0.75, 1.33), 14);
    let ex = FrozenExtractor::<f32>::new(ExtractorConfig::desk(0)).unwrap();
    let tcfg = TrainConfig {
        total_steps: 12,
        batch_size: 3,
        budgets: (32, 64),
        seed: 1234,
        ..TrainConfig::default()
    };
    let train = |reg: Regularizer| {
        let mut ae = Autoencoder::<f32>::init(toy_model(reg), tcfg.seed).unwrap();
        train_autoencoder(&mut ae, &images, &tcfg, &LossWeights::default(), Some(&ex), &mut TrainOutputs::default()).unwrap();
        ae
    };
    let mut same_ckpt = true;
    let mut trained = Vec::new();
    for reg in Regularizer::ALL {
        let (a, b) = (train(reg), train(reg));
        same_ckpt &= a.to_checkpoint().to_bytes().unwrap() == b.to_checkpoint().to_bytes().unwrap();
        trained.push(a);
    }

    let flow_cfg = FlowConfig {
        depth: 1,
        width: 32,
        latent_channels: 8,
        mlp_multiple: 16,
        ..FlowConfig::default()
    };
    let lat: Vec<(LatentGrid<f32>, usize)> = (0..4)
        .map(|k| {
            let g = GridFit::exact(2, 3, 1);
            let t = Tensor::new(vec![6, 8], rng::normal_vec::<f32, _>(&mut rng::seeded(k), 48)).unwrap();
            (LatentGrid::new(t, g).unwrap(), k as usize)
        })
        .collect();
    let train_f = || {
        let mut st = FlowState::<f32>::init(flow_cfg.clone(), 5).unwrap();
        train_flow(&mut st, &lat, &TrainConfig { batch_size: 2, ..tcfg.clone() }, &mut TrainOutputs::default()).unwrap();
        st.to_checkpoint().to_bytes().unwrap()
    };
    let same_flow = train_f() == train_f();

    let extractors = ExtractorSet::<f32>::standard(0).unwrap();
    let opts = EvalOptions::default();
    let eval = |ae: &Autoencoder<f32>| eval_reconstruction(ae, &images, &opts, &extractors, "hash").unwrap();
    let same_report = trained.iter().all(|ae| {
        let (r1, r2) = (eval(ae), eval(ae));
        r1 == r2 && r1.to_json().unwrap() == r2.to_json().unwrap()
    });
    let retrained = train(Regularizer::LayerNorm);
    let same_across_runs = eval(&retrained) == eval(&trained[2]);
    let pass = same_ckpt && same_flow && same_report && same_across_runs;
    verdict(
        14,
        "determinism",
        pass,
        &format!("AE checkpoints bit-identical: {same_ckpt}, flow checkpoint bit-identical: {same_flow}, reports value-identical: {same_report}/{same_across_runs}"),
    );
}
