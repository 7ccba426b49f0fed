//! Reconstruction and generation metrics, plus the latency harness.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{canvas_to_image, Reconstructor};
use crate::backbone::attention_pairs;
use crate::error::{ensure, Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::losses::{ssim_loss, ExtractorConfig, FrozenExtractor};
use crate::naflex::{fit_grid, GridFit, PackedImage, PixelMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;

fn check_images<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, mask: &PixelMask) -> Result<usize> {
    ensure!(x.shape() == y.shape(), Shape, "images differ: {:?} vs {:?}", x.shape(), y.shape());
    ensure!(x.numel() == mask.height * mask.width * CHANNELS, Shape, "mask does not match image");
    let n = mask.count();
    ensure!(n > 0, InvalidArgument, "empty mask");
    Ok(n)
}

/// `10 log10(1 / MSE)` over valid pixels, capped at 100 dB.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, mask: &PixelMask) -> Result<f64> {
    let n = check_images(x, y, mask)?;
    let mut sse = 0.0;
    for (i, &keep) in mask.bits().iter().enumerate() {
        if keep {
            for c in 0..CHANNELS {
                let d = x.data()[i * CHANNELS + c].to_f64_lossy() - y.data()[i * CHANNELS + c].to_f64_lossy();
                sse += d * d;
            }
        }
    }
    let mse = sse / (n * CHANNELS) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean local SSIM; defined as `1 - ssim_loss`.
pub fn ssim_metric<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, mask: &PixelMask) -> Result<f64> {
    check_images(x, y, mask)?;
    Ok(1.0 - ssim_loss(x, y, mask)?.to_f64_lossy())
}

/// Gaussian moments of a feature set; `cov` is the unbiased estimate,
/// row-major `dim x dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Two-pass estimate: mean first, then centered outer products.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(rows.len() >= 2, InvalidArgument, "feature statistics need at least 2 samples, got {}", rows.len());
        let d = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == d), Shape, "feature rows differ in length");
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        let s = Self { mean, cov, count: rows.len() };
        s.check()?;
        Ok(s)
    }

    /// Combined moments of two disjoint sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        ensure!(self.dim() == other.dim(), Shape, "feature dims differ: {} vs {}", self.dim(), other.dim());
        let d = self.dim();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean = self.mean.iter().zip(&delta).map(|(a, dl)| a + dl * nb / n).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let m2 = self.cov[i * d + j] * (na - 1.0) + other.cov[i * d + j] * (nb - 1.0) + delta[i] * delta[j] * na * nb / n;
                cov[i * d + j] = m2 / (n - 1.0);
            }
        }
        Ok(Self {
            mean,
            cov,
            count: self.count + other.count,
        })
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        ensure!(self.cov.len() == d * d, Shape, "covariance is not {}x{}", d, d);
        ensure!(self.count >= 2, InvalidArgument, "statistics need at least 2 samples");
        ensure!(
            self.mean.iter().chain(&self.cov).all(|v| v.is_finite()),
            NonFinite,
            "feature statistics"
        );
        Ok(())
    }
}

/// Eigenvalues and column eigenvectors (row-major `n x n`) of a symmetric
/// matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Principal square root of a symmetric PSD matrix, negative eigenvalues
/// clamped to 0.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| vecs[i * n + k] * roots[k] * vecs[j * n + k]).sum();
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    <f64 as Scalar>::gemm(n, n, n, 1.0, a, false, b, false, 0.0, &mut out);
    out
}

/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, with the cross term
/// computed as `tr sqrt(Sa^(1/2) Sb Sa^(1/2))` to stay symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    a.check()?;
    b.check()?;
    ensure!(a.dim() == b.dim(), Shape, "feature dims differ: {} vs {}", a.dim(), b.dim());
    let n = a.dim();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sqrtm_psd(&a.cov, n);
    let mut m = matmul(&matmul(&sa, &b.cov, n), &sa, n);
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let (vals, _) = symmetric_eigen(&m, n);
    let cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr: f64 = (0..n).map(|i| a.cov[i * n + i] + b.cov[i * n + i]).sum();
    let d = mean_term + tr - 2.0 * cross;
    ensure!(d.is_finite(), NonFinite, "frechet distance");
    Ok(d.max(0.0))
}

/// Mean-pooled extractor features of every image, in order.
pub fn extract_features<T: Scalar>(images: &[Image<T>], extractor: &FrozenExtractor<T>) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| Ok(extractor.embed(img)?.iter().map(|v| v.to_f64_lossy()).collect()))
        .collect()
}

pub fn collect_stats<T: Scalar>(images: &[Image<T>], extractor: &FrozenExtractor<T>) -> Result<FeatureStats> {
    ensure!(!images.is_empty(), InvalidArgument, "no images to collect statistics from");
    FeatureStats::from_features(&extract_features(images, extractor)?)
}

/// Named frozen extractors used for Fréchet distances.
pub struct ExtractorSet<T: Scalar> {
    pub extractors: Vec<(String, FrozenExtractor<T>)>,
}

impl<T: Scalar> ExtractorSet<T> {
    /// "fdd" shares the perceptual-loss extractor seed; "fid" is an
    /// independently seeded second network.
    pub fn standard(perceptual_seed: u64) -> Result<Self> {
        Ok(Self {
            extractors: vec![
                ("fdd".to_string(), FrozenExtractor::new(ExtractorConfig::desk(perceptual_seed))?),
                ("fid".to_string(), FrozenExtractor::new(ExtractorConfig::desk(perceptual_seed ^ 0x9E37_79B9_7F4A_7C15))?),
            ],
        })
    }

    pub fn frechet(&self, a: &[Image<T>], b: &[Image<T>]) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (id, e) in &self.extractors {
            out.insert(id.clone(), frechet_distance(&collect_stats(a, e)?, &collect_stats(b, e)?)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub resolution: usize,
    pub mode: String,
    pub median: f64,
    pub p90: f64,
    pub pairs: u64,
    pub tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub frechet: BTreeMap<String, f64>,
    pub latent_std: f64,
    pub latency_ms: Vec<LatencyRow>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn empty(config_hash: &str) -> Self {
        Self {
            psnr_db: 0.0,
            ssim: 0.0,
            frechet: BTreeMap::new(),
            latent_std: 0.0,
            latency_ms: Vec::new(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.psnr_db, self.ssim, self.latent_std]
            .iter()
            .chain(self.frechet.values())
            .chain(self.latency_ms.iter().flat_map(|r| [&r.median, &r.p90]))
            .all(|v| v.is_finite());
        ensure!(finite, NonFinite, "evaluation report");
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per latency cell with the report-level values repeated.
    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["resolution", "mode", "median", "p90", "pairs", "tokens", "error", "psnr_db", "ssim", "latent_std", "config_hash"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(self.frechet.keys().map(|k| format!("frechet_{k}")));
        w.write_record(&header)?;
        for r in &self.latency_ms {
            let mut rec = vec![
                r.resolution.to_string(),
                r.mode.clone(),
                r.median.to_string(),
                r.p90.to_string(),
                r.pairs.to_string(),
                r.tokens.to_string(),
                r.error.clone().unwrap_or_default(),
                self.psnr_db.to_string(),
                self.ssim.to_string(),
                self.latent_std.to_string(),
                self.config_hash.clone(),
            ];
            rec.extend(self.frechet.values().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Malformed(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|_| Error::Malformed("csv output is not UTF-8".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub budget: usize,
    pub window: Option<usize>,
    /// Square center crop side applied before packing.
    pub center_crop: Option<usize>,
    pub extractor_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            budget: 256,
            window: None,
            center_crop: None,
            extractor_seed: 0,
        }
    }
}

fn valid_region<T: Scalar>(canvas: &Tensor<T>, grid: &GridFit) -> Result<Image<T>> {
    let img = canvas_to_image(canvas)?;
    img.crop(0, 0, grid.resized_h, grid.resized_w)
}

/// Per-image PSNR/SSIM (averaged), Fréchet distances between original and
/// reconstructed valid regions, and the standard deviation of all latents.
pub fn eval_reconstruction<T: Scalar>(
    model: &dyn Reconstructor<T>,
    images: &[Image<T>],
    opts: &EvalOptions,
    extractors: &ExtractorSet<T>,
    config_hash: &str,
) -> Result<EvalReport> {
    ensure!(!images.is_empty(), InvalidArgument, "empty evaluation set");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    let (mut originals, mut recons) = (Vec::new(), Vec::new());
    let (mut lat_sum, mut lat_sq, mut lat_n) = (0.0, 0.0, 0usize);
    for img in images {
        let img = match opts.center_crop {
            Some(s) => img.center_crop(s)?,
            None => img.clone(),
        };
        let packed = PackedImage::pack(&img, model.patch_size(), opts.budget)?;
        let (canvas, latents) = model.reconstruct(&packed, opts.window)?;
        let target = packed.canvas();
        let clamped = canvas_to_image(&canvas)?.to_tensor();
        psnr_sum += psnr(&target, &clamped, &packed.pad_mask)?;
        ssim_sum += ssim_metric(&target, &clamped, &packed.pad_mask)?;
        originals.push(valid_region(&target, &packed.grid)?);
        recons.push(valid_region(&canvas, &packed.grid)?);
        if let Some(z) = latents {
            for &v in z.data() {
                let v = v.to_f64_lossy();
                lat_sum += v;
                lat_sq += v * v;
                lat_n += 1;
            }
        }
    }
    let n = images.len() as f64;
    let latent_std = if lat_n > 1 {
        let m = lat_sum / lat_n as f64;
        ((lat_sq / lat_n as f64 - m * m).max(0.0)).sqrt()
    } else {
        0.0
    };
    let frechet = if images.len() >= 2 { extractors.frechet(&originals, &recons)? } else { BTreeMap::new() };
    let report = EvalReport {
        psnr_db: psnr_sum / n,
        ssim: ssim_sum / n,
        frechet,
        latent_std,
        latency_ms: Vec::new(),
        config_hash: config_hash.to_string(),
    };
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    Full,
    Swa(usize),
}

impl AttentionMode {
    pub fn label(self) -> &'static str {
        match self {
            AttentionMode::Full => "full",
            AttentionMode::Swa(_) => "swa",
        }
    }

    pub fn window(self) -> Option<usize> {
        match self {
            AttentionMode::Full => None,
            AttentionMode::Swa(r) => Some(r),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: usize,
    /// Largest score matrix (bytes) a full-attention run may allocate.
    pub max_attention_bytes: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 2,
            max_attention_bytes: 1 << 30,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn bench_image<T: Scalar>(side: usize) -> Result<Image<T>> {
    let mut px = Vec::with_capacity(side * side * CHANNELS);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (y as f64 / side as f64, x as f64 / side as f64);
            px.push(T::lit(0.5 + 0.4 * (6.0 * u).sin()));
            px.push(T::lit(0.5 + 0.4 * (5.0 * v).cos()));
            px.push(T::lit(0.5 + 0.4 * (4.0 * (u + v)).sin()));
        }
    }
    Image::new(side, side, px)
}

/// Wall-clock reconstruction latency per (resolution, mode). Runs that
/// would exceed the attention memory limit become error rows.
pub fn bench_latency<T: Scalar>(model: &dyn Reconstructor<T>, resolutions: &[usize], modes: &[AttentionMode], opts: &BenchOptions) -> Result<Vec<LatencyRow>> {
    ensure!(opts.repeats >= 1, InvalidArgument, "repeats must be at least 1");
    let p = model.patch_size();
    let mut rows = Vec::new();
    for &res in resolutions {
        ensure!(res >= p, InvalidArgument, "resolution {} below patch size {}", res, p);
        let img = bench_image::<T>(res)?;
        let side = res.div_ceil(p);
        let fit = fit_grid(res, res, p, side * side)?;
        let packed = PackedImage::pack_with(&img, &fit)?;
        let tokens = fit.tokens();
        for &mode in modes {
            let pairs = attention_pairs(fit.grid_h, fit.grid_w, mode.window());
            let mut row = LatencyRow {
                resolution: res,
                mode: mode.label().to_string(),
                median: 0.0,
                p90: 0.0,
                pairs,
                tokens,
                error: None,
            };
            let score_bytes = match mode {
                AttentionMode::Full => tokens.saturating_mul(tokens).saturating_mul(std::mem::size_of::<T>()),
                AttentionMode::Swa(_) => 0,
            };
            if score_bytes > opts.max_attention_bytes {
                row.error = Some(format!("OOM: {score_bytes} bytes of attention scores exceed {}", opts.max_attention_bytes));
                rows.push(row);
                continue;
            }
            for _ in 0..opts.warmup {
                model.reconstruct(&packed, mode.window())?;
            }
            let mut times = Vec::with_capacity(opts.repeats);
            for _ in 0..opts.repeats {
                let start = Instant::now();
                model.reconstruct(&packed, mode.window())?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
            row.median = percentile(&times, 0.5);
            row.p90 = percentile(&times, 0.9);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    ensure!(xs.len() == ys.len() && xs.len() >= 2, InvalidArgument, "need at least two matched points");
    ensure!(xs.iter().chain(ys).all(|&v| v > 0.0), InvalidArgument, "log-log fit needs positive values");
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Every class once, the remainder drawn uniformly, in that order.
pub fn reference_labels<R: Rng + ?Sized>(class_count: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    ensure!(class_count >= 1, InvalidArgument, "class_count must be positive");
    ensure!(n >= class_count, InvalidArgument, "{} samples cannot cover {} classes", n, class_count);
    let mut labels: Vec<usize> = (0..class_count).collect();
    labels.extend((class_count..n).map(|_| rng.gen_range(0..class_count)));
    Ok(labels)
}
