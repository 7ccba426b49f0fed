//! Reconstruction objective: Charbonnier, SSIM and a frozen-feature
//! perceptual term on aligned tiles, all restricted to valid pixels.
//!
//! Images on the tape are `[H, W, 3]` channel-last; masks are [`PixelMask`]s
//! of the same height and width.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Backward, Tape, Var};
use crate::backbone::{block_forward, block_param_specs, dense, AttnContext, BlockConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::naflex::{bilinear_resize, patch_index, sample_coord, GridFit, PixelMask};
use crate::params::{Binder, Init, ParamSpec, ParameterStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_char: f64,
    pub w_ssim: f64,
    pub w_perc: f64,
    pub tile: usize,
    pub tiles_per_image: usize,
    /// Cover the valid region with a fixed grid of tiles instead of sampling.
    pub exhaustive_tiles: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_char: 1.0,
            w_ssim: 0.1,
            w_perc: 500.0,
            tile: 64,
            tiles_per_image: 1,
            exhaustive_tiles: false,
        }
    }
}

pub const PRESETS: [&str; 4] = ["pixel", "pixel+ssim", "pixel+ssim+perc500", "pixel+ssim+perc1000"];

impl LossWeights {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let (w_ssim, w_perc) = match name {
            "pixel" => (0.0, 0.0),
            "pixel+ssim" => (0.1, 0.0),
            "pixel+ssim+perc500" => (0.1, 500.0),
            "pixel+ssim+perc1000" => (0.1, 1000.0),
            other => {
                return Err(Error::Unknown {
                    kind: "loss preset",
                    name: other.to_string(),
                })
            }
        };
        Ok(Self { w_ssim, w_perc, ..base })
    }

    pub fn validate(&self, extractor_patch: usize) -> Result<()> {
        ensure!(
            [self.w_char, self.w_ssim, self.w_perc].iter().all(|w| *w >= 0.0 && w.is_finite()),
            InvalidArgument,
            "loss weights must be finite and non-negative"
        );
        ensure!(self.tiles_per_image >= 1, InvalidArgument, "tiles_per_image must be positive");
        ensure!(
            self.tile >= extractor_patch && self.tile.is_multiple_of(extractor_patch),
            InvalidArgument,
            "tile {} must be a multiple of the extractor patch {}",
            self.tile,
            extractor_patch
        );
        Ok(())
    }
}

fn image_dims<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    ensure!(s.len() == 3 && s[2] == CHANNELS, Shape, "expected an [H, W, 3] image, got {:?}", s);
    Ok((s[0], s[1]))
}

fn check_pair<T: Scalar>(tape: &Tape<T>, x: Var, y: Var, mask: &PixelMask) -> Result<(usize, usize)> {
    let (h, w) = image_dims(tape, x)?;
    ensure!(tape.shape(y) == tape.shape(x), Shape, "images differ: {:?} vs {:?}", tape.shape(x), tape.shape(y));
    ensure!(mask.height == h && mask.width == w, Shape, "mask {}x{} vs image {}x{}", mask.height, mask.width, h, w);
    Ok((h, w))
}

struct CharbonnierBackward {
    mask: Vec<bool>,
    count: usize,
}

impl<T: Scalar> Backward<T> for CharbonnierBackward {
    fn name(&self) -> &'static str {
        "charbonnier"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, y) = (inputs[0].data(), inputs[1].data());
        let eps2 = T::lit(CHARBONNIER_EPS * CHARBONNIER_EPS);
        let scale = grad[0] / T::from_usize(self.count * CHANNELS).unwrap();
        let mut gy = vec![T::zero(); y.len()];
        for (i, &keep) in self.mask.iter().enumerate() {
            if keep {
                for c in 0..CHANNELS {
                    let k = i * CHANNELS + c;
                    let d = y[k] - x[k];
                    gy[k] = scale * d / (d * d + eps2).sqrt();
                }
            }
        }
        let gx = needs[0].then(|| gy.iter().map(|&g| -g).collect());
        vec![gx, Some(gy)]
    }
}

/// Mean of `sqrt((x - y)^2 + eps^2)` over the channels of valid pixels.
pub fn charbonnier_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, mask: &PixelMask) -> Result<Var> {
    check_pair(tape, x, y, mask)?;
    let count = mask.count();
    ensure!(count > 0, InvalidArgument, "charbonnier: empty mask");
    let eps2 = T::lit(CHARBONNIER_EPS * CHARBONNIER_EPS);
    let (xv, yv) = (tape.value(x).data(), tape.value(y).data());
    let mut sum = T::zero();
    for (i, &keep) in mask.bits().iter().enumerate() {
        if keep {
            for c in 0..CHANNELS {
                let d = xv[i * CHANNELS + c] - yv[i * CHANNELS + c];
                sum += (d * d + eps2).sqrt();
            }
        }
    }
    let value = Tensor::scalar(sum / T::from_usize(count * CHANNELS).unwrap());
    let m = mask.bits().to_vec();
    Ok(tape.custom(vec![x, y], value, move || Box::new(CharbonnierBackward { mask: m, count })))
}

fn gaussian_taps<T: Scalar>() -> Vec<T> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::lit(v / s)).collect()
}

/// Separable valid convolution of an `h x w` plane.
fn conv_valid<T: Scalar>(src: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        for x in 0..ow {
            let row = &src[y * w + x..y * w + x + n];
            tmp[y * ow + x] = row.iter().zip(k).fold(T::zero(), |a, (&v, &kk)| a + v * kk);
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for (i, &kk) in k.iter().enumerate() {
            let src_row = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src_row) {
                *o += kk * v;
            }
        }
    }
    out
}

/// Adjoint of [`conv_valid`].
fn conv_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..oh {
        for (i, &kk) in k.iter().enumerate() {
            for x in 0..ow {
                tmp[(y + i) * ow + x] += kk * g[y * ow + x];
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..ow {
            let t = tmp[y * ow + x];
            for (j, &kk) in k.iter().enumerate() {
                out[y * w + x + j] += kk * t;
            }
        }
    }
    out
}

/// Window top-left corners whose whole window is valid.
fn ssim_windows(mask: &PixelMask) -> (Vec<bool>, usize) {
    let (h, w, n) = (mask.height, mask.width, SSIM_WINDOW);
    if h < n || w < n {
        return (Vec::new(), 0);
    }
    let mut integral = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] =
                !mask.get(y, x) as usize + integral[y * (w + 1) + x + 1] + integral[(y + 1) * (w + 1) + x] - integral[y * (w + 1) + x];
        }
    }
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut ok = vec![false; oh * ow];
    let mut count = 0;
    for y in 0..oh {
        for x in 0..ow {
            let bad = integral[(y + n) * (w + 1) + x + n] + integral[y * (w + 1) + x] - integral[y * (w + 1) + x + n] - integral[(y + n) * (w + 1) + x];
            if bad == 0 {
                ok[y * ow + x] = true;
                count += 1;
            }
        }
    }
    (ok, count)
}

fn plane<T: Scalar>(img: &[T], c: usize) -> Vec<T> {
    img.iter().skip(c).step_by(CHANNELS).copied().collect()
}

struct SsimMoments<T> {
    mx: Vec<T>,
    my: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

fn ssim_moments<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, k: &[T]) -> SsimMoments<T> {
    let sq = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&p, &q)| p * q).collect() };
    SsimMoments {
        mx: conv_valid(x, h, w, k),
        my: conv_valid(y, h, w, k),
        exx: conv_valid(&sq(x, x), h, w, k),
        eyy: conv_valid(&sq(y, y), h, w, k),
        exy: conv_valid(&sq(x, y), h, w, k),
    }
}

/// `(A1, A2, B1, B2)` of `S = A1 A2 / (B1 B2)` at one window.
fn ssim_terms<T: Scalar>(m: &SsimMoments<T>, i: usize) -> (T, T, T, T) {
    let (c1, c2, two) = (T::lit(SSIM_C1), T::lit(SSIM_C2), T::lit(2.0));
    let (mx, my) = (m.mx[i], m.my[i]);
    let a1 = two * mx * my + c1;
    let a2 = two * (m.exy[i] - mx * my) + c2;
    let b1 = mx * mx + my * my + c1;
    let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + c2;
    (a1, a2, b1, b2)
}

/// Mean local SSIM over fully valid windows and channels.
pub fn ssim_value<T: Scalar>(x: &[T], y: &[T], mask: &PixelMask) -> Result<T> {
    let (h, w) = (mask.height, mask.width);
    ensure!(x.len() == h * w * CHANNELS && y.len() == x.len(), Shape, "ssim: buffers do not match the mask");
    let (ok, count) = ssim_windows(mask);
    ensure!(count > 0, InvalidArgument, "ssim: valid region smaller than the {}x{} window", SSIM_WINDOW, SSIM_WINDOW);
    let k = gaussian_taps::<T>();
    let mut sum = T::zero();
    for c in 0..CHANNELS {
        let m = ssim_moments(&plane(x, c), &plane(y, c), h, w, &k);
        for (i, _) in ok.iter().enumerate().filter(|(_, &b)| b) {
            let (a1, a2, b1, b2) = ssim_terms(&m, i);
            sum += a1 * a2 / (b1 * b2);
        }
    }
    Ok(sum / T::from_usize(count * CHANNELS).unwrap())
}

struct SsimBackward {
    h: usize,
    w: usize,
    ok: Vec<bool>,
    count: usize,
}

impl SsimBackward {
    /// Gradient of the summed window SSIM w.r.t. `a`, with `b` the other image.
    fn grad_one<T: Scalar>(&self, a: &[T], b: &[T], k: &[T], gs: T) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![T::zero(); a.len()];
        let two = T::lit(2.0);
        for c in 0..CHANNELS {
            let (pa, pb) = (plane(a, c), plane(b, c));
            // Moments with `a` in the x slot.
            let m = ssim_moments(&pa, &pb, h, w, k);
            let n = self.ok.len();
            let (mut g_mu, mut g_ee, mut g_ex) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
            for i in (0..n).filter(|&i| self.ok[i]) {
                let (a1, a2, b1, b2) = ssim_terms(&m, i);
                let s = a1 * a2 / (b1 * b2);
                let (ma, mb) = (m.mx[i], m.my[i]);
                g_mu[i] = gs * s * (two * mb / a1 - two * ma / b1 - two * mb / a2 + two * ma / b2);
                g_ee[i] = -gs * s / b2;
                g_ex[i] = gs * s * two / a2;
            }
            let (gmu, gee, gex) = (conv_adjoint(&g_mu, h, w, k), conv_adjoint(&g_ee, h, w, k), conv_adjoint(&g_ex, h, w, k));
            for p in 0..h * w {
                out[p * CHANNELS + c] = gmu[p] + two * pa[p] * gee[p] + pb[p] * gex[p];
            }
        }
        out
    }
}

impl<T: Scalar> Backward<T> for SsimBackward {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, y) = (inputs[0].data(), inputs[1].data());
        let k = gaussian_taps::<T>();
        let gs = -grad[0] / T::from_usize(self.count * CHANNELS).unwrap();
        let gx = needs[0].then(|| self.grad_one(x, y, &k, gs));
        let gy = needs[1].then(|| self.grad_one(y, x, &k, gs));
        vec![gx, gy]
    }
}

/// `1 - SSIM` on the tape.
pub fn ssim_loss_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, mask: &PixelMask) -> Result<Var> {
    let (h, w) = check_pair(tape, x, y, mask)?;
    let s = ssim_value(tape.value(x).data(), tape.value(y).data(), mask)?;
    let (ok, count) = ssim_windows(mask);
    Ok(tape.custom(vec![x, y], Tensor::scalar(T::one() - s), move || Box::new(SsimBackward { h, w, ok, count })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// 1-based block indices whose outputs are tapped.
    pub taps: Vec<usize>,
    pub seed: u64,
    /// Native input side; perceptual tiles use this size.
    pub input: usize,
}

impl ExtractorConfig {
    pub fn desk(seed: u64) -> Self {
        let depth = 4;
        Self {
            patch: 8,
            width: 64,
            depth,
            heads: 4,
            taps: vec![depth / 3, 2 * depth / 3, depth],
            seed,
            input: 64,
        }
    }

    fn block(&self) -> BlockConfig {
        BlockConfig {
            layerscale_init: 1.0,
            ..BlockConfig::new(self.width, self.heads)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        ensure!(self.width.is_multiple_of(4), InvalidArgument, "extractor width must be divisible by 4");
        ensure!(!self.taps.is_empty(), InvalidArgument, "extractor needs at least one tap");
        ensure!(
            self.taps.iter().all(|&t| t >= 1 && t <= self.depth),
            InvalidArgument,
            "taps {:?} outside 1..={}",
            self.taps,
            self.depth
        );
        ensure!(self.input.is_multiple_of(self.patch), InvalidArgument, "extractor input must be a multiple of its patch");
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.patch * self.patch * CHANNELS;
        let mut specs = vec![
            ParamSpec::new("patch_embed.w", &[d, self.width], Init::Xavier),
            ParamSpec::new("patch_embed.b", &[self.width], Init::Normal(0.02)),
        ];
        let block = self.block();
        for i in 0..self.depth {
            specs.extend(
                block_param_specs(&format!("blocks.{i}"), &block)
                    .into_iter()
                    .map(|mut s| {
                        // Random biases keep the frozen features from being odd functions of the input.
                        if s.name.ends_with(".b") && !s.name.contains("ln") {
                            s.init = Init::Normal(0.02);
                        }
                        s
                    }),
            );
        }
        specs
    }
}

/// Fixed 2D sine-cosine embedding, `[tokens, width]`; rows take the first half.
pub fn sincos_embedding<T: Scalar>(positions: &[(i32, i32)], width: usize) -> Tensor<T> {
    let quarter = width / 4;
    let mut data = Vec::with_capacity(positions.len() * width);
    for &(r, c) in positions {
        for coord in [r, c] {
            for k in 0..quarter {
                let a = coord as f64 / 10_000f64.powf(k as f64 / quarter as f64);
                data.push(T::lit(a.sin()));
            }
            for k in 0..quarter {
                let a = coord as f64 / 10_000f64.powf(k as f64 / quarter as f64);
                data.push(T::lit(a.cos()));
            }
        }
    }
    Tensor::new(vec![positions.len(), width], data).expect("embedding layout")
}

/// A small ViT whose weights never change after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenExtractor<T: Scalar> {
    cfg: ExtractorConfig,
    params: ParameterStore<T>,
}

pub const EXTRACTOR_KIND: &str = "extractor";

impl<T: Scalar> FrozenExtractor<T> {
    pub fn new(cfg: ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ParameterStore::init(&cfg.param_specs(), &mut rng::seeded(cfg.seed))?;
        Ok(Self { cfg, params })
    }

    /// Wraps externally trained weights; names and shapes must match `cfg`.
    pub fn from_store(cfg: ExtractorConfig, params: ParameterStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = ParameterStore::<T>::init(&cfg.param_specs(), &mut rng::seeded(0))?;
        ensure!(params.same_layout(&expected), Malformed, "extractor weights do not match its config");
        Ok(Self { cfg, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ensure!(ck.kind() == Some(EXTRACTOR_KIND), Malformed, "checkpoint kind {:?} is not an extractor", ck.kind());
        let cfg: ExtractorConfig = serde_json::from_value(ck.config["extractor"].clone())?;
        Self::from_store(cfg, ck.store("")?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(json!({"kind": EXTRACTOR_KIND, "extractor": self.cfg}));
        ck.push_store("", &self.params);
        ck.save(path)
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    /// Token features after each tapped block for an `[H, W, 3]` image
    /// whose sides are multiples of the patch size.
    pub fn features_tape(&self, tape: &mut Tape<T>, img: Var) -> Result<Vec<Var>> {
        let (h, w) = image_dims(tape, img)?;
        let p = self.cfg.patch;
        ensure!(h % p == 0 && w % p == 0, Shape, "extractor input {}x{} not a multiple of patch {}", h, w, p);
        let grid = GridFit::exact(h / p, w / p, p);
        let n = grid.tokens();
        let tokens = tape.gather(img, patch_index(h, w, p)?, vec![n, p * p * CHANNELS])?;
        let mut binder = Binder::frozen(&self.params);
        let x = dense(tape, &mut binder, "patch_embed", tokens)?;
        let positions = grid.positions();
        let pos = tape.constant(sincos_embedding(&positions, self.cfg.width));
        let mut x = tape.add(x, pos)?;
        let block = self.cfg.block();
        let ctx = AttnContext::all_valid(positions, None, block.head_dim(), block.rope_base)?;
        let mut taps = Vec::with_capacity(self.cfg.taps.len());
        for i in 0..self.cfg.depth {
            x = block_forward(tape, &mut binder, &format!("blocks.{i}"), x, &ctx, &block)?;
            if self.cfg.taps.contains(&(i + 1)) {
                taps.push(x);
            }
        }
        Ok(taps)
    }

    /// Mean-pooled last-tap features of an image resized to the native input.
    pub fn embed(&self, img: &Image<T>) -> Result<Vec<T>> {
        let s = self.cfg.input;
        let raw = bilinear_resize(img.pixels(), img.height(), img.width(), s, s);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![s, s, CHANNELS], raw)?);
        let taps = self.features_tape(&mut tape, x)?;
        let last = tape.value(*taps.last().expect("at least one tap"));
        let (n, d) = last.dims2();
        let mut pooled = vec![T::zero(); d];
        for row in last.data().chunks(d) {
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        Ok(pooled.into_iter().map(|v| v * inv).collect())
    }
}

/// Where a tile comes from: a crop of the valid box, or (when the box is
/// smaller than the tile) a crop of the box resized up with its aspect kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub box_y: usize,
    pub box_x: usize,
    pub box_h: usize,
    pub box_w: usize,
    /// Size the box is resized to before cropping.
    pub scaled_h: usize,
    pub scaled_w: usize,
    pub off_y: usize,
    pub off_x: usize,
}

/// Tile placements for one image. Exhaustive mode ignores `rng`.
pub fn plan_tiles<R: Rng + ?Sized>(mask: &PixelMask, weights: &LossWeights, rng: &mut R) -> Result<Vec<TilePlan>> {
    let t = weights.tile;
    let (y0, x0, bh, bw) = mask
        .bounding_box()
        .ok_or_else(|| Error::InvalidArgument("perceptual loss: empty mask".into()))?;
    let (sh, sw) = if bh >= t && bw >= t {
        (bh, bw)
    } else {
        let s = (t as f64 / bh as f64).max(t as f64 / bw as f64);
        (((bh as f64 * s).round() as usize).max(t), ((bw as f64 * s).round() as usize).max(t))
    };
    let plan = |off_y, off_x| TilePlan {
        box_y: y0,
        box_x: x0,
        box_h: bh,
        box_w: bw,
        scaled_h: sh,
        scaled_w: sw,
        off_y,
        off_x,
    };
    if weights.exhaustive_tiles {
        let ys: Vec<usize> = (0..=(sh - t) / t).map(|i| i * t).collect();
        let xs: Vec<usize> = (0..=(sw - t) / t).map(|i| i * t).collect();
        return Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| plan(y, x))).collect());
    }
    Ok((0..weights.tiles_per_image)
        .map(|_| plan(rng.gen_range(0..=sh - t), rng.gen_range(0..=sw - t)))
        .collect())
}

fn extract_tile<T: Scalar>(tape: &mut Tape<T>, img: Var, plan: &TilePlan, tile: usize) -> Result<Var> {
    let (_, w) = image_dims(tape, img)?;
    let shape = vec![tile, tile, CHANNELS];
    if plan.scaled_h == plan.box_h && plan.scaled_w == plan.box_w {
        let mut idx = Vec::with_capacity(tile * tile * CHANNELS);
        for i in 0..tile {
            for j in 0..tile {
                let base = ((plan.box_y + plan.off_y + i) * w + plan.box_x + plan.off_x + j) * CHANNELS;
                idx.extend(base..base + CHANNELS);
            }
        }
        return tape.gather(img, idx, shape);
    }
    let mut idx = Vec::with_capacity(tile * tile * CHANNELS * 4);
    let mut wts = Vec::with_capacity(idx.capacity());
    for i in 0..tile {
        let (ya, yb, fy) = sample_coord(plan.off_y + i, plan.box_h, plan.scaled_h);
        for j in 0..tile {
            let (xa, xb, fx) = sample_coord(plan.off_x + j, plan.box_w, plan.scaled_w);
            for c in 0..CHANNELS {
                for (yy, xx, wt) in [(ya, xa, (1.0 - fy) * (1.0 - fx)), (ya, xb, (1.0 - fy) * fx), (yb, xa, fy * (1.0 - fx)), (yb, xb, fy * fx)] {
                    idx.push(((plan.box_y + yy) * w + plan.box_x + xx) * CHANNELS + c);
                    wts.push(T::lit(wt));
                }
            }
        }
    }
    tape.interp(img, 4, idx, wts, shape)
}

/// Mean over tiles and tapped blocks of the MSE between per-token
/// L2-normalized features of aligned tiles.
pub fn perceptual_tile_loss_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    mask: &PixelMask,
    extractor: &FrozenExtractor<T>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<Var> {
    check_pair(tape, x, y, mask)?;
    ensure!(weights.tile == extractor.cfg.input, InvalidArgument, "tile {} differs from extractor input {}", weights.tile, extractor.cfg.input);
    let plans = plan_tiles(mask, weights, rng)?;
    let mut terms = Vec::new();
    for plan in &plans {
        let tx = extract_tile(tape, x, plan, weights.tile)?;
        let ty = extract_tile(tape, y, plan, weights.tile)?;
        let fx = extractor.features_tape(tape, tx)?;
        let fy = extractor.features_tape(tape, ty)?;
        for (a, b) in fx.into_iter().zip(fy) {
            let na = tape.l2_normalize_rows(a);
            let nb = tape.l2_normalize_rows(b);
            terms.push(tape.mse(na, nb)?);
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, T::one() / T::from_usize(terms.len()).unwrap()))
}

/// Per-term values of one image's objective, unweighted except `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub char: f64,
    pub ssim: f64,
    pub perc: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.total += other.total * s;
        self.char += other.char * s;
        self.ssim += other.ssim * s;
        self.perc += other.perc * s;
        self.reg += other.reg * s;
    }
}

fn finite_term<T: Scalar>(tape: &Tape<T>, v: Var, name: &str) -> Result<f64> {
    let x = tape.value(v).item().to_f64_lossy();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("loss term {name}")))
    }
}

/// `w_char*char + w_ssim*ssim + w_perc*perc + reg`. Terms with zero weight
/// are not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    mask: &PixelMask,
    reg: Option<Var>,
    weights: &LossWeights,
    extractor: Option<&FrozenExtractor<T>>,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    let mut parts: Vec<Var> = Vec::new();
    let mut b = LossBreakdown::default();
    if weights.w_char > 0.0 {
        let v = charbonnier_tape(tape, x, y, mask)?;
        b.char = finite_term(tape, v, "charbonnier")?;
        parts.push(tape.scale(v, T::lit(weights.w_char)));
    }
    if weights.w_ssim > 0.0 {
        let v = ssim_loss_tape(tape, x, y, mask)?;
        b.ssim = finite_term(tape, v, "ssim")?;
        parts.push(tape.scale(v, T::lit(weights.w_ssim)));
    }
    if weights.w_perc > 0.0 {
        let e = extractor.ok_or_else(|| Error::InvalidArgument("perceptual weight set without an extractor".into()))?;
        let v = perceptual_tile_loss_tape(tape, x, y, mask, e, weights, rng)?;
        b.perc = finite_term(tape, v, "perceptual")?;
        parts.push(tape.scale(v, T::lit(weights.w_perc)));
    }
    if let Some(r) = reg {
        b.reg = finite_term(tape, r, "regularizer")?;
        parts.push(r);
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    for &p in parts.iter().skip(1) {
        total = tape.add(total, p)?;
    }
    b.total = finite_term(tape, total, "total")?;
    Ok((total, b))
}

fn with_pair<T: Scalar, F>(x: &Tensor<T>, y: &Tensor<T>, f: F) -> Result<T>
where
    F: FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = f(&mut tape, xv, yv)?;
    Ok(tape.value(out).item())
}

pub fn charbonnier<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, mask: &PixelMask) -> Result<T> {
    with_pair(x, y, |t, a, b| charbonnier_tape(t, a, b, mask))
}

pub fn ssim_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, mask: &PixelMask) -> Result<T> {
    with_pair(x, y, |t, a, b| ssim_loss_tape(t, a, b, mask))
}

pub fn perceptual_tile_loss<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    mask: &PixelMask,
    extractor: &FrozenExtractor<T>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<T> {
    with_pair(x, y, |t, a, b| perceptual_tile_loss_tape(t, a, b, mask, extractor, weights, rng))
}
