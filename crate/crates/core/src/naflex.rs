//! Native-resolution front end: fit an image into a token budget without
//! changing its aspect ratio, pad to whole patches, and cut into tokens.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fill value for canvas pixels outside the resized content.
pub const PAD_VALUE: f64 = 0.5;

/// Token grid chosen for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFit {
    pub grid_h: usize,
    pub grid_w: usize,
    pub resized_h: usize,
    pub resized_w: usize,
    pub scale: f64,
    pub source_h: usize,
    pub source_w: usize,
    pub patch: usize,
}

impl GridFit {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn canvas_h(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn canvas_w(&self) -> usize {
        self.grid_w * self.patch
    }

    /// Fit for a canvas that is already whole patches, with no resize.
    pub fn exact(grid_h: usize, grid_w: usize, patch: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            resized_h: grid_h * patch,
            resized_w: grid_w * patch,
            scale: 1.0,
            source_h: grid_h * patch,
            source_w: grid_w * patch,
            patch,
        }
    }

    /// Row-major `(row, col)` coordinate of every token.
    pub fn positions(&self) -> Vec<(i32, i32)> {
        (0..self.grid_h)
            .flat_map(|r| (0..self.grid_w).map(move |c| (r as i32, c as i32)))
            .collect()
    }

    pub fn pad_mask(&self) -> PixelMask {
        PixelMask::rect(self.canvas_h(), self.canvas_w(), self.resized_h, self.resized_w)
    }
}

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

/// Largest scale `s <= 1` whose patch grid `ceil(s*h/p) x ceil(s*w/p)` fits
/// in `budget` tokens.
///
/// The grid product is a non-decreasing, left-continuous step function of
/// `s`, so its maximum admissible value sits on a breakpoint `a*p/h`,
/// `b*p/w`, or at `s = 1`. Every breakpoint is scanned in exact rational
/// arithmetic.
pub fn fit_grid(h: usize, w: usize, p: usize, budget: usize) -> Result<GridFit> {
    ensure!(h >= 1 && w >= 1, InvalidArgument, "image dimensions must be positive");
    ensure!(p >= 1, InvalidArgument, "patch size must be positive");
    ensure!(budget >= 1, InvalidArgument, "token budget must be >= 1, got {}", budget);
    let (h128, w128, p128) = (h as u128, w as u128, p as u128);
    let grid_at = |num: u128, den: u128| {
        (ceil_div(num * h128, den * p128), ceil_div(num * w128, den * p128))
    };
    let mut candidates: Vec<(u128, u128)> = vec![(1, 1)];
    candidates.extend((1..=ceil_div(h128, p128)).map(|a| (a * p128, h128)));
    candidates.extend((1..=ceil_div(w128, p128)).map(|b| (b * p128, w128)));
    let mut best: Option<(u128, u128)> = None;
    for (num, den) in candidates {
        if num > den {
            continue;
        }
        let (gh, gw) = grid_at(num, den);
        if gh * gw > budget as u128 {
            continue;
        }
        if best.is_none_or(|(bn, bd)| num * bd > bn * den) {
            best = Some((num, den));
        }
    }
    // The smallest breakpoint always yields a 1 x k or k x 1 grid; the
    // 1 x 1 grid at s = min(p/h, p/w) is admissible for any budget >= 1.
    let (num, den) = best.expect("1x1 grid is always admissible");
    let (gh, gw) = grid_at(num, den);
    let scale = num as f64 / den as f64;
    let round = |dim: u128| ((num * dim * 2 + den) / (den * 2)).max(1) as usize;
    Ok(GridFit {
        grid_h: gh as usize,
        grid_w: gw as usize,
        resized_h: round(h128),
        resized_w: round(w128),
        scale,
        source_h: h,
        source_w: w,
        patch: p,
    })
}

/// Per-pixel validity of a padded canvas (true = real content).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(bits.len() == height * width, Shape, "mask needs {} flags", height * width);
        Ok(Self { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// True on the top-left `valid_h x valid_w` rectangle.
    pub fn rect(height: usize, width: usize, valid_h: usize, valid_w: usize) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| y < valid_h && x < valid_w))
            .collect();
        Self { height, width, bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bounding box `(y0, x0, h, w)` of the valid pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 != usize::MAX).then(|| (y0, x0, y1 - y0, x1 - x0))
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// Interpolation is written as nested lerps so a constant input maps to the
/// same constant exactly.
pub fn bilinear_resize<T: Scalar>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    if out_h == h && out_w == w {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(out_h * out_w * CHANNELS);
    let ys: Vec<_> = (0..out_h).map(|i| sample_coord(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|j| sample_coord(j, w, out_w)).collect();
    for &(y0, y1, fy) in &ys {
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::lit(fx);
            for c in 0..CHANNELS {
                let at = |y: usize, x: usize| src[(y * w + x) * CHANNELS + c];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

/// Source neighbors and blend factor for output index `i`.
pub(crate) fn sample_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, pos - lo as f64)
}

/// Resizes to the fitted content size and places it top-left on a
/// mid-gray canvas of whole patches.
pub fn resize_pad<T: Scalar>(img: &Image<T>, fit: &GridFit) -> Result<(Image<T>, PixelMask)> {
    ensure!(
        img.height() == fit.source_h && img.width() == fit.source_w,
        InvalidArgument,
        "fit computed for {}x{}, image is {}x{}",
        fit.source_h,
        fit.source_w,
        img.height(),
        img.width()
    );
    let (ch, cw) = (fit.canvas_h(), fit.canvas_w());
    ensure!(fit.resized_h <= ch && fit.resized_w <= cw, InvalidArgument, "fit content exceeds canvas");
    let content = bilinear_resize(img.pixels(), img.height(), img.width(), fit.resized_h, fit.resized_w);
    let mut canvas = vec![T::lit(PAD_VALUE); ch * cw * CHANNELS];
    let row = fit.resized_w * CHANNELS;
    for y in 0..fit.resized_h {
        let dst = y * cw * CHANNELS;
        canvas[dst..dst + row].copy_from_slice(&content[y * row..(y + 1) * row]);
    }
    Ok((Image::new(ch, cw, canvas)?, fit.pad_mask()))
}

/// For each token element (row-major patches, channel-last within a patch)
/// the flat index of the canvas value it copies.
pub fn patch_index(h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    ensure!(p >= 1 && h.is_multiple_of(p) && w.is_multiple_of(p), Shape, "{}x{} canvas is not divisible by patch {}", h, w, p);
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * CHANNELS);
    for r in 0..gh {
        for c in 0..gw {
            for y in 0..p {
                let start = ((r * p + y) * w + c * p) * CHANNELS;
                idx.extend(start..start + p * CHANNELS);
            }
        }
    }
    Ok(idx)
}

/// Inverse of [`patch_index`]: canvas element to token element.
pub fn unpatch_index(h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    let fwd = patch_index(h, w, p)?;
    let mut inv = vec![0; fwd.len()];
    for (token_pos, &canvas_pos) in fwd.iter().enumerate() {
        inv[canvas_pos] = token_pos;
    }
    Ok(inv)
}

/// Token array `[grid_h * grid_w, p * p * 3]`.
pub fn patchify<T: Scalar>(padded: &Image<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w) = (padded.height(), padded.width());
    let idx = patch_index(h, w, p)?;
    let src = padded.pixels();
    let data = idx.iter().map(|&i| src[i]).collect();
    Tensor::new(vec![(h / p) * (w / p), p * p * CHANNELS], data)
}

/// Reassembles tokens into the `grid_h*p x grid_w*p` canvas (unclamped).
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, grid: &GridFit) -> Result<Tensor<T>> {
    let p = grid.patch;
    ensure!(
        tokens.numel() == grid.tokens() * p * p * CHANNELS,
        Shape,
        "expected {} tokens of {} values, got shape {:?}",
        grid.tokens(),
        p * p * CHANNELS,
        tokens.shape()
    );
    let (h, w) = (grid.canvas_h(), grid.canvas_w());
    let inv = unpatch_index(h, w, p)?;
    let src = tokens.data();
    Tensor::new(vec![h, w, CHANNELS], inv.iter().map(|&i| src[i]).collect())
}

/// One image after budget fitting, padding and patchifying.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedImage<T> {
    pub tokens: Tensor<T>,
    pub pad_mask: PixelMask,
    pub grid: GridFit,
    pub patch_size: usize,
}

impl<T: Scalar> PackedImage<T> {
    pub fn pack(img: &Image<T>, p: usize, budget: usize) -> Result<Self> {
        let grid = fit_grid(img.height(), img.width(), p, budget)?;
        Self::pack_with(img, &grid)
    }

    pub fn pack_with(img: &Image<T>, grid: &GridFit) -> Result<Self> {
        let (canvas, pad_mask) = resize_pad(img, grid)?;
        Ok(Self {
            tokens: patchify(&canvas, grid.patch)?,
            pad_mask,
            grid: *grid,
            patch_size: grid.patch,
        })
    }

    /// The padded canvas as a flat channel-last buffer.
    pub fn canvas(&self) -> Tensor<T> {
        unpatchify(&self.tokens, &self.grid).expect("packed tokens match their grid")
    }
}

/// Fraction of canvas pixels that are padding.
pub fn token_pad_fraction<T: Scalar>(packed: &PackedImage<T>) -> f64 {
    let m = &packed.pad_mask;
    let total = (m.height * m.width) as f64;
    (total - m.count() as f64) / total
}
