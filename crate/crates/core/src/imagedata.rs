//! Image container, binary PPM I/O, and the seeded procedural dataset used
//! for desk-scale training.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// RGB image, row-major and channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, InvalidArgument, "image dimensions must be positive, got {}x{}", height, width);
        ensure!(
            pixels.len() == height * width * CHANNELS,
            Shape,
            "{}x{} image needs {} values, got {}",
            height,
            width,
            height * width * CHANNELS,
            pixels.len()
        );
        ensure!(
            pixels.iter().all(|&v| v >= T::zero() && v <= T::one()),
            InvalidArgument,
            "pixel values must lie in [0, 1]"
        );
        Ok(Self { height, width, pixels })
    }

    /// Clamps arbitrary values into range; NaN maps to 0.
    pub fn from_raw_clamped(height: usize, width: usize, raw: &[T]) -> Result<Self> {
        let pixels = raw
            .iter()
            .map(|&v| if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, v: T) -> Result<Self> {
        Self::new(height, width, vec![v; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.height, self.width, CHANNELS], self.pixels.clone()).expect("consistent shape")
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Copy of the `h x w` rectangle at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(y0 + h <= self.height && x0 + w <= self.width, InvalidArgument, "crop outside image");
        let mut out = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * CHANNELS;
            out.extend_from_slice(&self.pixels[start..start + w * CHANNELS]);
        }
        Self::new(h, w, out)
    }

    /// Largest centered square crop, then bilinear resize to `size`.
    pub fn center_crop(&self, size: usize) -> Result<Self> {
        let side = self.height.min(self.width);
        let sq = self.crop((self.height - side) / 2, (self.width - side) / 2, side, side)?;
        let raw = crate::naflex::bilinear_resize(sq.pixels(), side, side, size, size);
        Self::new(size, size, raw)
    }
}

/// Handling of values outside `[0, 1]` when quantizing raw buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutOfRange {
    Clamp,
    Reject,
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8
}

fn encode_ppm(height: usize, width: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(bytes);
    out
}

fn check_extension(path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "ppm" => Ok(()),
        other => Err(Error::UnsupportedFormat(format!(
            "{} (extension {:?}; only binary PPM is supported)",
            path.display(),
            other
        ))),
    }
}

/// Writes `img` as binary PPM, quantizing with `round(v * 255)`.
pub fn save_image<T: Scalar>(img: &Image<T>, path: &Path) -> Result<()> {
    save_raw(img.height(), img.width(), img.pixels(), path, OutOfRange::Reject)
}

/// Writes an unvalidated channel-last buffer as binary PPM.
pub fn save_raw<T: Scalar>(height: usize, width: usize, raw: &[T], path: &Path, policy: OutOfRange) -> Result<()> {
    check_extension(path)?;
    ensure!(raw.len() == height * width * CHANNELS, Shape, "buffer does not match {}x{}", height, width);
    if policy == OutOfRange::Reject {
        ensure!(
            raw.iter().all(|&v| v >= T::zero() && v <= T::one()),
            InvalidArgument,
            "pixel values outside [0, 1]; pass OutOfRange::Clamp to clamp"
        );
    }
    let bytes: Vec<u8> = raw.iter().map(|&v| quantize(v)).collect();
    fs::write(path, encode_ppm(height, width, &bytes)).map_err(|e| Error::io(path, e))
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::UnsupportedFormat("missing P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        ensure!(pos > start, Malformed, "expected integer in PPM header");
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed("bad PPM header integer".into()))?;
    }
    let [width, height, maxval] = fields;
    ensure!(bytes.get(pos).is_some_and(u8::is_ascii_whitespace), Malformed, "missing separator after maxval");
    pos += 1;
    ensure!(width >= 1 && height >= 1, InvalidArgument, "PPM has a zero dimension");
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {} (only 8-bit supported)", maxval)));
    }
    let n = width * height * CHANNELS;
    ensure!(bytes.len() >= pos + n, Malformed, "truncated PPM payload");
    let scale = 1.0 / maxval as f64;
    let pixels = bytes[pos..pos + n]
        .iter()
        .map(|&b| T::lit((b as f64 * scale).min(1.0)))
        .collect();
    Image::new(height, width, pixels)
}

/// Parameters of a procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub size_range: (usize, usize),
    pub aspect_range: (f64, f64),
    pub class_count: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 64,
            seed: 0,
            size_range: (48, 64),
            aspect_range: (0.5, 2.0),
            class_count: 4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.count >= 1, InvalidArgument, "dataset count must be >= 1");
        ensure!(self.class_count >= 1, InvalidArgument, "class_count must be >= 1");
        let (lo, hi) = self.size_range;
        ensure!(lo >= 32 && lo <= hi, InvalidArgument, "size_range must satisfy 32 <= min <= max, got {:?}", self.size_range);
        let (a, b) = self.aspect_range;
        ensure!(
            a.is_finite() && b.is_finite() && 0.25 <= a && a <= b && b <= 4.0,
            InvalidArgument,
            "aspect_range must lie within [1/4, 4], got {:?}",
            self.aspect_range
        );
        Ok(())
    }
}

/// Class palette: two colors per class, spread around the hue circle.
fn palette(class: usize) -> ([f64; 3], [f64; 3]) {
    let hue = (class as f64 * 0.618_033_988_75).fract();
    let color = |h: f64, lum: f64| {
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            let phase = 2.0 * PI * (h + k as f64 / 3.0);
            *v = (lum + 0.3 * phase.cos()).clamp(0.1, 0.9);
        }
        c
    };
    (color(hue, 0.35), color((hue + 0.5).fract(), 0.65))
}

fn mix(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn render<R: Rng>(rng: &mut R, class: usize, h: usize, w: usize) -> Vec<f64> {
    let (c0, c1) = palette(class);
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let freq = rng.gen_range(1.0..2.5);
    let (cx, cy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let blobs: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.12..0.3)))
        .collect();
    let mut out = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let along = u * theta.cos() + v * theta.sin();
            let t = match class % 4 {
                0 => 0.5 + 0.5 * (PI * (along - 0.5) + phase.sin() * 0.3).sin(),
                1 => 0.5 + 0.5 * (2.0 * PI * freq * along + phase).sin(),
                2 => blobs
                    .iter()
                    .map(|&(bx, by, s)| (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * s * s)).exp())
                    .sum::<f64>()
                    .min(1.0),
                _ => {
                    let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                    0.5 + 0.5 * (2.0 * PI * freq * r + phase).cos()
                }
            };
            out.extend_from_slice(&mix(&c0, &c1, t));
        }
    }
    out
}

/// Deterministic labelled images; labels cycle through the classes.
pub fn generate_synthetic<T: Scalar>(spec: &DatasetSpec) -> Result<Vec<(Image<T>, usize)>> {
    spec.validate()?;
    let (lo, hi) = spec.size_range;
    let (amin, amax) = spec.aspect_range;
    (0..spec.count)
        .map(|i| {
            let mut r = rng::stream(spec.seed, 0, i as u64);
            let label = i % spec.class_count;
            let long = r.gen_range(lo..=hi);
            let aspect = if amin == amax {
                amin
            } else {
                r.gen_range(amin.ln()..=amax.ln()).exp()
            };
            // aspect = width / height; the longer side takes the sampled size
            let (h, w) = if aspect >= 1.0 {
                (((long as f64) / aspect).round().max(1.0) as usize, long)
            } else {
                (long, ((long as f64) * aspect).round().max(1.0) as usize)
            };
            let pixels = render(&mut r, label, h, w).into_iter().map(T::lit).collect();
            Ok((Image::new(h, w, pixels)?, label))
        })
        .collect()
}
