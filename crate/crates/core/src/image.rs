//! Float image and mask containers plus 8-bit file I/O.
//!
//! Pixels are stored row-major, channel-interleaved (`HWC`) as `f64` in
//! `[0, 1]`. Files are converted with `v / 255` on read and
//! `round(v * 255)` on write; no gamma linearization is applied.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ForgeError, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

/// Rec.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if pixels.len() != height * width * 3 {
            return Err(ForgeError::Shape(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ForgeError::InvalidParameter(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, pixels })
    }

    /// Builds an image from a per-pixel closure; values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        check_dims(height, width)?;
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let p = f(y, x);
                pixels.extend(p.iter().map(|v| clamp01(*v)));
            }
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Internal constructor for buffers whose values are already clamped.
    pub(crate) fn from_raw(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * 3);
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// SHA-256 over the dimensions and the exact `f64` pixel bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.pixels {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageGrid {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let pixels = resize_bilinear(&self.pixels, self.height, self.width, 3, height, width);
        ImageGrid::from_raw(height, width, pixels)
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.as_raw().iter().map(|v| f64::from(*v) / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.pixels.iter().map(|v| to_u8(*v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| ForgeError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_dynamic(&img)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_dynamic(&image::load_from_memory(bytes)?)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// Soft region mask with weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskBlob", into = "MaskBlob")]
pub struct RegionMask {
    height: usize,
    width: usize,
    weights: Vec<f64>,
    contains_face: bool,
    feather_radius: usize,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, weights: Vec<f64>, contains_face: bool) -> Result<Self> {
        check_dims(height, width)?;
        if weights.len() != height * width {
            return Err(ForgeError::Shape(format!(
                "expected {} mask weights, got {}",
                height * width,
                weights.len()
            )));
        }
        if let Some(v) = weights.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ForgeError::InvalidParameter(format!(
                "mask weight {v} outside [0, 1]"
            )));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(ForgeError::Precondition("mask has no positive weight".into()));
        }
        Ok(Self {
            height,
            width,
            weights,
            contains_face,
            feather_radius: 0,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        contains_face: bool,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                weights.push(clamp01(f(y, x)));
            }
        }
        Self::new(height, width, weights, contains_face)
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::from_fn(height, width, false, |_, _| 1.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn contains_face(&self) -> bool {
        self.contains_face
    }

    pub fn feather_radius(&self) -> usize {
        self.feather_radius
    }

    pub fn with_contains_face(mut self, contains_face: bool) -> Self {
        self.contains_face = contains_face;
        self
    }

    pub(crate) fn with_feather(mut self, weights: Vec<f64>, radius: usize) -> Self {
        self.weights = weights;
        self.feather_radius = radius;
        self
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Fraction of pixels with non-zero weight.
    pub fn area_fraction(&self) -> f64 {
        self.weights.iter().filter(|w| **w > 0.0).count() as f64 / self.weights.len() as f64
    }

    pub fn ensure_matches(&self, img: &ImageGrid) -> Result<()> {
        if self.height != img.height() || self.width != img.width() {
            return Err(ForgeError::Shape(format!(
                "mask is {}x{} but image is {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Bilinear resize; an all-zero result (tiny masks) falls back to nearest sampling.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<RegionMask> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut weights = resize_bilinear(&self.weights, self.height, self.width, 1, height, width);
        weights.iter_mut().for_each(|w| *w = clamp01(*w));
        if !weights.iter().any(|w| *w > 0.0) {
            for y in 0..height {
                for x in 0..width {
                    let sy = (y * self.height) / height;
                    let sx = (x * self.width) / width;
                    weights[y * width + x] = self.weights[sy * self.width + sx];
                }
            }
        }
        let mut m = RegionMask::new(height, width, weights, self.contains_face)?;
        m.feather_radius = self.feather_radius;
        Ok(m)
    }

    pub fn from_dynamic(img: &DynamicImage, contains_face: bool) -> Result<Self> {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let weights = gray.as_raw().iter().map(|v| f64::from(*v) / 255.0).collect();
        Self::new(h as usize, w as usize, weights, contains_face)
    }

    pub fn load(path: impl AsRef<Path>, contains_face: bool) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| ForgeError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_dynamic(&img, contains_face)
    }

    pub fn decode(bytes: &[u8], contains_face: bool) -> Result<Self> {
        Self::from_dynamic(&image::load_from_memory(bytes)?, contains_face)
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.weights.iter().map(|v| to_u8(*v)).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save(path.as_ref())?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// SHA-256 over dimensions, flags and exact weight bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update([u8::from(self.contains_face)]);
        h.update((self.feather_radius as u64).to_le_bytes());
        for v in &self.weights {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Lossless serialized mask: weights as base64 little-endian `f64`.
#[derive(Serialize, Deserialize)]
struct MaskBlob {
    height: usize,
    width: usize,
    contains_face: bool,
    #[serde(default)]
    feather_radius: usize,
    weights_f64le: String,
}

impl From<RegionMask> for MaskBlob {
    fn from(m: RegionMask) -> Self {
        let bytes: Vec<u8> = m.weights.iter().flat_map(|v| v.to_le_bytes()).collect();
        MaskBlob {
            height: m.height,
            width: m.width,
            contains_face: m.contains_face,
            feather_radius: m.feather_radius,
            weights_f64le: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }
}

impl TryFrom<MaskBlob> for RegionMask {
    type Error = ForgeError;

    fn try_from(b: MaskBlob) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b.weights_f64le)
            .map_err(|e| ForgeError::Input(format!("mask weights: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(ForgeError::Input("mask weights are not f64 aligned".into()));
        }
        let weights = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut m = RegionMask::new(b.height, b.width, weights, b.contains_face)?;
        m.feather_radius = b.feather_radius;
        Ok(m)
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(ForgeError::Shape(format!(
            "image sides must be at least {MIN_SIDE}, got {height}x{width}"
        )));
    }
    Ok(())
}

pub(crate) fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn to_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Precomputed 1-D bilinear taps with half-pixel centres.
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(src - 1));
            taps.frac.push(s - lo as f64);
        }
        taps
    }
}

/// Bilinear resize of an interleaved `H x W x C` buffer.
pub fn resize_bilinear(
    src: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if height == out_h && width == out_w {
        return src.to_vec();
    }
    let ty = Taps::new(height, out_h);
    let tx = Taps::new(width, out_w);
    let mut out = vec![0.0; out_h * out_w * channels];
    for y in 0..out_h {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        for x in 0..out_w {
            let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(yy * width + xx) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * out_w + x) * channels + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a gradient on the resized buffer back
/// onto the source grid.
pub fn resize_bilinear_adjoint(
    grad_out: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if height == out_h && width == out_w {
        return grad_out.to_vec();
    }
    let ty = Taps::new(height, out_h);
    let tx = Taps::new(width, out_w);
    let mut grad = vec![0.0; height * width * channels];
    for y in 0..out_h {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        for x in 0..out_w {
            let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
            for c in 0..channels {
                let g = grad_out[(y * out_w + x) * channels + c];
                let mut add = |yy: usize, xx: usize, w: f64| {
                    grad[(yy * width + xx) * channels + c] += g * w;
                };
                add(y0, x0, (1.0 - fy) * (1.0 - fx));
                add(y0, x1, (1.0 - fy) * fx);
                add(y1, x0, fy * (1.0 - fx));
                add(y1, x1, fy * fx);
            }
        }
    }
    grad
}

/// Normalized box filter over a single-channel `H x W` plane. Windows are
/// clipped at the border and divided by the number of in-bounds samples.
pub fn box_filter(src: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let sums = box_sum(src, height, width, radius);
    let counts = box_counts(height, width, radius);
    sums.iter().zip(&counts).map(|(s, n)| s / n).collect()
}

/// Adjoint of [`box_filter`]. The clipped window relation is symmetric, so
/// the transpose of the window sum is the window sum itself.
pub fn box_filter_adjoint(grad: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let counts = box_counts(height, width, radius);
    let scaled: Vec<f64> = grad.iter().zip(&counts).map(|(g, n)| g / n).collect();
    box_sum(&scaled, height, width, radius)
}

fn box_sum(src: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let mut rows = vec![0.0; height * width];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        let mut prefix = vec![0.0; width + 1];
        for x in 0..width {
            prefix[x + 1] = prefix[x] + row[x];
        }
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius + 1).min(width);
            rows[y * width + x] = prefix[hi] - prefix[lo];
        }
    }
    let mut out = vec![0.0; height * width];
    let mut prefix = vec![0.0; height + 1];
    for x in 0..width {
        for y in 0..height {
            prefix[y + 1] = prefix[y] + rows[y * width + x];
        }
        for y in 0..height {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius + 1).min(height);
            out[y * width + x] = prefix[hi] - prefix[lo];
        }
    }
    out
}

fn box_counts(height: usize, width: usize, radius: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| ((i + radius + 1).min(n) - i.saturating_sub(radius)) as f64;
    let mut counts = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            counts.push(span(y, height) * span(x, width));
        }
    }
    counts
}
