//! Saliency backends, the relative saliency change of a region and the
//! exponential saliency loss.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::{GrayImage, ImageFormat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{ForgeError, Result};
use crate::image::{box_filter, box_filter_adjoint, resize_bilinear, resize_bilinear_adjoint, ImageGrid, RegionMask, LUMA};
use crate::nn::{sigmoid, silu_backward, silu_inplace, softplus, Conv2d, ConvCache, FeatureMap, Params};

/// Guard added to the original saliency in the relative change.
pub const SALIENCY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Make the region draw less attention.
    Attenuate,
    /// Make the region draw more attention.
    Amplify,
}

impl Direction {
    /// Default exponent weight of the saliency loss.
    pub fn default_weight(self) -> f64 {
        match self {
            Direction::Attenuate => -1.0,
            Direction::Amplify => 5.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Attenuate => "attenuate",
            Direction::Amplify => "amplify",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attenuate" => Ok(Direction::Attenuate),
            "amplify" => Ok(Direction::Amplify),
            other => Err(ForgeError::InvalidParameter(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn masked_mean(&self, mask: &RegionMask) -> f64 {
        let w = mask.weight_sum();
        self.values.iter().zip(mask.weights()).map(|(v, m)| v * m).sum::<f64>() / w
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Max-normalized 8-bit grayscale heatmap.
    pub fn to_gray8(&self) -> GrayImage {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let raw = self
            .values
            .iter()
            .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("dimensions")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save(path.as_ref())?;
        Ok(())
    }
}

/// A saliency predictor. Backends are immutable once constructed.
pub trait SaliencyBackend: Send + Sync {
    fn id(&self) -> &str;

    fn differentiable(&self) -> bool;

    /// Heatmap at the input image's resolution.
    fn predict(&self, img: &ImageGrid) -> Result<SaliencyMap>;

    /// Gradient w.r.t. image pixels of `<cotangent, predict(img)>`.
    fn vjp(&self, img: &ImageGrid, cotangent: &[f64]) -> Result<Vec<f64>>;
}

/// Deterministic center-surround contrast proxy.
///
/// `raw = |box_2(Y) - box_8(Y)| + 0.5 * |(R - Y, B - Y)|` with smooth absolute
/// values, normalized by its image mean.
#[derive(Clone, Debug)]
pub struct AnalyticSaliency {
    pub center_radius: usize,
    pub surround_radius: usize,
    pub chroma_weight: f64,
    pub smoothing: f64,
    pub normalizer: f64,
}

impl Default for AnalyticSaliency {
    fn default() -> Self {
        Self {
            center_radius: 2,
            surround_radius: 8,
            chroma_weight: 0.5,
            smoothing: 1e-3,
            normalizer: 1e-2,
        }
    }
}

struct ProxyTrace {
    cs: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    raw: Vec<f64>,
    denom: f64,
}

impl AnalyticSaliency {
    fn smooth_abs(&self, x: f64) -> f64 {
        (x * x + self.smoothing * self.smoothing).sqrt() - self.smoothing
    }

    fn trace(&self, img: &ImageGrid) -> ProxyTrace {
        let (h, w) = (img.height(), img.width());
        let px = img.pixels();
        let n = h * w;
        let mut luma = vec![0.0; n];
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            let (r, g, bl) = (px[3 * i], px[3 * i + 1], px[3 * i + 2]);
            let y = LUMA[0] * r + LUMA[1] * g + LUMA[2] * bl;
            luma[i] = y;
            a[i] = r - y;
            b[i] = bl - y;
        }
        let center = box_filter(&luma, h, w, self.center_radius);
        let surround = box_filter(&luma, h, w, self.surround_radius);
        let cs: Vec<f64> = center.iter().zip(&surround).map(|(c, s)| c - s).collect();
        let raw: Vec<f64> = (0..n)
            .map(|i| self.smooth_abs(cs[i]) + self.chroma_weight * self.smooth_abs((a[i] * a[i] + b[i] * b[i]).sqrt()))
            .collect();
        let denom = raw.iter().sum::<f64>() / n as f64 + self.normalizer;
        ProxyTrace { cs, a, b, raw, denom }
    }
}

impl SaliencyBackend for AnalyticSaliency {
    fn id(&self) -> &str {
        "analytic"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn predict(&self, img: &ImageGrid) -> Result<SaliencyMap> {
        let t = self.trace(img);
        Ok(SaliencyMap {
            height: img.height(),
            width: img.width(),
            values: t.raw.iter().map(|r| r / t.denom).collect(),
        })
    }

    fn vjp(&self, img: &ImageGrid, cot: &[f64]) -> Result<Vec<f64>> {
        let (h, w) = (img.height(), img.width());
        let n = h * w;
        if cot.len() != n {
            return Err(ForgeError::Shape(format!("saliency cotangent has {} values, expected {n}", cot.len())));
        }
        let t = self.trace(img);
        let weighted: f64 = cot.iter().zip(&t.raw).map(|(g, r)| g * r).sum();
        let shared = weighted / (t.denom * t.denom * n as f64);
        let graw: Vec<f64> = cot.iter().map(|g| g / t.denom - shared).collect();

        let eta2 = self.smoothing * self.smoothing;
        let gcs: Vec<f64> = (0..n).map(|i| graw[i] * t.cs[i] / (t.cs[i] * t.cs[i] + eta2).sqrt()).collect();
        let mut gluma = box_filter_adjoint(&gcs, h, w, self.center_radius);
        let gs = box_filter_adjoint(&gcs, h, w, self.surround_radius);
        gluma.iter_mut().zip(&gs).for_each(|(g, s)| *g -= s);

        let mut grad = vec![0.0; 3 * n];
        for i in 0..n {
            let (a, b) = (t.a[i], t.b[i]);
            let rho = (a * a + b * b).sqrt();
            // d smooth_abs(rho) / d(a, b) = (a, b) / sqrt(rho^2 + eta^2)
            let k = graw[i] * self.chroma_weight / (rho * rho + eta2).sqrt();
            let (ga, gb) = (k * a, k * b);
            let gy = gluma[i] - ga - gb;
            grad[3 * i] = ga + LUMA[0] * gy;
            grad[3 * i + 1] = LUMA[1] * gy;
            grad[3 * i + 2] = gb + LUMA[2] * gy;
        }
        Ok(grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalSaliencyConfig {
    /// Side of the square grid the network runs at.
    pub resolution: usize,
    pub channels: usize,
}

impl Default for ExternalSaliencyConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: 16,
        }
    }
}

/// Adapter for a trained fully-convolutional saliency network stored in the
/// shared checkpoint container.
#[derive(Clone, Debug)]
pub struct ExternalSaliency {
    config: ExternalSaliencyConfig,
    layers: [Conv2d; 3],
}

impl Params for ExternalSaliency {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

struct ExternalTrace {
    input: (usize, usize),
    caches: Vec<ConvCache>,
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ExternalSaliency {
    pub fn init(config: ExternalSaliencyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let layers = [
            Conv2d::new(3, c, 5, 1, 2, &mut rng),
            Conv2d::new(c, c, 5, 1, 2, &mut rng),
            Conv2d::new(c, 1, 1, 1, 0, &mut rng),
        ];
        Self { config, layers }
    }

    pub fn config(&self) -> &ExternalSaliencyConfig {
        &self.config
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Saliency, &self.config, self.flat())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Saliency)?;
        let mut model = Self::init(ck.config_as()?, 0);
        model.load_flat(&ck.params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn forward(&self, img: &ImageGrid) -> ExternalTrace {
        let r = self.config.resolution;
        let hwc = resize_bilinear(img.pixels(), img.height(), img.width(), 3, r, r);
        let mut x = FeatureMap::zeros(3, r, r);
        for i in 0..r * r {
            for c in 0..3 {
                x.data[c * r * r + i] = hwc[3 * i + c];
            }
        }
        let mut caches = Vec::new();
        let mut pre = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let (mut y, cache) = layer.forward(&x);
            caches.push(cache);
            if k < 2 {
                pre.push(silu_inplace(&mut y.data));
            }
            x = y;
        }
        ExternalTrace {
            input: (img.height(), img.width()),
            caches,
            pre,
            logits: x.data,
        }
    }
}

impl SaliencyBackend for ExternalSaliency {
    fn id(&self) -> &str {
        "external"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn predict(&self, img: &ImageGrid) -> Result<SaliencyMap> {
        let t = self.forward(img);
        let r = self.config.resolution;
        let sal: Vec<f64> = t.logits.iter().map(|z| softplus(*z)).collect();
        let (h, w) = t.input;
        Ok(SaliencyMap {
            height: h,
            width: w,
            values: resize_bilinear(&sal, r, r, 1, h, w),
        })
    }

    fn vjp(&self, img: &ImageGrid, cot: &[f64]) -> Result<Vec<f64>> {
        let (h, w) = (img.height(), img.width());
        if cot.len() != h * w {
            return Err(ForgeError::Shape("saliency cotangent size".into()));
        }
        let r = self.config.resolution;
        let t = self.forward(img);
        let gsal = resize_bilinear_adjoint(cot, r, r, 1, h, w);
        let mut dy = FeatureMap {
            channels: 1,
            height: r,
            width: r,
            data: gsal.iter().zip(&t.logits).map(|(g, z)| g * sigmoid(*z)).collect(),
        };
        for k in (0..3).rev() {
            if k < 2 {
                silu_backward(&t.pre[k], &mut dy.data);
            }
            dy = self.layers[k].backward(&t.caches[k], &dy, None, true).expect("input grad");
        }
        let mut hwc = vec![0.0; r * r * 3];
        for i in 0..r * r {
            for c in 0..3 {
                hwc[3 * i + c] = dy.data[c * r * r + i];
            }
        }
        Ok(resize_bilinear_adjoint(&hwc, h, w, 3, r, r))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Analytic,
    External,
}

/// The `[saliency]` configuration section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

pub fn load_backend(config: &SaliencyConfig) -> Result<Arc<dyn SaliencyBackend>> {
    match config.backend {
        BackendKind::Analytic => Ok(Arc::new(AnalyticSaliency::default())),
        BackendKind::External => {
            let path = config
                .checkpoint
                .as_ref()
                .ok_or_else(|| ForgeError::Config("saliency.checkpoint is required for the external backend".into()))?;
            Ok(Arc::new(ExternalSaliency::load(path)?))
        }
    }
}

pub fn predict(img: &ImageGrid, backend: &dyn SaliencyBackend) -> Result<SaliencyMap> {
    backend.predict(img)
}

/// Mask-weighted mean of `(P - P') / (P + eps)`; positive when the region lost saliency.
pub fn relative_change(original: &SaliencyMap, edited: &SaliencyMap, mask: &RegionMask) -> Result<f64> {
    check_maps(original, edited, mask)?;
    let total = mask.weight_sum();
    let s: f64 = original
        .values
        .iter()
        .zip(&edited.values)
        .zip(mask.weights())
        .map(|((p, q), m)| m * (p - q) / (p + SALIENCY_EPS))
        .sum();
    Ok(s / total)
}

/// `dS / dP'` for [`relative_change`].
pub fn relative_change_grad_edited(original: &SaliencyMap, mask: &RegionMask) -> Vec<f64> {
    let total = mask.weight_sum();
    original
        .values
        .iter()
        .zip(mask.weights())
        .map(|(p, m)| -m / ((p + SALIENCY_EPS) * total))
        .collect()
}

fn check_maps(original: &SaliencyMap, edited: &SaliencyMap, mask: &RegionMask) -> Result<()> {
    if original.values.len() != edited.values.len()
        || original.height != mask.height()
        || original.width != mask.width()
    {
        return Err(ForgeError::Shape("saliency maps and mask disagree in shape".into()));
    }
    if mask.weight_sum() <= 0.0 {
        return Err(ForgeError::Precondition("mask is empty".into()));
    }
    Ok(())
}

pub fn relative_saliency_change(
    original: &ImageGrid,
    edited: &ImageGrid,
    mask: &RegionMask,
    backend: &dyn SaliencyBackend,
) -> Result<f64> {
    mask.ensure_matches(original)?;
    mask.ensure_matches(edited)?;
    relative_change(&backend.predict(original)?, &backend.predict(edited)?, mask)
}

/// `exp(w * S)` with the direction's default weight.
pub fn saliency_loss(s: f64, direction: Direction) -> f64 {
    saliency_loss_weighted(s, direction.default_weight())
}

pub fn saliency_loss_weighted(s: f64, w_sal: f64) -> f64 {
    (w_sal * s).exp()
}

/// `d exp(w S) / dS`.
pub fn saliency_loss_grad(s: f64, w_sal: f64) -> f64 {
    w_sal * (w_sal * s).exp()
}
