//! Mask-conditioned realism critic.
//!
//! A small encoder-decoder trunk with skip connections reads the RGB image
//! plus the mask as a fourth channel. Its last feature map is average-pooled
//! globally, inside and outside the mask, and over thin bands on both sides
//! of the mask boundary; the pooled vector passes through two fully
//! connected layers to a raw, unbounded scalar. Training regresses that scalar to 1 for real and 0 for
//! fake samples with a least-squares loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::edit_ops::{apply_op, EditOp};
use crate::error::{ForgeError, Result};
use crate::image::{box_filter, resize_bilinear_adjoint, ImageGrid, RegionMask};
use crate::nn::{
    avg_pool2, clip_grad_norm, global_avg_pool, global_avg_pool_backward, silu_backward, silu_inplace, upsample2,
    upsample2_backward, weighted_avg_pool, weighted_avg_pool_backward, Adam, Conv2d, ConvCache, Dense, FeatureMap,
    Params,
};
use crate::plot::line_plot;
use crate::sample_generator::{Label, TrainingSample};
use crate::stats::auc;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RealismScore(pub f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Side of the square grid images and masks are resized to; multiple of 8.
    pub resolution: usize,
    pub encoder_channels: [usize; 3],
    pub mlp_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Random horizontal flips during training.
    #[serde(default)]
    pub augment_flip: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            encoder_channels: [16, 32, 32],
            mlp_hidden: 32,
            learning_rate: 2e-4,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            grad_clip: 5.0,
            augment_flip: true,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_multiple_of(8) {
            return Err(ForgeError::Config(format!(
                "critic resolution {} must be a positive multiple of 8",
                self.resolution
            )));
        }
        if self.encoder_channels.contains(&0) || self.mlp_hidden == 0 || self.batch_size == 0 {
            return Err(ForgeError::Config("critic widths and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealismCritic {
    config: CriticConfig,
    enc: [Conv2d; 3],
    dec: [Conv2d; 2],
    fc1: Dense,
    fc2: Dense,
}

impl Params for RealismCritic {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.enc.iter().for_each(|l| l.visit(f));
        self.dec.iter().for_each(|l| l.visit(f));
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.enc.iter_mut().for_each(|l| l.visit_mut(f));
        self.dec.iter_mut().for_each(|l| l.visit_mut(f));
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Intermediate values kept for the backward pass.
pub struct CriticTrace {
    enc_cache: Vec<ConvCache>,
    enc_pre: Vec<Vec<f64>>,
    dec_cache: Vec<ConvCache>,
    dec_pre: Vec<Vec<f64>>,
    d1_shape: (usize, usize),
    pool_weights: [Vec<f64>; 4],
    pooled: Vec<f64>,
    h_pre: Vec<f64>,
    h: Vec<f64>,
}

impl RealismCritic {
    pub fn init(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [c1, c2, c3] = config.encoder_channels;
        let enc = [
            Conv2d::new(4, c1, 3, 2, 1, &mut rng),
            Conv2d::new(c1, c2, 3, 2, 1, &mut rng),
            Conv2d::new(c2, c3, 3, 2, 1, &mut rng),
        ];
        let dec = [
            Conv2d::new(c3 + c2, c2, 3, 1, 1, &mut rng),
            Conv2d::new(c2 + c1, c1, 3, 1, 1, &mut rng),
        ];
        let fc1 = Dense::new(5 * c1, config.mlp_hidden, &mut rng);
        let fc2 = Dense::with_gain(config.mlp_hidden, 1, 0.5, &mut rng);
        Ok(Self { config, enc, dec, fc1, fc2 })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Critic, &self.config, self.flat())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Critic)?;
        let mut model = Self::init(ck.config_as()?)?;
        model.load_flat(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    /// Resizes image and mask to the critic grid and stacks them as `RGB + mask`.
    pub fn prepare(&self, img: &ImageGrid, mask: &RegionMask) -> Result<FeatureMap> {
        stack_rgb_mask(img, mask, self.config.resolution)
    }

    pub fn forward(&self, x: &FeatureMap) -> (f64, CriticTrace) {
        let mut enc_cache = Vec::with_capacity(3);
        let mut enc_pre = Vec::with_capacity(3);
        let mut feats: Vec<FeatureMap> = Vec::with_capacity(3);
        let mut cur = x.clone();
        for layer in &self.enc {
            let (mut y, cache) = layer.forward(&cur);
            enc_pre.push(silu_inplace(&mut y.data));
            enc_cache.push(cache);
            feats.push(y.clone());
            cur = y;
        }
        let mut dec_cache = Vec::with_capacity(2);
        let mut dec_pre = Vec::with_capacity(2);
        for (k, layer) in self.dec.iter().enumerate() {
            let skip = &feats[1 - k];
            let cat = FeatureMap::concat(&[&upsample2(&cur), skip]);
            let (mut y, cache) = layer.forward(&cat);
            dec_pre.push(silu_inplace(&mut y.data));
            dec_cache.push(cache);
            cur = y;
        }
        let pool_weights = region_weights(&x.data[3 * x.plane()..4 * x.plane()], x.height, x.width);
        let mut pooled = global_avg_pool(&cur);
        for w in &pool_weights {
            pooled.extend(weighted_avg_pool(&cur, w));
        }
        let mut h = self.fc1.forward(&pooled);
        let h_pre = silu_inplace(&mut h);
        let score = self.fc2.forward(&h)[0];
        let trace = CriticTrace {
            enc_cache,
            enc_pre,
            dec_cache,
            dec_pre,
            d1_shape: (cur.height, cur.width),
            pool_weights,
            pooled,
            h_pre,
            h,
        };
        (score, trace)
    }

    /// Backpropagates `d loss / d score`; returns the gradient on the stacked input if requested.
    pub fn backward(
        &self,
        trace: &CriticTrace,
        dscore: f64,
        mut grads: Option<&mut RealismCritic>,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let [c1, c2, c3] = self.config.encoder_channels;
        let mut dh = self.fc2.backward(&trace.h, &[dscore], grads.as_deref_mut().map(|g| &mut g.fc2));
        silu_backward(&trace.h_pre, &mut dh);
        let dpooled = self.fc1.backward(&trace.pooled, &dh, grads.as_deref_mut().map(|g| &mut g.fc1));
        let (h1, w1) = trace.d1_shape;
        let mut dcur = global_avg_pool_backward(&dpooled[..c1], h1, w1);
        for (k, w) in trace.pool_weights.iter().enumerate() {
            let d = weighted_avg_pool_backward(&dpooled[(k + 1) * c1..(k + 2) * c1], w, h1, w1);
            dcur.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b);
        }

        let mut skip_grads: [Option<FeatureMap>; 2] = [None, None];
        for k in (0..2).rev() {
            silu_backward(&trace.dec_pre[k], &mut dcur.data);
            let dcat = self.dec[k]
                .backward(&trace.dec_cache[k], &dcur, grads.as_deref_mut().map(|g| &mut g.dec[k]), true)
                .expect("input gradient requested");
            let (up_c, skip_c) = if k == 0 { (c3, c2) } else { (c2, c1) };
            let mut parts = dcat.split(&[up_c, skip_c]).into_iter();
            let dup = parts.next().expect("two parts");
            skip_grads[1 - k] = parts.next();
            dcur = upsample2_backward(&dup);
        }
        for k in (0..3).rev() {
            if k < 2 {
                let skip = skip_grads[k].take().expect("skip gradient");
                dcur.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            }
            silu_backward(&trace.enc_pre[k], &mut dcur.data);
            let want = k > 0 || need_input;
            let next = self.enc[k].backward(&trace.enc_cache[k], &dcur, grads.as_deref_mut().map(|g| &mut g.enc[k]), want);
            {
                let d = next?;
                dcur = d
            }
        }
        Some(dcur)
    }

    pub fn score(&self, img: &ImageGrid, mask: &RegionMask) -> Result<RealismScore> {
        let x = self.prepare(img, mask)?;
        Ok(RealismScore(self.forward(&x).0))
    }

    /// Score and its gradient w.r.t. the image pixels (interleaved, image resolution).
    pub fn score_with_grad(&self, img: &ImageGrid, mask: &RegionMask) -> Result<(f64, Vec<f64>)> {
        let x = self.prepare(img, mask)?;
        let (score, trace) = self.forward(&x);
        let dx = self.backward(&trace, 1.0, None, true).expect("input gradient requested");
        let r = self.config.resolution;
        let plane = r * r;
        let mut hwc = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                hwc[3 * i + c] = dx.data[c * plane + i];
            }
        }
        let grad = resize_bilinear_adjoint(&hwc, img.height(), img.width(), 3, r, r);
        Ok((score, grad))
    }

    /// Half squared error to `target`; accumulates parameter gradients.
    pub fn ls_loss_and_grad(&self, x: &FeatureMap, target: f64, grads: &mut RealismCritic) -> f64 {
        let (score, trace) = self.forward(x);
        let diff = score - target;
        self.backward(&trace, diff, Some(grads), false);
        0.5 * diff * diff
    }
}

pub fn score(img: &ImageGrid, mask: &RegionMask, model: &RealismCritic) -> Result<RealismScore> {
    model.score(img, mask)
}

/// `R(edited, M) - R(original, M)`.
pub fn delta_realism(edited: &ImageGrid, original: &ImageGrid, mask: &RegionMask, model: &RealismCritic) -> Result<f64> {
    if !edited.same_shape(original) {
        return Err(ForgeError::Shape("edited and original images differ in shape".into()));
    }
    Ok(model.score(edited, mask)?.0 - model.score(original, mask)?.0)
}

/// Least-squares critic objective over paired real and fake scores.
pub fn critic_objective(fake_scores: &[f64], real_scores: &[f64]) -> f64 {
    let fake: f64 = fake_scores.iter().map(|s| 0.5 * s * s).sum();
    let real: f64 = real_scores.iter().map(|s| 0.5 * (s - 1.0) * (s - 1.0)).sum();
    fake + real
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub epochs: Vec<CriticEpoch>,
    pub final_auc: Option<f64>,
    pub train_samples: usize,
}

fn check_balanced(samples: &[TrainingSample], what: &str) -> Result<()> {
    let real = samples.iter().filter(|s| s.label == Label::Real).count();
    let fake = samples.len() - real;
    if samples.is_empty() || real != fake {
        return Err(ForgeError::Input(format!(
            "{what} must be non-empty and balanced, got {real} real / {fake} fake"
        )));
    }
    Ok(())
}

/// Held-out separability of real vs fake samples.
pub fn heldout_auc(model: &RealismCritic, samples: &[TrainingSample]) -> Result<f64> {
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for s in samples {
        let r = model.score(&s.edited, &s.mask)?.0;
        match s.label {
            Label::Real => real.push(r),
            Label::Fake => fake.push(r),
        }
    }
    Ok(auc(&real, &fake))
}

/// Pooling weights at half the input resolution: inside the mask, outside
/// it, and one-pixel bands on either side of its boundary.
fn region_weights(mask: &[f64], height: usize, width: usize) -> [Vec<f64>; 4] {
    let inside = avg_pool2(mask, height, width);
    let blur = box_filter(&inside, height / 2, width / 2, 1);
    let outside: Vec<f64> = inside.iter().map(|m| 1.0 - m).collect();
    let band_in = inside.iter().zip(&blur).map(|(m, b)| m * (1.0 - b)).collect();
    let band_out = outside.iter().zip(&blur).map(|(o, b)| o * b).collect();
    [inside, outside, band_in, band_out]
}

/// Resizes image and mask to `r x r` and stacks them channel-first as `RGB + mask`.
pub(crate) fn stack_rgb_mask(img: &ImageGrid, mask: &RegionMask, r: usize) -> Result<FeatureMap> {
    mask.ensure_matches(img)?;
    let small = img.resize_bilinear(r, r);
    let m = mask.resize_bilinear(r, r)?;
    let plane = r * r;
    let mut x = FeatureMap::zeros(4, r, r);
    let px = small.pixels();
    for i in 0..plane {
        for c in 0..3 {
            x.data[c * plane + i] = px[3 * i + c];
        }
        x.data[3 * plane + i] = m.weights()[i];
    }
    Ok(x)
}

/// Cosine decay from `base` down to a tenth of it over `epochs`.
pub(crate) fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let t = epoch as f64 / epochs.max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

fn flip_horizontal(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    for row in out.data.chunks_mut(x.width) {
        row.reverse();
    }
    out
}

/// Minimizes the least-squares critic objective over shuffled minibatches.
pub fn train_critic(
    samples: &[TrainingSample],
    heldout: Option<&[TrainingSample]>,
    config: CriticConfig,
    mut on_epoch: impl FnMut(&CriticEpoch),
) -> Result<(RealismCritic, CriticReport)> {
    check_balanced(samples, "training set")?;
    let mut model = RealismCritic::init(config.clone())?;
    let inputs = samples
        .iter()
        .map(|s| Ok((model.prepare(&s.edited, &s.mask)?, s.label.target())))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC817_1C00);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut report = CriticReport {
        epochs: Vec::with_capacity(config.epochs),
        final_auc: None,
        train_samples: samples.len(),
    };
    for epoch in 0..config.epochs {
        opt.lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zeros_like();
            for &i in batch {
                let (x, target) = &inputs[i];
                total += if config.augment_flip && rng.gen_bool(0.5) {
                    model.ls_loss_and_grad(&flip_horizontal(x), *target, &mut grads)
                } else {
                    model.ls_loss_and_grad(x, *target, &mut grads)
                };
            }
            grads.scale(1.0 / batch.len() as f64);
            clip_grad_norm(&mut grads, config.grad_clip);
            opt.step(&mut model, &grads, 1.0);
        }
        let loss = total / inputs.len() as f64;
        if !loss.is_finite() || !model.all_finite() {
            return Err(ForgeError::Divergence(format!("critic loss became {loss} at epoch {epoch}")));
        }
        let heldout_auc = match heldout {
            Some(h) if !h.is_empty() => Some(heldout_auc(&model, h)?),
            _ => None,
        };
        let stats = CriticEpoch { epoch, loss, heldout_auc };
        log::info!("critic epoch {epoch}: loss {loss:.5} auc {heldout_auc:?}");
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    report.final_auc = report.epochs.last().and_then(|e| e.heldout_auc);
    Ok((model, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub delta_r: f64,
}

/// Applies one operator at each grid value and records the realism change.
pub fn realism_sweep(
    img: &ImageGrid,
    mask: &RegionMask,
    op: EditOp,
    grid: &[f64],
    model: &RealismCritic,
) -> Result<Vec<SweepPoint>> {
    grid.iter().try_for_each(|v| op.validate(*v))?;
    mask.ensure_matches(img)?;
    let base = model.score(img, mask)?.0;
    grid.iter()
        .map(|&value| {
            let edited = apply_op(img, op, value, mask)?;
            Ok(SweepPoint {
                value,
                delta_r: model.score(&edited, mask)?.0 - base,
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "value,delta_r")?;
    for p in points {
        writeln!(f, "{},{}", p.value, p.delta_r)?;
    }
    Ok(())
}

/// Plots the sweep against `log(value)` when all values are positive.
pub fn write_sweep_plot(points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    let log_x = points.iter().all(|p| p.value > 0.0);
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (if log_x { p.value.ln() } else { p.value }, p.delta_r))
        .collect();
    line_plot(&xy, path)
}

/// Parses `start:end:count` (geometric spacing) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || ForgeError::InvalidParameter(format!("bad grid `{spec}`"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if n < 2 || a <= 0.0 || b <= 0.0 {
            return Err(bad());
        }
        let (la, lb) = (a.ln(), b.ln());
        let mut grid: Vec<f64> = (0..n)
            .map(|k| (la + (lb - la) * k as f64 / (n - 1) as f64).exp())
            .collect();
        grid[0] = a;
        grid[n - 1] = b;
        // Snap the midpoint of a symmetric log grid to exactly 1.
        if n % 2 == 1 && ((la + lb).abs() < 1e-12) {
            grid[n / 2] = 1.0;
        }
        Ok(grid)
    } else {
        spec.split(',').map(|t| t.trim().parse::<f64>().map_err(|_| bad())).collect()
    }
}
