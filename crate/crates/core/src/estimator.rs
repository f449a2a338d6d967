//! Permutation-conditioned edit-parameter regressor.
//!
//! A compact strided convolutional backbone reads the RGB image plus the mask
//! and produces a feature vector. One small MLP decoder per operator then runs
//! in permutation order; each sees the features, the permutation encoding and
//! the parameters decoded before it. Outputs pass through scaled sigmoids into
//! fixed per-operator bounds.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::critic::{stack_rgb_mask, RealismCritic};
use crate::edit_ops::{compose_edits, gradient_of_composition, EditOp, EditParams, EditPermutation, ParamGradient};
use crate::error::{ForgeError, Result};
use crate::image::{ImageGrid, RegionMask};
use crate::nn::{
    clip_grad_norm, global_avg_pool, global_avg_pool_backward, sigmoid, silu_backward, silu_inplace, Adam, Conv2d,
    ConvCache, Dense, FeatureMap, Params,
};
use crate::objective::{
    adversarial_step, evaluate, evaluate_with_grad, CriticState, ObjectiveConfig, ObjectiveMode, ObjectiveValue,
    Reference,
};
use crate::rng::rng_for;
use crate::saliency::{Direction, SaliencyBackend};
use crate::sample_generator::RegionItem;
use crate::stats::{mean, std_dev};

const STREAM_TRAIN: u64 = 0x4553_5452;
const STREAM_EVAL: u64 = 0x4553_4556;
const STREAM_EXPORT: u64 = 0x4553_5850;

/// Position-by-operator one-hot matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermutationEncoding(pub [f64; 16]);

pub fn encode_permutation(perm: &EditPermutation) -> PermutationEncoding {
    let mut enc = [0.0; 16];
    for (pos, op) in perm.order().iter().enumerate() {
        enc[pos * 4 + op.index()] = 1.0;
    }
    PermutationEncoding(enc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn contains(&self, v: f64) -> bool {
        v > self.lo && v < self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub exposure: Bounds,
    pub saturation: Bounds,
    pub color_curve: Bounds,
    pub white_balance: Bounds,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            exposure: Bounds { lo: 0.25, hi: 4.0 },
            saturation: Bounds { lo: 0.0, hi: 3.0 },
            color_curve: Bounds { lo: 0.3, hi: 3.0 },
            white_balance: Bounds { lo: 0.6, hi: 1.4 },
        }
    }
}

impl ParamBounds {
    pub fn get(&self, op: EditOp) -> Bounds {
        match op {
            EditOp::Exposure => self.exposure,
            EditOp::Saturation => self.saturation,
            EditOp::ColorCurve => self.color_curve,
            EditOp::WhiteBalance => self.white_balance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in EditOp::ALL {
            let b = self.get(op);
            if !(b.lo >= 0.0 && b.lo < 1.0 && b.hi > 1.0) {
                return Err(ForgeError::Config(format!(
                    "{op} bounds ({}, {}) must satisfy 0 <= lo < 1 < hi",
                    b.lo, b.hi
                )));
            }
        }
        if self.exposure.hi > 4.0 || self.color_curve.hi > 4.0 {
            return Err(ForgeError::Config("exposure and color_curve upper bounds must be <= 4".into()));
        }
        if self.white_balance.hi >= 2.0 {
            return Err(ForgeError::Config("white_balance upper bound must be < 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Side of the square grid the backbone reads.
    pub resolution: usize,
    pub backbone_channels: [usize; 4],
    pub feature_dim: usize,
    pub decoder_hidden: usize,
    pub bounds: ParamBounds,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            backbone_channels: [16, 32, 64, 64],
            feature_dim: 64,
            decoder_hidden: 32,
            bounds: ParamBounds::default(),
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 20,
            grad_clip: 5.0,
            direction: Direction::Attenuate,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_multiple_of(16) {
            return Err(ForgeError::Config(format!(
                "estimator resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        if self.backbone_channels.contains(&0) || self.feature_dim == 0 || self.decoder_hidden == 0 || self.batch_size == 0
        {
            return Err(ForgeError::Config("estimator widths and batch size must be positive".into()));
        }
        self.bounds.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    l1: Dense,
    l2: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEstimator {
    config: EstimatorConfig,
    convs: [Conv2d; 4],
    fc: Dense,
    heads: [Decoder; 4],
}

impl Params for ParamEstimator {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.convs.iter().for_each(|l| l.visit(f));
        self.fc.visit(f);
        for h in &self.heads {
            h.l1.visit(f);
            h.l2.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.convs.iter_mut().for_each(|l| l.visit_mut(f));
        self.fc.visit_mut(f);
        for h in &mut self.heads {
            h.l1.visit_mut(f);
            h.l2.visit_mut(f);
        }
    }
}

pub struct BackboneTrace {
    caches: Vec<ConvCache>,
    pre: Vec<Vec<f64>>,
    last_shape: (usize, usize),
    pooled: Vec<f64>,
    fc_pre: Vec<f64>,
}

struct DecodeStep {
    op: EditOp,
    input: Vec<f64>,
    filled: [bool; 4],
    h_pre: Vec<f64>,
    h: Vec<f64>,
    s: f64,
}

pub struct DecodeTrace {
    steps: Vec<DecodeStep>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ParamEstimator {
    pub fn init(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, STREAM_TRAIN, u64::MAX);
        let [c1, c2, c3, c4] = config.backbone_channels;
        let convs = [
            Conv2d::new(4, c1, 3, 2, 1, &mut rng),
            Conv2d::new(c1, c2, 3, 2, 1, &mut rng),
            Conv2d::new(c2, c3, 3, 2, 1, &mut rng),
            Conv2d::new(c3, c4, 3, 2, 1, &mut rng),
        ];
        let fc = Dense::new(c4, config.feature_dim, &mut rng);
        let input = config.feature_dim + 16 + 4;
        let heads = EditOp::ALL.map(|op| {
            let l1 = Dense::new(input, config.decoder_hidden, &mut rng);
            let mut l2 = Dense::with_gain(config.decoder_hidden, 1, 0.1, &mut rng);
            let b = config.bounds.get(op);
            l2.bias[0] = logit((1.0 - b.lo) / (b.hi - b.lo));
            Decoder { l1, l2 }
        });
        Ok(Self { config, convs, fc, heads })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn direction(&self) -> Direction {
        self.config.direction
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Estimator, &self.config, self.flat())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Estimator)?;
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

    pub fn prepare(&self, img: &ImageGrid, mask: &RegionMask) -> Result<FeatureMap> {
        stack_rgb_mask(img, mask, self.config.resolution)
    }

    pub fn features(&self, x: &FeatureMap) -> (Vec<f64>, BackboneTrace) {
        let mut caches = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(4);
        let mut cur = x.clone();
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&cur);
            pre.push(silu_inplace(&mut y.data));
            caches.push(cache);
            cur = y;
        }
        let pooled = global_avg_pool(&cur);
        let mut feat = self.fc.forward(&pooled);
        let fc_pre = silu_inplace(&mut feat);
        let trace = BackboneTrace {
            caches,
            pre,
            last_shape: (cur.height, cur.width),
            pooled,
            fc_pre,
        };
        (feat, trace)
    }

    /// Runs the decoders of `perm` in order.
    pub fn decode(&self, feat: &[f64], perm: &EditPermutation) -> (EditParams, DecodeTrace) {
        let enc = encode_permutation(perm);
        let mut params = EditParams::default();
        let mut prev = [0.0; 4];
        let mut filled = [false; 4];
        let mut steps = Vec::with_capacity(perm.len());
        for &op in perm.order() {
            let mut input = Vec::with_capacity(feat.len() + 20);
            input.extend_from_slice(feat);
            input.extend_from_slice(&enc.0);
            input.extend_from_slice(&prev);
            let head = &self.heads[op.index()];
            let mut h = head.l1.forward(&input);
            let h_pre = silu_inplace(&mut h);
            let s = sigmoid(head.l2.forward(&h)[0]);
            let b = self.config.bounds.get(op);
            let p = b.lo + (b.hi - b.lo) * s;
            params.set(op, Some(p));
            steps.push(DecodeStep { op, input, filled, h_pre, h, s });
            prev[op.index()] = p - 1.0;
            filled[op.index()] = true;
        }
        (params, DecodeTrace { steps })
    }

    /// One forward pass: the parameters for every operator of `perm`.
    pub fn estimate(&self, img: &ImageGrid, mask: &RegionMask, perm: &EditPermutation) -> Result<EditParams> {
        let x = self.prepare(img, mask)?;
        let (feat, _) = self.features(&x);
        Ok(self.decode(&feat, perm).0)
    }

    /// Accumulates parameter gradients given `dL/dparams`.
    pub fn backward(&self, bt: &BackboneTrace, dt: &DecodeTrace, dparams: &ParamGradient, grads: &mut ParamEstimator) {
        let fdim = self.config.feature_dim;
        let mut dp = dparams.to_array();
        let mut dfeat = vec![0.0; fdim];
        for step in dt.steps.iter().rev() {
            let i = step.op.index();
            let b = self.config.bounds.get(step.op);
            let dz = dp[i] * (b.hi - b.lo) * step.s * (1.0 - step.s);
            let head = &self.heads[i];
            let g = &mut grads.heads[i];
            let mut dh = head.l2.backward(&step.h, &[dz], Some(&mut g.l2));
            silu_backward(&step.h_pre, &mut dh);
            let din = head.l1.backward(&step.input, &dh, Some(&mut g.l1));
            dfeat.iter_mut().zip(&din[..fdim]).for_each(|(a, b)| *a += b);
            for j in 0..4 {
                if step.filled[j] {
                    dp[j] += din[fdim + 16 + j];
                }
            }
        }
        silu_backward(&bt.fc_pre, &mut dfeat);
        let dpooled = self.fc.backward(&bt.pooled, &dfeat, Some(&mut grads.fc));
        let mut dcur = global_avg_pool_backward(&dpooled, bt.last_shape.0, bt.last_shape.1);
        for k in (0..4).rev() {
            silu_backward(&bt.pre[k], &mut dcur.data);
            match self.convs[k].backward(&bt.caches[k], &dcur, Some(&mut grads.convs[k]), k > 0) {
                Some(d) => dcur = d,
                None => break,
            }
        }
    }
}

/// Estimates parameters with a model that must have been trained for `direction`.
pub fn estimate_params(
    img: &ImageGrid,
    mask: &RegionMask,
    perm: &EditPermutation,
    model: &ParamEstimator,
    direction: Direction,
) -> Result<EditParams> {
    if model.direction() != direction {
        return Err(ForgeError::State(format!(
            "estimator was trained to {}, not to {direction}",
            model.direction()
        )));
    }
    model.estimate(img, mask, perm)
}

/// Loss and gradient for one (item, permutation) pair; gradients accumulate into `grads`.
#[allow(clippy::too_many_arguments)]
fn sample_step(
    model: &ParamEstimator,
    item: &RegionItem,
    reference: &Reference,
    perm: &EditPermutation,
    critic: &RealismCritic,
    backend: &dyn SaliencyBackend,
    objective: &ObjectiveConfig,
    grads: &mut ParamEstimator,
) -> Result<(ObjectiveValue, ImageGrid)> {
    let x = model.prepare(&item.image, &item.mask)?;
    let (feat, bt) = model.features(&x);
    let (params, dt) = model.decode(&feat, perm);
    let edited = compose_edits(&item.image, &params, perm, &item.mask)?;
    let (value, dimg) = evaluate_with_grad(reference, &edited, &item.mask, model.direction(), critic, backend, objective)?;
    let (_, dparams) = gradient_of_composition(&item.image, &params, perm, &item.mask, &dimg)?;
    model.backward(&bt, &dt, &dparams, grads);
    Ok((value, edited))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub items: usize,
    pub mean_loss: f64,
    pub mean_s: f64,
    pub mean_delta_r: f64,
    /// Fraction of items whose region lost saliency.
    pub frac_s_positive: f64,
    /// Fraction of items whose region gained saliency.
    pub frac_s_negative: f64,
    /// Fraction of items with `delta_r >= -b_r`.
    pub frac_realistic: f64,
}

/// Per-item results on a held-out set with one seeded random permutation per item.
pub fn evaluate_items(
    model: &ParamEstimator,
    items: &[RegionItem],
    critic: &RealismCritic,
    backend: &dyn SaliencyBackend,
    objective: &ObjectiveConfig,
    seed: u64,
) -> Result<Vec<ObjectiveValue>> {
    let perms = EditPermutation::all_full();
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let perm = &perms[rng_for(seed, STREAM_EVAL, i as u64).gen_range(0..perms.len())];
            let params = model.estimate(&item.image, &item.mask, perm)?;
            let edited = compose_edits(&item.image, &params, perm, &item.mask)?;
            let reference = Reference::new(&item.image, &item.mask, critic, backend)?;
            evaluate(&reference, &edited, &item.mask, model.direction(), critic, backend, objective)
        })
        .collect()
}

pub fn heldout_metrics(values: &[ObjectiveValue], b_r: f64) -> HeldoutMetrics {
    let n = values.len().max(1) as f64;
    let frac = |f: &dyn Fn(&ObjectiveValue) -> bool| values.iter().filter(|v| f(v)).count() as f64 / n;
    HeldoutMetrics {
        items: values.len(),
        mean_loss: mean(&values.iter().map(|v| v.loss).collect::<Vec<_>>()),
        mean_s: mean(&values.iter().map(|v| v.s).collect::<Vec<_>>()),
        mean_delta_r: mean(&values.iter().map(|v| v.delta_r).collect::<Vec<_>>()),
        frac_s_positive: frac(&|v| v.s > 0.0),
        frac_s_negative: frac(&|v| v.s < 0.0),
        frac_realistic: frac(&|v| v.delta_r >= -b_r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub l_sal: f64,
    pub l_realism: f64,
    pub mean_s: f64,
    pub mean_delta_r: f64,
    /// Mean critic loss over the epoch's adversarial updates.
    pub critic_loss: Option<f64>,
    pub heldout: Option<HeldoutMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub direction: Direction,
    pub mode: ObjectiveMode,
    pub train_items: usize,
    pub epochs: Vec<EstimatorEpoch>,
    /// Set when training stopped on a non-finite loss; the returned model is
    /// the last one that completed an epoch.
    pub diverged: Option<String>,
}

pub struct TrainedEstimator {
    pub model: ParamEstimator,
    pub report: EstimatorReport,
    /// The updated critic in adversarial mode.
    pub critic: Option<RealismCritic>,
}

/// Minimizes the product objective over `items` with one uniformly drawn
/// full permutation per sample and step. Held-out metrics always use the
/// critic passed in, so fixed and adversarial runs are comparable.
#[allow(clippy::too_many_arguments)]
pub fn train_estimator(
    items: &[RegionItem],
    heldout: &[RegionItem],
    critic: &RealismCritic,
    backend: &dyn SaliencyBackend,
    config: EstimatorConfig,
    objective: &ObjectiveConfig,
    mut on_epoch: impl FnMut(&EstimatorEpoch),
) -> Result<TrainedEstimator> {
    objective.validate()?;
    if items.is_empty() {
        return Err(ForgeError::Input("no training items".into()));
    }
    if !backend.differentiable() {
        return Err(ForgeError::Config(format!(
            "saliency backend `{}` is not differentiable and cannot drive training",
            backend.id()
        )));
    }
    let mut model = ParamEstimator::init(config.clone())?;
    let mut last_good = model.clone();
    let mut opt = Adam::new(config.learning_rate);
    let adversarial = objective.mode == ObjectiveMode::Adversarial;
    let mut critic_state = adversarial.then(|| CriticState::new(critic.clone(), objective.critic_learning_rate));
    let mut references = items
        .iter()
        .map(|it| Reference::new(&it.image, &it.mask, critic, backend))
        .collect::<Result<Vec<_>>>()?;
    let perms = EditPermutation::all_full();
    let mut rng = rng_for(config.seed, STREAM_TRAIN, 0);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut report = EstimatorReport {
        direction: config.direction,
        mode: objective.mode,
        train_items: items.len(),
        epochs: Vec::with_capacity(config.epochs),
        diverged: None,
    };

    'epochs: for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sums = [0.0; 5];
        let mut critic_losses = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zeros_like();
            let mut edits = Vec::with_capacity(batch.len());
            let active = critic_state.as_ref().map_or(critic, |s| &s.model);
            for &i in batch {
                let perm = &perms[rng.gen_range(0..perms.len())];
                if adversarial {
                    references[i].score = active.score(&items[i].image, &items[i].mask)?.0;
                }
                let (v, edited) = sample_step(&model, &items[i], &references[i], perm, active, backend, objective, &mut grads)?;
                for (s, x) in sums.iter_mut().zip([v.loss, v.l_sal, v.l_realism, v.s, v.delta_r]) {
                    *s += x;
                }
                edits.push(edited);
            }
            grads.scale(1.0 / batch.len() as f64);
            let loss_ok = sums.iter().all(|s| s.is_finite()) && grads.all_finite();
            if loss_ok {
                clip_grad_norm(&mut grads, config.grad_clip);
                opt.step(&mut model, &grads, 1.0);
            }
            if !loss_ok || !model.all_finite() {
                let reason = format!("non-finite loss or weights in epoch {epoch}");
                log::error!("estimator training aborted: {reason}");
                report.diverged = Some(reason);
                model = last_good.clone();
                break 'epochs;
            }
            if let Some(state) = critic_state.as_mut() {
                let originals: Vec<ImageGrid> = batch.iter().map(|&i| items[i].image.clone()).collect();
                let masks: Vec<RegionMask> = batch.iter().map(|&i| items[i].mask.clone()).collect();
                for _ in 0..objective.critic_updates_per_step {
                    critic_losses.push(adversarial_step(&edits, &originals, &masks, state, objective)?);
                }
            }
        }
        let n = items.len() as f64;
        let heldout = if heldout.is_empty() {
            None
        } else {
            let values = evaluate_items(&model, heldout, critic, backend, objective, config.seed)?;
            Some(heldout_metrics(&values, objective.b_r))
        };
        let stats = EstimatorEpoch {
            epoch,
            loss: sums[0] / n,
            l_sal: sums[1] / n,
            l_realism: sums[2] / n,
            mean_s: sums[3] / n,
            mean_delta_r: sums[4] / n,
            critic_loss: (!critic_losses.is_empty()).then(|| mean(&critic_losses)),
            heldout,
        };
        log::info!(
            "estimator epoch {epoch}: loss {:.4} S {:.4} dR {:.4}",
            stats.loss,
            stats.mean_s,
            stats.mean_delta_r
        );
        on_epoch(&stats);
        report.epochs.push(stats);
        last_good = model.clone();
    }
    Ok(TrainedEstimator {
        model,
        report,
        critic: critic_state.map(|s| s.model),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamHistogram {
    pub op: EditOp,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDistribution {
    pub samples: usize,
    pub histograms: Vec<ParamHistogram>,
}

impl ParamDistribution {
    /// One block of rows per operator: `operator,bin_lo,bin_hi,count`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = fs::File::create(path)?;
        writeln!(out, "operator,bin_lo,bin_hi,count")?;
        for h in &self.histograms {
            let width = (h.hi - h.lo) / h.counts.len() as f64;
            for (k, c) in h.counts.iter().enumerate() {
                let lo = h.lo + width * k as f64;
                writeln!(out, "{},{:.6},{:.6},{c}", h.op, lo, lo + width)?;
            }
        }
        Ok(())
    }
}

/// Histograms of estimated parameters over `items`, one seeded random full
/// permutation per item.
pub fn export_param_distribution(
    model: &ParamEstimator,
    items: &[RegionItem],
    bins: usize,
    seed: u64,
) -> Result<ParamDistribution> {
    if items.is_empty() {
        return Err(ForgeError::Input("cannot export a parameter distribution from an empty corpus".into()));
    }
    if bins == 0 {
        return Err(ForgeError::InvalidParameter("bins must be positive".into()));
    }
    let perms = EditPermutation::all_full();
    let mut values: [Vec<f64>; 4] = Default::default();
    for (i, item) in items.iter().enumerate() {
        let perm = &perms[rng_for(seed, STREAM_EXPORT, i as u64).gen_range(0..perms.len())];
        let params = model.estimate(&item.image, &item.mask, perm)?;
        for (op, v) in params.present() {
            values[op.index()].push(v);
        }
    }
    let histograms = EditOp::ALL
        .iter()
        .map(|&op| {
            let b = model.config.bounds.get(op);
            let vs = &values[op.index()];
            let mut counts = vec![0; bins];
            for v in vs {
                let k = ((v - b.lo) / (b.hi - b.lo) * bins as f64).floor() as isize;
                counts[k.clamp(0, bins as isize - 1) as usize] += 1;
            }
            ParamHistogram {
                op,
                lo: b.lo,
                hi: b.hi,
                counts,
                mean: mean(vs),
                std: std_dev(vs),
            }
        })
        .collect();
    Ok(ParamDistribution { samples: items.len(), histograms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ParamEstimator {
        ParamEstimator::init(EstimatorConfig {
            resolution: 16,
            backbone_channels: [3, 4, 4, 5],
            feature_dim: 6,
            decoder_hidden: 5,
            seed,
            ..EstimatorConfig::default()
        })
        .unwrap()
    }

    fn scene() -> (ImageGrid, RegionMask) {
        let img = ImageGrid::from_fn(16, 16, |y, x| [0.2 + y as f64 / 30.0, 0.5, 0.3 + x as f64 / 40.0]).unwrap();
        let mask = RegionMask::from_fn(16, 16, false, |y, x| f64::from(u8::from((4..11).contains(&y) && x > 6))).unwrap();
        (img, mask)
    }

    #[test]
    fn canonical_encoding_is_identity_matrix() {
        let enc = encode_permutation(&EditPermutation::canonical());
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(enc.0[r * 4 + c], f64::from(u8::from(r == c)));
            }
        }
    }

    #[test]
    fn encodings_are_injective_and_short_rows_are_zero() {
        let all: Vec<_> = EditPermutation::all_full().iter().map(encode_permutation).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        let short = EditPermutation::new(vec![EditOp::WhiteBalance, EditOp::Exposure]).unwrap();
        let enc = encode_permutation(&short);
        assert!(enc.0[8..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_outputs_are_near_identity() {
        let (img, mask) = scene();
        let p = tiny(1).estimate(&img, &mask, &EditPermutation::canonical()).unwrap();
        for (_, v) in p.present() {
            assert!((v - 1.0).abs() < 0.1, "{v}");
        }
        assert_eq!(p.count(), 4);
    }

    #[test]
    fn permutation_changes_outputs() {
        let (img, mask) = scene();
        let perms = EditPermutation::all_full();
        for seed in 0..10 {
            let m = tiny(seed);
            let a = m.estimate(&img, &mask, &perms[0]).unwrap();
            let b = m.estimate(&img, &mask, &perms[23]).unwrap();
            let diff = EditOp::ALL
                .iter()
                .map(|op| (a.get(*op).unwrap() - b.get(*op).unwrap()).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-6, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn wrong_direction_is_a_state_error() {
        let (img, mask) = scene();
        let err = estimate_params(&img, &mask, &EditPermutation::canonical(), &tiny(0), Direction::Amplify).unwrap_err();
        assert_eq!(err.code(), "model_state");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (img, mask) = scene();
        let model = tiny(4);
        let perm: EditPermutation = "color_curve,exposure,white_balance,saturation".parse().unwrap();
        let weights = [0.7, -1.3, 0.4, 2.0];
        let objective = |m: &ParamEstimator| {
            let p = m.estimate(&img, &mask, &perm).unwrap();
            EditOp::ALL.iter().map(|op| weights[op.index()] * p.get(*op).unwrap()).sum::<f64>()
        };
        let x = model.prepare(&img, &mask).unwrap();
        let (feat, bt) = model.features(&x);
        let (_, dt) = model.decode(&feat, &perm);
        let mut dparams = ParamGradient::default();
        for op in EditOp::ALL {
            dparams = dparams.with(op, weights[op.index()]);
        }
        let mut grads = model.zeros_like();
        model.backward(&bt, &dt, &dparams, &mut grads);
        let analytic = grads.flat();
        let base = model.flat();
        let h = 1e-5;
        for k in (0..base.len()).step_by(7) {
            let mut plus = model.clone();
            let mut v = base.clone();
            v[k] += h;
            plus.load_flat(&v).unwrap();
            let mut minus = model.clone();
            v[k] -= 2.0 * h;
            minus.load_flat(&v).unwrap();
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
            assert!(err < 1e-4 || (fd - analytic[k]).abs() < 1e-9, "param {k}: fd {fd} analytic {}", analytic[k]);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_size() {
        let m = ParamEstimator::init(EstimatorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.ckpt");
        m.save(&path).unwrap();
        assert_eq!(ParamEstimator::load(&path).unwrap(), m);
        assert!(fs::metadata(&path).unwrap().len() < 30 * 1024 * 1024);
    }
}
