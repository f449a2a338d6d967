//! Single- and multi-region editing, plan replay and the realism heatmap.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::RealismCritic;
use crate::edit_ops::{compose_edits, EditOp, EditParams, EditPermutation};
use crate::error::{ForgeError, Result};
use crate::estimator::ParamEstimator;
use crate::image::{box_filter, ImageGrid, RegionMask};
use crate::objective::{evaluate, ObjectiveConfig, ObjectiveValue, Reference};
use crate::rng::{derive_seed, rng_for};
use crate::saliency::{Direction, SaliencyBackend};

const STREAM_STEP: u64 = 0x5354_4550;
const STREAM_PICK: u64 = 0x5049_434B;

pub const PLAN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Random,
    BestSaliency,
    BestRealism,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::BestSaliency => "best_saliency",
            Strategy::BestRealism => "best_realism",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "best_saliency" => Ok(Strategy::BestSaliency),
            "best_realism" => Ok(Strategy::BestRealism),
            other => Err(ForgeError::InvalidParameter(format!(
                "unknown strategy `{other}` (expected random, best_saliency or best_realism)"
            ))),
        }
    }
}

/// Everything an edit needs, shareable across threads.
#[derive(Clone)]
pub struct Models {
    pub attenuate: Option<Arc<ParamEstimator>>,
    pub amplify: Option<Arc<ParamEstimator>>,
    pub critic: Arc<RealismCritic>,
    pub saliency: Arc<dyn SaliencyBackend>,
    pub objective: ObjectiveConfig,
}

impl Models {
    pub fn estimator(&self, direction: Direction) -> Result<&ParamEstimator> {
        let slot = match direction {
            Direction::Attenuate => &self.attenuate,
            Direction::Amplify => &self.amplify,
        };
        let model = slot
            .as_deref()
            .ok_or_else(|| ForgeError::State(format!("no estimator loaded for {direction}")))?;
        if model.direction() != direction {
            return Err(ForgeError::State(format!(
                "estimator in the {direction} slot was trained to {}",
                model.direction()
            )));
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub perm: EditPermutation,
    pub params: EditParams,
    pub s: f64,
    pub delta_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditStep {
    /// Content hash of the mask, resolved through [`EditPlan::masks`].
    pub mask_ref: String,
    pub direction: Direction,
    pub strategy: Strategy,
    pub perm: EditPermutation,
    pub params: EditParams,
    pub realism_pre: f64,
    pub realism_post: f64,
    pub delta_r: f64,
    pub s: f64,
    /// Mask-weighted mean saliency before and after the step.
    pub saliency_pre: f64,
    pub saliency_post: f64,
    pub loss: f64,
    /// All evaluated permutations, in canonical order, for the `best_*` strategies.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
}

fn evaluate_candidate(
    img: &ImageGrid,
    mask: &RegionMask,
    reference: &Reference,
    direction: Direction,
    perm: &EditPermutation,
    models: &Models,
) -> Result<(EditParams, ImageGrid, ObjectiveValue)> {
    let params = models.estimator(direction)?.estimate(img, mask, perm)?;
    let edited = compose_edits(img, &params, perm, mask)?;
    let value = evaluate(reference, &edited, mask, direction, &models.critic, models.saliency.as_ref(), &models.objective)?;
    Ok((params, edited, value))
}

/// Edits one region. `best_*` strategies evaluate all 24 full permutations
/// and keep the first maximizer in canonical order.
pub fn edit_region(
    img: &ImageGrid,
    mask: &RegionMask,
    direction: Direction,
    strategy: Strategy,
    models: &Models,
    rng_seed: u64,
) -> Result<(EditStep, ImageGrid)> {
    models.estimator(direction)?;
    let reference = Reference::new(img, mask, &models.critic, models.saliency.as_ref())?;
    let perms = EditPermutation::all_full();
    let mut candidates = Vec::new();
    let (perm, params, edited, value) = match strategy {
        Strategy::Random => {
            let perm = perms[rng_for(rng_seed, STREAM_PICK, 0).gen_range(0..perms.len())].clone();
            let (params, edited, value) = evaluate_candidate(img, mask, &reference, direction, &perm, models)?;
            (perm, params, edited, value)
        }
        Strategy::BestSaliency | Strategy::BestRealism => {
            let mut best: Option<(f64, EditPermutation, EditParams, ImageGrid, ObjectiveValue)> = None;
            for perm in &perms {
                let (params, edited, value) = evaluate_candidate(img, mask, &reference, direction, perm, models)?;
                log::debug!("candidate {perm}: S {:.5} dR {:.5}", value.s, value.delta_r);
                candidates.push(Candidate {
                    perm: perm.clone(),
                    params,
                    s: value.s,
                    delta_r: value.delta_r,
                });
                let key = match (strategy, direction) {
                    (Strategy::BestRealism, _) => value.delta_r,
                    (_, Direction::Attenuate) => value.s,
                    (_, Direction::Amplify) => -value.s,
                };
                if best.as_ref().is_none_or(|b| key > b.0) {
                    best = Some((key, perm.clone(), params, edited, value));
                }
            }
            let (_, perm, params, edited, value) = best.expect("24 candidates");
            (perm, params, edited, value)
        }
    };
    let post = models.saliency.predict(&edited)?;
    let step = EditStep {
        mask_ref: mask.content_hash(),
        direction,
        strategy,
        perm,
        params,
        realism_pre: reference.score,
        realism_post: reference.score + value.delta_r,
        delta_r: value.delta_r,
        s: value.s,
        saliency_pre: reference.saliency.masked_mean(mask),
        saliency_post: post.masked_mean(mask),
        loss: value.loss,
        candidates,
    };
    Ok((step, edited))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub mask: RegionMask,
    pub direction: Direction,
}

/// A replayable record of sequential region edits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub version: u32,
    pub source_hash: String,
    pub rng_seed: u64,
    pub steps: Vec<EditStep>,
    /// Masks referenced by the steps, keyed by content hash.
    pub masks: BTreeMap<String, RegionMask>,
    pub final_hash: String,
}

impl EditPlan {
    pub fn new(source: &ImageGrid, rng_seed: u64) -> Self {
        let hash = source.content_hash();
        Self {
            version: PLAN_VERSION,
            source_hash: hash.clone(),
            rng_seed,
            steps: Vec::new(),
            masks: BTreeMap::new(),
            final_hash: hash,
        }
    }

    pub fn push(&mut self, step: EditStep, mask: &RegionMask, result: &ImageGrid) {
        self.masks.entry(step.mask_ref.clone()).or_insert_with(|| mask.clone());
        self.steps.push(step);
        self.final_hash = result.content_hash();
    }

    pub fn mask(&self, step: &EditStep) -> Result<&RegionMask> {
        self.masks
            .get(&step.mask_ref)
            .ok_or_else(|| ForgeError::InvalidPlan(format!("plan has no mask `{}`", step.mask_ref)))
    }

    /// Per-step seed used by [`edit_multi`].
    pub fn step_seed(&self, index: usize) -> u64 {
        derive_seed(self.rng_seed, STREAM_STEP, index as u64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: EditPlan = serde_json::from_str(text)?;
        if plan.version != PLAN_VERSION {
            return Err(ForgeError::InvalidPlan(format!("unsupported plan version {}", plan.version)));
        }
        Ok(plan)
    }
}

/// Re-applies the first `prefix` steps of `plan` to `source`.
pub fn replay_prefix(plan: &EditPlan, source: &ImageGrid, prefix: usize) -> Result<ImageGrid> {
    if source.content_hash() != plan.source_hash {
        return Err(ForgeError::InvalidPlan("source image does not match the plan's source hash".into()));
    }
    let mut cur = source.clone();
    for step in plan.steps.iter().take(prefix) {
        cur = compose_edits(&cur, &step.params, &step.perm, plan.mask(step)?)?;
    }
    Ok(cur)
}

/// Re-applies every step and checks the recorded final hash.
pub fn replay(plan: &EditPlan, source: &ImageGrid) -> Result<ImageGrid> {
    let out = replay_prefix(plan, source, plan.steps.len())?;
    if out.content_hash() != plan.final_hash {
        return Err(ForgeError::InvalidPlan("replayed image does not match the plan's final hash".into()));
    }
    Ok(out)
}

/// A plan that stopped at a failing step.
#[derive(Debug)]
pub struct PartialPlan {
    pub plan: EditPlan,
    pub image: ImageGrid,
    pub error: ForgeError,
}

impl fmt::Display for PartialPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "plan stopped after {} steps: {}", self.plan.steps.len(), self.error)
    }
}

impl std::error::Error for PartialPlan {}

/// Applies [`edit_region`] to each spec in order, each step reading the
/// previous step's output.
pub fn edit_multi(
    img: &ImageGrid,
    specs: &[RegionSpec],
    strategy: Strategy,
    models: &Models,
    rng_seed: u64,
) -> std::result::Result<(EditPlan, ImageGrid), Box<PartialPlan>> {
    let mut plan = EditPlan::new(img, rng_seed);
    let mut cur = img.clone();
    for (k, spec) in specs.iter().enumerate() {
        match edit_region(&cur, &spec.mask, spec.direction, strategy, models, plan.step_seed(k)) {
            Ok((step, next)) => {
                plan.push(step, &spec.mask, &next);
                cur = next;
            }
            Err(error) => return Err(Box::new(PartialPlan { plan, image: cur, error })),
        }
    }
    Ok((plan, cur))
}

/// Realism change over a grid of additive offsets to two parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Operator perturbed along rows.
    pub row_op: EditOp,
    /// Operator perturbed along columns.
    pub col_op: EditOp,
    pub offsets: Vec<f64>,
    /// `cells[i][j]` is the realism change at offsets `(offsets[i], offsets[j])`;
    /// `None` where a perturbed value is invalid.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Heatmap {
    pub fn center(&self) -> Option<f64> {
        let c = self.offsets.iter().position(|o| *o == 0.0)?;
        self.cells[c][c]
    }

    /// Whether the unperturbed cell is at or above the 75th percentile of the valid cells.
    pub fn center_in_top_quartile(&self) -> bool {
        let Some(center) = self.center() else { return false };
        let mut valid: Vec<f64> = self.cells.iter().flatten().flatten().copied().collect();
        valid.sort_by(f64::total_cmp);
        let pos = 0.75 * (valid.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let q = valid[lo] + (valid[hi] - valid[lo]) * (pos - lo as f64);
        center >= q
    }
}

/// The default five offsets, `-0.2..=0.2`.
pub fn default_offsets() -> Vec<f64> {
    vec![-0.2, -0.1, 0.0, 0.1, 0.2]
}

pub fn optimality_heatmap(
    img: &ImageGrid,
    mask: &RegionMask,
    step: &EditStep,
    ops: (EditOp, EditOp),
    offsets: &[f64],
    critic: &RealismCritic,
) -> Result<Heatmap> {
    let (row_op, col_op) = ops;
    if row_op == col_op {
        return Err(ForgeError::InvalidParameter("heatmap needs two different operators".into()));
    }
    let (Some(p_row), Some(p_col)) = (step.params.get(row_op), step.params.get(col_op)) else {
        return Err(ForgeError::InvalidParameter(format!("step has no {row_op} or {col_op} parameter")));
    };
    let base = critic.score(img, mask)?.0;
    let mut cells = Vec::with_capacity(offsets.len());
    for &dr in offsets {
        let mut row = Vec::with_capacity(offsets.len());
        for &dc in offsets {
            let (vr, vc) = (p_row + dr, p_col + dc);
            if row_op.validate(vr).is_err() || col_op.validate(vc).is_err() {
                row.push(None);
                continue;
            }
            let mut params = step.params;
            params.set(row_op, Some(vr));
            params.set(col_op, Some(vc));
            let edited = compose_edits(img, &params, &step.perm, mask)?;
            row.push(Some(critic.score(&edited, mask)?.0 - base));
        }
        cells.push(row);
    }
    Ok(Heatmap {
        row_op,
        col_op,
        offsets: offsets.to_vec(),
        cells,
    })
}

/// Box-blurs the mask weights; radius 0 returns the mask unchanged.
pub fn feather_mask(mask: &RegionMask, radius: usize) -> RegionMask {
    if radius == 0 {
        return mask.clone();
    }
    let weights = box_filter(mask.weights(), mask.height(), mask.width(), radius)
        .into_iter()
        .map(|w| w.clamp(0.0, 1.0))
        .collect();
    mask.clone().with_feather(weights, mask.feather_radius() + radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticConfig;
    use crate::estimator::EstimatorConfig;
    use crate::saliency::AnalyticSaliency;

    fn models() -> Models {
        let est = |direction, seed| {
            Arc::new(
                ParamEstimator::init(EstimatorConfig {
                    resolution: 16,
                    backbone_channels: [3, 4, 4, 4],
                    feature_dim: 6,
                    decoder_hidden: 5,
                    direction,
                    seed,
                    ..EstimatorConfig::default()
                })
                .unwrap(),
            )
        };
        Models {
            attenuate: Some(est(Direction::Attenuate, 1)),
            amplify: Some(est(Direction::Amplify, 2)),
            critic: Arc::new(
                RealismCritic::init(CriticConfig {
                    resolution: 16,
                    encoder_channels: [4, 4, 4],
                    mlp_hidden: 4,
                    ..CriticConfig::default()
                })
                .unwrap(),
            ),
            saliency: Arc::new(AnalyticSaliency::default()),
            objective: ObjectiveConfig::default(),
        }
    }

    fn image() -> ImageGrid {
        ImageGrid::from_fn(16, 16, |y, x| [0.3 + y as f64 / 40.0, 0.2 + x as f64 / 30.0, 0.5]).unwrap()
    }

    fn block(y0: usize, x0: usize) -> RegionMask {
        RegionMask::from_fn(16, 16, false, |y, x| f64::from(u8::from((y0..y0 + 5).contains(&y) && (x0..x0 + 5).contains(&x))))
            .unwrap()
    }

    #[test]
    fn best_realism_is_exact_argmax() {
        let m = models();
        let (step, _) = edit_region(&image(), &block(2, 2), Direction::Attenuate, Strategy::BestRealism, &m, 3).unwrap();
        assert_eq!(step.candidates.len(), 24);
        let max = step.candidates.iter().map(|c| c.delta_r).fold(f64::MIN, f64::max);
        assert_eq!(step.delta_r, max);
        let first = step.candidates.iter().position(|c| c.delta_r == max).unwrap();
        assert_eq!(step.perm, step.candidates[first].perm);
    }

    #[test]
    fn random_strategy_is_reproducible() {
        let m = models();
        let a = edit_region(&image(), &block(2, 2), Direction::Amplify, Strategy::Random, &m, 9).unwrap();
        let b = edit_region(&image(), &block(2, 2), Direction::Amplify, Strategy::Random, &m, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.0.candidates.is_empty());
    }

    #[test]
    fn missing_estimator_is_a_state_error() {
        let mut m = models();
        m.amplify = None;
        let err = edit_region(&image(), &block(2, 2), Direction::Amplify, Strategy::Random, &m, 0).unwrap_err();
        assert_eq!(err.code(), "model_state");
        m.amplify = m.attenuate.clone();
        let err = edit_region(&image(), &block(2, 2), Direction::Amplify, Strategy::Random, &m, 0).unwrap_err();
        assert_eq!(err.code(), "model_state");
    }

    #[test]
    fn multi_region_plan_roundtrips() {
        let m = models();
        let img = image();
        let specs = vec![
            RegionSpec { mask: block(0, 0), direction: Direction::Attenuate },
            RegionSpec { mask: block(9, 9), direction: Direction::Amplify },
        ];
        let (plan, out) = edit_multi(&img, &specs, Strategy::Random, &m, 5).unwrap();
        assert_eq!(plan.steps.len(), 2);
        let back = EditPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
        assert_eq!(replay(&back, &img).unwrap(), out);
        for y in 0..16 {
            for x in 0..16 {
                if block(0, 0).weight(y, x) == 0.0 && block(9, 9).weight(y, x) == 0.0 {
                    assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
        let (empty, same) = edit_multi(&img, &[], Strategy::Random, &m, 5).unwrap();
        assert!(empty.steps.is_empty());
        assert_eq!(same, img);
    }

    #[test]
    fn failed_step_returns_partial_plan() {
        let mut m = models();
        m.amplify = None;
        let specs = vec![
            RegionSpec { mask: block(0, 0), direction: Direction::Attenuate },
            RegionSpec { mask: block(9, 9), direction: Direction::Amplify },
        ];
        let partial = edit_multi(&image(), &specs, Strategy::Random, &m, 5).unwrap_err();
        assert_eq!(partial.plan.steps.len(), 1);
        assert_eq!(partial.error.code(), "model_state");
    }

    #[test]
    fn heatmap_center_matches_step_and_marks_invalid_cells() {
        let m = models();
        let img = image();
        let mask = block(4, 4);
        let (mut step, _) = edit_region(&img, &mask, Direction::Attenuate, Strategy::Random, &m, 1).unwrap();
        let hm = optimality_heatmap(&img, &mask, &step, (EditOp::Saturation, EditOp::Exposure), &default_offsets(), &m.critic)
            .unwrap();
        assert_eq!(hm.cells.len(), 5);
        assert!(hm.cells.iter().all(|r| r.len() == 5));
        assert!((hm.center().unwrap() - step.delta_r).abs() < 1e-12);

        step.params.set(EditOp::Saturation, Some(0.05));
        let hm = optimality_heatmap(&img, &mask, &step, (EditOp::Saturation, EditOp::Exposure), &default_offsets(), &m.critic)
            .unwrap();
        assert!(hm.cells[0].iter().all(Option::is_none));
        assert!(hm.cells[2].iter().all(Option::is_some));
    }

    #[test]
    fn feathering() {
        let mask = block(5, 5);
        assert_eq!(feather_mask(&mask, 0), mask);
        let soft = feather_mask(&mask, 4);
        assert!(soft.weights().iter().any(|w| *w > 0.0 && *w < 1.0));
        let edge = soft.weight(7, 5);
        assert!(edge > 0.0 && edge < 1.0);
    }
}
