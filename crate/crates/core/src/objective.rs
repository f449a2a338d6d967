//! Realism loss, the product objective and the adversarial ablation step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::critic::RealismCritic;
use crate::error::{ForgeError, Result};
use crate::image::{ImageGrid, RegionMask};
use crate::nn::{clip_grad_norm, Adam, Params};
use crate::saliency::{
    relative_change, relative_change_grad_edited, saliency_loss_grad, saliency_loss_weighted, Direction,
    SaliencyBackend, SaliencyMap,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// The critic is frozen while the editing network trains.
    #[default]
    FixedCritic,
    /// The critic is updated against the current edits (ablation only).
    Adversarial,
}

impl ObjectiveMode {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveMode::FixedCritic => "fixed_critic",
            ObjectiveMode::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveMode {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_critic" | "fixed" => Ok(ObjectiveMode::FixedCritic),
            "adversarial" => Ok(ObjectiveMode::Adversarial),
            other => Err(ForgeError::Config(format!("unknown objective mode `{other}`"))),
        }
    }
}

/// The `[objective]` configuration section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Tolerated realism drop before the realism loss activates.
    pub b_r: f64,
    pub w_attenuate: f64,
    pub w_amplify: f64,
    pub mode: ObjectiveMode,
    /// Critic updates per editing-network step in adversarial mode.
    pub critic_updates_per_step: usize,
    pub critic_learning_rate: f64,
    pub critic_grad_clip: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            b_r: 0.1,
            w_attenuate: Direction::Attenuate.default_weight(),
            w_amplify: Direction::Amplify.default_weight(),
            mode: ObjectiveMode::FixedCritic,
            critic_updates_per_step: 1,
            critic_learning_rate: 2e-4,
            critic_grad_clip: 5.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_r.is_finite() && self.b_r >= 0.0) {
            return Err(ForgeError::Config(format!("b_r must be finite and >= 0, got {}", self.b_r)));
        }
        if !self.w_attenuate.is_finite() || !self.w_amplify.is_finite() {
            return Err(ForgeError::Config("saliency weights must be finite".into()));
        }
        if self.mode == ObjectiveMode::Adversarial
            && (self.critic_updates_per_step == 0 || !(self.critic_learning_rate > 0.0))
        {
            return Err(ForgeError::Config(
                "adversarial mode needs at least one critic update per step and a positive learning rate".into(),
            ));
        }
        Ok(())
    }

    pub fn w_sal(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Attenuate => self.w_attenuate,
            Direction::Amplify => self.w_amplify,
        }
    }
}

/// `max(0, -delta_r - b_r)`.
pub fn realism_loss(delta_r: f64, b_r: f64) -> f64 {
    (-delta_r - b_r).max(0.0)
}

/// Derivative of [`realism_loss`] w.r.t. `delta_r`; 0 at the kink.
pub fn realism_loss_grad(delta_r: f64, b_r: f64) -> f64 {
    if -delta_r - b_r > 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1 + l_realism) * l_sal`.
pub fn combined_loss(l_realism: f64, l_sal: f64) -> f64 {
    (1.0 + l_realism) * l_sal
}

/// Partial derivatives `(dL/dl_realism, dL/dl_sal)`.
pub fn combined_loss_grads(l_realism: f64, l_sal: f64) -> (f64, f64) {
    (l_sal, 1.0 + l_realism)
}

/// Every term of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub l_realism: f64,
    pub l_sal: f64,
    pub s: f64,
    pub delta_r: f64,
}

/// Quantities of the original image that every evaluation against it reuses.
pub struct Reference {
    pub saliency: SaliencyMap,
    pub score: f64,
}

impl Reference {
    pub fn new(
        original: &ImageGrid,
        mask: &RegionMask,
        critic: &RealismCritic,
        backend: &dyn SaliencyBackend,
    ) -> Result<Self> {
        mask.ensure_matches(original)?;
        if mask.weight_sum() <= 0.0 {
            return Err(ForgeError::Precondition("mask is empty".into()));
        }
        Ok(Self {
            saliency: backend.predict(original)?,
            score: critic.score(original, mask)?.0,
        })
    }
}

fn terms(s: f64, delta_r: f64, direction: Direction, config: &ObjectiveConfig) -> ObjectiveValue {
    let l_sal = saliency_loss_weighted(s, config.w_sal(direction));
    let l_realism = realism_loss(delta_r, config.b_r);
    ObjectiveValue {
        loss: combined_loss(l_realism, l_sal),
        l_realism,
        l_sal,
        s,
        delta_r,
    }
}

/// Objective value only.
pub fn evaluate(
    reference: &Reference,
    edited: &ImageGrid,
    mask: &RegionMask,
    direction: Direction,
    critic: &RealismCritic,
    backend: &dyn SaliencyBackend,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue> {
    mask.ensure_matches(edited)?;
    let s = relative_change(&reference.saliency, &backend.predict(edited)?, mask)?;
    let delta_r = critic.score(edited, mask)?.0 - reference.score;
    Ok(terms(s, delta_r, direction, config))
}

/// Objective value and its gradient w.r.t. the edited pixels.
pub fn evaluate_with_grad(
    reference: &Reference,
    edited: &ImageGrid,
    mask: &RegionMask,
    direction: Direction,
    critic: &RealismCritic,
    backend: &dyn SaliencyBackend,
    config: &ObjectiveConfig,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    if !backend.differentiable() {
        return Err(ForgeError::Config(format!(
            "saliency backend `{}` is not differentiable and cannot drive training",
            backend.id()
        )));
    }
    mask.ensure_matches(edited)?;
    let s = relative_change(&reference.saliency, &backend.predict(edited)?, mask)?;
    let (score, dr_dimg) = critic.score_with_grad(edited, mask)?;
    let value = terms(s, score - reference.score, direction, config);

    let (dl_dreal, dl_dsal) = combined_loss_grads(value.l_realism, value.l_sal);
    let dl_ds = dl_dsal * saliency_loss_grad(s, config.w_sal(direction));
    let dl_ddr = dl_dreal * realism_loss_grad(value.delta_r, config.b_r);

    let cot: Vec<f64> = relative_change_grad_edited(&reference.saliency, mask)
        .into_iter()
        .map(|g| g * dl_ds)
        .collect();
    let mut grad = backend.vjp(edited, &cot)?;
    if dl_ddr != 0.0 {
        grad.iter_mut().zip(&dr_dimg).for_each(|(g, d)| *g += dl_ddr * d);
    }
    Ok((value, grad))
}

/// Computes `L = (1 + L_realism) * L_sal` for one edit, with its gradient
/// w.r.t. the edited pixels.
pub fn full_objective(
    original: &ImageGrid,
    edited: &ImageGrid,
    mask: &RegionMask,
    direction: Direction,
    critic: &RealismCritic,
    backend: &dyn SaliencyBackend,
    config: &ObjectiveConfig,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    if !edited.same_shape(original) {
        return Err(ForgeError::Shape("edited and original images differ in shape".into()));
    }
    let reference = Reference::new(original, mask, critic, backend)?;
    evaluate_with_grad(&reference, edited, mask, direction, critic, backend, config)
}

/// A critic together with its optimizer, updated in adversarial mode.
pub struct CriticState {
    pub model: RealismCritic,
    opt: Adam,
}

impl CriticState {
    pub fn new(model: RealismCritic, learning_rate: f64) -> Self {
        Self { model, opt: Adam::new(learning_rate) }
    }
}

/// One least-squares critic update with originals as real and edits as fake.
/// Returns the batch loss before the update.
pub fn adversarial_step(
    edited: &[ImageGrid],
    originals: &[ImageGrid],
    masks: &[RegionMask],
    state: &mut CriticState,
    config: &ObjectiveConfig,
) -> Result<f64> {
    if config.mode != ObjectiveMode::Adversarial {
        return Err(ForgeError::Mode("adversarial_step requires objective mode `adversarial`".into()));
    }
    if edited.len() != originals.len() || edited.len() != masks.len() || edited.is_empty() {
        return Err(ForgeError::Input("adversarial batch needs equal, non-zero numbers of edits, originals and masks".into()));
    }
    let mut grads = state.model.zeros_like();
    let mut loss = 0.0;
    for ((e, o), m) in edited.iter().zip(originals).zip(masks) {
        loss += state.model.ls_loss_and_grad(&state.model.prepare(o, m)?, 1.0, &mut grads);
        loss += state.model.ls_loss_and_grad(&state.model.prepare(e, m)?, 0.0, &mut grads);
    }
    grads.scale(1.0 / edited.len() as f64);
    clip_grad_norm(&mut grads, config.critic_grad_clip);
    state.opt.lr = config.critic_learning_rate;
    state.opt.step(&mut state.model, &grads, 1.0);
    if !state.model.all_finite() {
        return Err(ForgeError::Divergence("critic weights became non-finite in adversarial step".into()));
    }
    Ok(loss / edited.len() as f64)
}
