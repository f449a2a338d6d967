use chrono::{DateTime, Utc};
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::pipeline::{edit_region, replay_prefix, EditPlan, EditStep, Models, Strategy};
use forge_core::saliency::Direction;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Result, ServiceError};
use crate::store::Store;

/// An editing session: a source image and a plan whose first `active`
/// steps produce the current image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: Uuid,
    pub source_hash: String,
    pub plan: EditPlan,
    pub active: usize,
    /// Prefix lengths to return to, most recent last.
    pub undo_stack: Vec<usize>,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: Uuid,
    pub source_hash: String,
    pub active: usize,
    pub recorded_steps: usize,
    pub undo_depth: usize,
    pub image_hash: String,
    /// The plan restricted to the active prefix.
    pub plan: EditPlan,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

pub struct StepOutcome {
    pub session: Session,
    pub step: EditStep,
    pub before: ImageGrid,
    pub after: ImageGrid,
}

impl Session {
    pub fn source(&self, store: &Store) -> Result<ImageGrid> {
        store.get_image(&self.source_hash)
    }

    pub fn current_image(&self, store: &Store) -> Result<ImageGrid> {
        Ok(replay_prefix(&self.plan, &self.source(store)?, self.active)?)
    }

    /// The active prefix as a standalone plan that replays to the current image.
    pub fn active_plan(&self, current: &ImageGrid) -> EditPlan {
        let mut plan = self.plan.clone();
        plan.steps.truncate(self.active);
        plan.masks.retain(|k, _| plan.steps.iter().any(|s| &s.mask_ref == k));
        plan.final_hash = current.content_hash();
        plan
    }

    pub fn view(&self, store: &Store) -> Result<SessionView> {
        let current = self.current_image(store)?;
        Ok(SessionView {
            id: self.id,
            source_hash: self.source_hash.clone(),
            active: self.active,
            recorded_steps: self.plan.steps.len(),
            undo_depth: self.undo_stack.len(),
            image_hash: current.content_hash(),
            plan: self.active_plan(&current),
            created: self.created,
            updated: self.updated,
        })
    }
}

pub fn create_session(store: &Store, source: &ImageGrid, rng_seed: u64) -> Result<Session> {
    let source_hash = store.put_image(source)?;
    let now = Utc::now();
    let session = Session {
        id: Uuid::new_v4(),
        source_hash,
        plan: EditPlan::new(source, rng_seed),
        active: 0,
        undo_stack: Vec::new(),
        created: now,
        updated: now,
    };
    store.put_session(session.clone())?;
    Ok(session)
}

/// Edits the current image and appends the step. Steps that were undone are
/// discarded first, so the recorded plan is always a single history.
pub fn step_session(
    store: &Store,
    id: Uuid,
    mask: &RegionMask,
    direction: Direction,
    strategy: Strategy,
    models: &Models,
) -> Result<StepOutcome> {
    let mut session = store.session(id)?;
    let before = session.current_image(store)?;
    mask.ensure_matches(&before)?;
    let seed = session.plan.step_seed(session.active);
    let (step, after) = edit_region(&before, mask, direction, strategy, models, seed)?;
    session.plan.steps.truncate(session.active);
    session.plan.push(step.clone(), mask, &after);
    session.undo_stack.push(session.active);
    session.active += 1;
    session.updated = Utc::now();
    store.put_session(session.clone())?;
    Ok(StepOutcome { session, step, before, after })
}

pub fn undo_session(store: &Store, id: Uuid) -> Result<Session> {
    let mut session = store.session(id)?;
    let Some(prev) = session.undo_stack.pop() else {
        return Err(ServiceError::Conflict("nothing_to_undo", format!("session {id} has no step to undo")));
    };
    session.active = prev;
    session.updated = Utc::now();
    store.put_session(session.clone())?;
    Ok(session)
}
