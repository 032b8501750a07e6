//! The localization environment: box state, reward, termination, and the
//! reward-guided action mask.
//!
//! An episode starts from a coarse central box and deforms it one action at
//! a time. The observation is the stack of the four most recent crops of
//! the (normalized) volume under the box. Reward is the sign of the IoU
//! change against the target organ's truth box, with ties counting as
//! failure. Training episodes end when IoU reaches `tau` or a step budget
//! runs out; evaluation episodes only end on their own (larger) budget —
//! the evaluator stops earlier by detecting box oscillations.

use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{apply_action_configured, iou, Action, Box3};
use crate::phantom::LabeledVolume;
use crate::rng::Rng;
use crate::volume::crop_resample;

/// Oscillation detector lookback, in steps.
pub const OSC_WINDOW: usize = 20;
/// Box coordinates are quantized to this granularity when comparing
/// revisited states.
pub const OSC_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    /// Action step as a fraction of the current extent.
    pub alpha: f64,
    /// IoU threshold that ends a training episode.
    pub tau: f64,
    /// Crop resolution G; the network input is `4 * G^3`.
    pub crop_edge: u32,
    pub max_steps_train: u32,
    pub max_steps_eval: u32,
    /// Extents never shrink below this many voxels.
    pub min_extent_voxels: f64,
    /// Discount factor for bootstrap targets.
    pub gamma: f64,
    /// Whether `taller` grows the z extent (the default reading) or shrinks
    /// it like the other two reshaping actions.
    pub taller_grows: bool,
    /// Per-face reset jitter in training, as a fraction of the volume dim.
    pub reset_jitter: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            alpha: 0.1,
            tau: 0.85,
            crop_edge: 24,
            max_steps_train: 200,
            max_steps_eval: 100,
            min_extent_voxels: 3.0,
            gamma: 0.9,
            taller_grows: true,
            reset_jitter: 0.05,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(msg.to_string()) };
        check(self.alpha > 0.0 && self.alpha < 1.0, "env.alpha must lie in (0, 1)")?;
        check(self.tau > 0.0 && self.tau <= 1.0, "env.tau must lie in (0, 1]")?;
        check((1..=64).contains(&self.crop_edge), "env.crop_edge must lie in 1..=64")?;
        check(self.max_steps_train >= 1, "env.max_steps_train must be at least 1")?;
        check(self.max_steps_eval >= 1, "env.max_steps_eval must be at least 1")?;
        check(
            self.min_extent_voxels > 0.0 && self.min_extent_voxels.is_finite(),
            "env.min_extent must be positive",
        )?;
        check((0.0..1.0).contains(&self.gamma), "env.gamma must lie in [0, 1)")?;
        check(
            (0.0..=0.3).contains(&self.reset_jitter),
            "env.reset_jitter must lie in [0, 0.3]",
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("volume has no organ with id {organ}")]
    UnknownOrgan { organ: u32 },
    #[error("episode already terminal; reset before stepping")]
    EpisodeFinished,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

/// Observable episode state. The crop history is shared via `Arc` so that
/// replay transitions can keep five frames per step instead of eight full
/// stacks.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub bbox: Box3,
    history: [Arc<Vec<f32>>; 4],
    pub step: u32,
    pub terminal: bool,
}

impl EnvState {
    /// Crops oldest to newest.
    pub fn history(&self) -> &[Arc<Vec<f32>>; 4] {
        &self.history
    }

    /// Flattened network input: the four crops concatenated oldest-first.
    pub fn network_input(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.history.iter().map(|h| h.len()).sum());
        for h in &self.history {
            out.extend_from_slice(h);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f32,
    pub terminal: bool,
    pub iou_before: f64,
    pub iou_after: f64,
}

/// Clamps a box into `[0, dim]` per axis, re-growing any extent that fell
/// below `min_extent` around its midpoint and sliding it back inside the
/// bounds. In-bounds boxes with adequate extents pass through unchanged.
pub fn clamp_box(b: Box3, dims: [u32; 3], min_extent: f64) -> Box3 {
    let mut org = [0.0; 3];
    let mut ext = [0.0; 3];
    for axis in 0..3 {
        let d = dims[axis] as f64;
        let me = min_extent.min(d);
        // Compliant axes pass through with their stored representation
        // untouched, which is what makes the clamp idempotent.
        if b.lo(axis) >= 0.0 && b.hi(axis) <= d && b.extent(axis) >= me {
            org[axis] = b.lo(axis);
            ext[axis] = b.extent(axis);
            continue;
        }
        let lo = b.lo(axis).max(0.0);
        let hi = b.hi(axis).min(d);
        let e = hi - lo;
        if e >= me {
            org[axis] = lo;
            ext[axis] = e;
        } else {
            // Regrow to exactly the minimum extent around the trimmed
            // midpoint, sliding inside the bounds if needed.
            let mid = 0.5 * (lo + hi);
            org[axis] = (mid - 0.5 * me).clamp(0.0, d - me);
            ext[axis] = me;
        }
    }
    Box3::from_origin_extent(org, ext)
}

/// Finds a revisited box: the earliest index within the last `window`
/// entries (excluding the final one) whose box matches the final box after
/// quantizing all corners to `eps`.
pub fn detect_oscillation(boxes: &[Box3], window: usize, eps: f64) -> Option<usize> {
    let t = boxes.len().checked_sub(1)?;
    let key = |b: &Box3| -> [i64; 6] { b.corners().map(|c| (c / eps).round() as i64) };
    let current = key(&boxes[t]);
    let start = t.saturating_sub(window);
    (start..t).find(|&j| key(&boxes[j]) == current)
}

/// One organ-localization task over one volume.
pub struct Env {
    labeled: Arc<LabeledVolume>,
    target: Box3,
    organ_id: u32,
    mode: Mode,
    cfg: EnvConfig,
}

impl Env {
    pub fn new(
        labeled: Arc<LabeledVolume>,
        organ_id: u32,
        mode: Mode,
        cfg: EnvConfig,
    ) -> Result<Env, EnvError> {
        cfg.validate().map_err(EnvError::InvalidConfig)?;
        let target = *labeled
            .truth_box(organ_id)
            .ok_or(EnvError::UnknownOrgan { organ: organ_id })?;
        Ok(Env { labeled, target, organ_id, mode, cfg })
    }

    pub fn target(&self) -> &Box3 {
        &self.target
    }

    pub fn organ_id(&self) -> u32 {
        self.organ_id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn cfg(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn labeled(&self) -> &Arc<LabeledVolume> {
        &self.labeled
    }

    /// The action's effect on a box in this environment: deform, then clamp
    /// to the volume.
    pub fn simulate_action(&self, b: Box3, action: Action) -> Box3 {
        let moved = apply_action_configured(b, action, self.cfg.alpha, self.cfg.taller_grows);
        clamp_box(moved, self.labeled.volume.dims(), self.cfg.min_extent_voxels)
    }

    /// Starts an episode from the central 75% box. In training mode each
    /// face is independently jittered by up to `reset_jitter` of the volume
    /// dim (when an rng is supplied), drawn in x0, x1, y0, y1, z0, z1 order.
    pub fn reset(&self, rng: Option<&mut Rng>) -> EnvState {
        let dims = self.labeled.volume.dims();
        let mut corners = [0.0f64; 6];
        for axis in 0..3 {
            let d = dims[axis] as f64;
            corners[axis] = 0.125 * d;
            corners[axis + 3] = 0.875 * d;
        }
        if self.mode == Mode::Train && self.cfg.reset_jitter > 0.0 {
            if let Some(rng) = rng {
                for axis in 0..3 {
                    let j = self.cfg.reset_jitter * dims[axis] as f64;
                    corners[axis] += rng.range_f64(-j, j);
                    corners[axis + 3] += rng.range_f64(-j, j);
                }
            }
        }
        let raw = Box3::new(corners[0], corners[1], corners[2], corners[3], corners[4], corners[5]);
        let bbox = clamp_box(raw, dims, self.cfg.min_extent_voxels);
        let crop = Arc::new(crop_resample(&self.labeled.volume, &bbox, self.cfg.crop_edge));
        EnvState {
            bbox,
            history: [crop.clone(), crop.clone(), crop.clone(), crop],
            step: 0,
            terminal: false,
        }
    }

    /// Applies one action: returns the successor state, the sign reward
    /// (+1 on strict IoU improvement, -1 otherwise including ties), and
    /// whether the episode ended.
    pub fn step(&self, state: &EnvState, action: Action) -> Result<StepResult, EnvError> {
        if state.terminal {
            return Err(EnvError::EpisodeFinished);
        }
        let iou_before = iou(&state.bbox, &self.target);
        let bbox = self.simulate_action(state.bbox, action);
        let iou_after = iou(&bbox, &self.target);
        let reward = if iou_after > iou_before { 1.0 } else { -1.0 };
        let step = state.step + 1;
        let terminal = match self.mode {
            Mode::Train => iou_after >= self.cfg.tau || step >= self.cfg.max_steps_train,
            Mode::Eval => step >= self.cfg.max_steps_eval,
        };
        let crop = Arc::new(crop_resample(&self.labeled.volume, &bbox, self.cfg.crop_edge));
        let h = &state.history;
        let history = [h[1].clone(), h[2].clone(), h[3].clone(), crop];
        Ok(StepResult {
            state: EnvState { bbox, history, step, terminal },
            reward,
            terminal,
            iou_before,
            iou_after,
        })
    }

    /// Actions whose simulated step would earn +1 reward from this state.
    /// May be empty (e.g. when the box already matches the target).
    pub fn guided_action_mask(&self, state: &EnvState) -> Vec<Action> {
        let before = iou(&state.bbox, &self.target);
        Action::ALL
            .iter()
            .copied()
            .filter(|&a| iou(&self.simulate_action(state.bbox, a), &self.target) > before)
            .collect()
    }
}
