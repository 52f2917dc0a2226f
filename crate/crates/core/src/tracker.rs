//! Point-prompted mask propagation across frames.
//!
//! Three variants bracket a learned video segmenter:
//! - `oracle` reads the renderer's instance ids, so it is exact and re-acquires
//!   an object as soon as it reappears;
//! - `iou` works on RGB alone: it follows a colour component from frame to
//!   frame by IoU after compensating the view's own motion, and gives up for
//!   good when the best match drops below [`IOU_LOSS_THRESHOLD`];
//! - `none` segments the prompted frame only and returns empty masks afterwards.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};
use crate::gridworld::{
    is_agent_color, is_object_color, IdMap, InstanceMask, ObjectId, Observation, AGENT_PIXEL_ID,
    NO_OBJECT,
};

/// Best-match IoU below which the `iou` variant declares the target lost.
pub const IOU_LOSS_THRESHOLD: f64 = 0.3;
/// Largest per-axis view shift, in pixels, searched between consecutive frames.
const MAX_SHIFT: i32 = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerVariant {
    #[default]
    Oracle,
    Iou,
    None,
}

impl TrackerVariant {
    pub const ALL: [TrackerVariant; 3] = [
        TrackerVariant::Oracle,
        TrackerVariant::Iou,
        TrackerVariant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrackerVariant::Oracle => "oracle",
            TrackerVariant::Iou => "iou",
            TrackerVariant::None => "none",
        }
    }
}

impl fmt::Display for TrackerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrackerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrackerVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                config(format!(
                    "unknown tracker variant {s:?} (expected oracle|iou|none)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// One frame as seen by a tracker. `ids` carries simulator ground truth and is
/// only consulted by the oracle variant (and by `none` to segment the prompted
/// frame when available).
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub obs: &'a Observation,
    pub ids: Option<&'a IdMap>,
}

impl<'a> Frame<'a> {
    pub fn new(obs: &'a Observation, ids: Option<&'a IdMap>) -> Self {
        Self { obs, ids }
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub variant: TrackerVariant,
    pub current_mask: InstanceMask,
    pub lost: bool,
    pub frames_since_init: u32,
    pub direction: Direction,
    target: Option<ObjectId>,
    color: Option<[u8; 3]>,
    prev_obs: Option<Observation>,
}

impl TrackerState {
    /// A tracker with no target; every propagation yields an empty mask.
    pub fn idle(variant: TrackerVariant, width: usize, height: usize) -> Self {
        Self {
            variant,
            current_mask: InstanceMask::empty(width, height),
            lost: false,
            frames_since_init: 0,
            direction: Direction::Forward,
            target: None,
            color: None,
            prev_obs: None,
        }
    }

    /// Object id attached to produced masks, when known.
    pub fn target(&self) -> Option<ObjectId> {
        self.target
    }

    /// Overrides the id carried on produced masks (the `iou` variant has no
    /// identity of its own).
    pub fn set_label(&mut self, id: ObjectId) {
        self.target = Some(id);
        if !self.current_mask.is_empty() {
            self.current_mask.object_id = Some(id);
        }
    }

    /// Starts tracking the object under `point` in `frame`.
    pub fn init_from_point(
        variant: TrackerVariant,
        frame: Frame<'_>,
        point: (usize, usize),
        direction: Direction,
    ) -> Result<Self> {
        let (w, h) = (frame.obs.width, frame.obs.height);
        let (x, y) = point;
        if x >= w || y >= h {
            return Err(usage(format!("point ({x}, {y}) outside {w}x{h} frame")));
        }
        let mut st = TrackerState::idle(variant, w, h);
        st.direction = direction;
        let use_ids = match variant {
            TrackerVariant::Oracle => true,
            TrackerVariant::None => frame.ids.is_some(),
            TrackerVariant::Iou => false,
        };
        if use_ids {
            let ids = frame
                .ids
                .ok_or_else(|| usage("oracle tracker needs simulator instance ids"))?;
            let id = ids.at(x, y);
            if id == NO_OBJECT || id == AGENT_PIXEL_ID {
                st.lost = true;
                return Ok(st);
            }
            st.target = Some(id);
            st.current_mask = ids.mask_of(id);
        } else {
            let c = frame.obs.pixel(x, y);
            if !is_object_color(c) {
                st.lost = true;
                return Ok(st);
            }
            st.color = Some(c);
            st.target = frame
                .ids
                .map(|ids| ids.at(x, y))
                .filter(|id| *id != NO_OBJECT);
            st.current_mask = component_at(frame.obs, x, y);
            st.current_mask.object_id = st.target.or(Some(NO_OBJECT));
        }
        st.prev_obs = Some(frame.obs.clone());
        Ok(st)
    }

    /// Moves the track to the next frame in the tracking direction.
    pub fn propagate(&mut self, frame: Frame<'_>) -> InstanceMask {
        self.frames_since_init += 1;
        let (w, h) = (frame.obs.width, frame.obs.height);
        match self.variant {
            TrackerVariant::None => {
                self.current_mask = InstanceMask::empty(w, h);
            }
            TrackerVariant::Oracle => {
                self.current_mask = match (self.target, frame.ids) {
                    (Some(id), Some(ids)) => ids.mask_of(id),
                    _ => InstanceMask::empty(w, h),
                };
            }
            TrackerVariant::Iou => {
                if self.lost || self.color.is_none() {
                    self.current_mask = InstanceMask::empty(w, h);
                } else {
                    self.propagate_iou(frame.obs);
                }
            }
        }
        self.prev_obs = Some(frame.obs.clone());
        self.current_mask.clone()
    }

    fn propagate_iou(&mut self, obs: &Observation) {
        let color = self.color.expect("checked by caller");
        let (dx, dy) = match &self.prev_obs {
            Some(prev) => estimate_shift(prev, obs),
            None => (0, 0),
        };
        let predicted = self.current_mask.shifted(dx, dy);
        let best = color_components(obs, color)
            .into_iter()
            .map(|c| (predicted.iou(&c), c))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((iou, mut comp)) if iou >= IOU_LOSS_THRESHOLD => {
                comp.object_id = self.target.or(Some(NO_OBJECT));
                self.current_mask = comp;
            }
            _ => {
                self.lost = true;
                self.current_mask = InstanceMask::empty(obs.width, obs.height);
            }
        }
    }
}

/// 4-connected component of pixels sharing the colour at `(x, y)`.
pub fn component_at(obs: &Observation, x: usize, y: usize) -> InstanceMask {
    let (w, h) = (obs.width, obs.height);
    let color = obs.pixel(x, y);
    let mut mask = InstanceMask::empty(w, h);
    let mut stack = vec![(x, y)];
    mask.bits[y * w + x] = 1;
    while let Some((cx, cy)) = stack.pop() {
        let mut visit = |nx: usize, ny: usize| {
            if mask.bits[ny * w + nx] == 0 && obs.pixel(nx, ny) == color {
                mask.bits[ny * w + nx] = 1;
                stack.push((nx, ny));
            }
        };
        if cx > 0 {
            visit(cx - 1, cy);
        }
        if cx + 1 < w {
            visit(cx + 1, cy);
        }
        if cy > 0 {
            visit(cx, cy - 1);
        }
        if cy + 1 < h {
            visit(cx, cy + 1);
        }
    }
    mask
}

/// All 4-connected components of the given colour.
pub fn color_components(obs: &Observation, color: [u8; 3]) -> Vec<InstanceMask> {
    let (w, h) = (obs.width, obs.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !seen[y * w + x] && obs.pixel(x, y) == color {
                let comp = component_at(obs, x, y);
                for (s, b) in seen.iter_mut().zip(&comp.bits) {
                    *s |= *b != 0;
                }
                out.push(comp);
            }
        }
    }
    out
}

/// Integer pixel shift `(dx, dy)` that best maps `prev` onto `next`, found by
/// exhaustive search over a subsampled grid.
pub fn estimate_shift(prev: &Observation, next: &Observation) -> (i32, i32) {
    let (w, h) = (prev.width as i32, prev.height as i32);
    let mut best: ((i32, i32), f64) = ((0, 0), f64::INFINITY);
    for dy in -MAX_SHIFT..=MAX_SHIFT {
        for dx in -MAX_SHIFT..=MAX_SHIFT {
            let (mut mismatch, mut total) = (0usize, 0usize);
            for y in (0..h).step_by(2) {
                let ny = y + dy;
                if ny < 0 || ny >= h {
                    continue;
                }
                for x in (0..w).step_by(2) {
                    let nx = x + dx;
                    if nx < 0 || nx >= w {
                        continue;
                    }
                    let (a, b) = (
                        prev.pixel(x as usize, y as usize),
                        next.pixel(nx as usize, ny as usize),
                    );
                    // The agent sits still in the middle of every view; it says nothing about the shift.
                    if is_agent_color(a) || is_agent_color(b) {
                        continue;
                    }
                    total += 1;
                    if a != b {
                        mismatch += 1;
                    }
                }
            }
            if total == 0 {
                continue;
            }
            let cost = mismatch as f64 / total as f64;
            let better = cost < best.1 - 1e-12
                || ((cost - best.1).abs() <= 1e-12
                    && dx.abs() + dy.abs() < best.0 .0.abs() + best.0 .1.abs());
            if better {
                best = ((dx, dy), cost);
            }
        }
    }
    best.0
}
