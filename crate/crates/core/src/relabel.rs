//! Backward trajectory relabeling.
//!
//! Each interaction event is traced back to the frame its action was taken on,
//! the object under the agent's aim point is segmented there, and its mask is
//! propagated backward through the preceding frames. Stretches of purposeful
//! movement that end facing an object get a `navigate` label the same way.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::gridworld::{
    aim_point, is_object_color, render_with_ids, reset, IdMap, InstanceMask, InteractionType,
    ObjectId, Observation, AGENT_PIXEL_ID, NO_OBJECT,
};
use crate::tracker::{Direction, Frame, TrackerState, TrackerVariant};
use crate::trajectory::{FrameLabel, Trajectory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelabelConfig {
    /// Frames labeled per event, ending on the frame the action was taken.
    pub window_k: usize,
    pub nav_window: usize,
    /// Net Manhattan displacement, in tiles, that counts as approaching something.
    pub nav_threshold: i32,
    pub tracker: TrackerVariant,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            window_k: 32,
            nav_window: 32,
            nav_threshold: 6,
            tracker: TrackerVariant::Oracle,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_k == 0 {
            return Err(config("window_k must be at least 1"));
        }
        if self.nav_window < 2 {
            return Err(config("nav_window must be at least 2"));
        }
        if self.nav_threshold <= 0 {
            return Err(config("nav_threshold must be positive"));
        }
        Ok(())
    }
}

/// Frames of one trajectory as a tracker sees them.
#[derive(Clone, Copy, Debug)]
pub struct Frames<'a> {
    pub obs: &'a [Observation],
    pub ids: Option<&'a [IdMap]>,
}

impl<'a> Frames<'a> {
    pub fn frame(&self, t: usize) -> Frame<'a> {
        Frame::new(&self.obs[t], self.ids.map(|ids| &ids[t]))
    }
}

/// A run of consecutive frames labeled with one object and interaction type.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSegment {
    pub interaction: InteractionType,
    pub object_id: ObjectId,
    pub start: usize,
    /// Inclusive last frame; for events, the frame the action was taken on.
    pub end: usize,
    /// One mask per frame of `start..=end`.
    pub masks: Vec<InstanceMask>,
}

/// Simulator events sorted by tick.
pub fn detect_events(traj: &Trajectory) -> Vec<crate::gridworld::EventRecord> {
    let mut events = traj.events.clone();
    events.sort_by_key(|e| e.tick);
    events
}

/// Re-simulates a trajectory to recover the per-frame instance ids.
///
/// Fails with `CorruptDataset` if the replay does not reproduce the stored frames.
pub fn replay_id_maps(traj: &Trajectory) -> Result<Vec<IdMap>> {
    let (mut state, _) = reset(traj.seed, &traj.scenario)?;
    let mut out = Vec::with_capacity(traj.len());
    for (t, obs) in traj.observations.iter().enumerate() {
        let (rendered, ids) = render_with_ids(&state);
        if &rendered != obs {
            return Err(Error::CorruptDataset(format!(
                "trajectory {}: replay diverges at frame {t}",
                traj.id
            )));
        }
        out.push(ids);
        if t + 1 < traj.len() {
            state.step(traj.actions[t])?;
        }
    }
    Ok(out)
}

/// Starts a tracker on the object at the aim point of `frame`, or on the
/// object pixel nearest to it within a radius of a quarter frame height.
pub fn identify_target(
    frame: Frame<'_>,
    aim: (usize, usize),
    variant: TrackerVariant,
) -> Result<Option<TrackerState>> {
    let obs = frame.obs;
    let is_object = |x: usize, y: usize| match (variant, frame.ids) {
        (TrackerVariant::Iou, _) | (_, None) => is_object_color(obs.pixel(x, y)),
        (_, Some(ids)) => {
            let id = ids.at(x, y);
            id != NO_OBJECT && id != AGENT_PIXEL_ID
        }
    };
    let radius = (obs.height / 4) as i64;
    let (ax, ay) = (aim.0 as i64, aim.1 as i64);
    let mut best: Option<((usize, usize), i64)> = None;
    for y in (ay - radius).max(0)..=(ay + radius).min(obs.height as i64 - 1) {
        for x in (ax - radius).max(0)..=(ax + radius).min(obs.width as i64 - 1) {
            let d = (x - ax).pow(2) + (y - ay).pow(2);
            if d <= radius * radius
                && best.is_none_or(|(_, bd)| d < bd)
                && is_object(x as usize, y as usize)
            {
                best = Some(((x as usize, y as usize), d));
            }
        }
    }
    let Some((point, _)) = best else {
        return Ok(None);
    };
    let st = TrackerState::init_from_point(variant, frame, point, Direction::Backward)?;
    Ok((!st.lost).then_some(st))
}

/// Masks for frames `end + 1 - len ..= end` (clipped at 0), tracking backward
/// from a tracker initialised on `end`.
pub fn backward_track(
    frames: Frames<'_>,
    end: usize,
    len: usize,
    mut tracker: TrackerState,
) -> Vec<InstanceMask> {
    let start = (end + 1).saturating_sub(len);
    let mut masks = vec![tracker.current_mask.clone()];
    for t in (start..end).rev() {
        masks.push(tracker.propagate(frames.frame(t)));
    }
    masks.reverse();
    masks
}

/// One segment per event whose target could be identified, in tick order.
pub fn event_segments(
    traj: &Trajectory,
    frames: Frames<'_>,
    cfg: &RelabelConfig,
) -> Result<Vec<LabeledSegment>> {
    let mut out = Vec::new();
    for ev in detect_events(traj) {
        if ev.tick == 0 || ev.tick as usize > traj.len() {
            warn!(
                "{}: event at tick {} outside trajectory, skipped",
                traj.id, ev.tick
            );
            continue;
        }
        let end = ev.tick as usize - 1;
        let aim = aim_point(traj.meta[end].pose.facing);
        let Some(mut tracker) = identify_target(frames.frame(end), aim, cfg.tracker)? else {
            warn!(
                "{}: no object near aim point for {} at tick {}",
                traj.id, ev.interaction, ev.tick
            );
            continue;
        };
        // Identity check: the segmented object must be the one the event names.
        let identified = match cfg.tracker {
            TrackerVariant::Iou => traj.meta[end].faced,
            _ => tracker.target(),
        };
        if identified != Some(ev.object_id) {
            warn!(
                "{}: aim point at tick {} shows {:?}, event names {}; skipped",
                traj.id, ev.tick, identified, ev.object_id
            );
            continue;
        }
        tracker.set_label(ev.object_id);
        let masks = backward_track(frames, end, cfg.window_k, tracker);
        out.push(LabeledSegment {
            interaction: ev.interaction,
            object_id: ev.object_id,
            start: end + 1 - masks.len(),
            end,
            masks,
        });
    }
    Ok(out)
}

/// Segments where the agent moved at least `nav_threshold` tiles across
/// `nav_window` frames (fewer near the start) with no event in between,
/// targeting whatever it faces at the end of the stretch.
pub fn relabel_navigate(
    traj: &Trajectory,
    frames: Frames<'_>,
    cfg: &RelabelConfig,
) -> Result<Vec<LabeledSegment>> {
    let n = traj.len();
    let w = cfg.nav_window;
    let mut event_frame = vec![false; n];
    for ev in &traj.events {
        if ev.tick >= 1 && ev.tick as usize <= n {
            event_frame[ev.tick as usize - 1] = true;
        }
    }
    // Windows are clipped at the trajectory start, so short episodes still count.
    let window_start = |e: usize| (e + 1).saturating_sub(w);
    let qualifies = |e: usize| {
        let s = window_start(e);
        traj.meta[s].pose.pos.manhattan(traj.meta[e].pose.pos) >= cfg.nav_threshold
            && !event_frame[s..=e].iter().any(|f| *f)
    };
    let mut out = Vec::new();
    let mut e = 0;
    while e < n {
        if !qualifies(e) {
            e += 1;
            continue;
        }
        let first = e;
        while e + 1 < n && qualifies(e + 1) {
            e += 1;
        }
        let (start, end) = (window_start(first), e);
        e += 1;
        let Some(faced) = traj.meta[end].faced else {
            debug!("{}: movement ending at frame {end} faces nothing", traj.id);
            continue;
        };
        let aim = aim_point(traj.meta[end].pose.facing);
        let Some(mut tracker) = identify_target(frames.frame(end), aim, cfg.tracker)? else {
            continue;
        };
        if cfg.tracker != TrackerVariant::Iou && tracker.target() != Some(faced) {
            continue;
        }
        tracker.set_label(faced);
        let masks = backward_track(frames, end, end - start + 1, tracker);
        out.push(LabeledSegment {
            interaction: InteractionType::Navigate,
            object_id: faced,
            start,
            end,
            masks,
        });
    }
    Ok(out)
}

/// Per-frame labels. Event segments are applied in tick order and never
/// overwrite an earlier event's frames, so each frame is labeled with the next
/// upcoming interaction; navigate segments fill only frames no event claimed.
/// Frames whose mask is empty carry the null type.
pub fn relabel_with(
    traj: &Trajectory,
    frames: Frames<'_>,
    cfg: &RelabelConfig,
) -> Result<Vec<FrameLabel>> {
    cfg.validate()?;
    traj.validate()?;
    let (w, h) = traj
        .observations
        .first()
        .map(|o| (o.width, o.height))
        .unwrap_or((crate::gridworld::OBS_SIZE, crate::gridworld::OBS_SIZE));
    let mut labels = vec![FrameLabel::null(w, h); traj.len()];
    let mut claimed = vec![false; traj.len()];
    let events = event_segments(traj, frames, cfg)?;
    let mut apply = |segs: Vec<LabeledSegment>, claimed: &mut Vec<bool>| {
        for seg in segs {
            for (i, mask) in seg.masks.into_iter().enumerate() {
                let t = seg.start + i;
                if claimed[t] {
                    continue;
                }
                claimed[t] = true;
                if !mask.is_empty() {
                    labels[t] = FrameLabel {
                        mask,
                        interaction: seg.interaction,
                    };
                }
            }
        }
    };
    apply(events, &mut claimed);
    apply(relabel_navigate(traj, frames, cfg)?, &mut claimed);
    Ok(labels)
}

/// Labels a raw trajectory. The oracle and `none` trackers recover instance
/// ids by replaying the episode; the IoU tracker uses pixels only.
pub fn relabel(traj: &Trajectory, cfg: &RelabelConfig) -> Result<Trajectory> {
    let ids = match cfg.tracker {
        TrackerVariant::Iou => None,
        _ => Some(replay_id_maps(traj)?),
    };
    let frames = Frames {
        obs: &traj.observations,
        ids: ids.as_deref(),
    };
    let labels = relabel_with(traj, frames, cfg)?;
    let mut out = traj.clone();
    out.labels = Some(labels);
    Ok(out)
}
