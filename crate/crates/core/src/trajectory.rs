//! Trajectory records, their on-disk dataset format and training chunks.
//!
//! A saved trajectory is a directory:
//!
//! ```text
//! frames.bin     T*H*W*3 bytes, frame-major, row-major, interleaved RGB
//! actions.jsonl  one Action per line
//! meta.jsonl     one FrameMeta per line (agent pose and faced object)
//! events.jsonl   one EventRecord per line
//! masks.jsonl    labeled trajectories only: one RLE mask + type per line
//! manifest.json  written last; its presence marks the dataset complete
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::gridworld::{
    render, reset, Action, AgentPose, EventRecord, InstanceMask, InteractionType, ObjectId,
    Observation, ScenarioSpec, WorldState,
};

pub const FORMAT_VERSION: &str = "gridrocket-traj-v1";
/// Training chunk length; equal to the policy context length.
pub const CHUNK_SIZE: usize = 128;

const MANIFEST: &str = "manifest.json";

/// Simulator metadata recorded alongside each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub pose: AgentPose,
    /// Live entity on the tile the agent faces.
    pub faced: Option<ObjectId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub mask: InstanceMask,
    pub interaction: InteractionType,
}

impl FrameLabel {
    pub fn null(width: usize, height: usize) -> Self {
        Self {
            mask: InstanceMask::empty(width, height),
            interaction: InteractionType::Null,
        }
    }

    pub fn is_null(&self) -> bool {
        self.interaction == InteractionType::Null && self.mask.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub task: Option<String>,
    /// Whether the generating controller completed its task.
    pub success: bool,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub meta: Vec<FrameMeta>,
    pub events: Vec<EventRecord>,
    pub labels: Option<Vec<FrameLabel>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Checks the per-frame length invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.observations.len();
        if self.actions.len() != t || self.meta.len() != t {
            return Err(usage(format!(
                "trajectory {}: {} observations, {} actions, {} meta records",
                self.id,
                t,
                self.actions.len(),
                self.meta.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != t {
                return Err(usage(format!(
                    "trajectory {}: {} labels for {t} frames",
                    self.id,
                    labels.len()
                )));
            }
            for (i, l) in labels.iter().enumerate() {
                if l.interaction == InteractionType::Null && !l.mask.is_empty() {
                    return Err(usage(format!(
                        "trajectory {}: frame {i} has a mask but null type",
                        self.id
                    )));
                }
                if !l.mask.is_empty() && l.mask.object_id.is_none() {
                    return Err(usage(format!(
                        "trajectory {}: frame {i} mask has no object id",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub labeled: bool,
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub task: Option<String>,
    pub success: bool,
}

/// Runs of set pixels as `(start, length)` over the row-major flattened mask.
pub fn rle_encode(mask: &InstanceMask) -> Vec<(u32, u32)> {
    let mut runs = Vec::new();
    let mut i = 0;
    let bits = &mask.bits;
    while i < bits.len() {
        if bits[i] != 0 {
            let start = i;
            while i < bits.len() && bits[i] != 0 {
                i += 1;
            }
            runs.push((start as u32, (i - start) as u32));
        } else {
            i += 1;
        }
    }
    runs
}

pub fn rle_decode(runs: &[(u32, u32)], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut bits = vec![0u8; width * height];
    for &(start, len) in runs {
        let (s, e) = (start as usize, start as usize + len as usize);
        if e > bits.len() {
            return Err(Error::CorruptDataset(format!(
                "mask run {start}+{len} exceeds {}",
                bits.len()
            )));
        }
        bits[s..e].fill(1);
    }
    Ok(bits)
}

#[derive(Serialize, Deserialize)]
struct MaskLine {
    object_id: Option<ObjectId>,
    #[serde(rename = "type")]
    interaction: InteractionType,
    runs: Vec<(u32, u32)>,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f =
        File::open(path).map_err(|e| Error::CorruptDataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::CorruptDataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Writes `traj` under `dir`. The manifest goes last, so an interrupted save
/// never leaves a loadable dataset behind.
pub fn save(traj: &Trajectory, dir: &Path) -> Result<Manifest> {
    traj.validate()?;
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let (height, width) = traj
        .observations
        .first()
        .map(|o| (o.height, o.width))
        .unwrap_or((crate::gridworld::OBS_SIZE, crate::gridworld::OBS_SIZE));
    if traj
        .observations
        .iter()
        .any(|o| o.height != height || o.width != width)
    {
        return Err(usage("observations of mixed sizes"));
    }

    let mut frames = BufWriter::new(File::create(dir.join("frames.bin"))?);
    for o in &traj.observations {
        frames.write_all(&o.rgb)?;
    }
    frames.flush()?;
    drop(frames);
    write_jsonl(&dir.join("actions.jsonl"), &traj.actions)?;
    write_jsonl(&dir.join("meta.jsonl"), &traj.meta)?;
    write_jsonl(&dir.join("events.jsonl"), &traj.events)?;
    if let Some(labels) = &traj.labels {
        write_jsonl(
            &dir.join("masks.jsonl"),
            labels.iter().map(|l| MaskLine {
                object_id: l.mask.object_id,
                interaction: l.interaction,
                runs: rle_encode(&l.mask),
            }),
        )?;
    }

    let manifest = Manifest {
        format: FORMAT_VERSION.to_string(),
        id: traj.id.clone(),
        frames: traj.len(),
        height,
        width,
        labeled: traj.is_labeled(),
        scenario: traj.scenario.clone(),
        seed: traj.seed,
        task: traj.task.clone(),
        success: traj.success,
    };
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, &manifest_path)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST))
        .map_err(|_| Error::CorruptDataset(format!("{}: missing manifest", dir.display())))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::CorruptDataset(format!("{}: bad manifest: {e}", dir.display())))?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => return Err(Error::UnsupportedFormat(other.to_string())),
        None => {
            return Err(Error::CorruptDataset(format!(
                "{}: manifest has no format",
                dir.display()
            )))
        }
    }
    serde_json::from_value(value)
        .map_err(|e| Error::CorruptDataset(format!("{}: bad manifest: {e}", dir.display())))
}

pub fn load(dir: &Path) -> Result<Trajectory> {
    let m = read_manifest(dir)?;
    let frame_bytes = m.height * m.width * 3;
    let mut raw = Vec::new();
    File::open(dir.join("frames.bin"))
        .map_err(|e| Error::CorruptDataset(format!("{}: frames: {e}", dir.display())))?
        .read_to_end(&mut raw)?;
    if raw.len() != m.frames * frame_bytes {
        return Err(Error::CorruptDataset(format!(
            "{}: frames.bin has {} bytes, expected {}",
            dir.display(),
            raw.len(),
            m.frames * frame_bytes
        )));
    }
    let observations: Vec<Observation> = raw
        .chunks_exact(frame_bytes.max(1))
        .take(m.frames)
        .map(|c| Observation {
            width: m.width,
            height: m.height,
            rgb: c.to_vec(),
        })
        .collect();
    let actions: Vec<Action> = read_jsonl(&dir.join("actions.jsonl"))?;
    let meta: Vec<FrameMeta> = read_jsonl(&dir.join("meta.jsonl"))?;
    let events: Vec<EventRecord> = read_jsonl(&dir.join("events.jsonl"))?;
    if actions.len() != m.frames || meta.len() != m.frames {
        return Err(Error::CorruptDataset(format!(
            "{}: {} actions and {} meta records for {} frames",
            dir.display(),
            actions.len(),
            meta.len(),
            m.frames
        )));
    }
    let labels = if m.labeled {
        let lines: Vec<MaskLine> = read_jsonl(&dir.join("masks.jsonl"))?;
        if lines.len() != m.frames {
            return Err(Error::CorruptDataset(format!(
                "{}: {} masks for {} frames",
                dir.display(),
                lines.len(),
                m.frames
            )));
        }
        let labels = lines
            .into_iter()
            .map(|l| {
                Ok(FrameLabel {
                    mask: InstanceMask {
                        width: m.width,
                        height: m.height,
                        bits: rle_decode(&l.runs, m.width, m.height)?,
                        object_id: l.object_id,
                    },
                    interaction: l.interaction,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    Ok(Trajectory {
        id: m.id,
        scenario: m.scenario,
        seed: m.seed,
        task: m.task,
        success: m.success,
        observations,
        actions,
        meta,
        events,
        labels,
    })
}

/// Saves each trajectory into its own subdirectory named after its id.
pub fn save_dataset(dir: &Path, trajectories: &[Trajectory]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in trajectories {
        save(t, &dir.join(&t.id))?;
    }
    Ok(())
}

/// Subdirectories of `dir` holding a manifest, sorted by name.
pub fn dataset_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() && p.join(MANIFEST).exists() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Trajectory>> {
    dataset_entries(dir)?.iter().map(|p| load(p)).collect()
}

/// A contiguous window of a labeled trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Chunk<'a> {
    pub trajectory: &'a Trajectory,
    pub start: usize,
    pub len: usize,
}

impl<'a> Chunk<'a> {
    pub fn trajectory_id(&self) -> &'a str {
        &self.trajectory.id
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    pub fn observations(&self) -> &'a [Observation] {
        &self.trajectory.observations[self.range()]
    }

    pub fn actions(&self) -> &'a [Action] {
        &self.trajectory.actions[self.range()]
    }

    pub fn labels(&self) -> &'a [FrameLabel] {
        &self
            .trajectory
            .labels
            .as_ref()
            .expect("chunks are built from labeled trajectories")[self.range()]
    }
}

/// Splits a labeled trajectory into consecutive non-overlapping chunks of at
/// most `size` frames; only the last one may be shorter.
pub fn chunk(traj: &Trajectory, size: usize) -> Result<Vec<Chunk<'_>>> {
    if !traj.is_labeled() {
        return Err(usage(format!("trajectory {} is not labeled", traj.id)));
    }
    if size == 0 {
        return Err(usage("chunk size must be positive"));
    }
    Ok((0..traj.len())
        .step_by(size)
        .map(|start| Chunk {
            trajectory: traj,
            start,
            len: size.min(traj.len() - start),
        })
        .collect())
}

/// Accumulates frames of an episode as it is played.
pub struct Recorder {
    traj: Trajectory,
}

impl Recorder {
    pub fn new(
        id: impl Into<String>,
        seed: u64,
        scenario: ScenarioSpec,
        task: Option<String>,
    ) -> Self {
        Self {
            traj: Trajectory {
                id: id.into(),
                scenario,
                seed,
                task,
                success: false,
                observations: Vec::new(),
                actions: Vec::new(),
                meta: Vec::new(),
                events: Vec::new(),
                labels: None,
            },
        }
    }

    /// Records the frame `obs` of `state` and the action taken on it.
    pub fn push(&mut self, state: &WorldState, obs: Observation, action: Action) {
        self.traj.observations.push(obs);
        self.traj.actions.push(action);
        self.traj.meta.push(FrameMeta {
            pose: state.agent.pose(),
            faced: state.faced_entity().map(|e| e.id),
        });
    }

    pub fn extend_events(&mut self, events: &[EventRecord]) {
        self.traj.events.extend_from_slice(events);
    }

    pub fn len(&self) -> usize {
        self.traj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj.is_empty()
    }

    pub fn finish(mut self, success: bool) -> Trajectory {
        self.traj.success = success;
        self.traj
    }
}

/// Plays a fixed action script from `reset(seed, scenario)`.
pub fn rollout(
    id: &str,
    seed: u64,
    scenario: &ScenarioSpec,
    actions: &[Action],
) -> Result<Trajectory> {
    let (mut state, mut obs) = reset(seed, scenario)?;
    let mut rec = Recorder::new(id, seed, scenario.clone(), None);
    for &a in actions {
        rec.push(&state, obs, a);
        let events = state.step(a)?;
        rec.extend_events(&events);
        obs = render(&state);
    }
    Ok(rec.finish(true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Dir, Pos, OBS_SIZE};

    pub(crate) fn synthetic(t: usize, labeled: bool) -> Trajectory {
        let pose = AgentPose {
            pos: Pos::new(3, 4),
            facing: Dir::Left,
        };
        Trajectory {
            id: "synthetic".into(),
            scenario: ScenarioSpec::named("empty_field"),
            seed: 1,
            task: None,
            success: true,
            observations: (0..t)
                .map(|i| Observation {
                    width: OBS_SIZE,
                    height: OBS_SIZE,
                    rgb: vec![(i % 251) as u8; OBS_SIZE * OBS_SIZE * 3],
                })
                .collect(),
            actions: vec![Action::NOOP; t],
            meta: vec![FrameMeta { pose, faced: None }; t],
            events: vec![],
            labels: labeled.then(|| vec![FrameLabel::null(OBS_SIZE, OBS_SIZE); t]),
        }
    }

    #[test]
    fn rle_of_empty_mask_is_empty() {
        assert!(rle_encode(&InstanceMask::empty(4, 4)).is_empty());
    }

    #[test]
    fn rle_runs_span_rows() {
        let mut m = InstanceMask::empty(4, 2);
        m.bits = vec![0, 0, 1, 1, 1, 0, 0, 1];
        assert_eq!(rle_encode(&m), vec![(2, 3), (7, 1)]);
        assert_eq!(rle_decode(&[(2, 3), (7, 1)], 4, 2).unwrap(), m.bits);
    }

    #[test]
    fn chunk_boundaries() {
        let lens = |t: usize| -> Vec<usize> {
            let traj = synthetic(t, true);
            chunk(&traj, CHUNK_SIZE)
                .unwrap()
                .iter()
                .map(|c| c.len)
                .collect()
        };
        assert_eq!(lens(128), vec![128]);
        assert_eq!(lens(129), vec![128, 1]);
        assert_eq!(lens(200), vec![128, 72]);
        assert!(lens(0).is_empty());
    }

    #[test]
    fn chunking_unlabeled_is_usage_error() {
        assert!(matches!(
            chunk(&synthetic(5, false), 128),
            Err(Error::Usage(_))
        ));
    }
}
