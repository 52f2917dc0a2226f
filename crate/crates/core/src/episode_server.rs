//! Live episodes over TCP.
//!
//! Every message is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. The server speaks first with `hello` and a `frame` for tick 0.
//! A frame for tick `N` carries the observation the policy will act on at `N`
//! and the overlay it will be fed if no prompt arrives first. Prompts are
//! acknowledged with the tick they take effect on, which is always the next
//! tick executed. Frames are sent through a bounded queue that drops the
//! oldest frame when a client falls behind; control replies are never dropped.

use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::agent_loop::{save_traces, Episode, EpisodeConfig, EpisodeResult};
use crate::error::{config, Error, Result};
use crate::gridworld::{EventRecord, InteractionType, ObjectId, Observation};
use crate::harness::{task as find_task, TaskSpec};
use crate::policy::Policy;
use crate::reasoner::{Outcome, PromptEvent, PromptSource};
use crate::trajectory::rle_encode;

pub const PROTOCOL: &str = "gridrocket-episode-v1";

/// Largest accepted message body in either direction.
pub const MAX_MESSAGE_BYTES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Point in observation pixels, `[x, y]`, and an interaction type code.
    Prompt {
        point: [i64; 2],
        interaction: u8,
    },
    Clear,
    Pause,
    Resume,
    Reset {
        task: String,
        seed: u64,
    },
}

impl ClientMessage {
    fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Prompt { .. } => "prompt",
            ClientMessage::Clear => "clear",
            ClientMessage::Pause => "pause",
            ClientMessage::Resume => "resume",
            ClientMessage::Reset { .. } => "reset",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Live,
    Paused,
    Ended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol: String,
        task: String,
        seed: u64,
        width: usize,
        height: usize,
        tick_rate: f64,
        max_ticks: u64,
    },
    Frame {
        tick: u64,
        png_base64: String,
        /// Runs of set pixels as (start, length) over the row-major mask.
        mask_rle: Vec<(u32, u32)>,
        mask_object: Option<ObjectId>,
        interaction: InteractionType,
        /// Events produced by the step that led to this frame.
        event_list: Vec<EventRecord>,
        status: Status,
    },
    Ack {
        of: String,
        /// Tick on which the message takes effect.
        tick: u64,
    },
    Error {
        code: String,
        message: String,
    },
    Ended {
        outcome: Outcome,
        ticks: u64,
    },
}

impl ServerMessage {
    fn error(code: &str, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn is_frame(&self) -> bool {
        matches!(self, ServerMessage::Frame { .. })
    }
}

/// Writes one length-prefixed message.
pub fn write_message<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_MESSAGE_BYTES {
        return Err(Error::Protocol(format!(
            "message of {} bytes exceeds the limit",
            body.len()
        )));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one message body. `Ok(None)` on a clean end of stream before a
/// length prefix. Oversized bodies are skipped and reported as a protocol
/// error, leaving the stream positioned at the next message.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_MESSAGE_BYTES {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Err(Error::Protocol(format!(
            "message of {len} bytes exceeds the limit"
        )));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Reads and decodes one message.
pub fn read_message<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<Option<T>> {
    match read_frame(r)? {
        None => Ok(None),
        Some(body) => Ok(Some(serde_json::from_slice(&body)?)),
    }
}

/// PNG bytes of an observation.
pub fn encode_png(obs: &Observation) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, obs.width as u32, obs.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Protocol(format!("png encoding: {e}")))?;
    writer
        .write_image_data(&obs.rgb)
        .map_err(|e| Error::Protocol(format!("png encoding: {e}")))?;
    writer
        .finish()
        .map_err(|e| Error::Protocol(format!("png encoding: {e}")))?;
    Ok(out)
}

struct OutboxState {
    queue: VecDeque<ServerMessage>,
    closed: bool,
    dropped: u64,
}

/// Send queue between the session loop and the socket writer. Holds at most
/// `max_frames` frames; pushing another drops the oldest queued frame.
pub struct Outbox {
    state: Mutex<OutboxState>,
    ready: Condvar,
    max_frames: usize,
}

impl Outbox {
    pub fn new(max_frames: usize) -> Self {
        Self {
            state: Mutex::new(OutboxState {
                queue: VecDeque::new(),
                closed: false,
                dropped: 0,
            }),
            ready: Condvar::new(),
            max_frames: max_frames.max(1),
        }
    }

    pub fn push(&self, msg: ServerMessage) {
        let mut st = self.state.lock().expect("outbox lock");
        if st.closed {
            return;
        }
        if msg.is_frame() {
            let frames = st.queue.iter().filter(|m| m.is_frame()).count();
            if frames >= self.max_frames {
                if let Some(i) = st.queue.iter().position(ServerMessage::is_frame) {
                    st.queue.remove(i);
                    st.dropped += 1;
                }
            }
        }
        st.queue.push_back(msg);
        self.ready.notify_one();
    }

    /// Blocks until a message is queued; `None` once closed and drained.
    pub fn pop(&self) -> Option<ServerMessage> {
        let mut st = self.state.lock().expect("outbox lock");
        loop {
            if let Some(m) = st.queue.pop_front() {
                return Some(m);
            }
            if st.closed {
                return None;
            }
            st = self.ready.wait(st).expect("outbox lock");
        }
    }

    /// Wakes the writer; messages already queued are still delivered.
    pub fn close(&self) {
        self.state.lock().expect("outbox lock").closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("outbox lock").closed
    }

    /// Frames discarded so far because the client fell behind.
    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("outbox lock").dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("outbox lock").queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub tick_rate: f64,
    pub start_paused: bool,
    pub episode: EpisodeConfig,
    /// Finished and aborted episodes are written here as line-delimited traces.
    pub trace_dir: Option<PathBuf>,
    pub max_queued_frames: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            tick_rate: 10.0,
            start_paused: false,
            episode: EpisodeConfig::default(),
            trace_dir: None,
            max_queued_frames: 8,
        }
    }
}

/// Episodes played during one client session.
#[derive(Clone, Debug, Default)]
pub struct SessionReport {
    pub episodes: Vec<EpisodeResult>,
    pub trace_files: Vec<PathBuf>,
    pub dropped_frames: u64,
}

enum Incoming {
    Message(ClientMessage),
    Invalid { code: &'static str, message: String },
    Closed,
}

fn reader_loop(stream: TcpStream, tx: mpsc::Sender<Incoming>) {
    let mut r = BufReader::new(stream);
    loop {
        let item = match read_frame(&mut r) {
            Ok(None) => Incoming::Closed,
            Ok(Some(body)) => match serde_json::from_slice::<ClientMessage>(&body) {
                Ok(m) => Incoming::Message(m),
                Err(e) => Incoming::Invalid {
                    code: "malformed",
                    message: e.to_string(),
                },
            },
            Err(Error::Protocol(msg)) => Incoming::Invalid {
                code: "too_large",
                message: msg,
            },
            Err(_) => Incoming::Closed,
        };
        let closed = matches!(item, Incoming::Closed);
        if tx.send(item).is_err() || closed {
            return;
        }
    }
}

fn writer_loop(stream: TcpStream, outbox: Arc<Outbox>) {
    let mut w = BufWriter::new(stream);
    while let Some(msg) = outbox.pop() {
        if let Err(e) = write_message(&mut w, &msg) {
            debug!("writer stopped: {e}");
            outbox.close();
            return;
        }
    }
}

pub struct EpisodeServer {
    listener: TcpListener,
    policy: Arc<Policy>,
    task: TaskSpec,
    seed: u64,
    cfg: ServerConfig,
    sessions: u64,
}

impl EpisodeServer {
    pub fn bind<A: ToSocketAddrs>(
        addr: A,
        policy: Arc<Policy>,
        task: TaskSpec,
        seed: u64,
        cfg: ServerConfig,
    ) -> Result<Self> {
        if !(cfg.tick_rate.is_finite() && cfg.tick_rate > 0.0) {
            return Err(config("tick_rate must be a positive number"));
        }
        if cfg.episode.prompt_interval == 0 {
            return Err(config("prompt_interval must be positive"));
        }
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            policy,
            task,
            seed,
            cfg,
            sessions: 0,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts one client and runs its session to disconnect.
    pub fn serve_one(&mut self) -> Result<SessionReport> {
        let (stream, peer) = self.listener.accept()?;
        self.run_session(stream, peer)
    }

    fn run_session(&mut self, stream: TcpStream, peer: SocketAddr) -> Result<SessionReport> {
        self.sessions += 1;
        info!("session {} from {peer}", self.sessions);
        let session = Session {
            policy: &self.policy,
            cfg: &self.cfg,
            id: self.sessions,
        };
        session.run(stream, self.task.clone(), self.seed)
    }

    /// Serves clients one after another until accepting fails.
    pub fn serve_forever(&mut self) -> Result<()> {
        loop {
            let (stream, peer) = self.listener.accept()?;
            match self.run_session(stream, peer) {
                Ok(r) => info!(
                    "session from {peer} ended after {} episode(s)",
                    r.episodes.len()
                ),
                Err(e) => warn!("session from {peer} failed: {e}"),
            }
        }
    }
}

struct Session<'a> {
    policy: &'a Policy,
    cfg: &'a ServerConfig,
    id: u64,
}

impl Session<'_> {
    fn run(&self, stream: TcpStream, mut task: TaskSpec, mut seed: u64) -> Result<SessionReport> {
        stream.set_nodelay(true)?;
        let outbox = Arc::new(Outbox::new(self.cfg.max_queued_frames));
        let (tx, rx) = mpsc::channel();
        let reader = {
            let s = stream.try_clone()?;
            thread::spawn(move || reader_loop(s, tx))
        };
        let writer = {
            let s = stream.try_clone()?;
            let ob = Arc::clone(&outbox);
            thread::spawn(move || writer_loop(s, ob))
        };
        let mut report = SessionReport::default();
        let mut paused = self.cfg.start_paused;
        let result = loop {
            match self.play(&task, seed, &mut paused, &rx, &outbox, &mut report) {
                Ok(Some((t, s))) => {
                    task = t;
                    seed = s;
                }
                Ok(None) => break Ok(()),
                Err(e) => break Err(e),
            }
        };
        outbox.close();
        let _ = stream.shutdown(std::net::Shutdown::Both);
        let _ = writer.join();
        let _ = reader.join();
        report.dropped_frames = outbox.dropped();
        result.map(|_| report)
    }

    fn frame(ep: &Episode<'_>, events: Vec<EventRecord>, status: Status) -> Result<ServerMessage> {
        let (mask, interaction) = ep.preview();
        let png = encode_png(ep.observation())?;
        Ok(ServerMessage::Frame {
            tick: ep.tick(),
            png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            mask_rle: rle_encode(&mask),
            mask_object: mask.object_id.filter(|_| !mask.is_empty()),
            interaction,
            event_list: events,
            status,
        })
    }

    fn end(&self, ep: Episode<'_>, n: usize, report: &mut SessionReport) -> Result<()> {
        let res = ep.finish();
        if let Some(dir) = &self.cfg.trace_dir {
            let path = dir.join(format!(
                "session{:03}-{n:02}-{}-{}.jsonl",
                self.id, res.task, res.seed
            ));
            save_traces(&path, std::slice::from_ref(&res.trace))?;
            report.trace_files.push(path);
        }
        report.episodes.push(res);
        Ok(())
    }

    /// Plays one episode. Returns the next (task, seed) on reset, `None` on disconnect.
    fn play(
        &self,
        task: &TaskSpec,
        seed: u64,
        paused: &mut bool,
        rx: &Receiver<Incoming>,
        outbox: &Outbox,
        report: &mut SessionReport,
    ) -> Result<Option<(TaskSpec, u64)>> {
        let n = report.episodes.len();
        let mut ep = Episode::new(task, seed, self.policy, &self.cfg.episode)?;
        let period = Duration::from_secs_f64(1.0 / self.cfg.tick_rate);
        let status = |paused: bool| if paused { Status::Paused } else { Status::Live };
        outbox.push(ServerMessage::Hello {
            protocol: PROTOCOL.to_string(),
            task: task.name.clone(),
            seed,
            width: ep.observation().width,
            height: ep.observation().height,
            tick_rate: self.cfg.tick_rate,
            max_ticks: ep.max_ticks(),
        });
        outbox.push(Self::frame(&ep, Vec::new(), status(*paused))?);
        let mut pending: Option<PromptEvent> = None;
        let mut next_tick = Instant::now() + period;
        loop {
            let ended = ep.is_done();
            let incoming = if *paused || ended || outbox.is_closed() {
                if outbox.is_closed() {
                    Incoming::Closed
                } else {
                    rx.recv().unwrap_or(Incoming::Closed)
                }
            } else {
                match rx.recv_timeout(next_tick.saturating_duration_since(Instant::now())) {
                    Ok(m) => m,
                    Err(RecvTimeoutError::Timeout) => {
                        let rec = ep.step(pending.take())?;
                        let events = rec.events.clone();
                        let st = if ep.is_done() {
                            Status::Ended
                        } else {
                            Status::Live
                        };
                        outbox.push(Self::frame(&ep, events, st)?);
                        if let Some(outcome) = ep.outcome() {
                            outbox.push(ServerMessage::Ended {
                                outcome: outcome.clone(),
                                ticks: ep.tick(),
                            });
                        }
                        next_tick = (next_tick + period).max(Instant::now());
                        continue;
                    }
                    Err(RecvTimeoutError::Disconnected) => Incoming::Closed,
                }
            };
            let msg = match incoming {
                Incoming::Closed => {
                    ep.abort();
                    self.end(ep, n, report)?;
                    return Ok(None);
                }
                Incoming::Invalid { code, message } => {
                    outbox.push(ServerMessage::error(code, message));
                    continue;
                }
                Incoming::Message(m) => m,
            };
            let kind = msg.kind();
            match msg {
                ClientMessage::Prompt { point, interaction } => {
                    let obs = ep.observation();
                    let Some(interaction) = InteractionType::from_code(interaction) else {
                        outbox.push(ServerMessage::error(
                            "bad_interaction",
                            format!("unknown interaction code {interaction}"),
                        ));
                        continue;
                    };
                    let [x, y] = point;
                    if x < 0 || y < 0 || x as usize >= obs.width || y as usize >= obs.height {
                        outbox.push(ServerMessage::error(
                            "bad_point",
                            format!(
                                "point ({x}, {y}) outside the {}x{} frame",
                                obs.width, obs.height
                            ),
                        ));
                        continue;
                    }
                    if ended {
                        outbox.push(ServerMessage::error(
                            "ended",
                            "episode has ended; send reset",
                        ));
                        continue;
                    }
                    pending = Some(PromptEvent {
                        frame_index: ep.tick(),
                        point: Some((x as usize, y as usize)),
                        interaction,
                        source: PromptSource::External,
                    });
                }
                ClientMessage::Clear => {
                    if !ended {
                        pending = Some(PromptEvent::clear(ep.tick(), PromptSource::External));
                    }
                }
                ClientMessage::Pause => *paused = true,
                ClientMessage::Resume => {
                    if *paused {
                        *paused = false;
                        next_tick = Instant::now() + period;
                    }
                }
                ClientMessage::Reset { task: name, seed } => match find_task(&name) {
                    Ok(next) => {
                        outbox.push(ServerMessage::Ack {
                            of: kind.to_string(),
                            tick: ep.tick(),
                        });
                        if !ended {
                            ep.abort();
                            outbox.push(ServerMessage::Ended {
                                outcome: Outcome::Aborted,
                                ticks: ep.tick(),
                            });
                        }
                        self.end(ep, n, report)?;
                        return Ok(Some((next, seed)));
                    }
                    Err(e) => {
                        outbox.push(ServerMessage::error("unknown_task", e.to_string()));
                        continue;
                    }
                },
            }
            outbox.push(ServerMessage::Ack {
                of: kind.to_string(),
                tick: ep.tick(),
            });
        }
    }
}
