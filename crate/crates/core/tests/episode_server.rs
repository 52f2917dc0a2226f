use std::io::{Cursor, ErrorKind, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use base64::Engine;
use candle_core::DType;
use gridrocket::agent_loop::{load_traces, replay_matches, EpisodeConfig};
use gridrocket::episode_server::{
    read_frame, read_message, write_message, ClientMessage, EpisodeServer, Outbox, ServerConfig,
    ServerMessage, SessionReport, Status, MAX_MESSAGE_BYTES, PROTOCOL,
};
use gridrocket::gridworld::{render, render_with_ids, reset, InteractionType, ObjectId};
use gridrocket::harness::task;
use gridrocket::policy::{Policy, PolicyConfig};
use gridrocket::reasoner::Outcome;
use gridrocket::Error;
use proptest::prelude::*;

const SEED: u64 = 7;

fn tiny_policy() -> Arc<Policy> {
    let cfg = PolicyConfig {
        patch_dim: 8,
        hidden_dim: 16,
        pool_heads: 2,
        transformer_blocks: 1,
        heads: 2,
        context_len: 16,
        ..PolicyConfig::default()
    };
    Arc::new(Policy::new(&cfg, 3, DType::F32).unwrap())
}

struct Harness {
    client: TcpStream,
    server: JoinHandle<gridrocket::Result<SessionReport>>,
}

fn start(cfg: ServerConfig) -> Harness {
    let mut server = EpisodeServer::bind(
        "127.0.0.1:0",
        tiny_policy(),
        task("hunt_right_sheep").unwrap(),
        SEED,
        cfg,
    )
    .unwrap();
    let addr = server.local_addr().unwrap();
    let handle = thread::spawn(move || server.serve_one());
    let client = TcpStream::connect(addr).unwrap();
    client
        .set_read_timeout(Some(Duration::from_secs(20)))
        .unwrap();
    Harness {
        client,
        server: handle,
    }
}

fn paused(trace_dir: Option<&Path>) -> ServerConfig {
    ServerConfig {
        start_paused: true,
        tick_rate: 50.0,
        trace_dir: trace_dir.map(Path::to_path_buf),
        ..ServerConfig::default()
    }
}

impl Harness {
    fn send(&mut self, msg: &ClientMessage) {
        write_message(&mut self.client, msg).unwrap();
    }

    fn send_raw(&mut self, body: &[u8]) {
        self.client
            .write_all(&(body.len() as u32).to_be_bytes())
            .unwrap();
        self.client.write_all(body).unwrap();
    }

    fn recv(&mut self) -> ServerMessage {
        read_message(&mut self.client)
            .unwrap()
            .expect("server closed the connection")
    }

    /// Skips frames until a non-frame message arrives.
    fn recv_control(&mut self) -> ServerMessage {
        loop {
            let m = self.recv();
            if !matches!(m, ServerMessage::Frame { .. }) {
                return m;
            }
        }
    }

    fn recv_frame(&mut self) -> (u64, Option<ObjectId>, InteractionType, Status, String) {
        loop {
            if let ServerMessage::Frame {
                tick,
                mask_object,
                interaction,
                status,
                png_base64,
                ..
            } = self.recv()
            {
                return (tick, mask_object, interaction, status, png_base64);
            }
        }
    }

    fn expect_ack(&mut self, of: &str) -> u64 {
        match self.recv_control() {
            ServerMessage::Ack { of: got, tick } if got == of => tick,
            other => panic!("expected ack for {of}, got {other:?}"),
        }
    }

    fn expect_error(&mut self, code: &str) {
        match self.recv_control() {
            ServerMessage::Error { code: got, .. } => assert_eq!(got, code),
            other => panic!("expected error {code}, got {other:?}"),
        }
    }

    /// Reads the greeting and the tick-0 frame.
    fn handshake(&mut self) -> (u64, Status, String) {
        match self.recv() {
            ServerMessage::Hello {
                protocol,
                task,
                seed,
                width,
                height,
                ..
            } => {
                assert_eq!(protocol, PROTOCOL);
                assert_eq!(task, "hunt_right_sheep");
                assert_eq!(seed, SEED);
                assert_eq!((width, height), (96, 96));
            }
            other => panic!("expected hello, got {other:?}"),
        }
        let (tick, _, _, status, png) = self.recv_frame();
        (tick, status, png)
    }

    fn finish(self) -> SessionReport {
        drop(self.client);
        self.server.join().unwrap().unwrap()
    }
}

fn decode_png(b64: &str) -> Vec<u8> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .unwrap();
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (96, 96));
    buf.truncate(info.buffer_size());
    buf
}

/// Id and anchor pixel of the sheep in the right pen at reset.
fn right_sheep() -> (ObjectId, (usize, usize)) {
    let t = task("hunt_right_sheep").unwrap();
    let (state, _) = reset(SEED, &t.scenario).unwrap();
    let (_, ids) = render_with_ids(&state);
    let sheep = t.steps[0].target.resolve(&state)[0].id;
    (
        sheep,
        ids.mask_of(sheep)
            .anchor_point()
            .expect("sheep visible at reset"),
    )
}

#[test]
fn greeting_frame_shows_the_reset_observation() {
    let mut h = start(paused(None));
    let (tick, status, png) = h.handshake();
    assert_eq!(tick, 0);
    assert_eq!(status, Status::Paused);
    let (state, _) = reset(SEED, &task("hunt_right_sheep").unwrap().scenario).unwrap();
    assert_eq!(decode_png(&png), render(&state).rgb);
    h.finish();
}

#[test]
fn prompt_on_sheep_shows_up_in_the_next_frame() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = start(paused(Some(dir.path())));
    h.handshake();
    let (sheep, (x, y)) = right_sheep();
    h.send(&ClientMessage::Prompt {
        point: [x as i64, y as i64],
        interaction: InteractionType::Hunt.code(),
    });
    assert_eq!(h.expect_ack("prompt"), 0);
    h.send(&ClientMessage::Resume);
    h.expect_ack("resume");
    let (tick, mask_object, interaction, status, _) = h.recv_frame();
    assert_eq!(tick, 1);
    assert_eq!(mask_object, Some(sheep));
    assert_eq!(interaction, InteractionType::Hunt);
    assert_eq!(status, Status::Live);
    let report = h.finish();
    let first = &report.episodes[0].trace.ticks[0];
    assert_eq!(first.prompt.as_ref().and_then(|p| p.point), Some((x, y)));
    assert_eq!(first.mask_object, Some(sheep));
}

#[test]
fn out_of_frame_point_is_refused_and_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = start(paused(Some(dir.path())));
    h.handshake();
    for point in [[96, 10], [10, 96], [-1, 0], [i64::MAX, 0]] {
        h.send(&ClientMessage::Prompt {
            point,
            interaction: 5,
        });
        h.expect_error("bad_point");
    }
    h.send(&ClientMessage::Prompt {
        point: [10, 10],
        interaction: 200,
    });
    h.expect_error("bad_interaction");
    h.send(&ClientMessage::Resume);
    h.expect_ack("resume");
    let (tick, mask_object, interaction, _, _) = h.recv_frame();
    assert_eq!(
        (tick, mask_object, interaction),
        (1, None, InteractionType::Null)
    );
    let report = h.finish();
    assert!(report.episodes[0].trace.ticks[0].prompt.is_none());
    assert_eq!(report.episodes[0].prompts, 0);
}

#[test]
fn malformed_messages_get_errors_and_the_session_continues() {
    let mut h = start(paused(None));
    h.handshake();
    h.send_raw(b"{not json");
    h.expect_error("malformed");
    h.send_raw(br#"{"type":"warp","speed":9}"#);
    h.expect_error("malformed");
    h.send_raw(br#"{"type":"prompt","point":[1]}"#);
    h.expect_error("malformed");
    h.send_raw(&vec![b' '; MAX_MESSAGE_BYTES + 1]);
    h.expect_error("too_large");
    h.send(&ClientMessage::Pause);
    h.expect_ack("pause");
    h.send(&ClientMessage::Reset {
        task: "no_such_task".into(),
        seed: 1,
    });
    h.expect_error("unknown_task");
    h.send(&ClientMessage::Clear);
    h.expect_ack("clear");
    h.finish();
}

#[test]
fn pause_stops_ticks_and_resume_continues_from_the_same_state() {
    let mut h = start(ServerConfig {
        tick_rate: 100.0,
        ..ServerConfig::default()
    });
    let (_, status, _) = h.handshake();
    assert_eq!(status, Status::Live);
    let mut last = 0;
    for _ in 0..3 {
        let (tick, ..) = h.recv_frame();
        assert!(tick > last);
        last = tick;
    }
    h.send(&ClientMessage::Pause);
    // Frames produced before the pause was handled arrive ahead of its ack.
    loop {
        match h.recv() {
            ServerMessage::Frame { tick, .. } => {
                assert!(tick > last);
                last = tick;
            }
            ServerMessage::Ack { of, tick } => {
                assert_eq!(of, "pause");
                assert_eq!(tick, last);
                break;
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    h.client
        .set_read_timeout(Some(Duration::from_millis(300)))
        .unwrap();
    match read_frame(&mut h.client) {
        Err(Error::Io(e)) => assert!(matches!(
            e.kind(),
            ErrorKind::WouldBlock | ErrorKind::TimedOut
        )),
        other => panic!("expected silence while paused, got {other:?}"),
    }
    h.client
        .set_read_timeout(Some(Duration::from_secs(20)))
        .unwrap();
    h.send(&ClientMessage::Resume);
    assert_eq!(h.expect_ack("resume"), last);
    let (tick, ..) = h.recv_frame();
    assert_eq!(tick, last + 1);
    h.finish();
}

#[test]
fn disconnect_aborts_and_saves_a_replayable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = start(ServerConfig {
        tick_rate: 100.0,
        trace_dir: Some(dir.path().to_path_buf()),
        ..ServerConfig::default()
    });
    h.handshake();
    let (_, (x, y)) = right_sheep();
    h.send(&ClientMessage::Prompt {
        point: [x as i64, y as i64],
        interaction: 5,
    });
    while h.recv_frame().0 < 10 {}
    let report = h.finish();
    assert_eq!(report.episodes.len(), 1);
    let ep = &report.episodes[0];
    assert_eq!(ep.outcome, Outcome::Aborted);
    assert!(ep.ticks >= 10);
    assert_eq!(ep.prompts, 1);
    assert_eq!(report.trace_files.len(), 1);
    let traces = load_traces(&report.trace_files[0]).unwrap();
    assert_eq!(traces.len(), 1);
    assert_eq!(traces[0], ep.trace);
    assert!(replay_matches(&traces[0]).unwrap());
}

#[test]
fn reset_starts_a_new_episode_and_keeps_the_old_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = start(paused(Some(dir.path())));
    h.handshake();
    h.send(&ClientMessage::Resume);
    h.expect_ack("resume");
    while h.recv_frame().0 < 3 {}
    h.send(&ClientMessage::Reset {
        task: "mine_north_ore".into(),
        seed: 11,
    });
    h.expect_ack("reset");
    match h.recv_control() {
        ServerMessage::Ended { outcome, .. } => assert_eq!(outcome, Outcome::Aborted),
        other => panic!("expected ended, got {other:?}"),
    }
    match h.recv_control() {
        ServerMessage::Hello { task, seed, .. } => {
            assert_eq!((task.as_str(), seed), ("mine_north_ore", 11))
        }
        other => panic!("expected hello, got {other:?}"),
    }
    let (tick, _, _, _, png) = h.recv_frame();
    assert_eq!(tick, 0);
    let (state, _) = reset(11, &task("mine_north_ore").unwrap().scenario).unwrap();
    assert_eq!(decode_png(&png), render(&state).rgb);
    let report = h.finish();
    assert_eq!(report.episodes.len(), 2);
    assert_eq!(report.episodes[1].task, "mine_north_ore");
    assert_eq!(report.trace_files.len(), 2);
    for f in &report.trace_files {
        assert!(replay_matches(&load_traces(f).unwrap()[0]).unwrap());
    }
}

#[test]
fn episode_end_is_announced() {
    let mut h = start(ServerConfig {
        tick_rate: 500.0,
        episode: EpisodeConfig {
            max_ticks: Some(5),
            ..EpisodeConfig::default()
        },
        ..ServerConfig::default()
    });
    h.handshake();
    let mut statuses = Vec::new();
    let ended = loop {
        match h.recv() {
            ServerMessage::Frame { tick, status, .. } => statuses.push((tick, status)),
            ServerMessage::Ended { outcome, ticks } => break (outcome, ticks),
            other => panic!("unexpected {other:?}"),
        }
    };
    // A random policy can still hunt the sheep within five ticks in principle,
    // so only the two terminal outcomes are accepted.
    assert!(matches!(
        ended.0,
        Outcome::Timeout | Outcome::Success | Outcome::WrongTarget { .. }
    ));
    let (last_tick, last_status) = *statuses.last().unwrap();
    assert_eq!(last_status, Status::Ended);
    assert_eq!(last_tick, ended.1);
    h.send(&ClientMessage::Prompt {
        point: [1, 1],
        interaction: 5,
    });
    h.expect_error("ended");
    let report = h.finish();
    assert_eq!(report.episodes[0].outcome, ended.0);
}

#[test]
fn slow_clients_lose_old_frames_first() {
    let outbox = Outbox::new(3);
    let frame = |tick| ServerMessage::Frame {
        tick,
        png_base64: String::new(),
        mask_rle: vec![],
        mask_object: None,
        interaction: InteractionType::Null,
        event_list: vec![],
        status: Status::Live,
    };
    outbox.push(frame(0));
    outbox.push(ServerMessage::Ack {
        of: "pause".into(),
        tick: 1,
    });
    for t in 1..10 {
        outbox.push(frame(t));
    }
    assert_eq!(outbox.dropped(), 7);
    outbox.close();
    let mut got = Vec::new();
    while let Some(m) = outbox.pop() {
        got.push(match m {
            ServerMessage::Frame { tick, .. } => format!("f{tick}"),
            ServerMessage::Ack { .. } => "ack".to_string(),
            other => panic!("unexpected {other:?}"),
        });
    }
    assert_eq!(got, ["ack", "f7", "f8", "f9"]);
}

#[test]
fn bad_server_config_is_rejected() {
    for rate in [0.0, -1.0, f64::NAN] {
        let cfg = ServerConfig {
            tick_rate: rate,
            ..ServerConfig::default()
        };
        let r = EpisodeServer::bind(
            "127.0.0.1:0",
            tiny_policy(),
            task("hunt_right_sheep").unwrap(),
            0,
            cfg,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

proptest! {
    #[test]
    fn client_messages_survive_framing(
        x in any::<i64>(), y in any::<i64>(), code in any::<u8>(), seed in any::<u64>(), name in "[a-z_]{0,20}", pick in 0usize..5,
    ) {
        let msg = match pick {
            0 => ClientMessage::Prompt { point: [x, y], interaction: code },
            1 => ClientMessage::Clear,
            2 => ClientMessage::Pause,
            3 => ClientMessage::Resume,
            _ => ClientMessage::Reset { task: name, seed },
        };
        let mut buf = Vec::new();
        write_message(&mut buf, &msg).unwrap();
        write_message(&mut buf, &ClientMessage::Pause).unwrap();
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len + 4 + 4 + br#"{"type":"pause"}"#.len(), buf.len());
        let mut r = Cursor::new(buf);
        prop_assert_eq!(read_message::<_, ClientMessage>(&mut r).unwrap(), Some(msg));
        prop_assert_eq!(read_message::<_, ClientMessage>(&mut r).unwrap(), Some(ClientMessage::Pause));
        prop_assert_eq!(read_message::<_, ClientMessage>(&mut r).unwrap(), None);
    }
}

#[test]
fn wire_format_is_tagged_json() {
    let msg: ClientMessage =
        serde_json::from_str(r#"{"type":"prompt","point":[12,40],"interaction":5}"#).unwrap();
    assert_eq!(
        msg,
        ClientMessage::Prompt {
            point: [12, 40],
            interaction: 5
        }
    );
    let msg: ClientMessage =
        serde_json::from_str(r#"{"type":"reset","task":"hunt_left_sheep","seed":4}"#).unwrap();
    assert_eq!(
        msg,
        ClientMessage::Reset {
            task: "hunt_left_sheep".into(),
            seed: 4
        }
    );
    let ack = serde_json::to_value(ServerMessage::Ack {
        of: "pause".into(),
        tick: 3,
    })
    .unwrap();
    assert_eq!(
        ack,
        serde_json::json!({"type": "ack", "of": "pause", "tick": 3})
    );
    let end = serde_json::to_value(ServerMessage::Ended {
        outcome: Outcome::Timeout,
        ticks: 600,
    })
    .unwrap();
    assert_eq!(
        end,
        serde_json::json!({"type": "ended", "outcome": {"kind": "timeout"}, "ticks": 600})
    );
}
