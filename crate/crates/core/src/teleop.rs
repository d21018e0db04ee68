//! Tele-operation session and its JSON wire messages, independent of the
//! transport.
//!
//! The session ticks at [`TICK_RATE_HZ`]. Every [`DECISION_EVERY`]-th tick is
//! a decision tick: it latches a fresh command (the operator's latest, or the
//! network's in policy mode), records a training example while recording,
//! and applies the command's rotation. Other ticks keep driving at the
//! latched speed without turning, so two ticks cover one decision step.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mapping::{write_dataset, MapParams, TrainingRecord};
use crate::neuralnet::NetworkParams;
use crate::simworld::{
    record_of, spawn_scenario, step, NetworkPolicy, Policy, RobotCommand, ScenarioClass, ScenarioSpec, SimError,
    SimState,
};

pub const TICK_RATE_HZ: f64 = 10.0;
pub const DECISION_EVERY: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Teleop,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordAction {
    Start,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Command { speed: f64, rotation: f64 },
    Record { action: RecordAction },
    Mode { value: Mode },
    Reset { scenario: ScenarioClass, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireDisc {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireWall {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State {
        tick: u64,
        robot: WirePose,
        pedestrians: Vec<WireDisc>,
        goal: WirePoint,
        walls: Vec<WireWall>,
        mode: Mode,
        recording: bool,
    },
    Ack { what: String, records: usize },
    Error { detail: String },
}

impl ServerMessage {
    pub fn error(detail: impl Into<String>) -> Self {
        Self::Error { detail: detail.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("client messages always serialize")
    }
}

/// One tele-operation session: simulator, mode, command latch and recorder.
pub struct Session {
    sim: SimState,
    scenario: ScenarioSpec,
    mode: Mode,
    policy: Option<NetworkPolicy>,
    pending: RobotCommand,
    latched: RobotCommand,
    tick: u64,
    recording: bool,
    records: Vec<TrainingRecord>,
    record_dir: PathBuf,
    flushed: Vec<PathBuf>,
    map: MapParams,
}

impl Session {
    pub fn new(
        scenario: ScenarioSpec,
        params: Option<NetworkParams<f32>>,
        record_dir: impl Into<PathBuf>,
    ) -> Result<Self, SimError> {
        Ok(Self {
            sim: spawn_scenario(&scenario)?,
            scenario,
            mode: Mode::Teleop,
            policy: params.map(NetworkPolicy::new),
            pending: RobotCommand::ZERO,
            latched: RobotCommand::ZERO,
            tick: 0,
            recording: false,
            records: Vec::new(),
            record_dir: record_dir.into(),
            flushed: Vec::new(),
            map: MapParams::default(),
        })
    }

    pub fn sim(&self) -> &SimState {
        &self.sim
    }

    pub fn scenario(&self) -> &ScenarioSpec {
        &self.scenario
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn pending_command(&self) -> RobotCommand {
        self.pending
    }

    /// Dataset files written so far, in order.
    pub fn flushed_files(&self) -> &[PathBuf] {
        &self.flushed
    }

    pub fn tick_dt() -> f64 {
        1.0 / TICK_RATE_HZ
    }

    /// Applies one client text frame and returns the replies.
    pub fn apply_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match ClientMessage::parse(text) {
            Ok(msg) => self.apply(msg),
            Err(e) => vec![ServerMessage::error(format!("malformed message: {e}"))],
        }
    }

    pub fn apply(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Command { speed, rotation } => {
                self.pending = RobotCommand::new(speed, rotation);
                vec![]
            }
            ClientMessage::Record { action: RecordAction::Start } => {
                if self.recording {
                    return vec![ServerMessage::error("already recording")];
                }
                self.recording = true;
                self.records.clear();
                vec![]
            }
            ClientMessage::Record { action: RecordAction::Stop } => {
                if !self.recording {
                    return vec![ServerMessage::error("not recording")];
                }
                vec![self.flush()]
            }
            ClientMessage::Mode { value: Mode::Policy } if self.policy.is_none() => {
                vec![ServerMessage::error("policy mode unavailable: no network parameters loaded")]
            }
            ClientMessage::Mode { value } => {
                self.mode = value;
                vec![]
            }
            ClientMessage::Reset { scenario, seed } => {
                let spec = ScenarioSpec { arena: self.scenario.arena, ..ScenarioSpec::random(scenario, seed) };
                let sim = match spawn_scenario(&spec) {
                    Ok(sim) => sim,
                    Err(e) => return vec![ServerMessage::error(e.to_string())],
                };
                let mut replies = Vec::new();
                if self.recording {
                    replies.push(self.flush());
                }
                self.sim = sim;
                self.scenario = spec;
                self.pending = RobotCommand::ZERO;
                self.latched = RobotCommand::ZERO;
                replies
            }
        }
    }

    /// Stops recording and writes the buffered records. Replies with the
    /// acknowledged count, or an error if the file could not be written.
    fn flush(&mut self) -> ServerMessage {
        self.recording = false;
        let records = std::mem::take(&mut self.records);
        match self.write_records(&records) {
            Ok(path) => {
                self.flushed.push(path);
                ServerMessage::Ack { what: "record_stop".into(), records: records.len() }
            }
            Err(e) => ServerMessage::error(format!("could not write recording: {e}")),
        }
    }

    fn write_records(&self, records: &[TrainingRecord]) -> Result<PathBuf, crate::mapping::DatasetError> {
        std::fs::create_dir_all(&self.record_dir)?;
        let path = next_free_path(&self.record_dir, self.flushed.len());
        write_dataset(&path, records)?;
        Ok(path)
    }

    /// Call when the last client leaves: an active recording is flushed.
    pub fn on_disconnect(&mut self) -> Option<ServerMessage> {
        self.recording.then(|| self.flush())
    }

    /// Advances one tick and returns the state broadcast.
    pub fn tick(&mut self) -> ServerMessage {
        let cmd = if self.tick % DECISION_EVERY == 0 {
            let cmd = match (self.mode, self.policy.as_mut()) {
                (Mode::Policy, Some(p)) => p.command(&self.sim).unwrap_or(RobotCommand::ZERO),
                _ => self.pending,
            };
            self.latched = cmd;
            if self.recording && !self.sim.at_goal() {
                self.records.push(record_of(&self.sim, cmd, &self.map));
            }
            cmd
        } else {
            RobotCommand::new(self.latched.speed(), 0.0)
        };
        self.sim = step(&self.sim, cmd, Self::tick_dt());
        self.tick += 1;
        self.state_message()
    }

    pub fn state_message(&self) -> ServerMessage {
        state_message(&self.sim, self.tick, self.mode, self.recording)
    }
}

fn next_free_path(dir: &Path, start: usize) -> PathBuf {
    (start..)
        .map(|k| dir.join(format!("teleop-{k:04}.crwd")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

pub fn state_message(sim: &SimState, tick: u64, mode: Mode, recording: bool) -> ServerMessage {
    let goal = sim.goal();
    ServerMessage::State {
        tick,
        robot: WirePose { x: sim.robot.x, y: sim.robot.y, theta: sim.robot.theta },
        pedestrians: sim
            .pedestrians
            .iter()
            .map(|p| WireDisc { x: p.position.x, y: p.position.y, r: p.radius })
            .collect(),
        goal: WirePoint { x: goal.x, y: goal.y },
        walls: sim.walls.iter().map(|w| WireWall { x0: w.x0, y0: w.y0, x1: w.x1, y1: w.y1 }).collect(),
        mode,
        recording,
    }
}
