//! 2D hallway crowd simulator.
//!
//! A unicycle robot drives from one end of a walled hallway to the other
//! among social-force pedestrians. Provides the scripted pilot used to
//! generate demonstrations, closed-loop episode evaluation and recording of
//! training records.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mapping::{render_occupancy, MapParams, Scene, TrainingRecord};
use crate::neuralnet::{predict, NetworkParams, NnError};
use crate::tracking::RobotPose;
use crate::types::{wrap_angle, Disc, Point2, Rect};

pub const ROBOT_RADIUS: f64 = 25.0;
pub const PEDESTRIAN_RADIUS: f64 = 25.0;
/// Distance from the active goal that counts as arrival.
pub const SUCCESS_RADIUS: f64 = 30.0;
/// Decision period in seconds.
pub const DT: f64 = 0.2;

pub const SPEED_MIN: f64 = -50.0;
pub const SPEED_MAX: f64 = 100.0;
pub const ROTATION_LIMIT: f64 = 30.0;

/// Pedestrian relaxation time (s).
pub const TAU: f64 = 0.5;
/// Pedestrian preferred speed (cm/s).
pub const V_PREF: f64 = 130.0;
/// Repulsion strength (cm/s²) and range (cm).
pub const REPULSION_A: f64 = 200.0;
pub const REPULSION_B: f64 = 30.0;
pub const PEDESTRIAN_SPEED_CAP: f64 = 160.0;

pub const CRUISE_SPEED: f64 = 60.0;
/// Pedestrians closer than this (center distance, cm) inside the front cone
/// slow the pilot down and push it aside.
pub const AVOID_RANGE: f64 = 150.0;
pub const CONE_HALF_ANGLE_DEG: f64 = 60.0;
/// Pilot rotation per degree of heading error. Turning gradually leaves more
/// off-goal states in the demonstrations than snapping onto the goal does.
pub const PILOT_HEADING_GAIN: f64 = 0.35;
/// The pilot stops correcting its heading once the heading ray passes this
/// close (cm) to the goal. Driving straight keeps that distance fixed, so an
/// aligned robot in an empty hallway keeps issuing exactly zero rotation.
pub const PILOT_ALIGN_TOLERANCE: f64 = 2.0;

pub const WALL_THICKNESS: f64 = 20.0;
const SPAWN_ATTEMPTS: usize = 1000;
const GROUP_SPREAD: f64 = 100.0;
/// Minimum gap between spawned discs.
const SPAWN_GAP: f64 = 10.0;
/// Largest random offset of the initial robot heading from the goal bearing.
const HEADING_JITTER: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("could only place {placed} of {requested} pedestrians collision-free")]
    Placement { placed: usize, requested: usize },
    #[error("dt must be positive, got {0}")]
    InvalidDt(f64),
    #[error("max_steps must be at least 1")]
    NoSteps,
    #[error(transparent)]
    Policy(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioClass {
    Clear,
    Sparse,
    Crowded,
}

impl ScenarioClass {
    pub const ALL: [ScenarioClass; 3] = [Self::Clear, Self::Sparse, Self::Crowded];
}

impl fmt::Display for ScenarioClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clear => "clear",
            Self::Sparse => "sparse",
            Self::Crowded => "crowded",
        })
    }
}

impl FromStr for ScenarioClass {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clear" => Ok(Self::Clear),
            "sparse" => Ok(Self::Sparse),
            "crowded" => Ok(Self::Crowded),
            other => Err(SimError::InvalidSpec(format!("unknown scenario class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub width: f64,
    pub height: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Self { width: 800.0, height: 500.0 }
    }
}

impl Arena {
    /// Four boundary walls, [`WALL_THICKNESS`] thick, inside the arena.
    pub fn walls(&self) -> Vec<Rect> {
        let (w, h, t) = (self.width, self.height, WALL_THICKNESS);
        vec![
            Rect { x0: 0.0, y0: 0.0, x1: w, y1: t },
            Rect { x0: 0.0, y0: h - t, x1: w, y1: h },
            Rect { x0: 0.0, y0: 0.0, x1: t, y1: h },
            Rect { x0: w - t, y0: 0.0, x1: w, y1: h },
        ]
    }

    /// Start point A near the left wall.
    pub fn goal_a(&self) -> Point2 {
        Point2::new(WALL_THICKNESS + 40.0, self.height / 2.0)
    }

    /// Goal point B near the right wall.
    pub fn goal_b(&self) -> Point2 {
        Point2::new(self.width - WALL_THICKNESS - 40.0, self.height / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub class: ScenarioClass,
    pub pedestrian_count: usize,
    #[serde(default)]
    pub group_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arena: Arena,
}

impl ScenarioSpec {
    pub fn clear(seed: u64) -> Self {
        Self { class: ScenarioClass::Clear, pedestrian_count: 0, group_count: 0, seed, arena: Arena::default() }
    }

    pub fn sparse(count: usize, seed: u64) -> Self {
        Self { class: ScenarioClass::Sparse, pedestrian_count: count, group_count: 0, seed, arena: Arena::default() }
    }

    pub fn crowded(count: usize, groups: usize, seed: u64) -> Self {
        Self { class: ScenarioClass::Crowded, pedestrian_count: count, group_count: groups, seed, arena: Arena::default() }
    }

    /// A spec of `class` with seed-derived counts: sparse 1–4 pedestrians,
    /// crowded 5–10 with 1–2 groups.
    pub fn random(class: ScenarioClass, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_a210);
        match class {
            ScenarioClass::Clear => Self::clear(seed),
            ScenarioClass::Sparse => Self::sparse(rng.random_range(1..=4), seed),
            ScenarioClass::Crowded => Self::crowded(rng.random_range(5..=10), rng.random_range(1..=2), seed),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        let (n, g) = (self.pedestrian_count, self.group_count);
        match self.class {
            ScenarioClass::Clear if n != 0 => return bad("clear scenarios have no pedestrians".into()),
            ScenarioClass::Sparse if !(1..=4).contains(&n) => {
                return bad(format!("sparse scenarios have 1-4 pedestrians, got {n}"))
            }
            ScenarioClass::Crowded if n < 5 || g == 0 => {
                return bad(format!("crowded scenarios need at least 5 pedestrians and a group, got {n}/{g}"))
            }
            _ => {}
        }
        if self.class != ScenarioClass::Crowded && g != 0 {
            return bad("only crowded scenarios have groups".into());
        }
        if 2 * g > n {
            return bad(format!("{g} groups of at least two need more than {n} pedestrians"));
        }
        let min_w = 2.0 * WALL_THICKNESS + 200.0;
        if !(self.arena.width >= min_w && self.arena.height >= 2.0 * WALL_THICKNESS + 4.0 * ROBOT_RADIUS) {
            return bad(format!("arena {}×{} is too small", self.arena.width, self.arena.height));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub position: Point2,
    pub velocity: Point2,
    pub goal: Point2,
    pub radius: f64,
    /// Shared by members of a group.
    pub group: Option<usize>,
}

impl Pedestrian {
    pub fn disc(&self) -> Disc {
        Disc { center: self.position, radius: self.radius }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalSide {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub time: f64,
    pub robot: RobotPose,
    pub robot_speed: f64,
    pub pedestrians: Vec<Pedestrian>,
    pub walls: Vec<Rect>,
    pub goal_a: Point2,
    pub goal_b: Point2,
    pub active_goal: GoalSide,
}

impl SimState {
    pub fn goal(&self) -> Point2 {
        match self.active_goal {
            GoalSide::A => self.goal_a,
            GoalSide::B => self.goal_b,
        }
    }

    pub fn at_goal(&self) -> bool {
        self.robot.position().distance(self.goal()) <= SUCCESS_RADIUS
    }

    /// Smallest robot-to-pedestrian surface gap (negative when overlapping);
    /// infinite without pedestrians.
    pub fn clearance(&self) -> f64 {
        self.pedestrians
            .iter()
            .map(|p| p.position.distance(self.robot.position()) - p.radius - ROBOT_RADIUS)
            .fold(f64::INFINITY, f64::min)
    }
}

/// A speed/rotation command, clamped on construction and stored in `f32`
/// so that recorded labels replay exactly.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RobotCommand {
    speed: f32,
    rotation: f32,
}

impl RobotCommand {
    pub const ZERO: Self = Self { speed: 0.0, rotation: 0.0 };

    /// Clamps to `[-50, 100]` cm/s and `[-30, 30]` degrees; non-finite
    /// values become zero.
    pub fn new(speed: f64, rotation: f64) -> Self {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_finite() { v.clamp(lo, hi) as f32 } else { 0.0 };
        Self {
            speed: fix(speed, SPEED_MIN, SPEED_MAX),
            rotation: fix(rotation, -ROTATION_LIMIT, ROTATION_LIMIT),
        }
    }

    pub fn speed(&self) -> f64 {
        f64::from(self.speed)
    }

    pub fn rotation(&self) -> f64 {
        f64::from(self.rotation)
    }
}

fn inside_any(p: Point2, walls: &[Rect], margin: f64) -> bool {
    walls.iter().any(|w| w.inflated(margin).contains(p))
}

fn free_disc(p: Point2, r: f64, walls: &[Rect]) -> bool {
    !inside_any(p, walls, r)
}

/// Spawns a scenario: robot at A facing roughly toward B, pedestrians placed
/// collision-free in the middle of the hallway heading for its far end.
pub fn spawn_scenario(spec: &ScenarioSpec) -> Result<SimState, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let arena = spec.arena;
    let walls = arena.walls();
    let (goal_a, goal_b) = (arena.goal_a(), arena.goal_b());
    let jitter = rng.random_range(-HEADING_JITTER..=HEADING_JITTER);
    let robot = RobotPose::new(goal_a.x, goal_a.y, (goal_b - goal_a).angle() + jitter);

    let inner = WALL_THICKNESS + PEDESTRIAN_RADIUS;
    let (x_lo, x_hi) = (goal_a.x + 90.0, goal_b.x - 90.0);
    let (y_lo, y_hi) = (inner, arena.height - inner);
    let mid = arena.width / 2.0;
    let far_goal = |x: f64, rng: &mut ChaCha8Rng| {
        let gx = if x < mid { goal_b.x } else { goal_a.x };
        Point2::new(gx, rng.random_range(y_lo + 15.0..=y_hi - 15.0))
    };

    // Group sizes 2-3 while enough pedestrians remain; the rest walk alone.
    let n = spec.pedestrian_count;
    let mut sizes = Vec::new();
    let mut left = n;
    for g in 0..spec.group_count {
        let still_needed = 2 * (spec.group_count - g - 1);
        let size = if left >= 3 + still_needed && rng.random_bool(0.5) { 3 } else { 2 };
        sizes.push(size);
        left -= size;
    }
    sizes.extend(std::iter::repeat_n(1, left));

    let mut peds: Vec<Pedestrian> = Vec::with_capacity(n);
    let clear_of = |p: Point2, peds: &[Pedestrian]| {
        p.distance(robot.position()) >= ROBOT_RADIUS + PEDESTRIAN_RADIUS + 40.0
            && free_disc(p, PEDESTRIAN_RADIUS, &walls)
            && peds.iter().all(|q| q.position.distance(p) >= q.radius + PEDESTRIAN_RADIUS + SPAWN_GAP)
    };
    let mut group_id = 0;
    for size in sizes {
        let group = (size > 1).then(|| {
            group_id += 1;
            group_id - 1
        });
        let first = peds.len();
        let mut goal = None;
        for _ in 0..size {
            let mut placed = false;
            for _ in 0..SPAWN_ATTEMPTS {
                let p = if let Some(leader) = peds.get(first) {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let d = rng.random_range(0.0..=GROUP_SPREAD);
                    leader.position + Point2::new(a.cos(), a.sin()) * d
                } else {
                    Point2::new(rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi))
                };
                let in_region = (x_lo..=x_hi).contains(&p.x) && (y_lo..=y_hi).contains(&p.y);
                let near_group = peds[first..].iter().all(|q| q.position.distance(p) <= GROUP_SPREAD);
                if in_region && near_group && clear_of(p, &peds) {
                    let g = *goal.get_or_insert_with(|| far_goal(p.x, &mut rng));
                    peds.push(Pedestrian { position: p, velocity: Point2::ORIGIN, goal: g, radius: PEDESTRIAN_RADIUS, group });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(SimError::Placement { placed: peds.len(), requested: n });
            }
        }
    }

    Ok(SimState {
        time: 0.0,
        robot,
        robot_speed: 0.0,
        pedestrians: peds,
        walls,
        goal_a,
        goal_b,
        active_goal: GoalSide::B,
    })
}

/// Moves a disc center by `delta`, sliding along walls: full move, else the
/// x component alone, else the y component alone, else stay.
fn slide(from: Point2, delta: Point2, radius: f64, walls: &[Rect]) -> Point2 {
    [delta, Point2::new(delta.x, 0.0), Point2::new(0.0, delta.y)]
        .into_iter()
        .map(|d| from + d)
        .find(|&p| free_disc(p, radius, walls))
        .unwrap_or(from)
}

fn repulsion(at: Point2, r: f64, other: Point2, other_r: f64) -> Point2 {
    let diff = at - other;
    let dist = diff.norm();
    if dist == 0.0 {
        return Point2::ORIGIN;
    }
    let gap = dist - r - other_r;
    diff * (REPULSION_A * (-gap / REPULSION_B).exp() / dist)
}

/// Advances the world by `dt` seconds.
///
/// # Panics
/// If `dt` is not positive and finite.
pub fn step(s: &SimState, cmd: RobotCommand, dt: f64) -> SimState {
    assert!(dt > 0.0 && dt.is_finite(), "dt must be positive, got {dt}");
    let theta = wrap_angle(s.robot.theta + cmd.rotation().to_radians());
    let heading = Point2::new(theta.cos(), theta.sin());
    let pos = slide(s.robot.position(), heading * (cmd.speed() * dt), ROBOT_RADIUS, &s.walls);
    let robot = RobotPose::new(pos.x, pos.y, theta);

    let old_robot = s.robot.position();
    let pedestrians = s
        .pedestrians
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let to_goal = p.goal - p.position;
            let dist = to_goal.norm();
            let desired = if dist > 0.0 { to_goal * (V_PREF / dist) } else { Point2::ORIGIN };
            let mut acc = (desired - p.velocity) * (1.0 / TAU);
            for (j, q) in s.pedestrians.iter().enumerate() {
                if j != i {
                    acc = acc + repulsion(p.position, p.radius, q.position, q.radius);
                }
            }
            acc = acc + repulsion(p.position, p.radius, old_robot, ROBOT_RADIUS);
            let mut v = p.velocity + acc * dt;
            let speed = v.norm();
            if speed > PEDESTRIAN_SPEED_CAP {
                v = v * (PEDESTRIAN_SPEED_CAP / speed);
            }
            let position = slide(p.position, v * dt, p.radius, &s.walls);
            let mut goal = p.goal;
            if position.distance(goal) < SUCCESS_RADIUS {
                // Walk back to the other end of the hallway.
                let mirrored = s.goal_a.x + s.goal_b.x - goal.x;
                goal = Point2::new(mirrored, goal.y);
            }
            Pedestrian { position, velocity: (position - p.position) * (1.0 / dt), goal, ..p.clone() }
        })
        .collect();

    SimState {
        time: s.time + dt,
        robot,
        robot_speed: cmd.speed(),
        pedestrians,
        walls: s.walls.clone(),
        goal_a: s.goal_a,
        goal_b: s.goal_b,
        active_goal: s.active_goal,
    }
}

/// Rule-based demonstrator: turn toward the goal, slow down for and steer
/// away from the most blocking pedestrian in the front cone.
///
/// A pedestrian's weight tapers from 1 dead ahead to 0 at the cone edge, so
/// commands change continuously as pedestrians enter and leave the cone.
pub fn scripted_pilot(s: &SimState) -> RobotCommand {
    let pos = s.robot.position();
    let to_goal = s.goal() - pos;
    let mut goal_error = wrap_angle(to_goal.angle() - s.robot.theta);
    if goal_error.cos() > 0.0 && (to_goal.norm() * goal_error.sin()).abs() < PILOT_ALIGN_TOLERANCE {
        goal_error = 0.0;
    }
    let goal_error = goal_error.to_degrees();

    // (slowdown in [0, 1], avoidance rotation)
    let blocking = s
        .pedestrians
        .iter()
        .filter_map(|p| {
            let d = p.position.distance(pos);
            let rel = wrap_angle((p.position - pos).angle() - s.robot.theta).to_degrees();
            if rel.abs() > CONE_HALF_ANGLE_DEG || d >= AVOID_RANGE {
                return None;
            }
            let w = (std::f64::consts::FRAC_PI_2 * rel / CONE_HALF_ANGLE_DEG).cos();
            let r_sum = ROBOT_RADIUS + p.radius;
            let slowdown = w * (1.0 - ((d - r_sum) / (AVOID_RANGE - r_sum)).clamp(0.0, 1.0));
            // Pedestrian on the left (rel > 0) pushes the robot right; dead
            // ahead turns left.
            let side = if rel > 0.0 { -1.0 } else { 1.0 };
            Some((slowdown, side * ROTATION_LIMIT * w * (1.0 - d / AVOID_RANGE)))
        })
        .max_by(|a, b| a.0.total_cmp(&b.0));

    let (slowdown, avoid) = blocking.unwrap_or((0.0, 0.0));
    let rotation = (PILOT_HEADING_GAIN * goal_error + avoid).clamp(-ROTATION_LIMIT, ROTATION_LIMIT);
    RobotCommand::new(CRUISE_SPEED * (1.0 - slowdown), rotation)
}

/// Anything that can drive the robot.
pub trait Policy {
    fn command(&mut self, s: &SimState) -> Result<RobotCommand, SimError>;
}

impl<F: FnMut(&SimState) -> RobotCommand> Policy for F {
    fn command(&mut self, s: &SimState) -> Result<RobotCommand, SimError> {
        Ok(self(s))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPilot;

impl Policy for ScriptedPilot {
    fn command(&mut self, s: &SimState) -> Result<RobotCommand, SimError> {
        Ok(scripted_pilot(s))
    }
}

/// Drives with a trained network on the rendered occupancy map.
#[derive(Debug, Clone)]
pub struct NetworkPolicy {
    pub params: NetworkParams<f32>,
    pub map: MapParams,
}

impl NetworkPolicy {
    pub fn new(params: NetworkParams<f32>) -> Self {
        Self { params, map: MapParams::default() }
    }
}

impl Policy for NetworkPolicy {
    fn command(&mut self, s: &SimState) -> Result<RobotCommand, SimError> {
        let (map, theta_rel) = render_occupancy(&scene_of(s), &self.map);
        let p = predict(&self.params, &map, theta_rel)?;
        Ok(RobotCommand::new(p.speed, p.rotation))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps_taken: usize,
    /// Robot-pedestrian overlap onsets, counted per pedestrian.
    pub collisions: usize,
    /// Smallest surface gap seen (cm); infinite without pedestrians.
    pub min_clearance: f64,
    /// Poses from the start through the last step (`steps_taken + 1`).
    pub trajectory: Vec<RobotPose>,
    /// Command applied at each step.
    pub commands: Vec<RobotCommand>,
}

fn overlaps(s: &SimState) -> Vec<bool> {
    let r = s.robot.position();
    s.pedestrians
        .iter()
        .map(|p| p.position.distance(r) < p.radius + ROBOT_RADIUS)
        .collect()
}

/// Runs `policy` from `spec` until the robot reaches the goal or `max_steps`
/// steps have been taken. `visit` sees each state and the command chosen in
/// it before the step is applied.
pub fn run_episode_with(
    policy: &mut dyn Policy,
    spec: &ScenarioSpec,
    max_steps: usize,
    dt: f64,
    mut visit: impl FnMut(&SimState, RobotCommand),
) -> Result<EpisodeResult, SimError> {
    if max_steps == 0 {
        return Err(SimError::NoSteps);
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::InvalidDt(dt));
    }
    let mut state = spawn_scenario(spec)?;
    let mut trajectory = vec![state.robot];
    let mut commands = Vec::new();
    let mut touching = overlaps(&state);
    let mut collisions = touching.iter().filter(|&&t| t).count();
    let mut min_clearance = state.clearance();
    let mut success = state.at_goal();
    while !success && commands.len() < max_steps {
        let cmd = policy.command(&state)?;
        visit(&state, cmd);
        state = step(&state, cmd, dt);
        commands.push(cmd);
        trajectory.push(state.robot);
        let now = overlaps(&state);
        collisions += now.iter().zip(&touching).filter(|(n, t)| **n && !**t).count();
        touching = now;
        min_clearance = min_clearance.min(state.clearance());
        success = state.at_goal();
    }
    Ok(EpisodeResult {
        success,
        steps_taken: commands.len(),
        collisions,
        min_clearance,
        trajectory,
        commands,
    })
}

pub fn run_episode(policy: &mut dyn Policy, spec: &ScenarioSpec, max_steps: usize, dt: f64) -> Result<EpisodeResult, SimError> {
    run_episode_with(policy, spec, max_steps, dt, |_, _| {})
}

/// The mapping-module view of a state, targeting the active goal.
pub fn scene_of(s: &SimState) -> Scene {
    Scene {
        robot: s.robot,
        goal: s.goal(),
        pedestrians: s.pedestrians.iter().map(Pedestrian::disc).collect(),
        walls: s.walls.clone(),
    }
}

/// One training record for a state and the command applied in it.
pub fn record_of(s: &SimState, cmd: RobotCommand, params: &MapParams) -> TrainingRecord {
    let (map, theta_rel) = render_occupancy(&scene_of(s), params);
    TrainingRecord {
        map,
        theta_rel: theta_rel as f32,
        speed: cmd.speed,
        rotation: cmd.rotation,
    }
}

/// Runs an episode and emits one record per step taken.
pub fn record_episode(
    policy: &mut dyn Policy,
    spec: &ScenarioSpec,
    max_steps: usize,
    dt: f64,
) -> Result<(Vec<TrainingRecord>, EpisodeResult), SimError> {
    let params = MapParams::default();
    let mut records = Vec::new();
    let result = run_episode_with(policy, spec, max_steps, dt, |s, cmd| records.push(record_of(s, cmd, &params)))?;
    Ok((records, result))
}

/// Replays commands open-loop from the spawn state; returns every pose.
pub fn replay(spec: &ScenarioSpec, commands: &[RobotCommand], dt: f64) -> Result<Vec<RobotPose>, SimError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::InvalidDt(dt));
    }
    let mut state = spawn_scenario(spec)?;
    let mut poses = vec![state.robot];
    for &cmd in commands {
        state = step(&state, cmd, dt);
        poses.push(state.robot);
    }
    Ok(poses)
}

/// Step budget for recorded demonstration episodes.
pub const DEMO_MAX_STEPS: usize = 200;

/// Uniform rotation noise (± degrees) executed on top of the pilot's command
/// in [`pilot_dataset`]. Clean demonstrations almost never leave the heading
/// off-goal, so without it the data holds few corrective turns.
pub const DEMO_ROTATION_NOISE_DEG: f64 = 10.0;

/// Scripted pilot whose executed rotation is perturbed; the clean command of
/// the latest call is left in `clean`.
struct PerturbedPilot<'a> {
    rng: ChaCha8Rng,
    noise_deg: f64,
    clean: &'a std::cell::Cell<RobotCommand>,
}

impl Policy for PerturbedPilot<'_> {
    fn command(&mut self, s: &SimState) -> Result<RobotCommand, SimError> {
        let cmd = scripted_pilot(s);
        self.clean.set(cmd);
        if self.noise_deg == 0.0 {
            return Ok(cmd);
        }
        let noise = self.rng.random_range(-self.noise_deg..=self.noise_deg);
        Ok(RobotCommand::new(cmd.speed(), cmd.rotation() + noise))
    }
}

/// Runs the scripted pilot with `±noise_deg` uniform rotation noise on the
/// executed commands. Records are labelled with the pilot's clean command;
/// the returned result holds the executed ones.
pub fn record_perturbed_demo(
    spec: &ScenarioSpec,
    max_steps: usize,
    dt: f64,
    noise_deg: f64,
    noise_seed: u64,
) -> Result<(Vec<TrainingRecord>, EpisodeResult), SimError> {
    if !(noise_deg >= 0.0 && noise_deg.is_finite()) {
        return Err(SimError::InvalidSpec(format!("rotation noise must be finite and non-negative, got {noise_deg}")));
    }
    let params = MapParams::default();
    let clean = std::cell::Cell::new(RobotCommand::ZERO);
    let mut pilot = PerturbedPilot { rng: ChaCha8Rng::seed_from_u64(noise_seed), noise_deg, clean: &clean };
    let mut records = Vec::new();
    let result = run_episode_with(&mut pilot, spec, max_steps, dt, |s, _| records.push(record_of(s, clean.get(), &params)))?;
    Ok((records, result))
}

/// Scripted-pilot demonstrations over clear, sparse and crowded scenarios
/// in rotation, executed with [`DEMO_ROTATION_NOISE_DEG`] and truncated to
/// exactly `count` records.
pub fn pilot_dataset(count: usize, seed: u64) -> Result<Vec<TrainingRecord>, SimError> {
    let mut records = Vec::with_capacity(count);
    let mut episode = 0u64;
    while records.len() < count {
        let class = ScenarioClass::ALL[(episode % 3) as usize];
        let episode_seed = seed.wrapping_mul(1_000_003).wrapping_add(episode);
        let spec = ScenarioSpec::random(class, episode_seed);
        let (recs, _) = record_perturbed_demo(&spec, DEMO_MAX_STEPS, DT, DEMO_ROTATION_NOISE_DEG, !episode_seed)?;
        records.extend(recs);
        episode += 1;
    }
    records.truncate(count);
    Ok(records)
}

/// Median steps the scripted pilot needs on `class` over `seeds`, counting
/// only successful episodes. `None` if none succeed.
pub fn pilot_median_steps(class: ScenarioClass, seeds: impl IntoIterator<Item = u64>, max_steps: usize) -> Result<Option<usize>, SimError> {
    let mut steps = Vec::new();
    for seed in seeds {
        let r = run_episode(&mut ScriptedPilot, &ScenarioSpec::random(class, seed), max_steps, DT)?;
        if r.success {
            steps.push(r.steps_taken);
        }
    }
    steps.sort_unstable();
    Ok((!steps.is_empty()).then(|| steps[steps.len() / 2]))
}

/// `step,x,y,theta,speed,rotation`: pose before each step with the command
/// applied from it; the final pose is written with a zero command.
pub fn write_trajectory(mut w: impl Write, result: &EpisodeResult) -> std::io::Result<()> {
    writeln!(w, "step,x,y,theta,speed,rotation")?;
    for (i, pose) in result.trajectory.iter().enumerate() {
        let cmd = result.commands.get(i).copied().unwrap_or(RobotCommand::ZERO);
        writeln!(w, "{i},{},{},{},{},{}", pose.x, pose.y, pose.theta, cmd.speed, cmd.rotation)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open_state(theta: f64) -> SimState {
        SimState {
            time: 0.0,
            robot: RobotPose::new(0.0, 0.0, theta),
            robot_speed: 0.0,
            pedestrians: vec![],
            walls: vec![],
            goal_a: Point2::new(-500.0, 0.0),
            goal_b: Point2::new(500.0, 0.0),
            active_goal: GoalSide::B,
        }
    }

    fn ped_at(p: Point2, goal: Point2) -> Pedestrian {
        Pedestrian { position: p, velocity: Point2::ORIGIN, goal, radius: PEDESTRIAN_RADIUS, group: None }
    }

    #[test]
    fn command_clamps() {
        let c = RobotCommand::new(500.0, -90.0);
        assert_eq!((c.speed(), c.rotation()), (100.0, -30.0));
        let c = RobotCommand::new(-80.0, f64::NAN);
        assert_eq!((c.speed(), c.rotation()), (-50.0, 0.0));
    }

    #[test]
    fn zero_command_only_advances_time() {
        let s = open_state(0.3);
        let n = step(&s, RobotCommand::ZERO, DT);
        assert_eq!(n.robot, s.robot);
        assert!((n.time - 0.2).abs() < 1e-15);
    }

    #[test]
    fn straight_drive_kinematics() {
        let n = step(&open_state(0.0), RobotCommand::new(50.0, 0.0), 0.2);
        assert!((n.robot.x - 10.0).abs() < 1e-12);
        assert!(n.robot.y.abs() < 1e-12);
    }

    #[test]
    fn rotation_applies_before_translation() {
        let n = step(&open_state(0.0), RobotCommand::new(50.0, 30.0), 0.2);
        let t = 30f64.to_radians();
        assert!((n.robot.theta - t).abs() < 1e-7);
        assert!((n.robot.x - 10.0 * t.cos()).abs() < 1e-6);
        assert!((n.robot.y - 10.0 * t.sin()).abs() < 1e-6);
    }

    #[test]
    fn isolated_pedestrian_converges_to_preferred_velocity() {
        let mut s = open_state(0.0);
        s.robot = RobotPose::new(0.0, -5000.0, 0.0);
        s.pedestrians.push(ped_at(Point2::new(0.0, 0.0), Point2::new(20_000.0, 0.0)));
        // Oracle: v ← v + (v_pref ĝ − v) dt / τ with ĝ = +x throughout.
        let mut v = 0.0;
        for _ in 0..10 {
            s = step(&s, RobotCommand::ZERO, DT);
            v += (V_PREF - v) * DT / TAU;
        }
        let got = s.pedestrians[0].velocity;
        assert!((got.x - v).abs() < 1e-6, "{} vs {v}", got.x);
        assert!(got.y.abs() < 1e-6);
        assert!((V_PREF - got.x) / V_PREF < 0.01);
    }

    #[test]
    fn repulsion_matches_formula() {
        let f = repulsion(Point2::new(100.0, 0.0), 25.0, Point2::ORIGIN, 25.0);
        assert!((f.x - 200.0 * (-50.0f64 / 30.0).exp()).abs() < 1e-12);
        assert_eq!(f.y, 0.0);
    }

    #[test]
    fn walls_block_and_slide() {
        let mut s = open_state(std::f64::consts::FRAC_PI_4);
        s.walls = vec![Rect { x0: -100.0, y0: 40.0, x1: 100.0, y1: 60.0 }];
        // Heading up-right into a horizontal wall: y is blocked, x slides.
        for _ in 0..20 {
            s = step(&s, RobotCommand::new(100.0, 0.0), DT);
            assert!(!s.walls[0].inflated(ROBOT_RADIUS).contains(s.robot.position()));
        }
        assert!(s.robot.x > 100.0);
    }

    #[test]
    fn pilot_examples() {
        let s = open_state(0.0);
        assert_eq!(scripted_pilot(&s), RobotCommand::new(60.0, 0.0));

        let mut blocked = open_state(0.0);
        blocked.pedestrians.push(ped_at(Point2::new(50.0, 0.0), Point2::new(50.0, 0.0)));
        let c = scripted_pilot(&blocked);
        assert!(c.speed() < 20.0);
        assert!(c.rotation().abs() > 0.0);

        let mut left = open_state(0.0);
        left.goal_b = Point2::new(0.0, 500.0);
        assert_eq!(scripted_pilot(&left).rotation(), 30.0);
    }

    #[test]
    fn pilot_slowdown_is_continuous_at_cone_edge() {
        let at = |deg: f64| {
            let mut s = open_state(0.0);
            let a = deg.to_radians();
            let p = Point2::new(70.0 * a.cos(), 70.0 * a.sin());
            s.pedestrians.push(ped_at(p, p));
            scripted_pilot(&s)
        };
        let inside = at(CONE_HALF_ANGLE_DEG - 0.01);
        assert!(inside.speed() < CRUISE_SPEED && CRUISE_SPEED - inside.speed() < 0.1);
        assert!(inside.rotation().abs() < 0.1);
        assert_eq!(at(CONE_HALF_ANGLE_DEG + 0.01), RobotCommand::new(CRUISE_SPEED, 0.0));
        assert!(at(0.0).speed() < at(30.0).speed());
    }

    #[test]
    fn pilot_heading_tolerance_is_cross_track() {
        let mut s = open_state(0.0);
        let goal = s.goal();
        let d = goal.distance(s.robot.position());
        s.robot.theta = (0.9 * PILOT_ALIGN_TOLERANCE / d).asin();
        assert_eq!(scripted_pilot(&s).rotation(), 0.0);
        s.robot.theta = (1.1 * PILOT_ALIGN_TOLERANCE / d).asin();
        let r = scripted_pilot(&s).rotation();
        assert!(r < 0.0 && (r + PILOT_HEADING_GAIN * s.robot.theta.to_degrees()).abs() < 1e-6, "{r}");
        // Facing away is never aligned.
        s.robot.theta = std::f64::consts::PI;
        assert_eq!(scripted_pilot(&s).rotation().abs(), ROTATION_LIMIT);
    }

    #[test]
    fn pilot_steers_away_from_side() {
        let mut s = open_state(0.0);
        s.pedestrians.push(ped_at(Point2::new(80.0, 30.0), Point2::new(80.0, 30.0)));
        assert!(scripted_pilot(&s).rotation() < 0.0);
        s.pedestrians[0].position = Point2::new(80.0, -30.0);
        assert!(scripted_pilot(&s).rotation() > 0.0);
        // Behind the robot: ignored.
        s.pedestrians[0].position = Point2::new(-60.0, 0.0);
        assert_eq!(scripted_pilot(&s), RobotCommand::new(60.0, 0.0));
    }

    #[test]
    fn spawn_examples() {
        let s = spawn_scenario(&ScenarioSpec::clear(1)).unwrap();
        assert!(s.pedestrians.is_empty());
        assert_eq!(s.robot.position(), Arena::default().goal_a());
        let spec = ScenarioSpec::sparse(3, 7);
        assert_eq!(spawn_scenario(&spec).unwrap(), spawn_scenario(&spec).unwrap());
    }

    #[test]
    fn spawn_rejects_invalid_and_overfull() {
        assert!(spawn_scenario(&ScenarioSpec::sparse(0, 1)).is_err());
        assert!(spawn_scenario(&ScenarioSpec::sparse(5, 1)).is_err());
        assert!(spawn_scenario(&ScenarioSpec::crowded(4, 1, 1)).is_err());
        assert!(spawn_scenario(&ScenarioSpec::crowded(6, 0, 1)).is_err());
        assert!(spawn_scenario(&ScenarioSpec::crowded(5, 3, 1)).is_err());
        match spawn_scenario(&ScenarioSpec::crowded(400, 1, 1)) {
            Err(SimError::Placement { requested, .. }) => assert_eq!(requested, 400),
            other => panic!("expected placement error, got {other:?}"),
        }
    }

    fn check_spawn(spec: &ScenarioSpec) {
        let s = spawn_scenario(spec).unwrap();
        assert_eq!(s.pedestrians.len(), spec.pedestrian_count);
        let mid = spec.arena.width / 2.0;
        for (i, p) in s.pedestrians.iter().enumerate() {
            assert!(!inside_any(p.position, &s.walls, p.radius));
            // Far end of the hallway, judged from the group's first member.
            let leader = s.pedestrians.iter().find(|q| p.group.is_some() && q.group == p.group).unwrap_or(p);
            assert!((p.goal.x - mid).signum() != (leader.position.x - mid).signum() || leader.position.x == mid);
            assert!(p.position.distance(s.robot.position()) > p.radius + ROBOT_RADIUS);
            for q in &s.pedestrians[i + 1..] {
                assert!(p.position.distance(q.position) >= p.radius + q.radius);
                if p.group.is_some() && p.group == q.group {
                    assert_eq!(p.goal, q.goal);
                    assert!(p.position.distance(q.position) <= GROUP_SPREAD);
                }
            }
        }
        let groups: std::collections::BTreeSet<_> = s.pedestrians.iter().filter_map(|p| p.group).collect();
        assert_eq!(groups.len(), spec.group_count);
        for g in groups {
            assert!(s.pedestrians.iter().filter(|p| p.group == Some(g)).count() >= 2);
        }
    }

    #[test]
    fn crowded_groups_share_goals() {
        check_spawn(&ScenarioSpec::crowded(8, 2, 0));
    }

    #[test]
    fn spawn_postconditions_over_many_seeds() {
        for class in ScenarioClass::ALL {
            for seed in 0..1000 {
                check_spawn(&ScenarioSpec::random(class, seed));
            }
        }
    }

    #[test]
    fn pilot_reaches_goal_in_clear() {
        for seed in 0..20 {
            let spec = ScenarioSpec::clear(seed);
            let r = run_episode(&mut ScriptedPilot, &spec, 500, DT).unwrap();
            let dist = spec.arena.goal_a().distance(spec.arena.goal_b());
            assert!(r.success, "seed {seed}");
            assert!((r.steps_taken as f64) < dist / (CRUISE_SPEED * DT) * 1.5, "seed {seed}: {}", r.steps_taken);
            assert_eq!(r.collisions, 0);
            assert_eq!(r.min_clearance, f64::INFINITY);
        }
    }

    #[test]
    fn zero_policy_fails_without_collisions() {
        let mut zero = |_: &SimState| RobotCommand::ZERO;
        let r = run_episode(&mut zero, &ScenarioSpec::clear(2), 40, DT).unwrap();
        assert!(!r.success);
        assert_eq!(r.steps_taken, 40);
        assert_eq!(r.collisions, 0);
    }

    #[test]
    fn episodes_are_deterministic() {
        let spec = ScenarioSpec::sparse(3, 3);
        let a = run_episode(&mut ScriptedPilot, &spec, 300, DT).unwrap();
        let b = run_episode(&mut ScriptedPilot, &spec, 300, DT).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_projection() {
        let mut s = spawn_scenario(&ScenarioSpec::sparse(3, 4)).unwrap();
        let scene = scene_of(&s);
        assert_eq!(scene.pedestrians.len(), 3);
        for (d, p) in scene.pedestrians.iter().zip(&s.pedestrians) {
            assert_eq!((d.center, d.radius), (p.position, p.radius));
        }
        assert_eq!(scene.walls, s.walls);
        assert_eq!(scene.goal, s.goal_b);
        s.active_goal = GoalSide::A;
        assert_eq!(scene_of(&s).goal, s.goal_a);
        let empty = spawn_scenario(&ScenarioSpec::clear(0)).unwrap();
        assert!(scene_of(&empty).pedestrians.is_empty());
    }

    #[test]
    fn record_counts_and_labels() {
        let mut zero = |_: &SimState| RobotCommand::ZERO;
        let (recs, r) = record_episode(&mut zero, &ScenarioSpec::clear(5), 100, DT).unwrap();
        assert_eq!(recs.len(), 100);
        assert_eq!(r.steps_taken, 100);
        assert!(recs.iter().all(|x| x.speed == 0.0 && x.rotation == 0.0));

        let (recs, _) = record_episode(&mut ScriptedPilot, &ScenarioSpec::clear(6), 300, DT).unwrap();
        let aligned = recs.iter().position(|x| x.rotation == 0.0).unwrap();
        assert!(aligned > 0 && aligned < recs.len() / 2, "{aligned}");
        assert!(recs[aligned..].iter().all(|x| x.rotation == 0.0));
    }

    #[test]
    fn recorded_labels_replay_exactly() {
        for spec in [ScenarioSpec::sparse(4, 9), ScenarioSpec::crowded(7, 2, 9)] {
            let (recs, r) = record_episode(&mut ScriptedPilot, &spec, 200, DT).unwrap();
            let cmds: Vec<RobotCommand> = recs.iter().map(|x| RobotCommand::new(x.speed.into(), x.rotation.into())).collect();
            assert_eq!(replay(&spec, &cmds, DT).unwrap(), r.trajectory);
        }
    }

    #[test]
    fn perturbed_demo_without_noise_matches_pilot() {
        let spec = ScenarioSpec::random(ScenarioClass::Sparse, 4);
        let (a, ra) = record_perturbed_demo(&spec, 100, DT, 0.0, 9).unwrap();
        let (b, rb) = record_episode(&mut ScriptedPilot, &spec, 100, DT).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.commands, rb.commands);
    }

    #[test]
    fn perturbed_demo_labels_are_clean_commands() {
        let spec = ScenarioSpec::random(ScenarioClass::Clear, 6);
        let (recs, result) = record_perturbed_demo(&spec, 60, DT, 20.0, 1).unwrap();
        let executed: Vec<f64> = result.commands.iter().map(|c| c.rotation()).collect();
        assert!(recs.len() == executed.len());
        let differing = recs.iter().zip(&executed).filter(|(r, e)| (f64::from(r.rotation) - **e).abs() > 1e-3).count();
        assert!(differing > recs.len() / 2, "{differing}/{}", recs.len());
        assert!(record_perturbed_demo(&spec, 10, DT, -1.0, 1).is_err());
    }

    #[test]
    fn pilot_dataset_size_and_determinism() {
        let a = pilot_dataset(150, 1).unwrap();
        assert_eq!(a.len(), 150);
        assert_eq!(a, pilot_dataset(150, 1).unwrap());
    }

    #[test]
    fn trajectory_export() {
        let r = run_episode(&mut ScriptedPilot, &ScenarioSpec::clear(0), 2, DT).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,x,y,theta,speed,rotation");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,60,250,"));
        assert!(lines[3].ends_with(",0,0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn walls_impenetrable_and_speeds_capped(
            seed in 0u64..10_000,
            cmds in prop::collection::vec((-80.0f64..120.0, -40.0f64..40.0), 1..120),
        ) {
            let class = ScenarioClass::ALL[(seed % 3) as usize];
            let mut s = spawn_scenario(&ScenarioSpec::random(class, seed)).unwrap();
            for (v, r) in cmds {
                let cmd = RobotCommand::new(v, r);
                let before = s.robot.position();
                s = step(&s, cmd, DT);
                prop_assert!(s.robot.position().distance(before) <= cmd.speed().abs() * DT + 1e-9);
                prop_assert!(!s.walls.iter().any(|w| w.contains(s.robot.position())));
                for p in &s.pedestrians {
                    prop_assert!(!s.walls.iter().any(|w| w.contains(p.position)));
                    prop_assert!(p.velocity.norm() <= PEDESTRIAN_SPEED_CAP + 1e-9);
                }
            }
        }
    }
}
