//! Robot-centric, goal-aligned occupancy maps and the training-record format.
//!
//! The map frame puts the robot at cell `(row 32, col 32)` with the bearing to
//! the goal pointing along increasing column. Row index grows toward the
//! robot's right (map `y` points up the image, i.e. to the left of the goal
//! direction). A cell is occupied iff its center lies inside a pedestrian disc
//! or a wall rectangle.
//!
//! Dataset files are little-endian:
//!
//! ```text
//! "CRWDNAV1" | version: u32 = 1 | count: u32
//! count × { map: [u8; 4096] | theta_rel: f32 | speed: f32 | rotation: f32 }
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracking::{ActionLabel, FrameObservation, RobotPose};
use crate::types::{wrap_angle, Disc, Point2, Rect};

/// Cells per map side.
pub const MAP_SIZE: usize = 64;
/// Cells per map.
pub const MAP_CELLS: usize = MAP_SIZE * MAP_SIZE;
/// Row and column of the robot's cell.
pub const ROBOT_CELL: usize = MAP_SIZE / 2;

pub const OCCUPIED: u8 = 255;
pub const FREE: u8 = 0;

pub const DATASET_MAGIC: &[u8; 8] = b"CRWDNAV1";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 16;
pub const RECORD_BYTES: usize = MAP_CELLS + 3 * 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset truncated: {0}")]
    Truncated(String),
    #[error("header declares {declared} records but file holds {actual}")]
    CountMismatch { declared: u32, actual: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid split fraction {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Metric scale of the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapParams {
    /// Side length covered by the whole map, cm.
    pub extent: f64,
    /// Radius used for pedestrians without their own, cm.
    pub person_radius: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        Self {
            extent: 640.0,
            person_radius: 25.0,
        }
    }
}

impl MapParams {
    pub fn cell_size(&self) -> f64 {
        self.extent / MAP_SIZE as f64
    }
}

/// Everything that ends up on a map, in floor cm.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub robot: RobotPose,
    pub goal: Point2,
    pub pedestrians: Vec<Disc>,
    pub walls: Vec<Rect>,
}

/// 64×64 occupancy bytes, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct OccupancyMap {
    cells: Vec<u8>,
}

impl std::fmt::Debug for OccupancyMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let occupied = self.cells.iter().filter(|&&c| c != FREE).count();
        write!(f, "OccupancyMap({occupied} occupied)")
    }
}

impl Default for OccupancyMap {
    fn default() -> Self {
        Self::empty()
    }
}

impl OccupancyMap {
    pub fn empty() -> Self {
        Self {
            cells: vec![FREE; MAP_CELLS],
        }
    }

    pub fn from_cells(cells: Vec<u8>) -> Option<Self> {
        (cells.len() == MAP_CELLS).then_some(Self { cells })
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * MAP_SIZE + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.cells[row * MAP_SIZE + col] = v;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != FREE).count()
    }
}

/// Map-frame offset (cm from the robot) of a cell center.
pub fn cell_center(row: usize, col: usize, cell: f64) -> Point2 {
    Point2::new(
        (col as f64 - ROBOT_CELL as f64) * cell,
        (ROBOT_CELL as f64 - row as f64) * cell,
    )
}

/// Floor-frame transform into the robot-centric, goal-aligned map frame.
#[derive(Debug, Clone, Copy)]
pub struct MapFrame {
    pub origin: Point2,
    pub bearing: f64,
}

impl MapFrame {
    pub fn of(scene: &Scene) -> Self {
        let origin = scene.robot.position();
        let to_goal = scene.goal - origin;
        let bearing = if to_goal.norm() > 0.0 { to_goal.angle() } else { 0.0 };
        Self { origin, bearing }
    }

    pub fn to_map(&self, world: Point2) -> Point2 {
        (world - self.origin).rotated(-self.bearing)
    }

    pub fn to_world(&self, map: Point2) -> Point2 {
        self.origin + map.rotated(self.bearing)
    }
}

/// Inclusive cell index range covering map-frame coordinates `[lo, hi]` along
/// one axis, or `None` when it misses the map.
fn cell_span(lo: f64, hi: f64, cell: f64) -> Option<(usize, usize)> {
    let to_index = |v: f64| v / cell + ROBOT_CELL as f64;
    let first = to_index(lo).floor().max(0.0);
    let last = to_index(hi).ceil().min((MAP_SIZE - 1) as f64);
    (first <= last).then_some((first as usize, last as usize))
}

/// Renders the occupancy map and the robot heading relative to the goal
/// bearing, wrapped to `(-π, π]`. The robot itself is not drawn.
pub fn render_occupancy(scene: &Scene, params: &MapParams) -> (OccupancyMap, f64) {
    let frame = MapFrame::of(scene);
    let cell = params.cell_size();
    let mut map = OccupancyMap::empty();

    for disc in &scene.pedestrians {
        let c = frame.to_map(disc.center);
        let r = disc.radius;
        // Columns follow map x; rows follow -map y.
        let Some((c0, c1)) = cell_span(c.x - r, c.x + r, cell) else { continue };
        let Some((r0, r1)) = cell_span(-c.y - r, -c.y + r, cell) else { continue };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let d = cell_center(row, col, cell) - c;
                if d.x * d.x + d.y * d.y <= r * r {
                    map.set(row, col, OCCUPIED);
                }
            }
        }
    }

    for wall in &scene.walls {
        let corners = wall.corners().map(|p| frame.to_map(p));
        let min_x = corners.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let Some((c0, c1)) = cell_span(min_x, max_x, cell) else { continue };
        let Some((r0, r1)) = cell_span(-max_y, -min_y, cell) else { continue };
        for row in r0..=r1 {
            for col in c0..=c1 {
                if wall.contains(frame.to_world(cell_center(row, col, cell))) {
                    map.set(row, col, OCCUPIED);
                }
            }
        }
    }

    (map, wrap_angle(scene.robot.theta - frame.bearing))
}

/// One record per labelled tracking step. Humans become discs of
/// `params.person_radius`; the label is the action taken from that frame.
pub fn records_from_observations(
    observations: &[FrameObservation],
    steps: &[(usize, ActionLabel)],
    goal: Point2,
    walls: &[Rect],
    params: &MapParams,
) -> Vec<TrainingRecord> {
    steps
        .iter()
        .map(|&(i, label)| {
            let obs = &observations[i];
            let scene = Scene {
                robot: obs.robot,
                goal,
                pedestrians: obs
                    .humans
                    .iter()
                    .map(|&center| Disc { center, radius: params.person_radius })
                    .collect(),
                walls: walls.to_vec(),
            };
            let (map, theta_rel) = render_occupancy(&scene, params);
            TrainingRecord {
                map,
                theta_rel: theta_rel as f32,
                speed: label.speed as f32,
                rotation: label.rotation as f32,
            }
        })
        .collect()
}

/// Scales occupancy bytes to `[0, 1]`.
pub fn normalize_map<T: Float>(map: &OccupancyMap) -> Vec<T> {
    let scale = T::from(255.0).unwrap();
    map.cells
        .iter()
        .map(|&c| T::from(c).unwrap() / scale)
        .collect()
}

/// `(sin θ, cos θ)`.
pub fn orientation_features(theta_rel: f64) -> (f64, f64) {
    theta_rel.sin_cos()
}

/// One supervised example: map, relative heading, and the next action.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub map: OccupancyMap,
    /// Radians in `(-π, π]`.
    pub theta_rel: f32,
    /// cm/s.
    pub speed: f32,
    /// Degrees per decision step.
    pub rotation: f32,
}

impl TrainingRecord {
    pub fn orientation(&self) -> (f64, f64) {
        orientation_features(f64::from(self.theta_rel))
    }
}

pub fn encode_dataset(records: &[TrainingRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(DATASET_HEADER_BYTES + records.len() * RECORD_BYTES);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(r.map.cells());
        out.extend_from_slice(&r.theta_rel.to_le_bytes());
        out.extend_from_slice(&r.speed.to_le_bytes());
        out.extend_from_slice(&r.rotation.to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<TrainingRecord>, DatasetError> {
    if bytes.len() < DATASET_HEADER_BYTES {
        if bytes.len() >= 8 && &bytes[..8] != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        return Err(DatasetError::Truncated(format!(
            "{} bytes, header needs {DATASET_HEADER_BYTES}",
            bytes.len()
        )));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let f32_at = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != DATASET_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let declared = u32_at(12);
    let body = bytes.len() - DATASET_HEADER_BYTES;
    if body % RECORD_BYTES != 0 {
        return Err(DatasetError::Truncated(format!(
            "{} trailing bytes after {} whole records",
            body % RECORD_BYTES,
            body / RECORD_BYTES
        )));
    }
    let actual = body / RECORD_BYTES;
    if actual != declared as usize {
        return Err(DatasetError::CountMismatch { declared, actual });
    }
    Ok((0..actual)
        .map(|i| {
            let at = DATASET_HEADER_BYTES + i * RECORD_BYTES;
            TrainingRecord {
                map: OccupancyMap {
                    cells: bytes[at..at + MAP_CELLS].to_vec(),
                },
                theta_rel: f32_at(at + MAP_CELLS),
                speed: f32_at(at + MAP_CELLS + 4),
                rotation: f32_at(at + MAP_CELLS + 8),
            }
        })
        .collect())
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[TrainingRecord]) -> Result<(), DatasetError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_dataset(records))?;
    file.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingRecord>, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

/// Seeded shuffle into `(train, test)` with `|test| = round(test_fraction · N)`.
pub fn split_dataset<T: Clone>(records: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(test_fraction));
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * records.len() as f64).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(train_idx), pick(test_idx)))
}

/// Mean absolute speed (cm/s) and rotation (degrees) of a record set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionStats {
    pub mean_abs_speed: f64,
    pub mean_abs_rotation: f64,
}

pub fn dataset_action_stats(records: &[TrainingRecord]) -> Result<ActionStats, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let n = records.len() as f64;
    Ok(ActionStats {
        mean_abs_speed: records.iter().map(|r| f64::from(r.speed).abs()).sum::<f64>() / n,
        mean_abs_rotation: records.iter().map(|r| f64::from(r.rotation).abs()).sum::<f64>() / n,
    })
}
