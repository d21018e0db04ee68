//! Detection logs to floor-plane poses and per-step action labels.
//!
//! A detection log is comma-separated text with a header line:
//!
//! ```text
//! frame,kind,x,y
//! 0,marker_a,412.5,230.0
//! 0,marker_b,430.0,231.5
//! 0,human,610.2,118.9
//! ```
//!
//! Frames are indexed in decision steps. A frame missing either marker is
//! dropped; label pairs spanning a dropped frame are discarded.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, DistortionCoeffs, GeometryError, Homography};
use crate::types::{wrap_angle, Point2};

/// Decision-step period in seconds (5 Hz).
pub const DECISION_DT: f64 = 0.2;
/// Neck height assumed for every detected human, cm.
pub const DEFAULT_HUMAN_HEIGHT: f64 = 150.0;
/// Sanity bound on label speed, cm/s.
pub const MAX_LABEL_SPEED: f64 = 200.0;
/// Sanity bound on label rotation, degrees per step.
pub const MAX_LABEL_ROTATION: f64 = 90.0;
/// Minimum marker separation, cm.
pub const MIN_MARKER_SEPARATION: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("markers too close to define a heading ({separation} cm)")]
    DegenerateMarkers { separation: f64 },
    #[error("label at frame {frame} out of range: speed {speed} cm/s, rotation {rotation} deg")]
    LabelOutOfRange { frame: u64, speed: f64, rotation: f64 },
    #[error("need at least 2 poses, got {0}")]
    TooFewPoses(usize),
    #[error("invalid step period {0}")]
    InvalidDt(f64),
    #[error("invalid floor scale: {0}")]
    InvalidScale(String),
    #[error("frame {frame} has more than one {kind}")]
    DuplicateMarker { frame: u64, kind: DetectionKind },
    #[error("detection log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading detection log: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, TrackingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    Human,
    MarkerA,
    MarkerB,
}

impl std::fmt::Display for DetectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectionKind::Human => "human",
            DetectionKind::MarkerA => "marker_a",
            DetectionKind::MarkerB => "marker_b",
        })
    }
}

impl FromStr for DetectionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "human" => Ok(DetectionKind::Human),
            "marker_a" => Ok(DetectionKind::MarkerA),
            "marker_b" => Ok(DetectionKind::MarkerB),
            other => Err(format!("unknown detection kind {other:?}")),
        }
    }
}

/// One keypoint in one frame, in camera pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: u64,
    pub kind: DetectionKind,
    pub x: f64,
    pub y: f64,
}

impl Detection {
    pub fn point(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// Floor position in cm and heading in radians, wrapped to `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotPose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Point2 {
        Point2::new(self.theta.cos(), self.theta.sin())
    }
}

/// Supervision target: signed speed in cm/s and signed rotation in degrees
/// per decision step (counter-clockwise positive).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionLabel {
    pub speed: f64,
    pub rotation: f64,
}

impl ActionLabel {
    pub fn within_bounds(&self) -> bool {
        self.speed.abs() <= MAX_LABEL_SPEED && self.rotation.abs() <= MAX_LABEL_ROTATION
    }
}

/// Pixel-to-floor scaling and the heights used for perspective correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorScale {
    pub cm_per_px: f64,
    pub h_camera: f64,
    pub h_human: f64,
    pub h_robot: f64,
    /// Camera foot point in rectified pixels.
    pub optical_center: Point2,
}

impl FloorScale {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.cm_per_px, self.h_camera, self.h_human, self.h_robot]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive {
            return Err(TrackingError::InvalidScale(
                "cm_per_px and heights must be positive".into(),
            ));
        }
        if self.h_human >= self.h_camera || self.h_robot >= self.h_camera {
            return Err(TrackingError::InvalidScale(
                "targets must be lower than the camera".into(),
            ));
        }
        if !self.optical_center.is_finite() {
            return Err(TrackingError::InvalidScale("optical center not finite".into()));
        }
        Ok(())
    }

    fn target_height(&self, kind: DetectionKind) -> f64 {
        match kind {
            DetectionKind::Human => self.h_human,
            DetectionKind::MarkerA | DetectionKind::MarkerB => self.h_robot,
        }
    }
}

/// Camera-pixel to rectified-pixel map: undistortion about `lens_center`
/// (coordinates divided by `lens_scale`, typically the focal length) followed
/// by the floor homography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rectification {
    pub lens: DistortionCoeffs,
    pub lens_center: Point2,
    pub lens_scale: f64,
    pub homography: Homography,
}

impl Default for Rectification {
    fn default() -> Self {
        Self {
            lens: DistortionCoeffs::default(),
            lens_center: Point2::ORIGIN,
            lens_scale: 1.0,
            homography: Homography::IDENTITY,
        }
    }
}

impl Rectification {
    pub fn rectify(&self, p: Point2) -> Result<Point2> {
        let undistorted = if self.lens.is_zero() {
            p
        } else {
            let normalized = (p - self.lens_center) * (1.0 / self.lens_scale);
            let q = self.lens.undistort(
                normalized,
                geometry::UNDISTORT_TOL,
                geometry::UNDISTORT_MAX_ITER,
            )?;
            q * self.lens_scale + self.lens_center
        };
        Ok(self.homography.apply(undistorted)?)
    }
}

/// Floor position (cm, relative to the camera foot point) of a detection:
/// undistort, rectify, re-center on the optical center, correct for the
/// target's height, scale to centimetres.
pub fn floor_position(d: &Detection, scale: &FloorScale, rect: &Rectification) -> Result<Point2> {
    scale.validate()?;
    let rectified = rect.rectify(d.point())?;
    let relative = rectified - scale.optical_center;
    let corrected = geometry::height_correct(relative, scale.target_height(d.kind), scale.h_camera)?;
    Ok(corrected * scale.cm_per_px)
}

/// Robot pose from its marker pair (floor cm). The position is the midpoint;
/// the heading is the `a → b` direction rotated by +90°, so `a` is the left
/// marker seen from behind the robot.
pub fn robot_pose_from_markers(a: Point2, b: Point2) -> Result<RobotPose> {
    let axis = b - a;
    let separation = axis.norm();
    if !(separation > MIN_MARKER_SEPARATION) {
        return Err(TrackingError::DegenerateMarkers { separation });
    }
    let mid = (a + b) * 0.5;
    Ok(RobotPose::new(mid.x, mid.y, axis.angle() + std::f64::consts::FRAC_PI_2))
}

fn label_between(from: &RobotPose, to: &RobotPose, dt: f64, frame: u64) -> Result<ActionLabel> {
    let displacement = to.position() - from.position();
    let label = ActionLabel {
        speed: displacement.dot(from.heading()) / dt,
        rotation: wrap_angle(to.theta - from.theta).to_degrees(),
    };
    if !label.within_bounds() || !label.speed.is_finite() {
        return Err(TrackingError::LabelOutOfRange {
            frame,
            speed: label.speed,
            rotation: label.rotation,
        });
    }
    Ok(label)
}

/// Labels each consecutive pose pair: speed is the displacement projected on
/// the earlier heading over `dt`, rotation the wrapped heading change in
/// degrees. Out-of-range labels fail, identifying the pair's first index.
pub fn action_labels(poses: &[RobotPose], dt: f64) -> Result<Vec<ActionLabel>> {
    if !(dt > 0.0) {
        return Err(TrackingError::InvalidDt(dt));
    }
    if poses.len() < 2 {
        return Err(TrackingError::TooFewPoses(poses.len()));
    }
    poses
        .windows(2)
        .enumerate()
        .map(|(i, w)| label_between(&w[0], &w[1], dt, i as u64))
        .collect()
}

/// Parses a `frame,kind,x,y` detection log (header line required).
pub fn parse_detection_log<R: BufRead>(reader: R) -> Result<Vec<Detection>> {
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, header)) => {
            let header = header?;
            let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
            if cols != ["frame", "kind", "x", "y"] {
                return Err(TrackingError::Parse {
                    line: 1,
                    message: format!("expected header frame,kind,x,y, got {header:?}"),
                });
            }
        }
        None => {
            return Err(TrackingError::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let err = |message: String| TrackingError::Parse {
            line: lineno,
            message,
        };
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        let [frame, kind, x, y] = fields[..] else {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        };
        let det = Detection {
            frame: frame.parse().map_err(|e| err(format!("frame: {e}")))?,
            kind: kind.parse().map_err(err)?,
            x: x.parse().map_err(|e| err(format!("x: {e}")))?,
            y: y.parse().map_err(|e| err(format!("y: {e}")))?,
        };
        if !det.point().is_finite() {
            return Err(err("non-finite coordinate".into()));
        }
        out.push(det);
    }
    Ok(out)
}

/// Everything known about one usable frame, in floor cm.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame: u64,
    pub robot: RobotPose,
    pub humans: Vec<Point2>,
}

/// Groups detections by frame and converts them to floor coordinates.
/// Frames without both markers are dropped.
pub fn observations_from_detections(
    detections: &[Detection],
    scale: &FloorScale,
    rect: &Rectification,
) -> Result<Vec<FrameObservation>> {
    let mut frames: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        frames.entry(d.frame).or_default().push(d);
    }
    let mut out = Vec::new();
    for (frame, dets) in frames {
        let mut marker_a = None;
        let mut marker_b = None;
        let mut humans = Vec::new();
        for d in dets {
            let pos = floor_position(d, scale, rect)?;
            let slot = match d.kind {
                DetectionKind::Human => {
                    humans.push(pos);
                    continue;
                }
                DetectionKind::MarkerA => &mut marker_a,
                DetectionKind::MarkerB => &mut marker_b,
            };
            if slot.replace(pos).is_some() {
                return Err(TrackingError::DuplicateMarker { frame, kind: d.kind });
            }
        }
        if let (Some(a), Some(b)) = (marker_a, marker_b) {
            out.push(FrameObservation {
                frame,
                robot: robot_pose_from_markers(a, b)?,
                humans,
            });
        }
    }
    Ok(out)
}

/// Labels for consecutive observation pairs whose frames are adjacent.
/// Returns `(index into observations, label)` for each kept pair.
pub fn labelled_steps(observations: &[FrameObservation], dt: f64) -> Result<Vec<(usize, ActionLabel)>> {
    if !(dt > 0.0) {
        return Err(TrackingError::InvalidDt(dt));
    }
    let mut out = Vec::new();
    for (i, w) in observations.windows(2).enumerate() {
        if w[1].frame != w[0].frame + 1 {
            continue;
        }
        out.push((i, label_between(&w[0].robot, &w[1].robot, dt, w[0].frame)?));
    }
    Ok(out)
}
