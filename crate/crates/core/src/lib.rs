//! Learned crowd navigation from tele-operated demonstrations.
//!
//! The pipeline runs from camera geometry to closed-loop control:
//!
//! * [`geometry`]: lens distortion, homography fitting by gradient descent,
//!   image warping, optical-center recovery and height correction.
//! * [`tracking`]: detection logs to floor-plane robot poses and action labels.
//! * [`mapping`]: robot-centric, goal-aligned 64×64 occupancy maps and the
//!   binary training-record format.
//! * [`neuralnet`]: a from-scratch CNN regressor for `(speed, rotation)`.
//! * [`simworld`]: a 2D hallway crowd simulator with a scripted pilot.
//! * [`teleop`]: the transport-agnostic tele-operation session and its wire
//!   messages.

pub mod geometry;
pub mod mapping;
pub mod neuralnet;
pub mod simworld;
pub mod teleop;
pub mod tracking;
mod types;

pub use geometry::{DistortionCoeffs, GdConfig, GeometryError, Homography, HomographyFit, Image};
pub use mapping::{MapParams, OccupancyMap, Scene, TrainingRecord};
pub use neuralnet::{Architecture, NetworkParams, Prediction, TrainConfig};
pub use simworld::{EpisodeResult, RobotCommand, ScenarioClass, ScenarioSpec, SimState};
pub use tracking::{ActionLabel, Detection, DetectionKind, FloorScale, RobotPose};
pub use types::{wrap_angle, Disc, Point2, PointPx, Rect};
