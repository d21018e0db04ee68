//! TOML pipeline configuration. Every section and key is optional; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use crowdnav_core::geometry::{homography_fit, optical_center_from_lines, DistortionCoeffs, GdConfig, Homography};
use crowdnav_core::mapping::MapParams;
use crowdnav_core::simworld::ScenarioClass;
use crowdnav_core::tracking::{FloorScale, Rectification, DECISION_DT, DEFAULT_HUMAN_HEIGHT};
use crowdnav_core::{Point2, Rect, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub rectification: RectificationConfig,
    pub floor: FloorConfig,
    pub map: MapParams,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub homography_fit: GdConfig,
    pub scenario: ScenarioConfig,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectificationConfig {
    pub distortion: DistortionCoeffs,
    /// Camera pixel the distortion model is centred on.
    pub lens_center: [f64; 2],
    /// Pixels per normalized image unit, usually the focal length.
    pub lens_scale: f64,
    /// Floor homography correspondences, camera pixels to rectified pixels.
    /// Empty means identity.
    pub homography_src: Vec<[f64; 2]>,
    pub homography_dst: Vec<[f64; 2]>,
}

impl Default for RectificationConfig {
    fn default() -> Self {
        Self {
            distortion: DistortionCoeffs::default(),
            lens_center: [0.0, 0.0],
            lens_scale: 1.0,
            homography_src: vec![],
            homography_dst: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FloorConfig {
    pub cm_per_px: f64,
    pub h_camera: f64,
    pub h_human: f64,
    pub h_robot: f64,
    /// Used when no lines are given.
    pub optical_center: [f64; 2],
    /// Vertical edges `[x0, y0, x1, y1]` in rectified pixels whose extensions
    /// meet at the optical center.
    pub optical_center_lines: Vec<[f64; 4]>,
}

impl Default for FloorConfig {
    fn default() -> Self {
        Self {
            cm_per_px: 1.0,
            h_camera: 1000.0,
            h_human: DEFAULT_HUMAN_HEIGHT,
            h_robot: 30.0,
            optical_center: [0.0, 0.0],
            optical_center_lines: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Goal the tracked robot was driving to, floor cm.
    pub goal: [f64; 2],
    pub walls: Vec<Rect>,
    /// Seconds per decision step of the detection log.
    pub dt: f64,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { goal: [0.0, 0.0], walls: vec![], dt: DECISION_DT, test_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub class: ScenarioClass,
    pub episodes: usize,
    pub max_steps: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { class: ScenarioClass::Clear, episodes: 10, max_steps: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub addr: String,
    pub record_dir: PathBuf,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8765".into(), record_dir: "recordings".into() }
    }
}

fn point([x, y]: [f64; 2]) -> Point2 {
    Point2::new(x, y)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.floor_scale()?;
        self.train.validate()?;
        let r = &self.rectification;
        if r.homography_src.len() != r.homography_dst.len() {
            bail!("homography_src and homography_dst differ in length");
        }
        if !(r.lens_scale > 0.0) {
            bail!("lens_scale must be positive");
        }
        if !(self.map.extent > 0.0 && self.map.person_radius > 0.0) {
            bail!("map extent and person_radius must be positive");
        }
        if !(self.dataset.dt > 0.0) {
            bail!("dataset dt must be positive");
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            bail!("test_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn floor_scale(&self) -> anyhow::Result<FloorScale> {
        let f = &self.floor;
        let optical_center = if f.optical_center_lines.is_empty() {
            point(f.optical_center)
        } else {
            let lines: Vec<_> = f
                .optical_center_lines
                .iter()
                .map(|&[x0, y0, x1, y1]| (Point2::new(x0, y0), Point2::new(x1, y1)))
                .collect();
            optical_center_from_lines(&lines).context("optical center")?
        };
        let scale = FloorScale {
            cm_per_px: f.cm_per_px,
            h_camera: f.h_camera,
            h_human: f.h_human,
            h_robot: f.h_robot,
            optical_center,
        };
        scale.validate()?;
        Ok(scale)
    }

    pub fn rectification(&self) -> anyhow::Result<Rectification> {
        let r = &self.rectification;
        let homography = if r.homography_src.is_empty() {
            Homography::IDENTITY
        } else {
            let src: Vec<_> = r.homography_src.iter().copied().map(point).collect();
            let dst: Vec<_> = r.homography_dst.iter().copied().map(point).collect();
            homography_fit(&src, &dst, &self.homography_fit).context("fitting floor homography")?.homography
        };
        Ok(Rectification {
            lens: r.distortion,
            lens_center: point(r.lens_center),
            lens_scale: r.lens_scale,
            homography,
        })
    }
}
