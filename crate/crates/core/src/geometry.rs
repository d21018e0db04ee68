//! Planar camera geometry.
//!
//! Points entering [`DistortionCoeffs::distort`] are expressed relative to the
//! distortion center. The combined radial + tangential form is the usual
//! Brown–Conrady model:
//!
//! ```text
//! x̂ = x(1 + k1 r² + k2 r⁴ + k3 r⁶) + 2 p1 x y + p2 (r² + 2x²)
//! ŷ = y(1 + k1 r² + k2 r⁴ + k3 r⁶) + p1 (r² + 2y²) + 2 p2 x y
//! ```
//!
//! Homographies are stored with `h9 = 1` and fitted by plain full-batch
//! gradient descent on the per-coordinate squared reprojection error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Point2;
use crate::PointPx;

/// Smallest homography denominator (and determinant) treated as nonzero.
pub const PROJECTIVE_EPS: f64 = 1e-12;

/// Angular tolerance under which two lines count as parallel.
pub const PARALLEL_TOL_RAD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("undistortion did not converge after {iterations} iterations (residual {residual:e})")]
    UndistortNotConverged { iterations: usize, residual: f64 },
    #[error("point maps to infinity (denominator {denominator:e})")]
    PointAtInfinity { denominator: f64 },
    #[error("homography is singular (determinant {determinant:e})")]
    SingularHomography { determinant: f64 },
    #[error("degenerate correspondences: {0}")]
    FitDegenerate(String),
    #[error("homography fit diverged at iteration {iteration}")]
    FitDiverged { iteration: usize },
    #[error("lines do not intersect: {0}")]
    NoIntersection(String),
    #[error("invalid height: target {h_target} cm, camera {h_camera} cm")]
    InvalidHeight { h_target: f64, h_camera: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Five-coefficient radial/tangential lens model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionCoeffs {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl DistortionCoeffs {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.k3 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    pub fn is_finite(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
            .iter()
            .all(|c| c.is_finite())
    }

    /// Maps an undistorted point (relative to the optical center) to where the
    /// lens images it.
    pub fn distort(&self, p: PointPx) -> PointPx {
        p + self.delta(p)
    }

    /// `distort(p) - p`.
    fn delta(&self, p: PointPx) -> PointPx {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2;
        let tx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let ty = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        Point2::new(x * radial + tx, y * radial + ty)
    }

    /// Inverts [`distort`](Self::distort) by damped fixed-point iteration
    /// `q ← q + λ (p − distort(q))`, halving `λ` whenever the residual grows.
    pub fn undistort(&self, p: PointPx, tol: f64, max_iter: usize) -> Result<PointPx> {
        if self.is_zero() {
            return Ok(p);
        }
        let mut q = p;
        let mut residual = (self.distort(q) - p).norm();
        let mut damping = 1.0;
        for _ in 0..max_iter {
            if residual <= tol {
                return Ok(q);
            }
            let step = p - self.distort(q);
            let candidate = q + step * damping;
            let candidate_residual = (self.distort(candidate) - p).norm();
            if candidate_residual.is_finite() && candidate_residual < residual {
                q = candidate;
                residual = candidate_residual;
                damping = (damping * 2.0).min(1.0);
            } else {
                damping *= 0.5;
            }
        }
        if residual <= tol {
            Ok(q)
        } else {
            Err(GeometryError::UndistortNotConverged {
                iterations: max_iter,
                residual,
            })
        }
    }
}

/// Default undistortion tolerance.
pub const UNDISTORT_TOL: f64 = 1e-8;
/// Default undistortion iteration cap.
pub const UNDISTORT_MAX_ITER: usize = 100;

/// A 3×3 projective map, row-major, normalized so that `h[8] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    h: [f64; 9],
}

impl Default for Homography {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    };

    /// Normalizes `h` by its last entry and rejects singular matrices.
    pub fn new(h: [f64; 9]) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidConfig(
                "homography entries must be finite".into(),
            ));
        }
        let scale = h[8];
        if scale.abs() <= PROJECTIVE_EPS {
            return Err(GeometryError::SingularHomography { determinant: 0.0 });
        }
        let mut n = [0.0; 9];
        for (dst, src) in n.iter_mut().zip(h) {
            *dst = src / scale;
        }
        let hom = Homography { h: n };
        let det = hom.determinant();
        if !(det.abs() > PROJECTIVE_EPS) {
            return Err(GeometryError::SingularHomography { determinant: det });
        }
        Ok(hom)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            h: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    pub fn entries(&self) -> [f64; 9] {
        self.h
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.h)
    }

    /// Projective division of `H [x y 1]ᵀ`.
    pub fn apply(&self, p: PointPx) -> Result<PointPx> {
        let h = &self.h;
        let w = h[6] * p.x + h[7] * p.y + h[8];
        if !(w.abs() > PROJECTIVE_EPS) {
            return Err(GeometryError::PointAtInfinity { denominator: w });
        }
        Ok(Point2::new(
            (h[0] * p.x + h[1] * p.y + h[2]) / w,
            (h[3] * p.x + h[4] * p.y + h[5]) / w,
        ))
    }

    pub fn inverse(&self) -> Result<Homography> {
        let h = &self.h;
        let det = self.determinant();
        if !(det.abs() > PROJECTIVE_EPS) {
            return Err(GeometryError::SingularHomography { determinant: det });
        }
        let adj = [
            h[4] * h[8] - h[5] * h[7],
            h[2] * h[7] - h[1] * h[8],
            h[1] * h[5] - h[2] * h[4],
            h[5] * h[6] - h[3] * h[8],
            h[0] * h[8] - h[2] * h[6],
            h[2] * h[3] - h[0] * h[5],
            h[3] * h[7] - h[4] * h[6],
            h[1] * h[6] - h[0] * h[7],
            h[0] * h[4] - h[1] * h[3],
        ];
        Homography::new(adj.map(|v| v / det))
    }

    /// Matrix product `self · rhs`.
    pub fn compose(&self, rhs: &Homography) -> Result<Homography> {
        Homography::new(mat3_mul(&self.h, &rhs.h))
    }
}

fn det3(h: &[f64; 9]) -> f64 {
    h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
        + h[2] * (h[3] * h[7] - h[4] * h[6])
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

/// Gradient-descent settings for [`homography_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            iterations: 80_000,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Result of [`homography_fit`]. Losses are the summed squared pixel
/// residuals over all correspondences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyFit {
    pub homography: Homography,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Similarity transform taking a point set to zero mean and unit RMS radius.
#[derive(Debug, Clone, Copy)]
struct Normalizer {
    mean: Point2,
    scale: f64,
}

impl Normalizer {
    fn of(points: &[PointPx]) -> Self {
        let n = points.len() as f64;
        let mean = points.iter().fold(Point2::ORIGIN, |acc, &p| acc + p) * (1.0 / n);
        let ms = points.iter().map(|&p| (p - mean).dot(p - mean)).sum::<f64>() / n;
        let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    fn apply(&self, p: PointPx) -> PointPx {
        (p - self.mean) * self.scale
    }

    fn matrix(&self) -> [f64; 9] {
        let s = self.scale;
        [s, 0.0, -s * self.mean.x, 0.0, s, -s * self.mean.y, 0.0, 0.0, 1.0]
    }

    fn inverse_matrix(&self) -> [f64; 9] {
        let s = 1.0 / self.scale;
        [s, 0.0, self.mean.x, 0.0, s, self.mean.y, 0.0, 0.0, 1.0]
    }
}

fn check_correspondences(src: &[PointPx], dst: &[PointPx]) -> Result<()> {
    if src.len() != dst.len() {
        return Err(GeometryError::FitDegenerate(format!(
            "{} source points but {} targets",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(GeometryError::FitDegenerate(format!(
            "need at least 4 correspondences, got {}",
            src.len()
        )));
    }
    if src.iter().chain(dst).any(|p| !p.is_finite()) {
        return Err(GeometryError::FitDegenerate("non-finite coordinate".into()));
    }
    // Collinearity is judged in the normalized frame so the threshold is
    // independent of pixel scale.
    let norm = Normalizer::of(src);
    let pts: Vec<Point2> = src.iter().map(|&p| norm.apply(p)).collect();
    const AREA_TOL: f64 = 1e-9;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            if pts[i].distance(pts[j]) < AREA_TOL {
                return Err(GeometryError::FitDegenerate(format!(
                    "source points {i} and {j} coincide"
                )));
            }
            for k in j + 1..pts.len() {
                let a = pts[j] - pts[i];
                let b = pts[k] - pts[i];
                if (a.x * b.y - a.y * b.x).abs() < AREA_TOL {
                    return Err(GeometryError::FitDegenerate(format!(
                        "source points {i}, {j}, {k} are collinear"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Mean squared residual and its gradient for the 8 free parameters
/// (`h9 = 1`). Returns `None` if any point crosses the line at infinity.
fn loss_and_grad(theta: &[f64; 8], src: &[Point2], dst: &[Point2], grad: &mut [f64; 8]) -> Option<f64> {
    *grad = [0.0; 8];
    let mut loss = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let w = theta[6] * s.x + theta[7] * s.y + 1.0;
        if !(w.abs() > PROJECTIVE_EPS) {
            return None;
        }
        let inv_w = 1.0 / w;
        let xh = (theta[0] * s.x + theta[1] * s.y + theta[2]) * inv_w;
        let yh = (theta[3] * s.x + theta[4] * s.y + theta[5]) * inv_w;
        let rx = xh - d.x;
        let ry = yh - d.y;
        loss += rx * rx + ry * ry;
        let gx = rx * inv_w;
        let gy = ry * inv_w;
        grad[0] += gx * s.x;
        grad[1] += gx * s.y;
        grad[2] += gx;
        grad[3] += gy * s.x;
        grad[4] += gy * s.y;
        grad[5] += gy;
        let gw = -(gx * xh + gy * yh);
        grad[6] += gw * s.x;
        grad[7] += gw * s.y;
    }
    let n = src.len() as f64;
    for g in grad.iter_mut() {
        *g *= 2.0 / n;
    }
    Some(loss / n)
}

/// Fits the homography mapping `src` onto `dst` by gradient descent.
///
/// Both point sets are normalized to zero mean and unit RMS radius, the
/// normalized map is initialized at identity (with a tiny seeded jitter) and
/// descended with a fixed step for `cfg.iterations` steps. The best iterate is
/// kept, so `final_loss <= initial_loss` always holds.
pub fn homography_fit(src: &[PointPx], dst: &[PointPx], cfg: &GdConfig) -> Result<HomographyFit> {
    if cfg.iterations == 0 || !(cfg.learning_rate > 0.0) {
        return Err(GeometryError::InvalidConfig(
            "iterations must be >= 1 and learning_rate > 0".into(),
        ));
    }
    check_correspondences(src, dst)?;

    let ns = Normalizer::of(src);
    let nd = Normalizer::of(dst);
    let s: Vec<Point2> = src.iter().map(|&p| ns.apply(p)).collect();
    let d: Vec<Point2> = dst.iter().map(|&p| nd.apply(p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    for t in theta.iter_mut() {
        *t += rng.random_range(-1e-6..1e-6);
    }

    let mut grad = [0.0; 8];
    let initial = loss_and_grad(&theta, &s, &d, &mut grad)
        .ok_or(GeometryError::FitDiverged { iteration: 0 })?;
    let mut best = (initial, theta);
    for iteration in 0..cfg.iterations {
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.learning_rate * g;
        }
        let loss = match loss_and_grad(&theta, &s, &d, &mut grad) {
            Some(l) if l.is_finite() => l,
            _ => return Err(GeometryError::FitDiverged { iteration }),
        };
        if loss < best.0 {
            best = (loss, theta);
        }
    }

    let to_pixels = |theta: &[f64; 8]| -> Result<Homography> {
        let hn = [
            theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], theta[6], theta[7], 1.0,
        ];
        Homography::new(mat3_mul(&mat3_mul(&nd.inverse_matrix(), &hn), &ns.matrix()))
    };
    // Pixel residuals are the normalized ones divided by the isotropic target
    // scale, so the pixel-space loss is a fixed multiple of the descended one.
    let pixel_factor = src.len() as f64 / (nd.scale * nd.scale);
    Ok(HomographyFit {
        homography: to_pixels(&best.1)?,
        initial_loss: initial * pixel_factor,
        final_loss: best.0 * pixel_factor,
    })
}

/// Largest Euclidean reprojection residual of `h` over the correspondences.
pub fn max_residual(h: &Homography, src: &[PointPx], dst: &[PointPx]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (s, d) in src.iter().zip(dst) {
        worst = worst.max(h.apply(*s)?.distance(*d));
    }
    Ok(worst)
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(GeometryError::InvalidConfig(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    fn get_or_zero(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            f64::from(self.pixels[y as usize * self.width + x as usize])
        }
    }

    /// Bilinear sample at a sub-pixel position; neighbours outside the image
    /// read as zero.
    pub fn sample_bilinear(&self, p: PointPx) -> f64 {
        let x0 = p.x.floor();
        let y0 = p.y.floor();
        let fx = p.x - x0;
        let fy = p.y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let top = self.get_or_zero(xi, yi) * (1.0 - fx) + self.get_or_zero(xi + 1, yi) * fx;
        let bottom =
            self.get_or_zero(xi, yi + 1) * (1.0 - fx) + self.get_or_zero(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Renders `img` seen through `h`: each output pixel is pulled back through
/// `h⁻¹` and sampled bilinearly.
pub fn warp_image(img: &Image, h: &Homography, out_width: usize, out_height: usize) -> Result<Image> {
    let inv = h.inverse()?;
    let mut out = Image::filled(out_width, out_height, 0);
    for y in 0..out_height {
        for x in 0..out_width {
            let Ok(src) = inv.apply(Point2::new(x as f64, y as f64)) else {
                continue;
            };
            if !src.is_finite()
                || src.x <= -1.0
                || src.y <= -1.0
                || src.x >= img.width as f64
                || src.y >= img.height as f64
            {
                continue;
            }
            let v = img.sample_bilinear(src).round().clamp(0.0, 255.0);
            out.set(x, y, v as u8);
        }
    }
    Ok(out)
}

/// Least-squares intersection of lines, each given by two points: the point
/// minimizing the summed squared perpendicular distances.
pub fn optical_center_from_lines(lines: &[(PointPx, PointPx)]) -> Result<PointPx> {
    if lines.len() < 2 {
        return Err(GeometryError::NoIntersection(format!(
            "need at least 2 lines, got {}",
            lines.len()
        )));
    }
    let mut angles = Vec::with_capacity(lines.len());
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &(p, q)) in lines.iter().enumerate() {
        let dir = q - p;
        let len = dir.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(GeometryError::NoIntersection(format!(
                "line {i} has coincident endpoints"
            )));
        }
        angles.push(dir.angle());
        let n = Point2::new(-dir.y / len, dir.x / len);
        let c = n.dot(p);
        a11 += n.x * n.x;
        a12 += n.x * n.y;
        a22 += n.y * n.y;
        b1 += n.x * c;
        b2 += n.y * c;
    }
    let all_parallel = angles.iter().all(|&a| {
        // Direction is only defined modulo π.
        let d = (a - angles[0]).rem_euclid(std::f64::consts::PI);
        d.min(std::f64::consts::PI - d) < PARALLEL_TOL_RAD
    });
    if all_parallel {
        return Err(GeometryError::NoIntersection("all lines are parallel".into()));
    }
    let det = a11 * a22 - a12 * a12;
    Ok(Point2::new((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}

/// Projects an elevated point's perceived floor position back to the floor:
/// `p̂ · (1 − h_target / h_camera)`, with `p̂` relative to the camera's foot
/// point.
pub fn height_correct(p_hat: PointPx, h_target: f64, h_camera: f64) -> Result<PointPx> {
    if !(h_target >= 0.0) || !(h_camera > h_target) || !h_camera.is_finite() {
        return Err(GeometryError::InvalidHeight { h_target, h_camera });
    }
    Ok(p_hat * (1.0 - h_target / h_camera))
}
