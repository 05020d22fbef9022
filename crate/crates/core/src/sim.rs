//! Kinematic rover simulation over a procedural heightfield.
//!
//! The rover is glued to the surface: positions follow the terrain height
//! plus a chassis offset, attitude follows the surface normal, and the IMU
//! is synthesized from finite differences of the resulting poses. LiDAR and
//! camera sensors are ray-marched against the same surface.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::raster;

/// Elevation grid with per-node color.
///
/// Node `(row, col)` sits at world `(origin.x + col * cell_size,
/// origin.y + row * cell_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    /// Row-major heights in meters.
    pub elevations: Vec<f64>,
    /// Row-major RGB, components in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
}

impl Heightfield {
    /// Builds a heightfield, checking every invariant.
    pub fn new(
        rows: usize,
        cols: usize,
        cell_size: f64,
        origin: [f64; 2],
        elevations: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return arg(format!(
                "heightfield needs at least 2x2 nodes, got {rows}x{cols}"
            ));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return arg(format!("cell size must be positive, got {cell_size}"));
        }
        if elevations.len() != rows * cols || colors.len() != rows * cols {
            return arg("heightfield buffers do not match its dimensions");
        }
        if elevations.iter().any(|h| !h.is_finite()) {
            return arg("heightfield contains non-finite heights");
        }
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return arg("heightfield colors must lie in [0, 1]");
        }
        Ok(Self {
            rows,
            cols,
            cell_size,
            origin,
            elevations,
            colors,
        })
    }

    /// Flat field of constant height and color.
    pub fn flat(
        rows: usize,
        cols: usize,
        cell_size: f64,
        height: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        Self::new(
            rows,
            cols,
            cell_size,
            [0.0, 0.0],
            vec![height; rows * cols],
            vec![color; rows * cols],
        )
    }

    /// Builds a field from heights only, deriving colors from slope and height.
    pub fn from_heights(
        rows: usize,
        cols: usize,
        cell_size: f64,
        origin: [f64; 2],
        elevations: Vec<f64>,
    ) -> Result<Self> {
        let mut hf = Self::new(
            rows,
            cols,
            cell_size,
            origin,
            elevations,
            vec![[0.0; 3]; rows * cols],
        )?;
        hf.colors = terrain_colors(&hf);
        Ok(hf)
    }

    pub fn height_at_node(&self, row: usize, col: usize) -> f64 {
        self.elevations[row * self.cols + col]
    }

    /// World extent `(x_min, x_max, y_min, y_max)` spanned by the nodes.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin[0],
            self.origin[0] + (self.cols - 1) as f64 * self.cell_size,
            self.origin[1],
            self.origin[1] + (self.rows - 1) as f64 * self.cell_size,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, x1, y0, y1) = self.extent();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    /// Bilinear weights at `(x, y)`; caller guarantees containment.
    fn bilinear(&self, x: f64, y: f64) -> ([usize; 4], [f64; 4]) {
        let gx = ((x - self.origin[0]) / self.cell_size).clamp(0.0, (self.cols - 1) as f64);
        let gy = ((y - self.origin[1]) / self.cell_size).clamp(0.0, (self.rows - 1) as f64);
        let c0 = (gx.floor() as usize).min(self.cols - 2);
        let r0 = (gy.floor() as usize).min(self.rows - 2);
        let fx = gx - c0 as f64;
        let fy = gy - r0 as f64;
        let i00 = r0 * self.cols + c0;
        (
            [i00, i00 + 1, i00 + self.cols, i00 + self.cols + 1],
            [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        )
    }

    /// Bilinear height without range checks (clamps to the border).
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let (idx, w) = self.bilinear(x, y);
        idx.iter()
            .zip(w)
            .map(|(&i, w)| w * self.elevations[i])
            .sum()
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let (idx, w) = self.bilinear(x, y);
        let mut c = [0.0; 3];
        for (&i, w) in idx.iter().zip(w) {
            for k in 0..3 {
                c[k] += w * self.colors[i][k];
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, x1, y0, y1) = self.extent();
        let h = self.cell_size / 2.0;
        let (xa, xb) = ((x - h).max(x0), (x + h).min(x1));
        let (ya, yb) = ((y - h).max(y0), (y + h).min(y1));
        let gx = (self.height(xb, y) - self.height(xa, y)) / (xb - xa);
        let gy = (self.height(x, yb) - self.height(x, ya)) / (yb - ya);
        (gx, gy)
    }
}

/// Surface query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub height: f64,
    pub normal: Vector3<f64>,
    pub color: [f64; 3],
}

/// Height, unit normal and color of the surface at `(x, y)`.
pub fn sample_surface(hf: &Heightfield, x: f64, y: f64) -> Result<SurfaceSample> {
    if !hf.contains(x, y) {
        return Err(Error::Range(format!(
            "({x}, {y}) lies outside the heightfield"
        )));
    }
    let (gx, gy) = hf.gradient(x, y);
    Ok(SurfaceSample {
        height: hf.height(x, y),
        normal: Vector3::new(-gx, -gy, 1.0).normalize(),
        color: hf.color(x, y),
    })
}

const BASE_COLOR: [f64; 3] = [0.72, 0.42, 0.25];

fn terrain_colors(hf: &Heightfield) -> Vec<[f64; 3]> {
    let (lo, hi) = hf
        .elevations
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| {
            (lo.min(h), hi.max(h))
        });
    let span = hi - lo;
    let mut colors = Vec::with_capacity(hf.elevations.len());
    for r in 0..hf.rows {
        for c in 0..hf.cols {
            let x = hf.origin[0] + c as f64 * hf.cell_size;
            let y = hf.origin[1] + r as f64 * hf.cell_size;
            let (gx, gy) = hf.gradient(x, y);
            let slope = gx.hypot(gy);
            let rel = if span > 0.0 {
                (hf.height_at_node(r, c) - lo) / span
            } else {
                0.5
            };
            // rockier (steeper) ground is darker
            let shade = (1.0 - 0.5 * slope.min(1.0)) * (0.9 + 0.2 * rel);
            colors.push(BASE_COLOR.map(|b| (b * shade).clamp(0.0, 1.0)));
        }
    }
    colors
}

/// Lattice of uniform values for one octave of value noise.
struct ValueNoise {
    lattice: Vec<f64>,
    width: usize,
    height: usize,
    scale: f64,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Self {
        let width = (cols as f64 / scale).ceil() as usize + 2;
        let height = (rows as f64 / scale).ceil() as usize + 2;
        let lattice = (0..width * height)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        Self {
            lattice,
            width,
            height,
            scale,
        }
    }

    /// Smoothly interpolated noise at node coordinates `(col, row)`.
    fn at(&self, col: f64, row: f64) -> f64 {
        let gx = col / self.scale;
        let gy = row / self.scale;
        let x0 = (gx.floor() as usize).min(self.width - 2);
        let y0 = (gy.floor() as usize).min(self.height - 2);
        let sx = smoothstep(gx - x0 as f64);
        let sy = smoothstep(gy - y0 as f64);
        let v = |x: usize, y: usize| self.lattice[y * self.width + x];
        let top = v(x0, y0) * (1.0 - sx) + v(x0 + 1, y0) * sx;
        let bottom = v(x0, y0 + 1) * (1.0 - sx) + v(x0 + 1, y0 + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Amplitude of the broad undulations at `roughness = 1`, meters.
const RELIEF_AMPLITUDE: f64 = 1.5;
/// Amplitude of the short-wavelength bumps inside rough patches, meters.
const BUMP_AMPLITUDE: f64 = 0.25;

/// Procedural Mars-like terrain.
///
/// Elevations sum four octaves of value noise (broad relief) with a
/// short-wavelength bump layer gated by a low-frequency mask, which yields
/// distinct rough and smooth patches. Every amplitude scales with
/// `roughness`, so `roughness = 0` gives a flat field at height zero.
pub fn generate_heightfield(
    seed: u64,
    rows: usize,
    cols: usize,
    cell_size: f64,
    roughness: f64,
) -> Result<Heightfield> {
    if rows < 2 || cols < 2 {
        return arg(format!(
            "heightfield needs at least 2x2 nodes, got {rows}x{cols}"
        ));
    }
    if !(cell_size > 0.0) {
        return arg(format!("cell size must be positive, got {cell_size}"));
    }
    if !(0.0..=1.0).contains(&roughness) {
        return arg(format!("roughness must lie in [0, 1], got {roughness}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // noise wavelengths are expressed in meters so the terrain character does
    // not depend on the sampling resolution
    let cells = |meters: f64| (meters / cell_size).max(1.0);
    let octaves: Vec<ValueNoise> = [6.4, 3.2, 1.6, 0.8]
        .iter()
        .map(|&m| ValueNoise::new(&mut rng, rows, cols, cells(m)))
        .collect();
    let mask = ValueNoise::new(&mut rng, rows, cols, cells(4.0));
    let bumps = ValueNoise::new(&mut rng, rows, cols, cells(0.4));

    let mut elevations = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (fc, fr) = (c as f64, r as f64);
            let mut relief = 0.0;
            let mut amp = 1.0;
            for o in &octaves {
                relief += amp * o.at(fc, fr);
                amp *= 0.5;
            }
            let gate = smoothstep((mask.at(fc, fr) * 2.0).clamp(0.0, 1.0));
            let h = roughness
                * (RELIEF_AMPLITUDE * relief / 1.875 + BUMP_AMPLITUDE * gate * bumps.at(fc, fr));
            elevations.push(h);
        }
    }
    Heightfield::from_heights(rows, cols, cell_size, [0.0, 0.0], elevations)
}

/// Height range declared next to an imported raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeightmapMeta {
    pub min_height_m: f64,
    pub max_height_m: f64,
    #[serde(default)]
    pub cell_size_m: Option<f64>,
}

/// Sidecar path for a raster: `dir/name.pgm` → `dir/name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("raster");
    path.with_file_name(format!("{stem}.meta.json"))
}

/// Imports a grayscale PGM heightmap plus its `.meta.json` sidecar.
///
/// Pixel `p` maps to `min + (max - min) * p / maxval`. Raster row `i` becomes
/// heightfield row `i`. The `cell_size` argument is authoritative; a
/// `cell_size_m` declared in the sidecar is informational only.
pub fn load_heightfield(path: &Path, cell_size: f64) -> Result<Heightfield> {
    if !(cell_size > 0.0) {
        return arg(format!("cell size must be positive, got {cell_size}"));
    }
    let bytes = std::fs::read(path)?;
    let map = raster::decode_pgm(&bytes)?;
    let meta_path = sidecar_path(path);
    let meta: HeightmapMeta = serde_json::from_slice(&std::fs::read(&meta_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if !meta.min_height_m.is_finite()
        || !meta.max_height_m.is_finite()
        || meta.max_height_m < meta.min_height_m
    {
        return Err(Error::Format("sidecar height range is invalid".into()));
    }
    if map.width < 2 || map.height < 2 {
        return Err(Error::Format(
            "heightmap raster must be at least 2x2".into(),
        ));
    }
    let span = meta.max_height_m - meta.min_height_m;
    let elevations = map
        .pixels
        .iter()
        .map(|&p| meta.min_height_m + span * p as f64 / map.maxval as f64)
        .collect();
    Heightfield::new(
        map.height,
        map.width,
        cell_size,
        [0.0, 0.0],
        elevations,
        vec![[0.5; 3]; map.width * map.height],
    )
}

/// Time-stamped rigid pose; orientation maps body to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    /// Yaw, pitch and roll (radians) of the body frame.
    pub fn euler(&self) -> (f64, f64, f64) {
        let (roll, pitch, yaw) = self.orientation.euler_angles();
        (yaw, pitch, roll)
    }

    pub fn yaw(&self) -> f64 {
        self.euler().0
    }
}

/// Ordered poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if poses.len() < 2 {
            return arg("trajectory needs at least two poses");
        }
        for (i, w) in poses.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return arg(format!(
                    "trajectory timestamps must increase strictly (pose {})",
                    i + 1
                ));
            }
        }
        for (i, p) in poses.iter().enumerate() {
            if !p.t.is_finite() || (p.orientation.norm() - 1.0).abs() > 1e-9 {
                return arg(format!(
                    "pose {i} has a non-finite time or non-unit orientation"
                ));
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Drive parameters for [`generate_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveConfig {
    /// m/s
    pub speed: f64,
    /// Sample interval, seconds.
    pub dt: f64,
    /// Height of the body origin above the ground contact, meters.
    pub chassis_height: f64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            speed: 1.0,
            dt: 0.1,
            chassis_height: 0.5,
        }
    }
}

/// Samples a constant-speed drive along a piecewise-linear waypoint path.
///
/// Poses are spaced `speed * dt` apart in the ground plane; the final
/// partial step is dropped.
pub fn generate_trajectory(
    hf: &Heightfield,
    waypoints: &[[f64; 2]],
    drive: &DriveConfig,
) -> Result<Trajectory> {
    if waypoints.len() < 2 {
        return arg("a trajectory needs at least two waypoints");
    }
    if !(drive.speed > 0.0) || !(drive.dt > 0.0) {
        return arg("speed and dt must be positive");
    }
    for (i, w) in waypoints.iter().enumerate() {
        if !hf.contains(w[0], w[1]) {
            return Err(Error::Range(format!(
                "waypoint {i} ({}, {}) lies outside the heightfield",
                w[0], w[1]
            )));
        }
    }
    let segments: Vec<(f64, [f64; 2], [f64; 2])> = waypoints
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]), w[0], w[1]))
        .filter(|(len, _, _)| *len > 0.0)
        .collect();
    if segments.is_empty() {
        return arg("waypoints do not span any distance");
    }
    let total: f64 = segments.iter().map(|s| s.0).sum();
    let step = drive.speed * drive.dt;
    let count = (total / step + 1e-9).floor() as usize + 1;

    let mut poses = Vec::with_capacity(count);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..count {
        let s = k as f64 * step;
        while seg + 1 < segments.len() && s > seg_start + segments[seg].0 {
            seg_start += segments[seg].0;
            seg += 1;
        }
        let (len, a, b) = segments[seg];
        let f = ((s - seg_start) / len).clamp(0.0, 1.0);
        let x = a[0] + f * (b[0] - a[0]);
        let y = a[1] + f * (b[1] - a[1]);
        let surf = sample_surface(hf, x, y)?;
        let heading = Vector3::new((b[0] - a[0]) / len, (b[1] - a[1]) / len, 0.0);
        poses.push(Pose {
            t: k as f64 * drive.dt,
            position: Vector3::new(x, y, surf.height + drive.chassis_height),
            orientation: surface_attitude(heading, surf.normal),
        });
    }
    Trajectory::new(poses)
}

/// Body attitude with +z along the surface normal and +x along the heading
/// projected onto the tangent plane.
fn surface_attitude(heading: Vector3<f64>, normal: Vector3<f64>) -> UnitQuaternion<f64> {
    let x = (heading - normal * heading.dot(&normal)).normalize();
    let y = normal.cross(&x);
    let m = Matrix3::from_columns(&[x, y, normal]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// One inertial measurement in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force including gravity, m/s².
    pub accel: Vector3<f64>,
    /// Angular rate, rad/s.
    pub gyro: Vector3<f64>,
}

/// Synthesizes one IMU sample per pose.
///
/// Acceleration is the second difference of position plus the gravity
/// reaction, rotated into the body frame, plus zero-mean Gaussian noise with
/// standard deviation `noise_scale * |slope|` at the pose. Angular rate is
/// the body-frame forward difference of orientation. Endpoint samples reuse
/// their neighbor's finite differences.
pub fn synthesize_imu(
    traj: &Trajectory,
    hf: &Heightfield,
    gravity: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<ImuSample>> {
    if !(noise_scale >= 0.0) {
        return arg("noise scale must be non-negative");
    }
    let poses = traj.poses();
    let n = poses.len();
    let second_diff = |i: usize| -> Vector3<f64> {
        let (a, b, c) = (&poses[i - 1], &poses[i], &poses[i + 1]);
        let v0 = (b.position - a.position) / (b.t - a.t);
        let v1 = (c.position - b.position) / (c.t - b.t);
        (v1 - v0) * (2.0 / (c.t - a.t))
    };
    let rate = |i: usize, j: usize| -> Vector3<f64> {
        let rel = poses[i].orientation.inverse() * poses[j].orientation;
        rel.scaled_axis() / (poses[j].t - poses[i].t)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (i, pose) in poses.iter().enumerate() {
        let accel_world = if n < 3 {
            Vector3::zeros()
        } else {
            second_diff(i.clamp(1, n - 2))
        };
        let gyro = if n < 2 {
            Vector3::zeros()
        } else if i + 1 < n {
            rate(i, i + 1)
        } else {
            rate(i - 1, i)
        };
        let specific = accel_world + Vector3::new(0.0, 0.0, gravity);
        let mut accel = pose.orientation.inverse_transform_vector(&specific);
        let surf = sample_surface(hf, pose.position.x, pose.position.y)?;
        let slope = surf.normal.xy().norm() / surf.normal.z;
        let noise =
            Normal::new(0.0, noise_scale * slope).map_err(|e| Error::Numeric(e.to_string()))?;
        for k in 0..3 {
            accel[k] += noise.sample(&mut rng);
        }
        out.push(ImuSample {
            t: pose.t,
            accel,
            gyro,
        });
    }
    Ok(out)
}

/// A colored point in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub xyz: [f64; 3],
    pub rgb: [f64; 3],
}

/// Colored point cloud; may be empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// RGB image, row-major `height x width x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return arg("image buffer does not match its dimensions");
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return arg("image values must lie in [0, 1]");
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Ray-march step as a fraction of the heightfield cell size.
pub const MARCH_STEP_FRACTION: f64 = 0.25;
/// Height tolerance of a refined ray hit, meters.
pub const HIT_TOLERANCE: f64 = 1e-3;

/// Marches a ray from `origin` along unit `dir` and returns the range of its
/// first surface intersection within `max_range`.
///
/// A bracketed crossing is refined by bisection to well within
/// [`HIT_TOLERANCE`]. Rays leaving the field, or starting below it, miss.
pub fn cast_ray(
    hf: &Heightfield,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    max_range: f64,
) -> Option<f64> {
    let gap = |t: f64| -> Option<f64> {
        let p = origin + dir * t;
        hf.contains(p.x, p.y).then(|| p.z - hf.height(p.x, p.y))
    };
    let step = hf.cell_size * MARCH_STEP_FRACTION;
    let mut t0 = 0.0;
    if gap(0.0)? < 0.0 {
        return None;
    }
    while t0 < max_range {
        let t1 = (t0 + step).min(max_range);
        if gap(t1)? <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let gm = gap(mid)?;
                if gm.abs() < HIT_TOLERANCE * 1e-3 {
                    return Some(mid);
                }
                if gm > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t0 = t1;
    }
    None
}

/// LiDAR scan geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub rays: usize,
    pub max_range: f64,
    pub azimuth_fov_deg: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            rays: 4000,
            max_range: 20.0,
            azimuth_fov_deg: 360.0,
            elevation_min_deg: -7.0,
            elevation_max_deg: 52.0,
        }
    }
}

const GOLDEN_FRACTION: f64 = 0.618_033_988_749_894_8;

/// Unit ray directions in the sensor frame: elevations evenly spread over
/// the field of view, azimuths advancing by the golden ratio from a
/// seed-dependent phase.
pub fn lidar_directions(cfg: &LidarConfig, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random();
    let (emin, emax) = (
        cfg.elevation_min_deg.to_radians(),
        cfg.elevation_max_deg.to_radians(),
    );
    let az_fov = cfg.azimuth_fov_deg.to_radians();
    (0..cfg.rays)
        .map(|k| {
            let el = emin + (emax - emin) * (k as f64 + 0.5) / cfg.rays as f64;
            let frac = (phase + k as f64 * GOLDEN_FRACTION).fract();
            let az = -az_fov / 2.0 + frac * az_fov;
            Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
        })
        .collect()
}

/// Casts a LiDAR scan from `pose` and returns hits in the sensor (body)
/// frame, colored by the surface they strike.
pub fn simulate_lidar(
    hf: &Heightfield,
    pose: &Pose,
    cfg: &LidarConfig,
    seed: u64,
) -> Result<PointCloud> {
    if cfg.rays == 0 || !(cfg.max_range > 0.0) {
        return arg("lidar needs a positive ray count and range");
    }
    if !hf.contains(pose.position.x, pose.position.y) {
        return Err(Error::Range(
            "lidar pose lies outside the heightfield".into(),
        ));
    }
    let mut points = Vec::new();
    for dir_body in lidar_directions(cfg, seed) {
        let dir = pose.orientation.transform_vector(&dir_body);
        if let Some(range) = cast_ray(hf, pose.position, dir, cfg.max_range) {
            let world = pose.position + dir * range;
            let local = dir_body * range;
            points.push(Point {
                xyz: [local.x, local.y, local.z],
                rgb: hf.color(world.x, world.y),
            });
        }
    }
    Ok(PointCloud { points })
}

/// Pinhole camera looking along body +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub height_px: usize,
    pub width_px: usize,
    pub horizontal_fov_deg: f64,
    /// Downward tilt of the optical axis.
    pub pitch_down_deg: f64,
    pub max_range: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            height_px: 32,
            width_px: 32,
            horizontal_fov_deg: 90.0,
            pitch_down_deg: 20.0,
            max_range: 30.0,
        }
    }
}

/// Color of pixels whose ray hits no terrain.
pub const SKY_COLOR: [f64; 3] = [0.84, 0.68, 0.55];

/// Renders the surface color seen through a pinhole camera at `pose`.
pub fn render_camera(hf: &Heightfield, pose: &Pose, cfg: &CameraConfig) -> Result<Image> {
    if cfg.height_px == 0 || cfg.width_px == 0 {
        return arg("camera image must have at least one pixel");
    }
    if !hf.contains(pose.position.x, pose.position.y) {
        return Err(Error::Range(
            "camera pose lies outside the heightfield".into(),
        ));
    }
    let half_w = (cfg.horizontal_fov_deg.to_radians() / 2.0).tan();
    let half_h = half_w * cfg.height_px as f64 / cfg.width_px as f64;
    let tilt = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), cfg.pitch_down_deg.to_radians());
    let mut pixels = Vec::with_capacity(cfg.height_px * cfg.width_px * 3);
    for r in 0..cfg.height_px {
        for c in 0..cfg.width_px {
            let u = (c as f64 + 0.5) / cfg.width_px as f64 - 0.5;
            let v = (r as f64 + 0.5) / cfg.height_px as f64 - 0.5;
            let cam = Vector3::new(1.0, -2.0 * u * half_w, -2.0 * v * half_h).normalize();
            let dir = pose.orientation.transform_vector(&(tilt * cam));
            let rgb = match cast_ray(hf, pose.position, dir, cfg.max_range) {
                Some(t) => {
                    let p = pose.position + dir * t;
                    hf.color(p.x, p.y)
                }
                None => SKY_COLOR,
            };
            pixels.extend_from_slice(&rgb);
        }
    }
    Image::new(cfg.height_px, cfg.width_px, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MARS_RED: [f64; 3] = [0.7, 0.4, 0.2];

    fn flat(height: f64) -> Heightfield {
        Heightfield::flat(101, 101, 0.2, height, MARS_RED).unwrap()
    }

    #[test]
    fn zero_roughness_is_flat() {
        let hf = generate_heightfield(7, 64, 64, 0.2, 0.0).unwrap();
        let h0 = hf.elevations[0];
        assert!(hf.elevations.iter().all(|&h| h == h0));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_heightfield(7, 64, 64, 0.2, 0.5).unwrap();
        let b = generate_heightfield(7, 64, 64, 0.2, 0.5).unwrap();
        let c = generate_heightfield(8, 64, 64, 0.2, 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.elevations, c.elevations);
    }

    #[test]
    fn generation_rejects_bad_dimensions() {
        assert!(matches!(
            generate_heightfield(1, 1, 64, 0.2, 0.5),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            generate_heightfield(1, 64, 64, 0.0, 0.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn flat_surface_normal_points_up() {
        let hf = flat(1.5);
        let s = sample_surface(&hf, 3.33, 7.01).unwrap();
        assert_eq!(s.height, 1.5);
        assert_eq!(s.normal, Vector3::new(0.0, 0.0, 1.0));
        assert!(s
            .color
            .iter()
            .zip(MARS_RED)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn bilinear_at_nodes_and_centers() {
        let hf =
            Heightfield::from_heights(2, 2, 1.0, [0.0, 0.0], vec![1.0, 2.0, 4.0, 9.0]).unwrap();
        assert_eq!(sample_surface(&hf, 1.0, 1.0).unwrap().height, 9.0);
        assert_eq!(sample_surface(&hf, 0.0, 1.0).unwrap().height, 4.0);
        assert_eq!(sample_surface(&hf, 0.5, 0.5).unwrap().height, 4.0);
        assert!(matches!(
            sample_surface(&hf, 1.5, 0.5),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn surface_normals_are_unit() {
        let hf = generate_heightfield(3, 40, 40, 0.2, 1.0).unwrap();
        for k in 0..50 {
            let x = 0.1 + k as f64 * 0.15;
            let n = sample_surface(&hf, x, 7.8 - x).unwrap().normal;
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.z > 0.0);
        }
    }

    #[test]
    fn trajectory_spacing_and_timing() {
        let hf = flat(0.0);
        let drive = DriveConfig {
            speed: 1.0,
            dt: 0.1,
            chassis_height: 0.5,
        };
        let traj = generate_trajectory(&hf, &[[2.0, 5.0], [12.0, 5.0]], &drive).unwrap();
        assert_eq!(traj.len(), 101);
        for w in traj.poses().windows(2) {
            let d = (w[1].position - w[0].position).xy().norm();
            assert!((d - 0.1).abs() < 1e-9);
            assert!((w[1].t - w[0].t - 0.1).abs() < 1e-12);
        }
        for p in traj.poses() {
            let (_, pitch, roll) = p.euler();
            assert!(pitch.abs() < 1e-12 && roll.abs() < 1e-12);
            assert_eq!(p.position.z, 0.5);
        }
    }

    #[test]
    fn trajectory_yaw_follows_path() {
        let hf = flat(0.0);
        let traj =
            generate_trajectory(&hf, &[[5.0, 5.0], [5.0, 9.0]], &DriveConfig::default()).unwrap();
        assert!((traj.poses()[3].yaw() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn trajectory_rejects_outside_waypoints() {
        let hf = flat(0.0);
        let r = generate_trajectory(&hf, &[[1.0, 1.0], [50.0, 1.0]], &DriveConfig::default());
        assert!(matches!(r, Err(Error::Range(_))));
    }

    #[test]
    fn straight_flat_imu_is_gravity_only() {
        let hf = flat(0.0);
        let traj =
            generate_trajectory(&hf, &[[1.0, 2.0], [15.0, 9.0]], &DriveConfig::default()).unwrap();
        let imu = synthesize_imu(&traj, &hf, 9.81, 0.0, 1).unwrap();
        assert_eq!(imu.len(), traj.len());
        for s in &imu {
            assert!(
                (s.accel - Vector3::new(0.0, 0.0, 9.81)).norm() < 1e-9,
                "{:?}",
                s.accel
            );
            assert!(s.gyro.norm() < 1e-12);
        }
    }

    #[test]
    fn noisy_imu_is_seeded() {
        let hf = generate_heightfield(5, 60, 60, 0.2, 0.8).unwrap();
        let traj =
            generate_trajectory(&hf, &[[1.0, 1.0], [10.0, 10.0]], &DriveConfig::default()).unwrap();
        let a = synthesize_imu(&traj, &hf, 3.71, 0.5, 9).unwrap();
        let b = synthesize_imu(&traj, &hf, 3.71, 0.5, 9).unwrap();
        let c = synthesize_imu(&traj, &hf, 3.71, 0.5, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn accel_variance(samples: &[ImuSample]) -> f64 {
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
        samples
            .iter()
            .map(|s| (s.accel - mean).norm_squared())
            .sum::<f64>()
            / n
    }

    #[test]
    fn rough_segment_has_larger_accel_variance() {
        // flat for x < 10, bumpy for x >= 10
        let (rows, cols, cs) = (21, 101, 0.2);
        let mut h = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 50..cols {
                h[r * cols + c] = 0.05 * ((c * 7 + r * 3) as f64).sin();
            }
        }
        let hf = Heightfield::from_heights(rows, cols, cs, [0.0, 0.0], h).unwrap();
        let traj =
            generate_trajectory(&hf, &[[0.5, 2.0], [19.5, 2.0]], &DriveConfig::default()).unwrap();
        let imu = synthesize_imu(&traj, &hf, 3.71, 0.0, 0).unwrap();
        let mut flat_part = Vec::new();
        let mut rough_part = Vec::new();
        for (s, p) in imu.iter().zip(traj.poses()) {
            if p.position.x < 9.5 {
                flat_part.push(*s);
            } else if p.position.x > 10.5 {
                rough_part.push(*s);
            }
        }
        assert!(accel_variance(&rough_part) > accel_variance(&flat_part));
    }

    #[test]
    fn downward_ray_hits_plane_at_slant_range() {
        let hf = flat(0.3);
        let origin = Vector3::new(10.0, 10.0, 2.3);
        let tilt: f64 = 0.4;
        let dir = Vector3::new(tilt.sin(), 0.0, -tilt.cos());
        let range = cast_ray(&hf, origin, dir, 10.0).unwrap();
        assert!((range - 2.0 / tilt.cos()).abs() < 1e-6);
    }

    fn level_pose(x: f64, y: f64, z: f64) -> Pose {
        Pose {
            t: 0.0,
            position: Vector3::new(x, y, z),
            orientation: UnitQuaternion::identity(),
        }
    }

    #[test]
    fn lidar_short_range_sees_nothing() {
        let hf = flat(0.0);
        let cfg = LidarConfig {
            rays: 500,
            max_range: 1.0,
            ..LidarConfig::default()
        };
        let cloud = simulate_lidar(&hf, &level_pose(10.0, 10.0, 2.0), &cfg, 3).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn lidar_hits_lie_on_surface() {
        let hf = generate_heightfield(11, 101, 101, 0.2, 0.7).unwrap();
        let traj =
            generate_trajectory(&hf, &[[8.0, 8.0], [12.0, 11.0]], &DriveConfig::default()).unwrap();
        let pose = traj.poses()[10];
        let cfg = LidarConfig {
            rays: 1500,
            max_range: 8.0,
            elevation_min_deg: -40.0,
            ..LidarConfig::default()
        };
        let cloud = simulate_lidar(&hf, &pose, &cfg, 2).unwrap();
        assert!(cloud.len() > 300);
        for p in &cloud.points {
            let w = pose.position + pose.orientation.transform_vector(&Vector3::from(p.xyz));
            assert!((w.z - hf.height(w.x, w.y)).abs() <= HIT_TOLERANCE);
        }
        assert_eq!(cloud, simulate_lidar(&hf, &pose, &cfg, 2).unwrap());
    }

    #[test]
    fn camera_on_uniform_plane_sees_ground_and_sky() {
        let hf = flat(0.0);
        let cfg = CameraConfig {
            height_px: 12,
            width_px: 16,
            pitch_down_deg: 0.0,
            max_range: 8.0,
            ..CameraConfig::default()
        };
        let pose = level_pose(10.0, 10.0, 1.0);
        let img = render_camera(&hf, &pose, &cfg).unwrap();
        assert_eq!(
            (img.height, img.width, img.pixels.len()),
            (12, 16, 12 * 16 * 3)
        );
        let mut saw = (false, false);
        for r in 0..img.height {
            for c in 0..img.width {
                let px = img.pixel(r, c);
                if px == SKY_COLOR {
                    saw.0 = true;
                } else {
                    assert!(px.iter().zip(MARS_RED).all(|(a, b)| (a - b).abs() < 1e-12));
                    saw.1 = true;
                }
            }
        }
        assert_eq!(saw, (true, true));
        assert_eq!(img, render_camera(&hf, &pose, &cfg).unwrap());
    }

    #[test]
    fn pgm_import_maps_heights_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.pgm");
        let map = raster::Graymap {
            width: 64,
            height: 64,
            maxval: 255,
            pixels: (0..64 * 64).map(|i| ((i % 64) * 4) as u32).collect(),
        };
        std::fs::write(&path, raster::encode_pgm_binary(&map)).unwrap();
        std::fs::write(
            sidecar_path(&path),
            r#"{"min_height_m": -2.0, "max_height_m": 3.0, "cell_size_m": 0.5}"#,
        )
        .unwrap();
        let hf = load_heightfield(&path, 0.5).unwrap();
        assert_eq!((hf.rows, hf.cols), (64, 64));
        for r in 0..64 {
            for c in 1..64 {
                assert!(hf.height_at_node(r, c) > hf.height_at_node(r, c - 1));
            }
        }
        assert_eq!(hf.height_at_node(0, 0), -2.0);

        let flat_path = dir.path().join("flat.pgm");
        std::fs::write(&flat_path, b"P2\n2 2\n10\n4 4 4 4\n").unwrap();
        std::fs::write(
            sidecar_path(&flat_path),
            r#"{"min_height_m": 0.0, "max_height_m": 1.0}"#,
        )
        .unwrap();
        let hf = load_heightfield(&flat_path, 1.0).unwrap();
        assert!(hf.elevations.iter().all(|&h| h == 0.4));

        let bad = dir.path().join("bad.pgm");
        std::fs::write(&bad, b"P2\n2 2\n0\n0 0 0 0\n").unwrap();
        std::fs::write(
            sidecar_path(&bad),
            r#"{"min_height_m": 0.0, "max_height_m": 1.0}"#,
        )
        .unwrap();
        assert!(matches!(load_heightfield(&bad, 1.0), Err(Error::Format(_))));
    }
}
