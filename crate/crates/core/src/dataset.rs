//! Simulated runs on disk and their conversion into training samples.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DenseCostmap, GridSpec};
use crate::labeling::{build_labels, normalize_labels, LabelingConfig, RunLabels};
use crate::net::Sample;
use crate::raster::{decode_ppm, encode_ppm, write_atomic};
use crate::sim::{
    generate_heightfield, generate_trajectory, render_camera, simulate_lidar, synthesize_imu,
    CameraConfig, DriveConfig, Heightfield, Image, ImuSample, LidarConfig, Point, PointCloud, Pose,
    Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainConfig {
    pub rows: usize,
    pub cols: usize,
    /// Meters between heightfield nodes.
    pub cell_size: f64,
    pub roughness: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            rows: 161,
            cols: 161,
            cell_size: 0.2,
            roughness: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Ground-plane path in world meters.
    pub waypoints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub terrain: TerrainConfig,
    pub drive: DriveConfig,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    /// m/s^2
    pub gravity: f64,
    pub imu_noise_scale: f64,
    /// A LiDAR scan and camera frame are captured every this many poses.
    pub keyframe_every: usize,
    pub runs: Vec<RunSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            terrain: TerrainConfig::default(),
            drive: DriveConfig::default(),
            lidar: LidarConfig::default(),
            camera: CameraConfig::default(),
            gravity: 3.721,
            imu_noise_scale: 2.0,
            keyframe_every: 10,
            runs: Vec::new(),
        }
    }
}

/// Sensor snapshot at one trajectory pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub pose_index: usize,
    pub cloud: PointCloud,
    pub image: Image,
}

/// Everything recorded during one drive.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub trajectory: Trajectory,
    pub imu: Vec<ImuSample>,
    pub keyframes: Vec<Keyframe>,
}

pub fn simulate_terrain(cfg: &SimConfig, seed: u64) -> Result<Heightfield> {
    let t = &cfg.terrain;
    generate_heightfield(seed, t.rows, t.cols, t.cell_size, t.roughness)
}

/// Drives one waypoint path and records IMU at every pose plus keyframes.
pub fn simulate_run(hf: &Heightfield, run: &RunSpec, cfg: &SimConfig, seed: u64) -> Result<SimRun> {
    if cfg.keyframe_every == 0 {
        return Err(Error::Argument("keyframe_every must be at least 1".into()));
    }
    let trajectory = generate_trajectory(hf, &run.waypoints, &cfg.drive)?;
    let imu = synthesize_imu(&trajectory, hf, cfg.gravity, cfg.imu_noise_scale, seed)?;
    let keyframes = (0..trajectory.len())
        .step_by(cfg.keyframe_every)
        .map(|i| {
            let pose = &trajectory.poses()[i];
            Ok(Keyframe {
                pose_index: i,
                cloud: simulate_lidar(hf, pose, &cfg.lidar, seed.wrapping_add(i as u64))?,
                image: render_camera(hf, pose, &cfg.camera)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SimRun {
        trajectory,
        imu,
        keyframes,
    })
}

/// Simulates every configured run on a terrain generated from `seed`.
pub fn simulate_all(cfg: &SimConfig, seed: u64) -> Result<(Heightfield, Vec<SimRun>)> {
    if cfg.runs.is_empty() {
        return Err(Error::Argument("no runs configured".into()));
    }
    let hf = simulate_terrain(cfg, seed)?;
    let runs = cfg
        .runs
        .iter()
        .enumerate()
        .map(|(k, r)| {
            simulate_run(
                &hf,
                r,
                cfg,
                seed.wrapping_mul(1000).wrapping_add(k as u64 + 1),
            )
        })
        .collect::<Result<_>>()?;
    Ok((hf, runs))
}

fn format_row(values: &[f64]) -> String {
    let mut s = values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    s
}

fn parse_rows(text: &str, header: &str, width: usize, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Format(format!("{what}: expected header `{header}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row = l
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>();
            match row {
                Ok(r) if r.len() == width => Ok(r),
                _ => Err(Error::Format(format!("{what}: malformed row {}", i + 2))),
            }
        })
        .collect()
}

const TRAJECTORY_HEADER: &str = "t,x,y,z,qw,qx,qy,qz";
const IMU_HEADER: &str = "t,ax,ay,az,wx,wy,wz";
const CLOUD_HEADER: &str = "x,y,z,r,g,b";
const KEYFRAME_HEADER: &str = "k,pose_index";

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for p in traj.poses() {
        let q = p.orientation.quaternion();
        out += &format_row(&[
            p.t,
            p.position.x,
            p.position.y,
            p.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]);
    }
    out
}

pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory> {
    let poses = parse_rows(text, TRAJECTORY_HEADER, 8, "trajectory.csv")?
        .into_iter()
        .map(|r| Pose {
            t: r[0],
            position: Vector3::new(r[1], r[2], r[3]),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(r[4], r[5], r[6], r[7])),
        })
        .collect();
    Trajectory::new(poses)
}

pub fn imu_csv(imu: &[ImuSample]) -> String {
    let mut out = format!("{IMU_HEADER}\n");
    for s in imu {
        out += &format_row(&[
            s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z,
        ]);
    }
    out
}

pub fn parse_imu_csv(text: &str) -> Result<Vec<ImuSample>> {
    Ok(parse_rows(text, IMU_HEADER, 7, "imu.csv")?
        .into_iter()
        .map(|r| ImuSample {
            t: r[0],
            accel: Vector3::new(r[1], r[2], r[3]),
            gyro: Vector3::new(r[4], r[5], r[6]),
        })
        .collect())
}

pub fn cloud_csv(cloud: &PointCloud) -> String {
    let mut out = format!("{CLOUD_HEADER}\n");
    for p in &cloud.points {
        out += &format_row(&[p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2]]);
    }
    out
}

pub fn parse_cloud_csv(text: &str) -> Result<PointCloud> {
    let points = parse_rows(text, CLOUD_HEADER, 6, "cloud csv")?
        .into_iter()
        .map(|r| Point {
            xyz: [r[0], r[1], r[2]],
            rgb: [r[3], r[4], r[5]],
        })
        .collect();
    Ok(PointCloud { points })
}

/// Writes `trajectory.csv`, `imu.csv`, `keyframes.csv` and one
/// `cloud_<k>.csv` / `image_<k>.ppm` pair per keyframe into `dir`.
pub fn write_run(dir: &Path, run: &SimRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(
        &dir.join("trajectory.csv"),
        trajectory_csv(&run.trajectory).as_bytes(),
    )?;
    write_atomic(&dir.join("imu.csv"), imu_csv(&run.imu).as_bytes())?;
    let mut index = format!("{KEYFRAME_HEADER}\n");
    for (k, kf) in run.keyframes.iter().enumerate() {
        index += &format!("{k},{}\n", kf.pose_index);
        write_atomic(
            &dir.join(format!("cloud_{k}.csv")),
            cloud_csv(&kf.cloud).as_bytes(),
        )?;
        let img = &kf.image;
        write_atomic(
            &dir.join(format!("image_{k}.ppm")),
            &encode_ppm(img.width, img.height, &img.pixels),
        )?;
    }
    write_atomic(&dir.join("keyframes.csv"), index.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Inverse of [`write_run`]; images come back quantized to 8 bits.
pub fn read_run(dir: &Path) -> Result<SimRun> {
    let trajectory = parse_trajectory_csv(&read_text(&dir.join("trajectory.csv"))?)?;
    let imu = parse_imu_csv(&read_text(&dir.join("imu.csv"))?)?;
    let index = parse_rows(
        &read_text(&dir.join("keyframes.csv"))?,
        KEYFRAME_HEADER,
        2,
        "keyframes.csv",
    )?;
    let keyframes = index
        .iter()
        .map(|r| {
            let (k, pose_index) = (r[0] as usize, r[1] as usize);
            if pose_index >= trajectory.len() {
                return Err(Error::Format(format!(
                    "keyframe {k} references missing pose {pose_index}"
                )));
            }
            let cloud = parse_cloud_csv(&read_text(&dir.join(format!("cloud_{k}.csv")))?)?;
            let bytes = fs::read(dir.join(format!("image_{k}.ppm")))?;
            let (width, height, pixels) = decode_ppm(&bytes)?;
            Ok(Keyframe {
                pose_index,
                cloud,
                image: Image::new(height, width, pixels)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SimRun {
        trajectory,
        imu,
        keyframes,
    })
}

/// Labels of every run, normalized jointly over the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLabels {
    pub runs: Vec<RunLabels>,
    /// Normalized dense map per run.
    pub normalized: Vec<DenseCostmap>,
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

pub fn label_runs(runs: &[SimRun], cfg: &LabelingConfig) -> Result<DatasetLabels> {
    let labels: Vec<RunLabels> = runs
        .iter()
        .map(|r| build_labels(r.trajectory.poses(), &r.imu, cfg))
        .collect::<Result<_>>()?;
    let dense: Vec<DenseCostmap> = labels.iter().map(|l| l.dense.clone()).collect();
    let n = normalize_labels(&dense)?;
    Ok(DatasetLabels {
        runs: labels,
        normalized: n.maps,
        min: n.min,
        max: n.max,
        degenerate: n.degenerate,
    })
}

/// Resamples a world-frame label map onto a rover-centric BEV grid.
///
/// BEV `x` points along the rover heading and `y` to its left; only yaw is
/// used so the grid stays level. Each BEV cell takes the world cell under
/// its center, and is invalid where that cell is unlabeled or off the map.
pub fn crop_target(world: &DenseCostmap, pose: &Pose, bev: &GridSpec) -> DenseCostmap {
    let (s, c) = pose.yaw().sin_cos();
    let mut out = DenseCostmap::empty(*bev);
    for r in 0..bev.rows {
        for col in 0..bev.cols {
            let [bx, by] = bev.cell_center(r, col);
            let wx = pose.position.x + c * bx - s * by;
            let wy = pose.position.y + s * bx + c * by;
            if let Some((wr, wc)) = world.grid.locate(wx, wy) {
                if world.is_valid(wr, wc) {
                    let i = bev.index(r, col);
                    out.values[i] = world.get(wr, wc);
                    out.valid[i] = true;
                }
            }
        }
    }
    out
}

/// One sample per keyframe with at least one labeled BEV cell.
pub fn build_samples(
    runs: &[SimRun],
    labels: &[DenseCostmap],
    bev: &GridSpec,
) -> Result<Vec<Sample>> {
    if runs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} runs but {} label maps",
            runs.len(),
            labels.len()
        )));
    }
    let mut samples = Vec::new();
    for (run, world) in runs.iter().zip(labels) {
        for kf in &run.keyframes {
            let target = crop_target(world, &run.trajectory.poses()[kf.pose_index], bev);
            if target.valid_count() > 0 {
                samples.push(Sample {
                    cloud: kf.cloud.clone(),
                    image: kf.image.clone(),
                    target,
                });
            }
        }
    }
    Ok(samples)
}

/// Seeded train / held-out index split.
///
/// Indices are shuffled once; the last `round(test_fraction * n)` form the
/// held-out set (at least one when the fraction is positive and `n >= 2`).
/// Both halves are returned in ascending order.
pub fn holdout_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut k = (test_fraction * n as f64).round() as usize;
    if test_fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut test = idx.split_off(n - k.min(n));
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

/// Whole in-memory pipeline: terrain, runs, labels and BEV samples.
pub fn generate_samples(
    sim: &SimConfig,
    labeling: &LabelingConfig,
    bev: &GridSpec,
    seed: u64,
) -> Result<Vec<Sample>> {
    let (_, runs) = simulate_all(sim, seed)?;
    let labels = label_runs(&runs, labeling)?;
    build_samples(&runs, &labels.normalized, bev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn small_config() -> SimConfig {
        SimConfig {
            terrain: TerrainConfig {
                rows: 61,
                cols: 61,
                cell_size: 0.2,
                roughness: 0.5,
            },
            lidar: LidarConfig {
                rays: 300,
                ..LidarConfig::default()
            },
            camera: CameraConfig {
                height_px: 8,
                width_px: 8,
                ..CameraConfig::default()
            },
            runs: vec![RunSpec {
                waypoints: vec![[2.0, 2.0], [9.0, 3.0], [9.0, 9.0]],
            }],
            ..SimConfig::default()
        }
    }

    #[test]
    fn run_round_trips_through_files() {
        let cfg = small_config();
        let (_, runs) = simulate_all(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &runs[0]).unwrap();
        let back = read_run(dir.path()).unwrap();
        assert_eq!(back.trajectory, runs[0].trajectory);
        assert_eq!(back.imu, runs[0].imu);
        assert_eq!(back.keyframes.len(), runs[0].keyframes.len());
        for (a, b) in back.keyframes.iter().zip(&runs[0].keyframes) {
            assert_eq!(a.cloud, b.cloud);
            assert!(a
                .image
                .pixels
                .iter()
                .zip(&b.image.pixels)
                .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
        let again = tempfile::tempdir().unwrap();
        write_run(again.path(), &simulate_all(&cfg, 3).unwrap().1[0]).unwrap();
        for f in [
            "trajectory.csv",
            "imu.csv",
            "cloud_0.csv",
            "image_0.ppm",
            "keyframes.csv",
        ] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn malformed_files_are_format_errors() {
        assert!(matches!(
            parse_imu_csv("t,ax\n1,2\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_cloud_csv("x,y,z,r,g,b\n1,2,3\n"),
            Err(Error::Format(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_run(dir.path()), Err(Error::Io(_))));
    }

    #[test]
    fn split_partitions_indices() {
        let (train, test) = holdout_split(10, 0.2, 4);
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(holdout_split(10, 0.2, 4), (train, test));
        assert_eq!(holdout_split(3, 0.0, 1).1.len(), 0);
        assert_eq!(holdout_split(2, 0.01, 1).1.len(), 1);
    }

    #[test]
    fn crop_follows_heading() {
        let grid = GridSpec::new([0.0, 0.0], 1.0, 10, 10).unwrap();
        let values = (0..100).map(|i| i as f64).collect();
        let world = DenseCostmap::from_values(grid, values).unwrap();
        let bev = GridSpec::centered(1.0, 2, 2).unwrap();
        let pose = |yaw: f64| Pose {
            t: 0.0,
            position: Vector3::new(5.0, 5.0, 0.0),
            orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
        };
        // cell (row 1, col 1) of the BEV is ahead-left of the rover
        let east = crop_target(&world, &pose(0.0), &bev);
        assert_eq!(east.get(1, 1), world.get(5, 5));
        assert_eq!(east.get(0, 0), world.get(4, 4));
        let north = crop_target(&world, &pose(FRAC_PI_2), &bev);
        assert_eq!(north.get(1, 1), world.get(5, 4));
        let off = Pose {
            position: Vector3::new(20.0, 20.0, 0.0),
            ..pose(0.0)
        };
        assert_eq!(crop_target(&world, &off, &bev).valid_count(), 0);
    }

    #[test]
    fn samples_carry_labels_near_the_rover() {
        let cfg = small_config();
        let bev = GridSpec::centered(0.25, 16, 16).unwrap();
        let samples = generate_samples(&cfg, &LabelingConfig::default(), &bev, 5).unwrap();
        assert!(samples.len() >= 5);
        for s in &samples {
            assert!(s.target.is_valid(8, 8) || s.target.is_valid(7, 7));
            let (lo, hi) = s.target.valid_range().unwrap();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }
}
