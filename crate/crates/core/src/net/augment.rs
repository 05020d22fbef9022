use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid::{DenseCostmap, GridSpec};
use crate::sim::{Image, PointCloud};

use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Random quarter-turn rotations about the vertical axis.
    pub rotation: bool,
    /// Largest translation in whole cells along each axis.
    pub max_shift_cells: usize,
    pub image_noise_sigma: f64,
    /// Meters.
    pub point_noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: true,
            max_shift_cells: 2,
            image_noise_sigma: 0.01,
            point_noise_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            rotation: false,
            max_shift_cells: 0,
            image_noise_sigma: 0.0,
            point_noise_sigma: 0.0,
        }
    }
}

/// One concrete augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// Shift in `(rows, cols)`.
    pub shift: (i64, i64),
    pub image_noise_sigma: f64,
    pub point_noise_sigma: f64,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        shift: (0, 0),
        image_noise_sigma: 0.0,
        point_noise_sigma: 0.0,
    };
}

fn is_centered(g: &GridSpec) -> bool {
    (g.origin[0] + g.width_m() / 2.0).abs() < 1e-9
        && (g.origin[1] + g.height_m() / 2.0).abs() < 1e-9
}

/// Quarter turns that map `grid` exactly onto itself.
pub fn allowed_turns(grid: &GridSpec) -> &'static [u8] {
    match (is_centered(grid), grid.rows == grid.cols) {
        (true, true) => &[0, 1, 2, 3],
        (true, false) => &[0, 2],
        _ => &[0],
    }
}

fn rotate_target(t: &DenseCostmap, turns: u8) -> DenseCostmap {
    let g = t.grid;
    let mut out = DenseCostmap::empty(g);
    for r in 0..g.rows {
        for c in 0..g.cols {
            // (x, y) -> (-y, x) per quarter turn on a centered grid
            let (nr, nc) = match turns % 4 {
                0 => (r, c),
                1 => (c, g.cols - 1 - r),
                2 => (g.rows - 1 - r, g.cols - 1 - c),
                _ => (g.rows - 1 - c, r),
            };
            let (src, dst) = (g.index(r, c), g.index(nr, nc));
            out.values[dst] = t.values[src];
            out.valid[dst] = t.valid[src];
        }
    }
    out
}

fn shift_target(t: &DenseCostmap, dr: i64, dc: i64) -> DenseCostmap {
    let g = t.grid;
    let mut out = DenseCostmap::empty(g);
    for r in 0..g.rows {
        for c in 0..g.cols {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr as usize >= g.rows || nc as usize >= g.cols {
                continue;
            }
            let (src, dst) = (g.index(r, c), g.index(nr as usize, nc as usize));
            out.values[dst] = t.values[src];
            out.valid[dst] = t.valid[src];
        }
    }
    out
}

/// Applies `draw` jointly to cloud, image and target.
///
/// Rotation and translation move points and remap target cells exactly;
/// cells shifted in from outside become invalid. Gaussian noise perturbs
/// image pixels (clamped to `[0, 1]`) and point coordinates. Target values
/// are never noised. Turns the grid cannot represent exactly are skipped.
pub fn apply_augmentation(sample: &Sample, draw: &AugmentDraw, rng: &mut ChaCha8Rng) -> Sample {
    let grid = sample.target.grid;
    let turns = if allowed_turns(&grid).contains(&(draw.quarter_turns % 4)) {
        draw.quarter_turns % 4
    } else {
        0
    };
    let mut cloud = sample.cloud.clone();
    let mut target = sample.target.clone();
    if turns != 0 {
        for p in &mut cloud.points {
            for _ in 0..turns {
                p.xyz = [-p.xyz[1], p.xyz[0], p.xyz[2]];
            }
        }
        target = rotate_target(&target, turns);
    }
    let (dr, dc) = draw.shift;
    if (dr, dc) != (0, 0) {
        for p in &mut cloud.points {
            p.xyz[0] += dc as f64 * grid.resolution;
            p.xyz[1] += dr as f64 * grid.resolution;
        }
        target = shift_target(&target, dr, dc);
    }
    let mut image = sample.image.clone();
    if draw.image_noise_sigma > 0.0 {
        add_image_noise(&mut image, draw.image_noise_sigma, rng);
    }
    if draw.point_noise_sigma > 0.0 {
        add_point_noise(&mut cloud, draw.point_noise_sigma, rng);
    }
    Sample {
        cloud,
        image,
        target,
    }
}

pub(crate) fn add_image_noise(image: &mut Image, sigma: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    image
        .pixels
        .iter_mut()
        .for_each(|v| *v = (*v + n.sample(rng)).clamp(0.0, 1.0));
}

pub(crate) fn add_point_noise(cloud: &mut PointCloud, sigma: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    for p in &mut cloud.points {
        p.xyz.iter_mut().for_each(|v| *v += n.sample(rng));
    }
}

/// Draws an augmentation from `cfg` and applies it, deterministically per seed.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turns = allowed_turns(&sample.target.grid);
    let quarter_turns = if cfg.rotation {
        turns[rng.random_range(0..turns.len())]
    } else {
        0
    };
    let s = cfg.max_shift_cells as i64;
    let shift = if s > 0 {
        (rng.random_range(-s..=s), rng.random_range(-s..=s))
    } else {
        (0, 0)
    };
    let draw = AugmentDraw {
        quarter_turns,
        shift,
        image_noise_sigma: cfg.image_noise_sigma,
        point_noise_sigma: cfg.point_noise_sigma,
    };
    apply_augmentation(sample, &draw, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Point;

    fn sample() -> Sample {
        let grid = GridSpec::centered(0.5, 6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..36).map(|_| rng.random()).collect();
        let valid: Vec<bool> = (0..36).map(|i| i % 3 != 0).collect();
        let target = DenseCostmap::with_mask(grid, values, valid).unwrap();
        let cloud = PointCloud {
            points: (0..40)
                .map(|_| Point {
                    xyz: [
                        rng.random_range(-1.4..1.4),
                        rng.random_range(-1.4..1.4),
                        rng.random(),
                    ],
                    rgb: [0.5; 3],
                })
                .collect(),
        };
        let pixels = (0..4 * 5 * 3).map(|_| rng.random()).collect();
        Sample {
            cloud,
            image: Image::new(4, 5, pixels).unwrap(),
            target,
        }
    }

    #[test]
    fn identity_draw_changes_nothing() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_augmentation(&s, &AugmentDraw::IDENTITY, &mut rng), s);
        assert_eq!(augment(&s, &AugmentConfig::disabled(), 5), s);
    }

    #[test]
    fn two_quarter_turns_equal_a_half_turn() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = AugmentDraw {
            quarter_turns: 1,
            ..AugmentDraw::IDENTITY
        };
        let h = AugmentDraw {
            quarter_turns: 2,
            ..AugmentDraw::IDENTITY
        };
        let twice = apply_augmentation(&apply_augmentation(&s, &q, &mut rng), &q, &mut rng);
        let once = apply_augmentation(&s, &h, &mut rng);
        assert_eq!(twice.target, once.target);
        for (a, b) in twice.cloud.points.iter().zip(&once.cloud.points) {
            assert!(a.xyz.iter().zip(b.xyz).all(|(x, y)| (x - y).abs() < 1e-15));
        }
        let four = (0..4).fold(s.clone(), |acc, _| apply_augmentation(&acc, &q, &mut rng));
        assert_eq!(four.target, s.target);
    }

    #[test]
    fn rotation_keeps_points_in_their_cells() {
        let s = sample();
        let g = s.target.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = apply_augmentation(
            &s,
            &AugmentDraw {
                quarter_turns: 1,
                ..AugmentDraw::IDENTITY
            },
            &mut rng,
        );
        for (p, q) in s.cloud.points.iter().zip(&r.cloud.points) {
            let (a, b) = (
                g.locate(p.xyz[0], p.xyz[1]).unwrap(),
                g.locate(q.xyz[0], q.xyz[1]).unwrap(),
            );
            assert_eq!(r.target.get(b.0, b.1), s.target.get(a.0, a.1));
        }
    }

    #[test]
    fn shift_moves_cells_and_invalidates_border() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = apply_augmentation(
            &s,
            &AugmentDraw {
                shift: (1, -2),
                ..AugmentDraw::IDENTITY
            },
            &mut rng,
        );
        assert_eq!(t.cloud.len(), s.cloud.len());
        assert_eq!(t.target.get(3, 1), s.target.get(2, 3));
        assert!(!t.target.is_valid(0, 0));
        assert!((0..6).all(|c| !t.target.is_valid(0, c)));
    }

    #[test]
    fn noise_spares_the_target() {
        let s = sample();
        let cfg = AugmentConfig {
            rotation: false,
            max_shift_cells: 0,
            image_noise_sigma: 0.2,
            point_noise_sigma: 0.1,
        };
        let a = augment(&s, &cfg, 3);
        assert_eq!(a.target, s.target);
        assert_ne!(a.image, s.image);
        assert!(a.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, augment(&s, &cfg, 3));
    }
}
