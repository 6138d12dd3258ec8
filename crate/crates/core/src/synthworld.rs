//! Procedural off-road scenes with exact ground truth.
//!
//! A scene is a raster world in the reference frame of the ego vehicle: a
//! winding road corridor (drivable), rough bermed shoulders (grey), open
//! ground beyond them (drivable) dotted with tall obstacles, all on top of a
//! gently undulating terrain. The vehicle drives along the road centreline.
//! LiDAR visibility is simulated by ray marching from a roof-mounted sensor
//! at a few consecutive trajectory poses; cells that no pose can see are
//! unknown.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autolabel::{distance_to_polyline, project_vehicle_path};
use crate::bev::{quantize_height, GridSpec, HeightWindow, PointCloud, Pose2p5D, DEFAULT_FRAMES};
use crate::error::{Error, Result};
use crate::grids::{Grid, HeightMap, Label, LabelMap, LabelRole};
use crate::rng;

/// Spacing of trajectory poses along the road, meters.
pub const TRAJECTORY_STEP: f64 = 1.0;
/// LiDAR mounting height above the ground under the vehicle, meters.
pub const SENSOR_HEIGHT: f64 = 1.9;
/// Slope above which bare terrain counts as an obstacle (35 degrees).
const STEEP_SLOPE: f64 = 0.7;
const POINTS_PER_CELL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    /// Meters per pixel.
    pub resolution: f64,
    pub road_width: f64,
    /// Width of each shoulder, meters.
    pub grey_width: f64,
    /// Obstacles per 100 m^2 of open ground.
    pub obstacle_density: f64,
    /// Amplitude of the smooth terrain undulation, meters.
    pub terrain_roughness: f64,
    /// Lateral excursion of the road centreline, meters.
    pub curve_amplitude: f64,
    pub vehicle_width: f64,
    /// Scans aggregated into the height map.
    pub frames: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            rows: 64,
            cols: 64,
            resolution: 0.2,
            road_width: 4.0,
            grey_width: 1.2,
            obstacle_density: 15.0,
            terrain_roughness: 0.1,
            curve_amplitude: 1.0,
            vehicle_width: 2.0,
            frames: DEFAULT_FRAMES,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.rows, self.cols, self.resolution)?;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.vehicle_width > 0.0 && self.road_width > self.vehicle_width) {
            return Err(Error::invalid("road width must exceed a positive vehicle width"));
        }
        if !finite_nonneg(self.grey_width)
            || !finite_nonneg(self.obstacle_density)
            || !finite_nonneg(self.terrain_roughness)
            || !finite_nonneg(self.curve_amplitude)
        {
            return Err(Error::invalid("scene quantities must be finite and non-negative"));
        }
        if self.frames == 0 {
            return Err(Error::invalid("at least one frame is required"));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            rows: self.rows,
            cols: self.cols,
            resolution: self.resolution,
        }
    }
}

/// One dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub heightmap: HeightMap,
    pub human_gt: LabelMap,
    pub path_mask: Grid<bool>,
    /// Poses in the reference frame; the reference pose is the identity.
    pub trajectory: Vec<Pose2p5D>,
    pub reference_index: usize,
    pub spec: SceneSpec,
}

/// Smooth terrain as a sum of plane waves, shifted so the ego ground is 0 m.
#[derive(Debug, Clone)]
struct Terrain {
    waves: Vec<(f64, f64, f64, f64)>, // amplitude, kx, ky, phase
    offset: f64,
}

impl Terrain {
    fn random(r: &mut rng::Rng, amplitude: f64) -> Terrain {
        let mut waves = Vec::new();
        for _ in 0..3 {
            let a = amplitude * r.random_range(0.3..0.6);
            let theta = r.random_range(0.0..2.0 * PI);
            let lambda = r.random_range(6.0..16.0);
            let k = 2.0 * PI / lambda;
            waves.push((a, k * theta.cos(), k * theta.sin(), r.random_range(0.0..2.0 * PI)));
        }
        let mut t = Terrain { waves, offset: 0.0 };
        t.offset = t.raw(0.0, 0.0);
        t
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(a, kx, ky, p)| a * (kx * x + ky * y + p).sin())
            .sum()
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        self.raw(x, y) - self.offset
    }

    fn slope(&self, x: f64, y: f64) -> f64 {
        let (mut gx, mut gy) = (0.0, 0.0);
        for &(a, kx, ky, p) in &self.waves {
            let c = a * (kx * x + ky * y + p).cos();
            gx += c * kx;
            gy += c * ky;
        }
        (gx * gx + gy * gy).sqrt()
    }
}

/// The rasterized world a scene is cut from.
#[derive(Debug, Clone)]
pub struct World {
    pub grid: GridSpec,
    /// Surface elevation per cell relative to the ego ground, meters.
    pub elevation: Grid<f64>,
    /// Ground-truth class of every cell, ignoring visibility.
    pub zone: Grid<Label>,
    pub trajectory: Vec<Pose2p5D>,
    pub reference_index: usize,
    pub vehicle_width: f64,
}

impl World {
    pub fn from_spec(spec: &SceneSpec) -> Result<World> {
        spec.validate()?;
        let grid = spec.grid();
        let mut r = rng::stream(spec.seed, 0);
        let half_x = grid.rows as f64 * grid.resolution / 2.0;
        let half_y = grid.cols as f64 * grid.resolution / 2.0;

        let wavelength = r.random_range(20.0..40.0);
        let side = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let amp = spec.curve_amplitude;
        let centre_y = |x: f64| side * amp * (1.0 - (2.0 * PI * x / wavelength).cos());
        let heading = |x: f64| {
            (side * amp * 2.0 * PI / wavelength * (2.0 * PI * x / wavelength).sin()).atan()
        };
        let terrain = Terrain::random(&mut r, spec.terrain_roughness);

        let corridor_half = spec.road_width / 2.0 + spec.grey_width;
        let reach = (half_x / TRAJECTORY_STEP).ceil() as i64 + 2;
        let mut trajectory = Vec::new();
        for i in -reach..=reach {
            let x = i as f64 * TRAJECTORY_STEP;
            let y = centre_y(x);
            if x.abs() <= half_x && y.abs() + corridor_half > half_y - grid.resolution {
                return Err(Error::invalid(format!(
                    "road corridor of half-width {corridor_half} m does not fit a {half_y} m half-grid"
                )));
            }
            trajectory.push(Pose2p5D::new(x, y, terrain.height(x, y), heading(x)));
        }
        let reference_index = reach as usize;
        let vertices: Vec<(f64, f64)> = trajectory.iter().map(|p| (p.x, p.y)).collect();

        let berm = if spec.grey_width > 0.0 {
            r.random_range(0.12..0.22)
        } else {
            0.0
        };
        let n = grid.rows * grid.cols;
        let mut elevation = Vec::with_capacity(n);
        let mut zone = Vec::with_capacity(n);
        for j in 0..grid.rows {
            for k in 0..grid.cols {
                let (x, y) = grid.center(j, k);
                let d = distance_to_polyline((x, y), &vertices);
                let base = terrain.height(x, y);
                if d <= spec.road_width / 2.0 {
                    elevation.push(base + r.random_range(-0.01..0.01));
                    zone.push(Label::Drivable);
                } else if d <= corridor_half {
                    let t = (d - spec.road_width / 2.0) / spec.grey_width;
                    elevation.push(base + berm * (PI * t).sin() + r.random_range(-0.05..0.05));
                    zone.push(Label::Grey);
                } else {
                    elevation.push(base + r.random_range(-0.02..0.02));
                    let steep = terrain.slope(x, y) > STEEP_SLOPE;
                    zone.push(if steep { Label::Obstacle } else { Label::Drivable });
                }
            }
        }
        let mut elevation = Grid::from_vec(grid.rows, grid.cols, elevation)?;
        let mut zone = Grid::from_vec(grid.rows, grid.cols, zone)?;

        let open_cells = (0..n)
            .filter(|&i| {
                let (x, y) = grid.center(i / grid.cols, i % grid.cols);
                distance_to_polyline((x, y), &vertices) > corridor_half
            })
            .count();
        let open_area = open_cells as f64 * grid.resolution * grid.resolution;
        let count = (spec.obstacle_density * open_area / 100.0 + r.random_range(0.0..1.0)).floor() as usize;
        for _ in 0..count {
            for _attempt in 0..50 {
                let cx = r.random_range(-half_x..half_x);
                let cy = r.random_range(-half_y..half_y);
                let radius = r.random_range(0.3..0.8);
                let height = r.random_range(0.5..1.5);
                let clearance = corridor_half + radius + grid.resolution;
                if distance_to_polyline((cx, cy), &vertices) < clearance {
                    continue;
                }
                for j in 0..grid.rows {
                    for k in 0..grid.cols {
                        let (x, y) = grid.center(j, k);
                        if (x - cx).hypot(y - cy) <= radius {
                            let top = terrain.height(x, y) + height + r.random_range(-0.03..0.03);
                            let e = elevation.at(j, k);
                            elevation.set(j, k, e.max(top));
                            zone.set(j, k, Label::Obstacle);
                        }
                    }
                }
                break;
            }
        }

        Ok(World {
            grid,
            elevation,
            zone,
            trajectory,
            reference_index,
            vehicle_width: spec.vehicle_width,
        })
    }

    /// Indices of `k` consecutive poses centred on the reference pose.
    pub fn frame_indices(&self, k: usize) -> Result<std::ops::Range<usize>> {
        if k == 0 {
            return Err(Error::invalid("at least one frame is required"));
        }
        if k > self.trajectory.len() {
            return Err(Error::invalid(format!(
                "{k} frames requested but the trajectory has {} poses",
                self.trajectory.len()
            )));
        }
        let start = self
            .reference_index
            .saturating_sub(k / 2)
            .min(self.trajectory.len() - k);
        Ok(start..start + k)
    }

    /// Cells whose top surface has a clear line of sight from the sensor.
    pub fn visible_from(&self, pose: &Pose2p5D) -> Grid<bool> {
        let g = self.grid;
        let sensor_z = pose.z + SENSOR_HEIGHT;
        let step = g.resolution / 4.0;
        Grid::from_fn(g.rows, g.cols, |j, k| {
            let (tx, ty) = g.center(j, k);
            let (dx, dy) = (tx - pose.x, ty - pose.y);
            let dist = dx.hypot(dy);
            if dist < 1e-9 {
                return true;
            }
            let target = (self.elevation.at(j, k) - sensor_z) / dist;
            let (ux, uy) = (dx / dist, dy / dist);
            let mut s = step;
            while s < dist {
                if let Some((sj, sk)) = g.to_pixel(pose.x + ux * s, pose.y + uy * s) {
                    if (sj, sk) == (j, k) {
                        break;
                    }
                    if (self.elevation.at(sj, sk) - sensor_z) / s > target + 1e-12 {
                        return false;
                    }
                }
                s += step;
            }
            true
        })
    }

    /// Union of visibility over `k` frames around the reference pose.
    pub fn visibility(&self, k: usize) -> Result<Grid<bool>> {
        let mut seen = Grid::filled(self.grid.rows, self.grid.cols, false);
        for i in self.frame_indices(k)? {
            let v = self.visible_from(&self.trajectory[i]);
            for (s, &v) in seen.as_mut_slice().iter_mut().zip(v.iter()) {
                *s |= v;
            }
        }
        Ok(seen)
    }

    /// Point clouds for `k` consecutive frames, each in its own sensor frame.
    /// Every visible cell returns a few jittered points on its top surface.
    pub fn render(&self, k: usize, seed: u64) -> Result<Vec<PointCloud>> {
        let g = self.grid;
        let mut frames = Vec::with_capacity(k);
        for i in self.frame_indices(k)? {
            let pose = self.trajectory[i];
            let mut r = rng::stream(seed, 1 + i as u64);
            let visible = self.visible_from(&pose);
            let mut points = Vec::new();
            for j in 0..g.rows {
                for kk in 0..g.cols {
                    if !visible.at(j, kk) {
                        continue;
                    }
                    let (cx, cy) = g.center(j, kk);
                    let z = self.elevation.at(j, kk);
                    for _ in 0..POINTS_PER_CELL {
                        let px = cx + r.random_range(-0.35..0.35) * g.resolution;
                        let py = cy + r.random_range(-0.35..0.35) * g.resolution;
                        points.push(pose.to_local([px, py, z]));
                    }
                }
            }
            frames.push(PointCloud { points, pose });
        }
        Ok(frames)
    }
}

/// Builds one scene. Deterministic in `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneRecord> {
    let world = World::from_spec(spec)?;
    scene_from_world(&world, spec)
}

/// Cuts a scene record out of an (optionally hand-edited) world.
pub fn scene_from_world(world: &World, spec: &SceneSpec) -> Result<SceneRecord> {
    let window = HeightWindow::default();
    let valid = world.visibility(spec.frames)?;
    let g = world.grid;
    let mut height = Grid::filled(g.rows, g.cols, 0u8);
    for i in 0..g.rows * g.cols {
        if valid.as_slice()[i] {
            height.as_mut_slice()[i] = quantize_height(world.elevation.as_slice()[i], window)?;
        }
    }
    let heightmap = HeightMap::new(height, valid.clone(), g.resolution)?;
    let labels = Grid::from_fn(g.rows, g.cols, |j, k| {
        if valid.at(j, k) {
            world.zone.at(j, k)
        } else {
            Label::Unknown
        }
    });
    let human_gt = LabelMap::new(labels, LabelRole::HumanGt)?;
    let path_mask = project_vehicle_path(&world.trajectory, world.vehicle_width, g)?;
    Ok(SceneRecord {
        heightmap,
        human_gt,
        path_mask,
        trajectory: world.trajectory.clone(),
        reference_index: world.reference_index,
        spec: *spec,
    })
}

/// Re-renders the LiDAR frames behind a scene.
pub fn render_pointclouds(scene: &SceneRecord, frames: usize) -> Result<Vec<PointCloud>> {
    let world = World::from_spec(&scene.spec)?;
    world.render(frames, rng::derive_seed(scene.spec.seed, frames as u64))
}

/// Spec for scene `index` of a dataset rooted at `base_seed`.
pub fn scene_spec(template: &SceneSpec, base_seed: u64, index: usize) -> SceneSpec {
    SceneSpec {
        seed: rng::derive_seed(base_seed, index as u64),
        ..*template
    }
}
