//! Bird's-eye-view height maps from registered point-cloud frames.
//!
//! The reference frame has `+x` forward and `+y` to the left of the vehicle.
//! Forward maps to decreasing row index and left to decreasing column index,
//! with the vehicle at the grid centre.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{Grid, HeightMap};

pub const DEFAULT_RESOLUTION: f64 = 0.2;
/// Number of consecutive scans aggregated into one height map.
pub const DEFAULT_FRAMES: usize = 5;

/// Planar pose plus elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2p5D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose2p5D {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose2p5D {
            x,
            y,
            z,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Pose2p5D::new(0.0, 0.0, 0.0, 0.0)
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
            self.z + p[2],
        ]
    }

    /// Maps a world point into this pose's local frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// One LiDAR scan in its sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub pose: Pose2p5D,
}

/// Elevation range mapped linearly onto `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightWindow {
    pub min: f64,
    pub max: f64,
}

impl Default for HeightWindow {
    fn default() -> Self {
        HeightWindow { min: -2.0, max: 4.0 }
    }
}

impl HeightWindow {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::invalid(format!("degenerate height window ({min}, {max})")));
        }
        Ok(HeightWindow { min, max })
    }

    /// Meters per quantization level.
    pub fn step(&self) -> f64 {
        (self.max - self.min) / 255.0
    }

    pub fn dequantize(&self, q: u8) -> f64 {
        self.min + q as f64 * self.step()
    }
}

/// Clamps to the window and rounds half-up onto `0..=255`.
pub fn quantize_height(h: f64, window: HeightWindow) -> Result<u8> {
    let window = HeightWindow::new(window.min, window.max)?;
    let c = h.clamp(window.min, window.max);
    let v = 255.0 * (c - window.min) / (window.max - window.min);
    Ok((v + 0.5).floor().min(255.0) as u8)
}

/// Pixel containing a reference-frame point, `None` when off the grid.
pub fn world_to_pixel(
    x: f64,
    y: f64,
    rows: usize,
    cols: usize,
    resolution: f64,
) -> Result<Option<(usize, usize)>> {
    if !(resolution > 0.0) {
        return Err(Error::invalid("resolution must be positive"));
    }
    let j = (rows as f64 / 2.0 - x / resolution).floor();
    let k = (cols as f64 / 2.0 - y / resolution).floor();
    if j < 0.0 || k < 0.0 || j >= rows as f64 || k >= cols as f64 {
        return Ok(None);
    }
    Ok(Some((j as usize, k as usize)))
}

/// Reference-frame coordinates of a pixel centre.
pub fn pixel_center(j: usize, k: usize, rows: usize, cols: usize, resolution: f64) -> (f64, f64) {
    (
        (rows as f64 / 2.0 - j as f64 - 0.5) * resolution,
        (cols as f64 / 2.0 - k as f64 - 0.5) * resolution,
    )
}

/// Grid geometry shared by every raster of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, resolution: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("grid extents must be positive"));
        }
        if !(resolution > 0.0) {
            return Err(Error::invalid("resolution must be positive"));
        }
        Ok(GridSpec {
            rows,
            cols,
            resolution,
        })
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        world_to_pixel(x, y, self.rows, self.cols, self.resolution)
            .ok()
            .flatten()
    }

    pub fn center(&self, j: usize, k: usize) -> (f64, f64) {
        pixel_center(j, k, self.rows, self.cols, self.resolution)
    }
}

/// Registers every frame into `reference` and keeps the highest return per cell.
pub fn aggregate_frames(
    frames: &[PointCloud],
    reference: &Pose2p5D,
    grid: GridSpec,
    window: HeightWindow,
) -> Result<HeightMap> {
    if frames.is_empty() {
        return Err(Error::Empty("frame list"));
    }
    let window = HeightWindow::new(window.min, window.max)?;
    let grid = GridSpec::new(grid.rows, grid.cols, grid.resolution)?;
    let mut top: Grid<Option<f64>> = Grid::filled(grid.rows, grid.cols, None);
    for frame in frames {
        for &p in &frame.points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("point cloud contains non-finite coordinates"));
            }
            let r = reference.to_local(frame.pose.to_world(p));
            let Some((j, k)) = grid.to_pixel(r[0], r[1]) else {
                continue;
            };
            let cell = &mut top.as_mut_slice()[j * grid.cols + k];
            *cell = Some(cell.map_or(r[2], |h: f64| h.max(r[2])));
        }
    }
    let mut height = Grid::filled(grid.rows, grid.cols, 0u8);
    let mut valid = Grid::filled(grid.rows, grid.cols, false);
    for (i, cell) in top.iter().enumerate() {
        if let Some(h) = *cell {
            height.as_mut_slice()[i] = quantize_height(h, window)?;
            valid.as_mut_slice()[i] = true;
        }
    }
    HeightMap::new(height, valid, grid.resolution)
}
