//! Automatic weak labels: region-grown vertical obstacles and the projected
//! vehicle path.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::bev::{GridSpec, HeightWindow, Pose2p5D};
use crate::error::{Error, Result};
use crate::grids::{Grid, HeightMap, Label, LabelMap, LabelRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// Neighbour offsets `(dj, dk)` in a fixed visiting order.
    pub fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionGrowParams {
    /// Maximum height step between neighbours, meters.
    pub t_h: f64,
    /// Maximum slope between neighbours, radians.
    pub t_a: f64,
    /// Heights (meters, relative to ego ground) that seed the drivable region.
    pub seed_interval: (f64, f64),
    pub connectivity: Connectivity,
    /// Used to dequantize the height map.
    pub window: HeightWindow,
}

impl Default for RegionGrowParams {
    fn default() -> Self {
        RegionGrowParams {
            t_h: 0.3,
            t_a: 0.6,
            seed_interval: (-0.3, 0.3),
            connectivity: Connectivity::Eight,
            window: HeightWindow::default(),
        }
    }
}

impl RegionGrowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_h > 0.0) {
            return Err(Error::invalid("t_h must be positive"));
        }
        if !(self.t_a > 0.0 && self.t_a < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid("t_a must lie in (0, pi/2)"));
        }
        if !(self.seed_interval.0 < self.seed_interval.1) {
            return Err(Error::invalid("seed interval must be increasing"));
        }
        HeightWindow::new(self.window.min, self.window.max)?;
        Ok(())
    }
}

/// Drivable and obstacle pixel sets as masks. The two never overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGrowResult {
    pub drivable: Grid<bool>,
    pub obstacle: Grid<bool>,
}

impl RegionGrowResult {
    pub fn drivable_indices(&self) -> Vec<usize> {
        mask_indices(&self.drivable)
    }

    pub fn obstacle_indices(&self) -> Vec<usize> {
        mask_indices(&self.obstacle)
    }
}

fn mask_indices(mask: &Grid<bool>) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Breadth-first region growing from every pixel whose height lies in the
/// seed interval.
///
/// A neighbour joins the drivable set when both the height step and the
/// slope to an already-drivable pixel are under threshold; otherwise it is
/// recorded as obstacle. Obstacle membership is provisional: a pixel that is
/// later reached through a passing edge moves to the drivable set, so the
/// result does not depend on visiting order. Invalid pixels are skipped.
pub fn region_grow(hmap: &HeightMap, params: &RegionGrowParams) -> Result<RegionGrowResult> {
    params.validate()?;
    let (rows, cols) = hmap.shape();
    let meters: Vec<f64> = hmap
        .height
        .iter()
        .map(|&q| params.window.dequantize(q))
        .collect();
    let valid = hmap.valid.as_slice();

    let mut drivable = vec![false; rows * cols];
    let mut obstacle = vec![false; rows * cols];
    let mut queue = VecDeque::new();
    let (lo, hi) = params.seed_interval;
    for i in 0..rows * cols {
        if valid[i] && meters[i] >= lo && meters[i] <= hi {
            drivable[i] = true;
            queue.push_back(i);
        }
    }
    if queue.is_empty() {
        return Err(Error::NoSeed);
    }

    let res = hmap.resolution;
    while let Some(i) = queue.pop_front() {
        let (j, k) = ((i / cols) as isize, (i % cols) as isize);
        for &(dj, dk) in params.connectivity.offsets() {
            let (nj, nk) = (j + dj, k + dk);
            if nj < 0 || nk < 0 || nj >= rows as isize || nk >= cols as isize {
                continue;
            }
            let n = nj as usize * cols + nk as usize;
            if !valid[n] || drivable[n] {
                continue;
            }
            let dist = if dj != 0 && dk != 0 {
                std::f64::consts::SQRT_2 * res
            } else {
                res
            };
            let dh = (meters[n] - meters[i]).abs();
            let da = (dh / dist).atan();
            if dh < params.t_h && da < params.t_a {
                drivable[n] = true;
                obstacle[n] = false;
                queue.push_back(n);
            } else {
                obstacle[n] = true;
            }
        }
    }

    Ok(RegionGrowResult {
        drivable: Grid::from_vec(rows, cols, drivable)?,
        obstacle: Grid::from_vec(rows, cols, obstacle)?,
    })
}

/// Euclidean distance from `p` to the segment `a`-`b`.
pub fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Distance from `p` to a polyline; a single vertex acts as a point.
pub fn distance_to_polyline(p: (f64, f64), vertices: &[(f64, f64)]) -> f64 {
    match vertices {
        [] => f64::INFINITY,
        [only] => distance_to_segment(p, *only, *only),
        _ => vertices
            .windows(2)
            .map(|w| distance_to_segment(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Rasterizes the trajectory swath: pixels whose centre lies within half the
/// vehicle width of the trajectory polyline.
pub fn project_vehicle_path(
    trajectory: &[Pose2p5D],
    vehicle_width: f64,
    grid: GridSpec,
) -> Result<Grid<bool>> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    if !(vehicle_width > 0.0) {
        return Err(Error::invalid("vehicle width must be positive"));
    }
    let grid = GridSpec::new(grid.rows, grid.cols, grid.resolution)?;
    let vertices: Vec<(f64, f64)> = trajectory.iter().map(|p| (p.x, p.y)).collect();
    let half = vehicle_width / 2.0;
    Ok(Grid::from_fn(grid.rows, grid.cols, |j, k| {
        distance_to_polyline(grid.center(j, k), &vertices) <= half
    }))
}

/// Combines the path swath and the region-grown obstacles into a weak label
/// map. The path takes precedence. Region-grown drivable pixels are only used
/// when `use_rg_drivable` is set.
pub fn make_weak_labels(
    hmap: &HeightMap,
    rg: &RegionGrowResult,
    vp: &Grid<bool>,
    use_rg_drivable: bool,
) -> Result<LabelMap> {
    let shape = hmap.shape();
    rg.drivable.ensure_shape(shape)?;
    rg.obstacle.ensure_shape(shape)?;
    vp.ensure_shape(shape)?;
    let labels = Grid::from_fn(shape.0, shape.1, |j, k| {
        if vp.at(j, k) {
            Label::Drivable
        } else if rg.obstacle.at(j, k) {
            Label::Obstacle
        } else if use_rg_drivable && rg.drivable.at(j, k) {
            Label::Drivable
        } else {
            Label::Unknown
        }
    });
    LabelMap::new(labels, LabelRole::Weak)
}

/// Weak labels from the path alone, used when region growing finds no seed.
pub fn path_only_weak_labels(vp: &Grid<bool>) -> Result<LabelMap> {
    LabelMap::new(
        vp.map(|&v| if v { Label::Drivable } else { Label::Unknown }),
        LabelRole::Weak,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutolabelConfig {
    pub region_grow: RegionGrowParams,
    pub vehicle_width: f64,
    pub use_rg_drivable: bool,
}

impl Default for AutolabelConfig {
    fn default() -> Self {
        AutolabelConfig {
            region_grow: RegionGrowParams::default(),
            vehicle_width: 2.0,
            use_rg_drivable: false,
        }
    }
}

/// Outcome of labelling one scene.
#[derive(Debug, Clone)]
pub struct WeakLabelling {
    pub weak: LabelMap,
    pub path_mask: Grid<bool>,
    /// False when region growing found no seed and only the path was used.
    pub region_grown: bool,
}

/// Full automatic labelling of one height map.
pub fn autolabel(
    hmap: &HeightMap,
    trajectory: &[Pose2p5D],
    cfg: &AutolabelConfig,
) -> Result<WeakLabelling> {
    let grid = GridSpec::new(hmap.rows(), hmap.cols(), hmap.resolution)?;
    let vp = project_vehicle_path(trajectory, cfg.vehicle_width, grid)?;
    match region_grow(hmap, &cfg.region_grow) {
        Ok(rg) => Ok(WeakLabelling {
            weak: make_weak_labels(hmap, &rg, &vp, cfg.use_rg_drivable)?,
            path_mask: vp,
            region_grown: true,
        }),
        Err(Error::NoSeed) => Ok(WeakLabelling {
            weak: path_only_weak_labels(&vp)?,
            path_mask: vp,
            region_grown: false,
        }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::quantize_height;
    use proptest::prelude::*;

    fn hmap_from_meters(rows: usize, cols: usize, h: &[f64], valid: &[bool], res: f64) -> HeightMap {
        let w = HeightWindow::default();
        let q = h.iter().map(|&m| quantize_height(m, w).unwrap()).collect();
        HeightMap::new(
            Grid::from_vec(rows, cols, q).unwrap(),
            Grid::from_vec(rows, cols, valid.to_vec()).unwrap(),
            res,
        )
        .unwrap()
    }

    /// Fixed-point relaxation: independent of queue order and of `region_grow`.
    fn brute_force(hmap: &HeightMap, p: &RegionGrowParams) -> Option<(Vec<bool>, Vec<bool>)> {
        let (rows, cols) = hmap.shape();
        let n = rows * cols;
        let m: Vec<f64> = hmap.height.iter().map(|&q| p.window.dequantize(q)).collect();
        let valid = hmap.valid.as_slice();
        let mut d: Vec<bool> = (0..n)
            .map(|i| valid[i] && m[i] >= p.seed_interval.0 && m[i] <= p.seed_interval.1)
            .collect();
        if !d.iter().any(|&x| x) {
            return None;
        }
        let diag = matches!(p.connectivity, Connectivity::Eight);
        let passes = |a: usize, b: usize, is_diag: bool| {
            let dist = if is_diag { 2f64.sqrt() * hmap.resolution } else { hmap.resolution };
            let dh = (m[a] - m[b]).abs();
            dh < p.t_h && (dh / dist).atan() < p.t_a
        };
        loop {
            let mut changed = false;
            for a in 0..n {
                if !valid[a] || d[a] {
                    continue;
                }
                let (ja, ka) = (a / cols, a % cols);
                for b in 0..n {
                    let (jb, kb) = (b / cols, b % cols);
                    let dj = ja.abs_diff(jb);
                    let dk = ka.abs_diff(kb);
                    let adjacent = dj <= 1 && dk <= 1 && (dj + dk == 1 || (diag && dj + dk == 2));
                    if adjacent && d[b] && passes(a, b, dj + dk == 2) {
                        d[a] = true;
                        changed = true;
                        break;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut o = vec![false; n];
        for a in 0..n {
            if !valid[a] || d[a] {
                continue;
            }
            let (ja, ka) = (a / cols, a % cols);
            o[a] = (0..n).any(|b| {
                let (jb, kb) = (b / cols, b % cols);
                let dj = ja.abs_diff(jb);
                let dk = ka.abs_diff(kb);
                d[b] && dj <= 1 && dk <= 1 && (dj + dk == 1 || (diag && dj + dk == 2))
            });
        }
        Some((d, o))
    }

    #[test]
    fn flat_grid_is_all_drivable() {
        let hm = hmap_from_meters(3, 3, &[0.0; 9], &[true; 9], 0.2);
        let rg = region_grow(&hm, &RegionGrowParams::default()).unwrap();
        assert!(rg.drivable.iter().all(|&d| d));
        assert!(rg.obstacle.iter().all(|&o| !o));
    }

    #[test]
    fn step_becomes_obstacle() {
        let hm = hmap_from_meters(1, 3, &[0.0, 0.0, 1.0], &[true; 3], 0.2);
        let params = RegionGrowParams {
            t_h: 0.3,
            t_a: 0.8,
            seed_interval: (-0.1, 0.1),
            ..Default::default()
        };
        let rg = region_grow(&hm, &params).unwrap();
        assert_eq!(rg.drivable_indices(), vec![0, 1]);
        assert_eq!(rg.obstacle_indices(), vec![2]);
    }

    #[test]
    fn no_seed_is_reported() {
        let hm = hmap_from_meters(2, 2, &[2.0; 4], &[true; 4], 0.2);
        assert!(matches!(
            region_grow(&hm, &RegionGrowParams::default()),
            Err(Error::NoSeed)
        ));
        let hm = hmap_from_meters(2, 2, &[0.0; 4], &[false; 4], 0.2);
        assert!(matches!(
            region_grow(&hm, &RegionGrowParams::default()),
            Err(Error::NoSeed)
        ));
    }

    #[test]
    fn invalid_pixels_never_visited() {
        // invalid pixel between two valid ones blocks 4-connected growth
        let hm = hmap_from_meters(1, 3, &[0.0, 0.0, 0.05], &[true, false, true], 0.2);
        let params = RegionGrowParams {
            seed_interval: (-0.01, 0.01),
            connectivity: Connectivity::Four,
            ..Default::default()
        };
        let rg = region_grow(&hm, &params).unwrap();
        assert_eq!(rg.drivable_indices(), vec![0]);
        assert!(rg.obstacle_indices().is_empty());
    }

    #[test]
    fn straight_path_band() {
        let grid = GridSpec::new(300, 300, 0.2).unwrap();
        let traj = [Pose2p5D::identity(), Pose2p5D::new(10.0, 0.0, 0.0, 0.0)];
        let vp = project_vehicle_path(&traj, 2.0, grid).unwrap();
        let verts = [(0.0, 0.0), (10.0, 0.0)];
        for j in 0..300 {
            for k in 0..300 {
                let (x, y) = grid.center(j, k);
                let oracle = (distance_to_segment((x, y), verts[0], verts[1]) <= 1.0) as u8;
                assert_eq!(vp.at(j, k) as u8, oracle, "pixel ({j},{k})");
            }
        }
        // along the segment interior the band is exactly 10 columns wide for 50 rows
        for j in 100..150 {
            let cols: Vec<usize> = (0..300).filter(|&k| vp.at(j, k)).collect();
            assert_eq!(cols, (145..155).collect::<Vec<_>>(), "row {j}");
        }
        assert!((0..300).all(|j| (0..300).all(|k| !vp.at(j, k) || (145..155).contains(&k))));
    }

    #[test]
    fn single_pose_is_a_disk() {
        let grid = GridSpec::new(64, 64, 0.2).unwrap();
        let vp = project_vehicle_path(&[Pose2p5D::identity()], 2.0, grid).unwrap();
        for j in 0..64 {
            for k in 0..64 {
                // centres sit at half-pixel offsets from the ego pixel corner
                let dj = j as f64 + 0.5 - 32.0;
                let dk = k as f64 + 0.5 - 32.0;
                assert_eq!(vp.at(j, k), (dj * dj + dk * dk).sqrt() <= 5.0);
            }
        }
    }

    #[test]
    fn path_outside_grid() {
        let grid = GridSpec::new(64, 64, 0.2).unwrap();
        let traj = [Pose2p5D::new(100.0, 100.0, 0.0, 0.0), Pose2p5D::new(110.0, 100.0, 0.0, 0.0)];
        let vp = project_vehicle_path(&traj, 2.0, grid).unwrap();
        assert!(vp.iter().all(|&v| !v));
        assert!(project_vehicle_path(&[], 2.0, grid).is_err());
        assert!(project_vehicle_path(&traj, 0.0, grid).is_err());
    }

    #[test]
    fn weak_label_precedence() {
        let hm = hmap_from_meters(1, 3, &[0.0; 3], &[true; 3], 0.2);
        let rg = RegionGrowResult {
            drivable: Grid::from_vec(1, 3, vec![false, true, false]).unwrap(),
            obstacle: Grid::from_vec(1, 3, vec![true, false, false]).unwrap(),
        };
        let vp = Grid::from_vec(1, 3, vec![true, false, false]).unwrap();
        let weak = make_weak_labels(&hm, &rg, &vp, false).unwrap();
        assert_eq!(
            weak.labels().as_slice(),
            &[Label::Drivable, Label::Unknown, Label::Unknown]
        );
        let rg_fcn = make_weak_labels(&hm, &rg, &vp, true).unwrap();
        assert_eq!(rg_fcn.at(0, 1), Label::Drivable);
    }

    fn random_case() -> impl Strategy<Value = (HeightMap, RegionGrowParams)> {
        (1usize..=8, 1usize..=8)
            .prop_flat_map(|(r, c)| {
                (
                    Just((r, c)),
                    proptest::collection::vec(-0.6f64..0.8, r * c),
                    proptest::collection::vec(proptest::bool::weighted(0.85), r * c),
                    0.02f64..0.6,
                    0.05f64..1.5,
                    any::<bool>(),
                )
            })
            .prop_map(|((r, c), h, v, t_h, t_a, eight)| {
                let hm = hmap_from_meters(r, c, &h, &v, 0.2);
                let params = RegionGrowParams {
                    t_h,
                    t_a,
                    seed_interval: (-0.1, 0.1),
                    connectivity: if eight { Connectivity::Eight } else { Connectivity::Four },
                    ..Default::default()
                };
                (hm, params)
            })
    }

    proptest! {
        #[test]
        fn matches_brute_force((hm, params) in random_case()) {
            let got = region_grow(&hm, &params);
            match brute_force(&hm, &params) {
                None => prop_assert!(matches!(got, Err(Error::NoSeed))),
                Some((d, o)) => {
                    let got = got.unwrap();
                    prop_assert_eq!(got.drivable.as_slice(), &d[..]);
                    prop_assert_eq!(got.obstacle.as_slice(), &o[..]);
                }
            }
        }

        #[test]
        fn looser_thresholds_never_shrink_drivable(
            (hm, params) in random_case(),
            dh in 0.0f64..0.5,
            da in 0.0f64..0.5,
        ) {
            if let Ok(strict) = region_grow(&hm, &params) {
                let loose_params = RegionGrowParams {
                    t_h: params.t_h + dh,
                    t_a: (params.t_a + da).min(1.5),
                    ..params
                };
                let loose = region_grow(&hm, &loose_params).unwrap();
                for (s, l) in strict.drivable.iter().zip(loose.drivable.iter()) {
                    prop_assert!(!s || *l);
                }
                for i in 0..hm.height.len() {
                    prop_assert!(!(strict.drivable.as_slice()[i] && strict.obstacle.as_slice()[i]));
                    let either = strict.drivable.as_slice()[i] || strict.obstacle.as_slice()[i];
                    prop_assert!(!either || hm.valid.as_slice()[i]);
                }
            }
        }
    }
}
