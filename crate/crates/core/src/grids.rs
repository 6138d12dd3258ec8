//! Grid containers, the label alphabet and the per-branch label remapping.
//!
//! Every raster in the pipeline is a row-major [`Grid`]. Row `j` grows
//! backwards from the ego vehicle, column `k` grows to its right, so the
//! vehicle sits in the middle of the grid heading "up".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel class. The numeric codes are stable and appear in files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Unknown = 0,
    Drivable = 1,
    Obstacle = 2,
    Grey = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Unknown, Label::Drivable, Label::Obstacle, Label::Grey];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Unknown),
            1 => Some(Label::Drivable),
            2 => Some(Label::Obstacle),
            3 => Some(Label::Grey),
            _ => None,
        }
    }

    /// The label flip: drivable and obstacle swap, everything else is fixed.
    pub fn flipped(self) -> Label {
        match self {
            Label::Drivable => Label::Obstacle,
            Label::Obstacle => Label::Drivable,
            other => other,
        }
    }
}

/// Which binary classifier of the dual-branch model a target is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Drivable,
    Obstacle,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Drivable, Branch::Obstacle];

    /// The class this branch predicts on output channel 0.
    pub fn positive(self) -> Label {
        match self {
            Branch::Drivable => Label::Drivable,
            Branch::Obstacle => Label::Obstacle,
        }
    }

    /// Class assigned to grey (and observed-but-unlabelled weak) pixels.
    pub fn negative(self) -> Label {
        self.positive().flipped()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Drivable => "DRI",
            Branch::Obstacle => "OBS",
        }
    }
}

/// Row-major two-dimensional raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "grid data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..rows {
            for k in 0..cols {
                data.push(f(j, k));
            }
        }
        Grid { rows, cols, data }
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Grid<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, j: usize, k: usize) -> usize {
        debug_assert!(j < self.rows && k < self.cols);
        j * self.cols + k
    }

    pub fn contains(&self, j: isize, k: isize) -> bool {
        j >= 0 && k >= 0 && (j as usize) < self.rows && (k as usize) < self.cols
    }

    pub fn get(&self, j: usize, k: usize) -> &T {
        &self.data[j * self.cols + k]
    }

    pub fn set(&mut self, j: usize, k: usize, value: T) {
        let i = j * self.cols + k;
        self.data[i] = value;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn ensure_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape(),
            });
        }
        Ok(())
    }
}

impl<T: Copy> Grid<T> {
    pub fn at(&self, j: usize, k: usize) -> T {
        self.data[j * self.cols + k]
    }
}

/// Quantized elevation raster with its LiDAR validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub height: Grid<u8>,
    pub valid: Grid<bool>,
    /// Meters per pixel.
    pub resolution: f64,
}

impl HeightMap {
    pub fn new(height: Grid<u8>, valid: Grid<bool>, resolution: f64) -> Result<Self> {
        valid.ensure_shape(height.shape())?;
        if !(resolution > 0.0) {
            return Err(Error::invalid("resolution must be positive"));
        }
        let mut height = height;
        // unobserved cells carry height 0
        for (h, &v) in height.as_mut_slice().iter_mut().zip(valid.iter()) {
            if !v {
                *h = 0;
            }
        }
        Ok(HeightMap {
            height,
            valid,
            resolution,
        })
    }

    pub fn empty(rows: usize, cols: usize, resolution: f64) -> Self {
        HeightMap {
            height: Grid::filled(rows, cols, 0),
            valid: Grid::filled(rows, cols, false),
            resolution,
        }
    }

    pub fn rows(&self) -> usize {
        self.height.rows()
    }

    pub fn cols(&self) -> usize {
        self.height.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.height.shape()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRole {
    HumanGt,
    Weak,
    Prediction,
    BranchTarget,
}

impl LabelRole {
    fn name(self) -> &'static str {
        match self {
            LabelRole::HumanGt => "human ground truth",
            LabelRole::Weak => "weak",
            LabelRole::Prediction => "prediction",
            LabelRole::BranchTarget => "branch target",
        }
    }

    fn forbids_grey(self) -> bool {
        matches!(self, LabelRole::Weak | LabelRole::BranchTarget)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Grid<Label>,
    role: LabelRole,
}

impl LabelMap {
    pub fn new(labels: Grid<Label>, role: LabelRole) -> Result<Self> {
        if role.forbids_grey() && labels.iter().any(|&l| l == Label::Grey) {
            return Err(Error::GreyLabel(role.name()));
        }
        Ok(LabelMap { labels, role })
    }

    pub fn filled(rows: usize, cols: usize, label: Label, role: LabelRole) -> Result<Self> {
        LabelMap::new(Grid::filled(rows, cols, label), role)
    }

    pub fn labels(&self) -> &Grid<Label> {
        &self.labels
    }

    pub fn into_labels(self) -> Grid<Label> {
        self.labels
    }

    pub fn role(&self) -> LabelRole {
        self.role
    }

    pub fn with_role(self, role: LabelRole) -> Result<Self> {
        LabelMap::new(self.labels, role)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.shape()
    }

    pub fn at(&self, j: usize, k: usize) -> Label {
        self.labels.at(j, k)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Fused traversability score and the two branch probability rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub score: Grid<f64>,
    pub s1: Grid<f64>,
    pub s2: Grid<f64>,
}

impl CostMap {
    pub fn new(score: Grid<f64>, s1: Grid<f64>, s2: Grid<f64>) -> Result<Self> {
        s1.ensure_shape(score.shape())?;
        s2.ensure_shape(score.shape())?;
        let in_range = |g: &Grid<f64>| g.iter().all(|v| (0.0..=1.0).contains(v));
        if !(in_range(&score) && in_range(&s1) && in_range(&s2)) {
            return Err(Error::invalid("cost map values must lie in [0, 1]"));
        }
        Ok(CostMap { score, s1, s2 })
    }
}

/// Per-branch target for a human label: grey becomes the branch's negative class.
pub fn remap_label(label: Label, branch: Branch) -> Label {
    match label {
        Label::Grey => branch.negative(),
        other => other,
    }
}

/// Per-branch target for a weak label. Observed pixels without an automatic
/// label become the branch's negative class; unobserved unlabelled pixels
/// stay unknown.
pub fn remap_weak_target(weak: Label, observed: bool, branch: Branch) -> Label {
    match weak {
        Label::Unknown if observed => branch.negative(),
        other => remap_label(other, branch),
    }
}

/// Applies [`remap_label`] (human labels) or [`remap_weak_target`] (weak
/// labels) to every pixel. The result never contains grey.
pub fn build_target_map(
    labels: &LabelMap,
    valid: &Grid<bool>,
    branch: Branch,
    weak: bool,
) -> Result<LabelMap> {
    valid.ensure_shape(labels.shape())?;
    let (rows, cols) = labels.shape();
    let src = labels.labels().as_slice();
    let obs = valid.as_slice();
    let data = src
        .iter()
        .zip(obs)
        .map(|(&g, &o)| {
            if weak {
                remap_weak_target(g, o, branch)
            } else {
                remap_label(g, branch)
            }
        })
        .collect();
    LabelMap::new(Grid::from_vec(rows, cols, data)?, LabelRole::BranchTarget)
}
