//! Precision, recall, F1 and vehicle-path accuracy of a prediction.
//!
//! Ground-truth sets only contain drivable and obstacle pixels; the
//! prediction sets contain every pixel predicted as the class unless
//! `exclude_grey_from_pred_sets` drops those whose ground truth is grey or
//! unknown. A ratio with a zero denominator is 1 when its numerator is also
//! 0 and 0 otherwise.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grids::{Grid, Label, LabelMap};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub exclude_grey_from_pred_sets: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub q1: f64,
    pub q2: f64,
    pub f1: f64,
    pub tp: u64,
    pub pred: u64,
    pub gt: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dri: ClassMetrics,
    pub obs: ClassMetrics,
    pub q3: f64,
    pub vp: u64,
    pub vp_hit: u64,
}

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        if num == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(q1: f64, q2: f64) -> f64 {
    if q1 + q2 == 0.0 {
        0.0
    } else {
        2.0 * q1 * q2 / (q1 + q2)
    }
}

impl ClassMetrics {
    pub fn from_counts(tp: u64, pred: u64, gt: u64) -> ClassMetrics {
        let q1 = ratio(tp, pred);
        let q2 = ratio(tp, gt);
        ClassMetrics {
            q1,
            q2,
            f1: f1_score(q1, q2),
            tp,
            pred,
            gt,
        }
    }
}

pub fn evaluate(pred: &LabelMap, gt: &LabelMap, vp: &Grid<bool>) -> Result<MetricsReport> {
    evaluate_with(pred, gt, vp, &EvalConfig::default())
}

pub fn evaluate_with(
    pred: &LabelMap,
    gt: &LabelMap,
    vp: &Grid<bool>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    gt.labels().ensure_shape(pred.shape())?;
    vp.ensure_shape(pred.shape())?;
    let mut counts = [[0u64; 3]; 2];
    let (mut vp_total, mut vp_hit) = (0u64, 0u64);
    let pixels = pred.labels().iter().zip(gt.labels().iter()).zip(vp.iter());
    for ((&y, &g), &on_path) in pixels {
        for (ci, class) in [Label::Drivable, Label::Obstacle].into_iter().enumerate() {
            let in_g = g == class;
            let scored = !cfg.exclude_grey_from_pred_sets || matches!(g, Label::Drivable | Label::Obstacle);
            let in_y = y == class && scored;
            counts[ci][0] += (in_g && in_y) as u64;
            counts[ci][1] += in_y as u64;
            counts[ci][2] += in_g as u64;
        }
        if on_path {
            vp_total += 1;
            vp_hit += (y == Label::Drivable) as u64;
        }
    }
    let m = |c: [u64; 3]| ClassMetrics::from_counts(c[0], c[1], c[2]);
    Ok(MetricsReport {
        dri: m(counts[0]),
        obs: m(counts[1]),
        q3: ratio(vp_hit, vp_total),
        vp: vp_total,
        vp_hit,
    })
}

/// Unweighted mean of each ratio over scenes; counts are summed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub scenes: usize,
    pub dri: ClassMetrics,
    pub obs: ClassMetrics,
    pub q3: f64,
}

pub fn macro_average(reports: &[MetricsReport]) -> MacroReport {
    let n = reports.len();
    if n == 0 {
        return MacroReport::default();
    }
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let sum = |f: &dyn Fn(&MetricsReport) -> u64| reports.iter().map(f).sum::<u64>();
    let class = |get: &dyn Fn(&MetricsReport) -> ClassMetrics| ClassMetrics {
        q1: mean(&|r| get(r).q1),
        q2: mean(&|r| get(r).q2),
        f1: mean(&|r| get(r).f1),
        tp: sum(&|r| get(r).tp),
        pred: sum(&|r| get(r).pred),
        gt: sum(&|r| get(r).gt),
    };
    MacroReport {
        scenes: n,
        dri: class(&|r| r.dri),
        obs: class(&|r| r.obs),
        q3: mean(&|r| r.q3),
    }
}
