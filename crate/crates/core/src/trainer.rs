//! Dataset splitting, rotation augmentation and the training loop.

use std::cell::Cell;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{Grid, HeightMap, Label, LabelMap};
use crate::metrics::{evaluate, macro_average, MacroReport};
use crate::model::{default_arch, DualBranchModel, FusionConfig, Model, Sample, ThreeClassModel, DEFAULT_LAMBDA};
use crate::nnet::{adam_step, AdamConfig, Arch};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "weak")]
    Weak,
    #[serde(rename = "semi")]
    Semi,
    #[serde(rename = "3class")]
    Baseline3Class,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Weak => "weak",
            Mode::Semi => "semi",
            Mode::Baseline3Class => "3class",
        }
    }

    pub fn needs_weak(self) -> bool {
        matches!(self, Mode::Weak | Mode::Semi)
    }

    pub fn needs_human(self) -> bool {
        !matches!(self, Mode::Weak)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "full" => Ok(Mode::Full),
            "weak" => Ok(Mode::Weak),
            "semi" => Ok(Mode::Semi),
            "3class" => Ok(Mode::Baseline3Class),
            other => Err(Error::invalid(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Fraction of training scenes whose human labels are visible (semi only).
    pub human_ratio: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub split: [f64; 3],
    pub widths: [usize; 4],
    pub input_validity_channel: bool,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Full,
            human_ratio: 1.0,
            lambda: DEFAULT_LAMBDA,
            lr: 1e-4,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            augment: true,
            split: [0.60, 0.15, 0.25],
            widths: [16, 32, 32, 16],
            input_validity_channel: true,
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_split(&self.split)?;
        if !(0.0..=1.0).contains(&self.human_ratio) {
            return Err(Error::invalid("human ratio must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        FusionConfig::new(self.fusion.alpha1, self.fusion.alpha2)?;
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        let out = if self.mode == Mode::Baseline3Class { 3 } else { 2 };
        Arch {
            widths: self.widths,
            ..default_arch(self.input_validity_channel, out)
        }
    }

    /// `model_<mode>_<ratio>.gzn`; the ratio is the human ratio for semi
    /// and 1 or 0 otherwise.
    pub fn checkpoint_name(&self) -> String {
        let ratio = match self.mode {
            Mode::Semi => self.human_ratio,
            Mode::Weak => 0.0,
            _ => 1.0,
        };
        format!("model_{}_{:.2}.gzn", self.mode, ratio)
    }
}

fn validate_split(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|&x| !(x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must be non-negative and sum to 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into train/val/test. Train and val sizes
/// are rounded; test takes the remainder.
pub fn split_dataset(n: usize, fractions: &[f64; 3], seed: u64) -> Result<Split> {
    validate_split(fractions)?;
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, 10));
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

/// Source sample position for output pixel `(j, k)` of a rotation by
/// `angle` about the grid centre.
fn rotation_source(j: usize, k: usize, rows: usize, cols: usize, cos: f64, sin: f64) -> (f64, f64) {
    let cj = (rows as f64 - 1.0) / 2.0;
    let ck = (cols as f64 - 1.0) / 2.0;
    let (dj, dk) = (j as f64 - cj, k as f64 - ck);
    (cj + cos * dj - sin * dk, ck + sin * dj + cos * dk)
}

fn exact_trig(angle: f64) -> (f64, f64) {
    // right angles map pixels onto pixels exactly
    let quarter = angle / (PI / 2.0);
    if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        (angle.cos(), angle.sin())
    }
}

/// Nearest-neighbour rotation; pixels from outside the grid take `fill`.
pub fn rotate_nearest<T: Copy>(grid: &Grid<T>, angle: f64, fill: T) -> Grid<T> {
    let (rows, cols) = grid.shape();
    let (cos, sin) = exact_trig(angle);
    Grid::from_fn(rows, cols, |j, k| {
        let (sj, sk) = rotation_source(j, k, rows, cols, cos, sin);
        let (rj, rk) = (sj.round(), sk.round());
        if rj < 0.0 || rk < 0.0 || rj > rows as f64 - 1.0 || rk > cols as f64 - 1.0 {
            fill
        } else {
            grid.at(rj as usize, rk as usize)
        }
    })
}

/// Bilinear rotation of heights over valid neighbours only; validity is
/// resampled by nearest neighbour.
pub fn rotate_height_map(hmap: &HeightMap, angle: f64) -> Result<HeightMap> {
    let (rows, cols) = hmap.shape();
    let valid = rotate_nearest(&hmap.valid, angle, false);
    let (cos, sin) = exact_trig(angle);
    let height = Grid::from_fn(rows, cols, |j, k| {
        if !valid.at(j, k) {
            return 0u8;
        }
        let (sj, sk) = rotation_source(j, k, rows, cols, cos, sin);
        let (j0, k0) = (sj.floor(), sk.floor());
        let (fj, fk) = (sj - j0, sk - k0);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (dj, wj) in [(0.0, 1.0 - fj), (1.0, fj)] {
            for (dk, wk) in [(0.0, 1.0 - fk), (1.0, fk)] {
                let (y, x) = (j0 + dj, k0 + dk);
                let w = wj * wk;
                if w <= 0.0 || y < 0.0 || x < 0.0 || y > rows as f64 - 1.0 || x > cols as f64 - 1.0 {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                if hmap.valid.at(y, x) {
                    acc += w * hmap.height.at(y, x) as f64;
                    wsum += w;
                }
            }
        }
        if wsum > 0.0 {
            (acc / wsum).round().clamp(0.0, 255.0) as u8
        } else {
            let (rj, rk) = (sj.round() as usize, sk.round() as usize);
            hmap.height.at(rj, rk)
        }
    });
    HeightMap::new(height, valid, hmap.resolution)
}

pub fn rotate_labels(map: &LabelMap, angle: f64) -> Result<LabelMap> {
    LabelMap::new(rotate_nearest(map.labels(), angle, Label::Unknown), map.role())
}

/// Scene as seen by the trainer. Reads of the human labels are counted.
#[derive(Debug)]
pub struct TrainingScene {
    pub hmap: HeightMap,
    human: Option<LabelMap>,
    pub weak: Option<LabelMap>,
    pub path_mask: Grid<bool>,
    human_reads: Cell<u64>,
}

impl TrainingScene {
    pub fn new(hmap: HeightMap, human: Option<LabelMap>, weak: Option<LabelMap>, path_mask: Grid<bool>) -> Result<Self> {
        let shape = hmap.shape();
        if let Some(h) = &human {
            h.labels().ensure_shape(shape)?;
        }
        if let Some(w) = &weak {
            w.labels().ensure_shape(shape)?;
        }
        path_mask.ensure_shape(shape)?;
        Ok(TrainingScene {
            hmap,
            human,
            weak,
            path_mask,
            human_reads: Cell::new(0),
        })
    }

    pub fn has_human(&self) -> bool {
        self.human.is_some()
    }

    pub fn human(&self) -> Option<&LabelMap> {
        self.human_reads.set(self.human_reads.get() + 1);
        self.human.as_ref()
    }

    pub fn human_reads(&self) -> u64 {
        self.human_reads.get()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: Mode,
    pub loss_dri: f64,
    /// Zero for the three-class baseline, whose single loss is `loss_dri`.
    pub loss_obs: f64,
    #[serde(rename = "val_F1_dri")]
    pub val_f1_dri: Option<f64>,
    #[serde(rename = "val_F1_obs")]
    pub val_f1_obs: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Epoch (1-based) of the returned checkpoint; 0 for the initial model.
    pub best_epoch: usize,
    /// Training scenes whose human labels were visible.
    pub human_visible: Vec<usize>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&serde_json::to_string(r).expect("serializable"));
            s.push('\n');
        }
        s
    }
}

/// Human-visible subset of `train`: a seeded prefix, so subsets for
/// growing ratios are nested.
pub fn human_visible_subset(train: &[usize], ratio: f64, seed: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut rng::stream(seed, 11));
    let n = ((train.len() as f64 * ratio).round() as usize).min(train.len());
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Macro-averaged metrics of `model` on `indices`.
pub fn evaluate_model(model: &Model, scenes: &[TrainingScene], indices: &[usize]) -> Result<MacroReport> {
    let mut reports = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &scenes[i];
        let gt = s
            .human()
            .ok_or_else(|| Error::invalid("evaluation scenes need human labels"))?;
        let (_, pred) = model.predict(&s.hmap)?;
        reports.push(evaluate(&pred, gt, &s.path_mask)?);
    }
    Ok(macro_average(&reports))
}

enum Net {
    Dual(DualBranchModel),
    Three(ThreeClassModel),
}

impl Net {
    fn snapshot(&self) -> Model {
        match self {
            Net::Dual(m) => Model::Dual(m.clone()),
            Net::Three(m) => Model::ThreeClass(m.clone()),
        }
    }
}

/// Trains on `train`, selecting the epoch with the best mean validation
/// F1(drivable) on `val`. With an empty `val` the last epoch is returned.
pub fn train(scenes: &[TrainingScene], train: &[usize], val: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for &i in train.iter().chain(val) {
        if i >= scenes.len() {
            return Err(Error::invalid(format!("scene index {i} out of range")));
        }
    }
    for &i in train {
        if cfg.mode.needs_weak() && scenes[i].weak.is_none() {
            return Err(Error::invalid(format!("mode {} needs weak labels on every training scene", cfg.mode)));
        }
        if cfg.mode.needs_human() && cfg.mode != Mode::Semi && !scenes[i].has_human() {
            return Err(Error::invalid(format!("mode {} needs human labels on every training scene", cfg.mode)));
        }
    }
    if val.iter().any(|&i| !scenes[i].has_human()) {
        return Err(Error::invalid("validation scenes need human labels"));
    }
    let human_visible = match cfg.mode {
        Mode::Weak => Vec::new(),
        Mode::Semi => human_visible_subset(train, cfg.human_ratio, cfg.seed),
        _ => train.to_vec(),
    };
    if cfg.mode == Mode::Semi && human_visible.iter().any(|&i| !scenes[i].has_human()) {
        return Err(Error::invalid("human-visible scenes need human labels"));
    }
    let mut visible = vec![false; scenes.len()];
    for &i in &human_visible {
        visible[i] = true;
    }

    let arch = cfg.arch();
    let mut net = match cfg.mode {
        Mode::Baseline3Class => Net::Three(ThreeClassModel::init(&arch, cfg.seed, false)?),
        _ => Net::Dual(DualBranchModel::init(&arch, cfg.seed, false, cfg.fusion)?),
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut aug_rng = rng::stream(cfg.seed, 12);
    let mut order_rng = rng::stream(cfg.seed, 13);
    let mut order = train.to_vec();
    let mut step = 0u64;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum_dri, mut sum_obs, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &scenes[i];
                let human = if visible[i] { s.human().cloned() } else { None };
                let weak = if cfg.mode.needs_weak() { s.weak.clone() } else { None };
                let mut sample = Sample {
                    hmap: s.hmap.clone(),
                    human,
                    weak,
                };
                if cfg.augment {
                    let angle = aug_rng.random_range(0.0..2.0 * PI);
                    sample = rotate_sample(&sample, angle)?;
                }
                samples.push(sample);
            }
            step += 1;
            match &mut net {
                Net::Dual(m) => {
                    m.zero_grad();
                    let l = m.accumulate_batch(&samples, cfg.lambda)?;
                    adam_step(&mut m.dri, &adam, step)?;
                    adam_step(&mut m.obs, &adam, step)?;
                    sum_dri += l.dri;
                    sum_obs += l.obs;
                }
                Net::Three(m) => {
                    m.params.zero_grad();
                    let scale = 1.0 / samples.len() as f64;
                    let mut total = 0.0;
                    for s in &samples {
                        let human = s.human.as_ref().expect("baseline samples carry human labels");
                        total += scale * m.accumulate_sample(&s.hmap, human, scale)?;
                    }
                    adam_step(&mut m.params, &adam, step)?;
                    sum_dri += total;
                }
            }
            batches += 1;
        }
        let snapshot = net.snapshot();
        let (val_dri, val_obs) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate_model(&snapshot, scenes, val)?;
            (Some(r.dri.f1), Some(r.obs.f1))
        };
        log.push(EpochRecord {
            epoch,
            mode: cfg.mode,
            loss_dri: sum_dri / batches as f64,
            loss_obs: sum_obs / batches as f64,
            val_f1_dri: val_dri,
            val_f1_obs: val_obs,
        });
        let score = val_dri.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || val.is_empty()) {
            best = Some((score, epoch, snapshot));
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, net.snapshot()),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        human_visible,
    })
}

pub fn rotate_sample(sample: &Sample, angle: f64) -> Result<Sample> {
    Ok(Sample {
        hmap: rotate_height_map(&sample.hmap, angle)?,
        human: sample.human.as_ref().map(|h| rotate_labels(h, angle)).transpose()?,
        weak: sample.weak.as_ref().map(|w| rotate_labels(w, angle)).transpose()?,
    })
}
