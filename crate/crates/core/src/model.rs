//! The dual-branch model, its per-sample losses, score fusion, the
//! three-class baseline and the checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{build_target_map, Branch, CostMap, Grid, HeightMap, Label, LabelMap, LabelRole};
use crate::nnet::{
    self, masked_cross_entropy, masked_softmax_cross_entropy, softmax_channels, Arch,
    BranchParams, Differentiable, Param, Tensor,
};
use crate::pnm::write_atomic;
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha1: 0.5,
            alpha2: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        let inside = |a: f64| a > 0.0 && a < 1.0;
        if !(inside(alpha1) && inside(alpha2)) {
            return Err(Error::invalid("fusion thresholds must lie strictly inside (0, 1)"));
        }
        Ok(FusionConfig { alpha1, alpha2 })
    }
}

/// Fused score and label of one pixel.
pub fn fuse_pixel(s1: f64, s2: f64, cfg: &FusionConfig) -> (f64, Label) {
    if s1 > cfg.alpha1 && s2 < cfg.alpha2 {
        (s1, Label::Drivable)
    } else if s2 > cfg.alpha2 && s1 < cfg.alpha1 {
        (1.0 - s2, Label::Obstacle)
    } else {
        let denom = (1.0 - s1) + (1.0 - s2);
        let c = if denom == 0.0 { 0.5 } else { (1.0 - s2) / denom };
        (c, Label::Grey)
    }
}

/// Fuses branch probabilities into a score map and a prediction. Invalid
/// pixels get score 0 and label unknown.
pub fn fuse(
    s1: &Grid<f64>,
    s2: &Grid<f64>,
    valid: &Grid<bool>,
    cfg: &FusionConfig,
) -> Result<(CostMap, LabelMap)> {
    s2.ensure_shape(s1.shape())?;
    valid.ensure_shape(s1.shape())?;
    let (rows, cols) = s1.shape();
    let mut score = Vec::with_capacity(s1.len());
    let mut labels = Vec::with_capacity(s1.len());
    for ((&a, &b), &v) in s1.iter().zip(s2.iter()).zip(valid.iter()) {
        let (c, y) = if v { fuse_pixel(a, b, cfg) } else { (0.0, Label::Unknown) };
        score.push(c);
        labels.push(y);
    }
    let cost = CostMap::new(Grid::from_vec(rows, cols, score)?, s1.clone(), s2.clone())?;
    let pred = LabelMap::new(Grid::from_vec(rows, cols, labels)?, LabelRole::Prediction)?;
    Ok((cost, pred))
}

/// Network input: normalized height, then optionally the validity flag.
pub fn input_tensor(hmap: &HeightMap, validity_channel: bool) -> Tensor {
    let (rows, cols) = hmap.shape();
    let channels = if validity_channel { 2 } else { 1 };
    let mut data = Vec::with_capacity(channels * rows * cols);
    data.extend(hmap.height.iter().map(|&h| h as f64 / 255.0));
    if validity_channel {
        data.extend(hmap.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    }
    Tensor::from_vec(&[channels, rows, cols], data).expect("sizes agree")
}

pub fn input_channels(validity_channel: bool) -> usize {
    if validity_channel {
        2
    } else {
        1
    }
}

/// Default desk-scale widths for a branch with `out_channels` outputs.
pub fn default_arch(validity_channel: bool, out_channels: usize) -> Arch {
    Arch {
        in_channels: input_channels(validity_channel),
        widths: [16, 32, 32, 16],
        out_channels,
    }
}

fn check_divisible(hmap: &HeightMap) -> Result<()> {
    let (r, c) = hmap.shape();
    let f = Arch::DOWNSAMPLING;
    if r % f != 0 || c % f != 0 || r == 0 || c == 0 {
        return Err(Error::invalid(format!(
            "height map {r}x{c} must have non-zero extents divisible by {f}"
        )));
    }
    Ok(())
}

/// One training sample: inputs plus whichever label sources are visible.
#[derive(Debug, Clone)]
pub struct Sample {
    pub hmap: HeightMap,
    pub human: Option<LabelMap>,
    pub weak: Option<LabelMap>,
}

/// Per-branch loss of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BranchLoss {
    pub dri: f64,
    pub obs: f64,
}

impl BranchLoss {
    pub fn total(&self) -> f64 {
        self.dri + self.obs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchModel {
    pub dri: BranchParams,
    pub obs: BranchParams,
    pub fusion: FusionConfig,
    pub input_validity_channel: bool,
}

impl DualBranchModel {
    /// Independent He initialization of both branches from `seed`.
    pub fn init(arch: &Arch, seed: u64, zero_final: bool, fusion: FusionConfig) -> Result<Self> {
        if arch.out_channels != 2 || !(1..=2).contains(&arch.in_channels) {
            return Err(Error::invalid("a dual-branch model has 1 or 2 inputs and 2 outputs"));
        }
        Ok(DualBranchModel {
            dri: BranchParams::init(arch, &mut rng::stream(seed, 1), zero_final),
            obs: BranchParams::init(arch, &mut rng::stream(seed, 2), zero_final),
            fusion,
            input_validity_channel: arch.in_channels == 2,
        })
    }

    pub fn arch(&self) -> Result<Arch> {
        let a = self.dri.arch()?;
        if self.obs.arch()? != a {
            return Err(Error::invalid("branches disagree on architecture"));
        }
        Ok(a)
    }

    pub fn branch(&self, b: Branch) -> &BranchParams {
        match b {
            Branch::Drivable => &self.dri,
            Branch::Obstacle => &self.obs,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut BranchParams {
        match b {
            Branch::Drivable => &mut self.dri,
            Branch::Obstacle => &mut self.obs,
        }
    }

    /// `(S1, S2)`: probability of drivable from the drivable branch and of
    /// obstacle from the obstacle branch.
    pub fn forward(&self, hmap: &HeightMap) -> Result<(Grid<f64>, Grid<f64>)> {
        check_divisible(hmap)?;
        let x = input_tensor(hmap, self.input_validity_channel);
        let (rows, cols) = hmap.shape();
        let mut out = Vec::with_capacity(2);
        for b in Branch::BOTH {
            let (logits, _) = self.branch(b).forward(&x)?;
            let p = nnet::softmax2(&logits)?;
            out.push(Grid::from_vec(rows, cols, p.channel(0).to_vec())?);
        }
        let s2 = out.pop().expect("two branches");
        let s1 = out.pop().expect("two branches");
        Ok((s1, s2))
    }

    pub fn predict(&self, hmap: &HeightMap) -> Result<(CostMap, LabelMap)> {
        let (s1, s2) = self.forward(hmap)?;
        fuse(&s1, &s2, &hmap.valid, &self.fusion)
    }

    pub fn zero_grad(&mut self) {
        self.dri.zero_grad();
        self.obs.zero_grad();
    }

    /// Loss of one sample for both branches: the human term with weight 1
    /// plus the weak term with weight `lambda`. Parameter gradients of
    /// `scale * loss` are added to the shadows.
    pub fn accumulate_sample(&mut self, sample: &Sample, lambda: f64, scale: f64) -> Result<BranchLoss> {
        check_divisible(&sample.hmap)?;
        if sample.human.is_none() && sample.weak.is_none() {
            return Err(Error::invalid("a sample needs human or weak labels"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        let x = input_tensor(&sample.hmap, self.input_validity_channel);
        let valid = &sample.hmap.valid;
        let mut loss = BranchLoss::default();
        for b in Branch::BOTH {
            let (logits, trace) = self.branch(b).forward(&x)?;
            let probs = nnet::softmax2(&logits)?;
            let mut grad = Tensor::zeros(probs.dims());
            let mut total = 0.0;
            let sources = [(&sample.human, false, 1.0), (&sample.weak, true, lambda)];
            for (labels, weak, weight) in sources {
                let Some(labels) = labels else { continue };
                let target = build_target_map(labels, valid, b, weak)?;
                let (l, g) = masked_cross_entropy(&probs, &target, b.positive(), weight)?;
                total += l;
                grad.add_assign(&g)?;
            }
            if scale != 1.0 {
                grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            self.branch_mut(b).backward(&trace, &grad)?;
            match b {
                Branch::Drivable => loss.dri = total,
                Branch::Obstacle => loss.obs = total,
            }
        }
        Ok(loss)
    }

    /// Loss only, no gradient bookkeeping.
    pub fn sample_loss(&self, sample: &Sample, lambda: f64) -> Result<BranchLoss> {
        let mut scratch = self.clone();
        scratch.accumulate_sample(sample, lambda, 0.0)
    }

    /// Mean loss over `samples`, with gradients of the mean accumulated.
    pub fn accumulate_batch(&mut self, samples: &[Sample], lambda: f64) -> Result<BranchLoss> {
        if samples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let scale = 1.0 / samples.len() as f64;
        let mut mean = BranchLoss::default();
        for s in samples {
            let l = self.accumulate_sample(s, lambda, scale)?;
            mean.dri += l.dri * scale;
            mean.obs += l.obs * scale;
        }
        Ok(mean)
    }

    fn params(&self) -> impl Iterator<Item = &Param> {
        self.dri.params().chain(self.obs.params())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.dri.params_mut().chain(self.obs.params_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreeClassModel {
    pub params: BranchParams,
    pub input_validity_channel: bool,
}

/// Output channel order of the three-class baseline.
pub const THREE_CLASS_LABELS: [Label; 3] = [Label::Drivable, Label::Obstacle, Label::Grey];

impl ThreeClassModel {
    pub fn init(arch: &Arch, seed: u64, zero_final: bool) -> Result<Self> {
        if arch.out_channels != 3 || !(1..=2).contains(&arch.in_channels) {
            return Err(Error::invalid("the baseline has 1 or 2 inputs and 3 outputs"));
        }
        Ok(ThreeClassModel {
            params: BranchParams::init(arch, &mut rng::stream(seed, 3), zero_final),
            input_validity_channel: arch.in_channels == 2,
        })
    }

    /// Class probabilities, channels ordered as [`THREE_CLASS_LABELS`].
    pub fn forward(&self, hmap: &HeightMap) -> Result<Tensor> {
        check_divisible(hmap)?;
        let x = input_tensor(hmap, self.input_validity_channel);
        let (logits, _) = self.params.forward(&x)?;
        softmax_channels(&logits)
    }

    /// Argmax prediction (ties to the lowest label code). The score map is
    /// the drivable probability; `s1`/`s2` hold the DRI and OBS channels.
    pub fn predict(&self, hmap: &HeightMap) -> Result<(CostMap, LabelMap)> {
        let probs = self.forward(hmap)?;
        let (rows, cols) = hmap.shape();
        let labels = argmax_labels(&probs, &hmap.valid)?;
        let plane = |c: usize| Grid::from_vec(rows, cols, probs.channel(c).to_vec());
        let mut score = plane(0)?;
        for (s, &v) in score.as_mut_slice().iter_mut().zip(hmap.valid.iter()) {
            if !v {
                *s = 0.0;
            }
        }
        Ok((CostMap::new(score, plane(0)?, plane(1)?)?, labels))
    }

    /// UNK-masked three-class cross-entropy of one sample; gradients of
    /// `scale * loss` are accumulated.
    pub fn accumulate_sample(&mut self, hmap: &HeightMap, human: &LabelMap, scale: f64) -> Result<f64> {
        check_divisible(hmap)?;
        human.labels().ensure_shape(hmap.shape())?;
        let x = input_tensor(hmap, self.input_validity_channel);
        let (logits, trace) = self.params.forward(&x)?;
        let probs = softmax_channels(&logits)?;
        let targets: Vec<Option<usize>> = human
            .labels()
            .iter()
            .map(|&l| THREE_CLASS_LABELS.iter().position(|&c| c == l))
            .collect();
        let (loss, mut grad) = masked_softmax_cross_entropy(&probs, &targets, 1.0)?;
        if scale != 1.0 {
            grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
        self.params.backward(&trace, &grad)?;
        Ok(loss)
    }
}

/// Per-pixel argmax over [`THREE_CLASS_LABELS`]; invalid pixels are unknown.
pub fn argmax_labels(probs: &Tensor, valid: &Grid<bool>) -> Result<LabelMap> {
    let (c, rows, cols) = probs.chw()?;
    if c != THREE_CLASS_LABELS.len() {
        return Err(Error::invalid("expected three class channels"));
    }
    valid.ensure_shape((rows, cols))?;
    let plane = rows * cols;
    let data = (0..plane)
        .map(|p| {
            if !valid.as_slice()[p] {
                return Label::Unknown;
            }
            let mut best = 0;
            for ch in 1..c {
                if probs.data()[ch * plane + p] > probs.data()[best * plane + p] {
                    best = ch;
                }
            }
            THREE_CLASS_LABELS[best]
        })
        .collect();
    LabelMap::new(Grid::from_vec(rows, cols, data)?, LabelRole::Prediction)
}

/// A trained model of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dual(DualBranchModel),
    ThreeClass(ThreeClassModel),
}

impl Model {
    pub fn predict(&self, hmap: &HeightMap) -> Result<(CostMap, LabelMap)> {
        match self {
            Model::Dual(m) => m.predict(hmap),
            Model::ThreeClass(m) => m.predict(hmap),
        }
    }

    /// Checkpoint layout: magic, version, fusion thresholds, input-channel
    /// flag, section count, then per section a 4-byte tag and a parameter
    /// block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = nnet::MAGIC.to_vec();
        let (fusion, validity, sections): (FusionConfig, bool, Vec<(&[u8; 4], &BranchParams)>) = match self {
            Model::Dual(m) => (
                m.fusion,
                m.input_validity_channel,
                vec![(b"DRI\0", &m.dri), (b"OBS\0", &m.obs)],
            ),
            Model::ThreeClass(m) => (
                FusionConfig::default(),
                m.input_validity_channel,
                vec![(b"CLS3", &m.params)],
            ),
        };
        let w = &mut out;
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.extend_from_slice(&fusion.alpha1.to_le_bytes());
        w.extend_from_slice(&fusion.alpha2.to_le_bytes());
        w.push(validity as u8);
        w.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, p) in sections {
            w.extend_from_slice(tag);
            p.write_block(w).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut cur = bytes;
        nnet::read_magic(&mut cur)?;
        let version = nnet::read_u32(&mut cur)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let fusion = FusionConfig::new(nnet::read_f64(&mut cur)?, nnet::read_f64(&mut cur)?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let (&flag, rest) = cur
            .split_first()
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        cur = rest;
        let validity = match flag {
            0 => false,
            1 => true,
            _ => return Err(Error::format("checkpoint", "bad input flag")),
        };
        let n = nnet::read_u32(&mut cur)?;
        let mut sections = Vec::new();
        for _ in 0..n.min(3) {
            if cur.len() < 4 {
                return Err(Error::format("checkpoint", "truncated"));
            }
            let (tag, rest) = cur.split_at(4);
            cur = rest;
            let tag: [u8; 4] = tag.try_into().expect("four bytes");
            sections.push((tag, BranchParams::read_block(&mut cur)?));
        }
        if !cur.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let in_ch = input_channels(validity);
        let check = |p: &BranchParams, out: usize| -> Result<()> {
            let a = p.arch()?;
            if a.in_channels != in_ch || a.out_channels != out {
                return Err(Error::format("checkpoint", "section shape disagrees with header"));
            }
            Ok(())
        };
        let mut it = sections.into_iter();
        match (it.next(), it.next(), it.next()) {
            (Some((t1, dri)), Some((t2, obs)), None) if &t1 == b"DRI\0" && &t2 == b"OBS\0" => {
                check(&dri, 2)?;
                check(&obs, 2)?;
                if dri.arch()? != obs.arch()? {
                    return Err(Error::format("checkpoint", "branches disagree on architecture"));
                }
                Ok(Model::Dual(DualBranchModel {
                    dri,
                    obs,
                    fusion,
                    input_validity_channel: validity,
                }))
            }
            (Some((t, params)), None, None) if &t == b"CLS3" => {
                check(&params, 3)?;
                Ok(Model::ThreeClass(ThreeClassModel {
                    params,
                    input_validity_channel: validity,
                }))
            }
            _ => Err(Error::format("checkpoint", "unexpected section layout")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }
}

/// Total dual-branch loss over fixed samples as a function of every
/// parameter of both branches, for gradient verification.
pub struct DualLossProbe {
    pub model: DualBranchModel,
    pub samples: Vec<Sample>,
    pub lambda: f64,
}

impl DualLossProbe {
    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (pi, p) in self.model.params().enumerate() {
            if index < p.value.len() {
                return (pi, index);
            }
            index -= p.value.len();
        }
        panic!("parameter index out of range");
    }
}

impl Differentiable for DualLossProbe {
    fn parameter_count(&self) -> usize {
        self.model.params().map(|p| p.value.len()).sum()
    }

    fn get(&self, index: usize) -> f64 {
        let (pi, i) = self.locate(index);
        self.model.params().nth(pi).expect("located").value.data()[i]
    }

    fn set(&mut self, index: usize, value: f64) {
        let (pi, i) = self.locate(index);
        self.model.params_mut().nth(pi).expect("located").value.data_mut()[i] = value;
    }

    fn loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.samples {
            total += self.model.sample_loss(s, self.lambda)?.total();
        }
        Ok(total / self.samples.len() as f64)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.model.zero_grad();
        self.model.accumulate_batch(&self.samples, self.lambda)?;
        Ok(self
            .model
            .params()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect())
    }
}

/// A random tiny dual-branch instance for gradient verification: extents
/// in {4, 8, 12, 16}, widths up to 4, one to three samples. The first
/// sample always carries both human and weak labels.
pub fn gradcheck_case(seed: u64, lambda: f64) -> Result<DualLossProbe> {
    use rand::Rng as _;
    let mut r = rng::stream(seed, 20);
    let rows = 4 * r.random_range(1..=4usize);
    let cols = 4 * r.random_range(1..=4usize);
    let validity = r.random_bool(0.5);
    let mut widths = [0usize; 4];
    for w in widths.iter_mut() {
        *w = r.random_range(1..=4);
    }
    let arch = Arch {
        in_channels: input_channels(validity),
        widths,
        out_channels: 2,
    };
    let mut model = DualBranchModel::init(&arch, r.random(), false, FusionConfig::default())?;
    // zero biases behind a dead unit put pre-activations exactly on the relu kink
    for b in [Branch::Drivable, Branch::Obstacle] {
        for layer in &mut model.branch_mut(b).layers {
            for v in layer.bias.value.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }
    let n = r.random_range(1..=3usize);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let height = Grid::from_fn(rows, cols, |_, _| r.random_range(0..=255u8));
        let valid = Grid::from_fn(rows, cols, |_, _| r.random_bool(0.85));
        let hmap = HeightMap::new(height, valid, 0.2)?;
        let (human, weak) = match (i, r.random_range(0..3)) {
            (0, _) | (_, 0) => (true, true),
            (_, 1) => (true, false),
            _ => (false, true),
        };
        let mut labels = |alphabet: &[Label], role| {
            LabelMap::new(Grid::from_fn(rows, cols, |_, _| alphabet[r.random_range(0..alphabet.len())]), role)
        };
        let human = if human { Some(labels(&Label::ALL, LabelRole::HumanGt)?) } else { None };
        let weak = if weak {
            Some(labels(&[Label::Unknown, Label::Drivable, Label::Obstacle], LabelRole::Weak)?)
        } else {
            None
        };
        samples.push(Sample { hmap, human, weak });
    }
    Ok(DualLossProbe {
        model,
        samples,
        lambda,
    })
}
