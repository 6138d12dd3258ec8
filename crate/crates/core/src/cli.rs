//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 failed check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::autolabel::{autolabel, AutolabelConfig, RegionGrowParams};
use crate::dataset::{self, create_dir, read_json, write_json, Dataset};
use crate::error::{Error, Result};
use crate::grids::{Grid, Label, LabelRole};
use crate::metrics::{evaluate_with, macro_average, EvalConfig, MacroReport, MetricsReport};
use crate::model::{gradcheck_case, FusionConfig, Model, DEFAULT_LAMBDA};
use crate::nnet::gradient_check;
use crate::pnm::{self, Pgm, Ppm};
use crate::synthworld::SceneSpec;
use crate::trainer::{split_dataset, train, Mode, Split, TrainConfig, TrainingScene};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

pub const COST: &str = "cost.pgm";
pub const PRED: &str = "pred.pgm";
pub const S1: &str = "s1.pgm";
pub const S2: &str = "s2.pgm";
pub const REPORT: &str = "report.json";
pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const SPLIT: &str = "split.json";

#[derive(Debug, Parser)]
#[command(name = "offroad", version, about = "Traversability estimation from LiDAR height maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    SynthGen(SynthGenArgs),
    /// Write weak labels (weak.pgm) for every scene of a dataset.
    Autolabel(AutolabelArgs),
    /// Train a model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Run a checkpoint over a dataset.
    Infer(InferArgs),
    /// Score predictions against human labels.
    Eval(EvalArgs),
    /// Render a label map, cost map or mask as a colour image.
    Render(RenderArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    #[arg(long, default_value_t = 0.2)]
    pub resolution: f64,
    #[arg(long, default_value_t = 4.0)]
    pub road_width: f64,
    #[arg(long, default_value_t = 1.2)]
    pub grey_width: f64,
    #[arg(long, default_value_t = 15.0)]
    pub obstacle_density: f64,
    #[arg(long, default_value_t = 0.1)]
    pub terrain_roughness: f64,
    #[arg(long, default_value_t = 1.0)]
    pub curve_amplitude: f64,
    #[arg(long, default_value_t = 2.0)]
    pub vehicle_width: f64,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthGenArgs {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            rows: self.rows,
            cols: self.cols,
            resolution: self.resolution,
            road_width: self.road_width,
            grey_width: self.grey_width,
            obstacle_density: self.obstacle_density,
            terrain_roughness: self.terrain_roughness,
            curve_amplitude: self.curve_amplitude,
            vehicle_width: self.vehicle_width,
            frames: self.frames,
        }
    }
}

#[derive(Debug, Args)]
pub struct AutolabelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub t_h: f64,
    #[arg(long, default_value_t = 0.6)]
    pub t_a: f64,
    #[arg(long, default_value_t = -0.3, allow_negative_numbers = true)]
    pub seed_lo: f64,
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub seed_hi: f64,
    #[arg(long, default_value_t = 2.0)]
    pub vehicle_width: f64,
    /// Also label region-grown drivable pixels as drivable.
    #[arg(long)]
    pub use_rg_drivable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    Weak,
    Semi,
    #[value(name = "3class")]
    ThreeClass,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Full => Mode::Full,
            ModeArg::Weak => Mode::Weak,
            ModeArg::Semi => Mode::Semi,
            ModeArg::ThreeClass => Mode::Baseline3Class,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Seed of the train/val/test partition.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.60, 0.15, 0.25])]
    pub split: Vec<f64>,
}

impl SplitArgs {
    fn fractions(&self) -> Result<[f64; 3]> {
        <[f64; 3]>::try_from(self.split.as_slice()).map_err(|_| Error::invalid("split needs three fractions"))
    }

    pub fn split(&self, n: usize) -> Result<Split> {
        split_dataset(n, &self.fractions()?, self.split_seed)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    pub human_ratio: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_augment: bool,
    /// Feed only the height channel to the network.
    #[arg(long)]
    pub no_validity_channel: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 32, 16])]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha2: f64,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let widths = <[usize; 4]>::try_from(self.widths.as_slice())
            .map_err(|_| Error::invalid("widths need four values"))?;
        let cfg = TrainConfig {
            mode: self.mode.into(),
            human_ratio: self.human_ratio,
            lambda: self.lambda,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            augment: !self.no_augment,
            split: self.split.fractions()?,
            widths,
            input_validity_channel: !self.no_validity_channel,
            fusion: FusionConfig::new(self.alpha1, self.alpha2)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct SubsetArgs {
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[command(flatten)]
    pub split: SplitArgs,
}

impl SubsetArgs {
    pub fn indices(&self, n: usize) -> Result<Vec<usize>> {
        if self.subset == Subset::All {
            return Ok((0..n).collect());
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let s = self.split.split(n)?;
        let mut v = match self.subset {
            Subset::Train => s.train,
            Subset::Val => s.val,
            _ => s.test,
        };
        v.sort_unstable();
        Ok(v)
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub subset: SubsetArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path; defaults to report.json inside the prediction directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub exclude_grey_from_pred_sets: bool,
    #[command(flatten)]
    pub subset: SubsetArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderKind {
    /// Decide from the file: 16-bit is a cost map, codes 0..=3 a label map,
    /// anything else greyscale.
    Auto,
    Label,
    Cost,
    Grey,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RenderKind::Auto)]
    pub kind: RenderKind,
    /// Vehicle-path mask drawn over cost maps.
    #[arg(long)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
}

/// Result of a command that ran without error.
pub enum Outcome {
    Ok,
    CheckFailed(String),
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidParameter(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::SynthGen(a) => synth_gen(a),
        Command::Autolabel(a) => autolabel_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn synth_gen(a: &SynthGenArgs) -> Result<Outcome> {
    let spec = a.spec();
    spec.validate()?;
    let m = dataset::generate_dataset(&a.out, &spec, a.seed, a.scenes)?;
    println!("wrote {} scenes to {}", m.scenes.len(), a.out.display());
    Ok(Outcome::Ok)
}

fn autolabel_cmd(a: &AutolabelArgs) -> Result<Outcome> {
    let cfg = AutolabelConfig {
        region_grow: RegionGrowParams {
            t_h: a.t_h,
            t_a: a.t_a,
            seed_interval: (a.seed_lo, a.seed_hi),
            ..RegionGrowParams::default()
        },
        vehicle_width: a.vehicle_width,
        use_rg_drivable: a.use_rg_drivable,
    };
    cfg.region_grow.validate()?;
    if !(cfg.vehicle_width > 0.0) {
        return Err(Error::invalid("vehicle width must be positive"));
    }
    let ds = Dataset::open(&a.data)?;
    for i in 0..ds.len() {
        let dir = ds.scene_dir(i);
        let scene = ds.scene(i)?;
        let wl = autolabel(&scene.heightmap, &scene.trajectory, &cfg)?;
        if !wl.region_grown {
            eprintln!(
                "warning: {}: no seed pixel for region growing, using the vehicle path only",
                ds.manifest.scenes[i]
            );
        }
        pnm::write_label_map(&dir.join(dataset::WEAK), &wl.weak)?;
    }
    println!("labelled {} scenes", ds.len());
    Ok(Outcome::Ok)
}

/// Loads every scene with its human labels and, when present, weak labels.
pub fn load_training_scenes(ds: &Dataset, need_weak: bool) -> Result<Vec<TrainingScene>> {
    let mut scenes = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let rec = ds.scene(i)?;
        let weak_path = ds.scene_dir(i).join(dataset::WEAK);
        let weak = if weak_path.exists() {
            Some(ds.weak(i)?)
        } else if need_weak {
            return Err(Error::format(
                "dataset",
                format!("{} has no weak labels; run autolabel first", ds.manifest.scenes[i]),
            ));
        } else {
            None
        };
        scenes.push(TrainingScene::new(rec.heightmap, Some(rec.human_gt), weak, rec.path_mask)?);
    }
    Ok(scenes)
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    let cfg = a.config()?;
    let ds = Dataset::open(&a.data)?;
    let scenes = load_training_scenes(&ds, cfg.mode.needs_weak())?;
    let split = a.split.split(scenes.len())?;
    let out = train(&scenes, &split.train, &split.val, &cfg)?;
    create_dir(&a.out)?;
    let ckpt = a.out.join(cfg.checkpoint_name());
    out.model.save(&ckpt)?;
    pnm::write_atomic(&a.out.join(TRAINING_LOG), out.log_jsonl().as_bytes())?;
    write_json(&a.out.join(SPLIT), &split)?;
    println!("best epoch {} -> {}", out.best_epoch, ckpt.display());
    Ok(Outcome::Ok)
}

fn infer_cmd(a: &InferArgs) -> Result<Outcome> {
    let model = Model::load(&a.model)?;
    let ds = Dataset::open(&a.data)?;
    for i in a.subset.indices(ds.len())? {
        let scene = ds.scene(i)?;
        let (cost, pred) = model.predict(&scene.heightmap)?;
        let dir = a.out.join(&ds.manifest.scenes[i]);
        create_dir(&dir)?;
        pnm::unit_to_pgm16(&cost.score).write(&dir.join(COST))?;
        pnm::unit_to_pgm16(&cost.s1).write(&dir.join(S1))?;
        pnm::unit_to_pgm16(&cost.s2).write(&dir.join(S2))?;
        pnm::write_label_map(&dir.join(PRED), &pred)?;
    }
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub scenes: Vec<SceneReport>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroReport,
}

pub fn evaluate_predictions(pred_root: &Path, ds: &Dataset, indices: &[usize], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut scenes = Vec::with_capacity(indices.len());
    for &i in indices {
        let name = &ds.manifest.scenes[i];
        let rec = ds.scene(i)?;
        let pred = pnm::read_label_map(&pred_root.join(name).join(PRED), LabelRole::Prediction)?;
        scenes.push(SceneReport {
            scene: name.clone(),
            metrics: evaluate_with(&pred, &rec.human_gt, &rec.path_mask, cfg)?,
        });
    }
    let reports: Vec<MetricsReport> = scenes.iter().map(|s| s.metrics).collect();
    Ok(EvalReport {
        config: *cfg,
        scenes,
        macro_avg: macro_average(&reports),
    })
}

fn eval_cmd(a: &EvalArgs) -> Result<Outcome> {
    let ds = Dataset::open(&a.data)?;
    let cfg = EvalConfig {
        exclude_grey_from_pred_sets: a.exclude_grey_from_pred_sets,
    };
    let report = evaluate_predictions(&a.pred, &ds, &a.subset.indices(ds.len())?, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred.join(REPORT));
    write_json(&out, &report)?;
    let m = &report.macro_avg;
    println!(
        "scenes {}  F1 dri {:.4}  F1 obs {:.4}  Q3 {:.4}",
        m.scenes, m.dri.f1, m.obs.f1, m.q3
    );
    Ok(Outcome::Ok)
}

pub fn label_color(label: Label) -> [u8; 3] {
    match label {
        Label::Unknown => [0, 0, 0],
        Label::Drivable => [0, 255, 0],
        Label::Obstacle => [255, 0, 0],
        Label::Grey => [255, 255, 0],
    }
}

/// Colour used for vehicle-path pixels on cost renders.
pub const PATH_COLOR: [u8; 3] = [0, 0, 255];

pub fn render_pgm(pgm: &Pgm, kind: RenderKind, path: Option<&Grid<bool>>) -> Result<Ppm> {
    let kind = match kind {
        RenderKind::Auto if pgm.maxval > 255 => RenderKind::Cost,
        RenderKind::Auto if pgm.pixels.iter().all(|&v| v <= 3) => RenderKind::Label,
        RenderKind::Auto => RenderKind::Grey,
        k => k,
    };
    if let Some(p) = path {
        p.ensure_shape(pgm.pixels.shape())?;
    }
    let grey = |v: u16| -> [u8; 3] {
        let g = ((v as u32 * 255 + pgm.maxval as u32 / 2) / pgm.maxval as u32) as u8;
        [g, g, g]
    };
    let pixels = match kind {
        RenderKind::Label => {
            let labels = pnm::label_map_from_pgm(pgm, LabelRole::Prediction)?;
            labels.labels().map(|&l| label_color(l))
        }
        _ => {
            let (rows, cols) = pgm.pixels.shape();
            Grid::from_fn(rows, cols, |j, k| {
                if kind == RenderKind::Cost && path.is_some_and(|p| p.at(j, k)) {
                    PATH_COLOR
                } else {
                    grey(pgm.pixels.at(j, k))
                }
            })
        }
    };
    Ok(Ppm { pixels })
}

fn render_cmd(a: &RenderArgs) -> Result<Outcome> {
    let pgm = Pgm::read(&a.input)?;
    let path = a.path.as_deref().map(pnm::read_mask).transpose()?;
    render_pgm(&pgm, a.kind, path.as_ref())?.write(&a.out)?;
    Ok(Outcome::Ok)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..a.cases {
        let mut probe = gradcheck_case(crate::rng::derive_seed(a.seed, i as u64), a.lambda)?;
        let report = gradient_check(&mut probe, a.tolerance)?;
        println!(
            "case {i:2}: {} parameters, max relative error {:.3e} (analytic {:.6e}, numeric {:.6e}) {}",
            report.parameters,
            report.max_relative_error,
            report.worst_pair.0,
            report.worst_pair.1,
            if report.passed { "ok" } else { "FAIL" }
        );
        worst = worst.max(report.max_relative_error);
        failures += usize::from(!report.passed);
    }
    println!("max relative error {worst:.3e} over {} cases", a.cases);
    if failures > 0 {
        return Ok(Outcome::CheckFailed(format!("{failures} of {} cases above {}", a.cases, a.tolerance)));
    }
    Ok(Outcome::Ok)
}

/// Reads a `split.json` written by `train`.
pub fn read_split(path: &Path) -> Result<Split> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_render_is_bit_exact() {
        let codes = Grid::from_vec(2, 2, vec![0u16, 1, 2, 3]).unwrap();
        let ppm = render_pgm(&Pgm::new(255, codes).unwrap(), RenderKind::Auto, None).unwrap();
        assert_eq!(
            ppm.pixels.as_slice(),
            &[[0, 0, 0], [0, 255, 0], [255, 0, 0], [255, 255, 0]]
        );
    }

    #[test]
    fn cost_render_with_path() {
        let cost = pnm::unit_to_pgm16(&Grid::from_vec(1, 3, vec![0.0, 1.0, 0.5]).unwrap());
        let path = Grid::from_vec(1, 3, vec![false, false, true]).unwrap();
        let ppm = render_pgm(&cost, RenderKind::Auto, Some(&path)).unwrap();
        assert_eq!(ppm.pixels.as_slice(), &[[0, 0, 0], [255, 255, 255], PATH_COLOR]);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["offroad", "synth-gen", "--scenes", "1"]), EXIT_USAGE);
        assert_eq!(run(["offroad", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["offroad", "--help"]), EXIT_OK);
    }
}
