//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;

use offroad::autolabel::{autolabel, region_grow, AutolabelConfig, Connectivity, RegionGrowParams};
use offroad::bev::HeightWindow;
use offroad::grids::{Grid, HeightMap, Label, LabelMap, LabelRole};
use offroad::metrics::{evaluate, evaluate_with, EvalConfig, MetricsReport};
use offroad::model::{fuse, gradcheck_case, FusionConfig, DEFAULT_LAMBDA};
use offroad::nnet::gradient_check;
use offroad::rng::{derive_seed, stream};
use offroad::synthworld::{generate_scene, scene_spec, SceneRecord, SceneSpec};
use offroad::trainer::{evaluate_model, split_dataset, train, Mode, TrainConfig, TrainingScene};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Verdict {
    const CASES: u64 = 20;
    const TOL: f64 = 1e-4;
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut max_side = 0;
    let mut with_weak = 0;
    for i in 0..CASES {
        let mut probe = gradcheck_case(derive_seed(2024, i), DEFAULT_LAMBDA).expect("probe");
        let s = &probe.samples[0];
        max_side = max_side.max(s.hmap.rows()).max(s.hmap.cols());
        with_weak += probe.samples.iter().any(|s| s.weak.is_some() && s.human.is_some()) as usize;
        let r = gradient_check(&mut probe, TOL).expect("gradient check");
        worst = worst.max(r.max_relative_error);
    }
    let el = t.elapsed();
    let passed = worst < TOL && max_side <= 16 && with_weak == CASES as usize && within(el, 120);
    verdict(
        passed,
        format!("{CASES} cases, max relative error {worst:.3e} (< {TOL:e}), largest side {max_side}, {:.1} s", el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

/// Fixed point: drivable is the smallest set containing the seeds and closed
/// under passing edges; obstacles are the valid non-drivable cells touching it.
fn brute_force_grow(hmap: &HeightMap, p: &RegionGrowParams) -> Option<(Vec<bool>, Vec<bool>)> {
    let (rows, cols) = hmap.shape();
    let h: Vec<f64> = hmap.height.iter().map(|&q| p.window.dequantize(q)).collect();
    let valid = hmap.valid.as_slice();
    let neighbours = |j: usize, k: usize| {
        let mut out = Vec::new();
        for dj in -1isize..=1 {
            for dk in -1isize..=1 {
                let diagonal = dj != 0 && dk != 0;
                if (dj, dk) == (0, 0) || (diagonal && p.connectivity == Connectivity::Four) {
                    continue;
                }
                let (nj, nk) = (j as isize + dj, k as isize + dk);
                if nj >= 0 && nk >= 0 && (nj as usize) < rows && (nk as usize) < cols {
                    out.push((nj as usize * cols + nk as usize, diagonal));
                }
            }
        }
        out
    };
    let passes = |a: usize, b: usize, diagonal: bool| {
        let d = if diagonal { std::f64::consts::SQRT_2 * hmap.resolution } else { hmap.resolution };
        let dh = (h[a] - h[b]).abs();
        dh < p.t_h && (dh / d).atan() < p.t_a
    };
    let mut dri: Vec<bool> = (0..rows * cols)
        .map(|i| valid[i] && h[i] >= p.seed_interval.0 && h[i] <= p.seed_interval.1)
        .collect();
    if !dri.iter().any(|&d| d) {
        return None;
    }
    loop {
        let mut changed = false;
        for i in 0..rows * cols {
            if dri[i] || !valid[i] {
                continue;
            }
            if neighbours(i / cols, i % cols).into_iter().any(|(n, diag)| dri[n] && passes(n, i, diag)) {
                dri[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let obs = (0..rows * cols)
        .map(|i| valid[i] && !dri[i] && neighbours(i / cols, i % cols).into_iter().any(|(n, _)| dri[n]))
        .collect();
    Some((dri, obs))
}

fn region_grow_oracle() -> Verdict {
    const GRIDS: u64 = 500;
    let t = Instant::now();
    let mut r = stream(7, 30);
    let mut mismatches = 0;
    let mut no_seed = 0;
    for _ in 0..GRIDS {
        let rows = r.random_range(1..=16usize);
        let cols = r.random_range(1..=16usize);
        // a few height levels make ties and plateaus common
        let levels = r.random_range(2..=40u32);
        let base = r.random_range(0..=200u32);
        let height = Grid::from_fn(rows, cols, |_, _| (base + r.random_range(0..levels)).min(255) as u8);
        let valid_p = r.random_range(0.6..1.0);
        let valid = Grid::from_fn(rows, cols, |_, _| r.random_bool(valid_p));
        let resolution = r.random_range(0.05..0.5);
        let hmap = HeightMap::new(height, valid, resolution).expect("hmap");
        let window = HeightWindow::default();
        // seed interval near the grid's own heights, so most grids have seeds
        let lo = window.dequantize((base + r.random_range(0..levels)).min(255) as u8) - r.random_range(0.0..0.3);
        let params = RegionGrowParams {
            t_h: r.random_range(0.01..0.6),
            t_a: r.random_range(0.05..1.5),
            seed_interval: (lo, lo + r.random_range(0.01..0.5)),
            connectivity: if r.random_bool(0.5) { Connectivity::Four } else { Connectivity::Eight },
            window,
        };
        match (region_grow(&hmap, &params), brute_force_grow(&hmap, &params)) {
            (Ok(got), Some((d, o))) => {
                mismatches += (got.drivable.as_slice() != d.as_slice() || got.obstacle.as_slice() != o.as_slice()) as usize;
            }
            (Err(offroad::Error::NoSeed), None) => no_seed += 1,
            _ => mismatches += 1,
        }
    }
    let el = t.elapsed();
    verdict(
        mismatches == 0 && within(el, 30),
        format!("{GRIDS} grids, {mismatches} mismatches ({no_seed} seedless), {:.2} s", el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

fn fusion_oracle(s1: f64, s2: f64, a1: f64, a2: f64) -> (f64, Label) {
    let drivable = s1 > a1 && s2 < a2;
    let obstacle = s2 > a2 && s1 < a1;
    match (drivable, obstacle) {
        (true, _) => (s1, Label::Drivable),
        (_, true) => (1.0 - s2, Label::Obstacle),
        _ => {
            let (u, v) = (1.0 - s1, 1.0 - s2);
            (if u + v == 0.0 { 0.5 } else { v / (u + v) }, Label::Grey)
        }
    }
}

fn fusion_table() -> Verdict {
    let n = 101;
    let s1 = Grid::from_fn(n, n, |j, _| j as f64 / 100.0);
    let s2 = Grid::from_fn(n, n, |_, k| k as f64 / 100.0);
    let cfg = FusionConfig::new(0.5, 0.5).expect("alphas");
    let (cost, pred) = fuse(&s1, &s2, &Grid::filled(n, n, true), &cfg).expect("fuse");
    let mut mismatches = 0;
    let mut violations = 0;
    let mut counts = HashMap::new();
    for j in 0..n {
        for k in 0..n {
            let (c, y) = fusion_oracle(s1.at(j, k), s2.at(j, k), 0.5, 0.5);
            let got = (cost.score.at(j, k), pred.at(j, k));
            mismatches += (got.0.to_bits() != c.to_bits() || got.1 != y) as usize;
            violations += match got.1 {
                Label::Drivable => !(got.0 > 0.5),
                Label::Obstacle => !(got.0 < 0.5),
                _ => !(0.0..=1.0).contains(&got.0),
            } as usize;
            *counts.entry(got.1).or_insert(0usize) += 1;
        }
    }
    let (hidden_cost, hidden) = fuse(&s1, &s2, &Grid::filled(n, n, false), &cfg).expect("fuse");
    let masked = hidden.count(Label::Unknown) == n * n && hidden_cost.score.iter().all(|&c| c == 0.0);
    verdict(
        mismatches == 0 && violations == 0 && masked,
        format!(
            "{} lattice points, {mismatches} mismatches, {violations} separation violations, DRI {} OBS {} GRE {}, invalid masked {masked}",
            n * n,
            counts.get(&Label::Drivable).unwrap_or(&0),
            counts.get(&Label::Obstacle).unwrap_or(&0),
            counts.get(&Label::Grey).unwrap_or(&0),
        ),
    )
}

// ---------------------------------------------------------------- 4

fn row(labels: &str, role: LabelRole) -> LabelMap {
    let v: Vec<Label> = labels
        .chars()
        .map(|c| match c {
            'd' => Label::Drivable,
            'o' => Label::Obstacle,
            'g' => Label::Grey,
            _ => Label::Unknown,
        })
        .collect();
    LabelMap::new(Grid::from_vec(1, v.len(), v).unwrap(), role).unwrap()
}

fn mask(bits: &str) -> Grid<bool> {
    Grid::from_vec(1, bits.len(), bits.chars().map(|c| c == '1').collect()).unwrap()
}

/// (tp, pred, gt) per class and (vp hits, vp size), counted by hand.
struct Fixture {
    name: &'static str,
    pred: &'static str,
    gt: &'static str,
    vp: &'static str,
    exclude_grey: bool,
    dri: (u64, u64, u64),
    obs: (u64, u64, u64),
    q: (f64, f64, f64),
    q3: f64,
}

const FIXTURES: &[Fixture] = &[
    Fixture {
        name: "identity",
        pred: "ddoodo",
        gt: "ddoodo",
        vp: "110000",
        exclude_grey: false,
        dri: (3, 3, 3),
        obs: (3, 3, 3),
        q: (1.0, 1.0, 1.0),
        q3: 1.0,
    },
    Fixture {
        name: "eight of ten",
        pred: "ddddddddoodd",
        gt: "ddddddddddoo",
        vp: "000000000000",
        exclude_grey: false,
        dri: (8, 10, 10),
        obs: (0, 2, 2),
        q: (0.8, 0.8, 0.8),
        q3: 1.0,
    },
    Fixture {
        name: "grey and unknown ground truth counted in Y",
        pred: "dddoog",
        gt: "dgudgo",
        vp: "111000",
        exclude_grey: false,
        dri: (1, 3, 2),
        obs: (0, 2, 1),
        q: (1.0 / 3.0, 0.5, 0.4),
        q3: 1.0,
    },
    Fixture {
        name: "grey and unknown ground truth excluded from Y",
        pred: "dddoog",
        gt: "dgudgo",
        vp: "111000",
        exclude_grey: true,
        dri: (1, 1, 2),
        obs: (0, 1, 1),
        q: (1.0, 0.5, 2.0 / 3.0),
        q3: 1.0,
    },
    Fixture {
        name: "path partly missed",
        pred: "dgdudoo",
        gt: "ddddddo",
        vp: "1111100",
        exclude_grey: false,
        dri: (3, 3, 6),
        obs: (1, 2, 1),
        q: (1.0, 0.5, 2.0 / 3.0),
        q3: 0.6,
    },
    Fixture {
        name: "vacuous drivable",
        pred: "gg",
        gt: "og",
        vp: "00",
        exclude_grey: false,
        dri: (0, 0, 0),
        obs: (0, 0, 1),
        q: (1.0, 1.0, 1.0),
        q3: 1.0,
    },
];

fn brute_force_metrics(pred: &[Label], gt: &[Label], vp: &[bool]) -> MetricsReport {
    let mut pairs: HashMap<(Label, Label), u64> = HashMap::new();
    for (&y, &g) in pred.iter().zip(gt) {
        *pairs.entry((y, g)).or_insert(0) += 1;
    }
    let count = |f: &dyn Fn(Label, Label) -> bool| pairs.iter().filter(|(&(y, g), _)| f(y, g)).map(|(_, &n)| n).sum::<u64>();
    let class = |c: Label| {
        let tp = count(&|y, g| y == c && g == c);
        let pred = count(&|y, _| y == c);
        let gt = count(&|_, g| g == c);
        offroad::metrics::ClassMetrics::from_counts(tp, pred, gt)
    };
    let vp_total = vp.iter().filter(|&&v| v).count() as u64;
    let vp_hit = vp.iter().zip(pred).filter(|(&v, &y)| v && y == Label::Drivable).count() as u64;
    MetricsReport {
        dri: class(Label::Drivable),
        obs: class(Label::Obstacle),
        q3: offroad::metrics::ratio(vp_hit, vp_total),
        vp: vp_total,
        vp_hit,
    }
}

fn metric_fixtures() -> Verdict {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let mut failed = Vec::new();
    for f in FIXTURES {
        let cfg = EvalConfig {
            exclude_grey_from_pred_sets: f.exclude_grey,
        };
        let r = evaluate_with(&row(f.pred, LabelRole::Prediction), &row(f.gt, LabelRole::HumanGt), &mask(f.vp), &cfg).unwrap();
        let ok = (r.dri.tp, r.dri.pred, r.dri.gt) == f.dri
            && (r.obs.tp, r.obs.pred, r.obs.gt) == f.obs
            && close(r.dri.q1, f.q.0)
            && close(r.dri.q2, f.q.1)
            && close(r.dri.f1, f.q.2)
            && close(r.q3, f.q3);
        if !ok {
            failed.push(f.name);
        }
    }
    let big = evaluate(
        &LabelMap::new(Grid::from_fn(1, 100, |_, k| if k < 95 { Label::Drivable } else { Label::Grey }), LabelRole::Prediction).unwrap(),
        &LabelMap::filled(1, 100, Label::Drivable, LabelRole::HumanGt).unwrap(),
        &Grid::filled(1, 100, true),
    )
    .unwrap();
    if big.q3 != 0.95 {
        failed.push("ninety-five of a hundred path pixels");
    }
    let mut r = stream(8, 31);
    let mut random_mismatches = 0;
    for _ in 0..100 {
        let pick = |r: &mut offroad::rng::Rng| Label::ALL[r.random_range(0..4)];
        let pred = Grid::from_fn(16, 16, |_, _| pick(&mut r));
        let gt = Grid::from_fn(16, 16, |_, _| pick(&mut r));
        let vp = Grid::from_fn(16, 16, |_, _| r.random_bool(0.3));
        let got = evaluate(
            &LabelMap::new(pred.clone(), LabelRole::Prediction).unwrap(),
            &LabelMap::new(gt.clone(), LabelRole::HumanGt).unwrap(),
            &vp,
        )
        .unwrap();
        random_mismatches += (got != brute_force_metrics(pred.as_slice(), gt.as_slice(), vp.as_slice())) as usize;
    }
    verdict(
        failed.is_empty() && random_mismatches == 0,
        format!(
            "{} hand-counted fixtures ({} failed{}), 100 random 16x16 pairs ({random_mismatches} mismatches)",
            FIXTURES.len() + 1,
            failed.len(),
            if failed.is_empty() { String::new() } else { format!(": {}", failed.join(", ")) },
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

const BENCH_SCENES: usize = 200;
const BENCH_SEED: u64 = 2024;
const BENCH_GREY: f64 = 2.4;
const BENCH_EPOCHS: usize = 30;
const BENCH_LR: f64 = 1e-3;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];

fn bench_records() -> Vec<SceneRecord> {
    let template = SceneSpec {
        grey_width: BENCH_GREY,
        ..SceneSpec::default()
    };
    (0..BENCH_SCENES)
        .map(|i| generate_scene(&scene_spec(&template, BENCH_SEED, i)).expect("scene"))
        .collect()
}

struct RunResult {
    f1_dri: f64,
    q3: f64,
}

struct Benchmark {
    /// (label, mode, human ratio) -> one result per training seed
    runs: Vec<(&'static str, Vec<RunResult>)>,
    elapsed: Duration,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl Benchmark {
    fn results(&self, name: &str) -> &[RunResult] {
        &self.runs.iter().find(|(n, _)| *n == name).expect("setting").1
    }

    fn median_f1(&self, name: &str) -> f64 {
        median(self.results(name).iter().map(|r| r.f1_dri).collect())
    }
}

fn run_benchmark(records: &[SceneRecord]) -> Benchmark {
    let t = Instant::now();
    let cfg = AutolabelConfig::default();
    let scenes: Vec<TrainingScene> = records
        .iter()
        .map(|rec| {
            let wl = autolabel(&rec.heightmap, &rec.trajectory, &cfg).expect("autolabel");
            TrainingScene::new(rec.heightmap.clone(), Some(rec.human_gt.clone()), Some(wl.weak), rec.path_mask.clone())
                .expect("scene")
        })
        .collect();
    let split = split_dataset(scenes.len(), &[0.6, 0.15, 0.25], BENCH_SEED).expect("split");
    let settings: [(&'static str, Mode, f64); 6] = [
        ("WEAK", Mode::Weak, 0.0),
        ("SEMI-25", Mode::Semi, 0.25),
        ("SEMI-50", Mode::Semi, 0.5),
        ("SEMI-100", Mode::Semi, 1.0),
        ("FULL", Mode::Full, 1.0),
        ("3CLASS", Mode::Baseline3Class, 1.0),
    ];
    let mut runs = Vec::new();
    for (name, mode, human_ratio) in settings {
        let mut results = Vec::new();
        for seed in TRAIN_SEEDS {
            let cfg = TrainConfig {
                mode,
                human_ratio,
                epochs: BENCH_EPOCHS,
                lr: BENCH_LR,
                seed,
                ..TrainConfig::default()
            };
            let out = train(&scenes, &split.train, &split.val, &cfg).expect("train");
            let rep = evaluate_model(&out.model, &scenes, &split.test).expect("evaluate");
            eprintln!(
                "  {name:<8} seed {seed}: test F1(dri) {:.4} Q3 {:.4} (best epoch {}, {:.0} s elapsed)",
                rep.dri.f1,
                rep.q3,
                out.best_epoch,
                t.elapsed().as_secs_f64()
            );
            results.push(RunResult {
                f1_dri: rep.dri.f1,
                q3: rep.q3,
            });
        }
        runs.push((name, results));
    }
    Benchmark {
        runs,
        elapsed: t.elapsed(),
    }
}

fn mode_ordering(b: &Benchmark) -> Verdict {
    const SLACK: f64 = 0.02;
    let chain = [
        ("WEAK", b.median_f1("WEAK")),
        ("SEMI-25", b.median_f1("SEMI-25")),
        ("SEMI-50", b.median_f1("SEMI-50")),
        ("SEMI-100/FULL", b.median_f1("SEMI-100").max(b.median_f1("FULL"))),
    ];
    let inversions: Vec<String> = chain
        .windows(2)
        .filter(|w| w[1].1 < w[0].1 - SLACK)
        .map(|w| format!("{} > {}", w[0].0, w[1].0))
        .collect();
    let text: Vec<String> = chain.iter().map(|(n, v)| format!("{n} {:.2}", 100.0 * v)).collect();
    verdict(
        inversions.is_empty() && within(b.elapsed, 3600),
        format!(
            "median F1(dri) {} (SEMI-100 {:.2}, FULL {:.2}); inversions beyond 2 points: {}; benchmark {:.1} min",
            text.join(" -> "),
            100.0 * b.median_f1("SEMI-100"),
            100.0 * b.median_f1("FULL"),
            if inversions.is_empty() { "none".to_string() } else { inversions.join(", ") },
            b.elapsed.as_secs_f64() / 60.0,
        ),
    )
}

fn grey_zone_rationale(b: &Benchmark) -> Verdict {
    let dual = b.median_f1("FULL");
    let three = b.median_f1("3CLASS");
    let q3 = median(b.results("FULL").iter().map(|r| r.q3).collect());
    verdict(
        dual >= three - 0.01 && q3 >= 0.9,
        format!(
            "grey width {BENCH_GREY} m: median F1(dri) dual FULL {:.2} vs 3-class {:.2} (margin -1 point), dual median Q3 {:.4} (>= 0.9)",
            100.0 * dual,
            100.0 * three,
            q3
        ),
    )
}

// ---------------------------------------------------------------- 7

fn weak_label_soundness(bench: &[SceneRecord]) -> Verdict {
    let default_scenes: Vec<SceneRecord> = (0..100)
        .map(|i| generate_scene(&scene_spec(&SceneSpec::default(), 77, i)).expect("scene"))
        .collect();
    let cfg = AutolabelConfig::default();
    let mut worst_obs = 1.0f64;
    let mut worst_dri = 1.0f64;
    let mut failing = 0;
    let mut obs_labels = 0usize;
    for rec in bench.iter().chain(&default_scenes) {
        let weak = autolabel(&rec.heightmap, &rec.trajectory, &cfg).expect("autolabel").weak;
        let (mut obs_hit, mut obs_n, mut dri_hit, mut dri_n) = (0u64, 0u64, 0u64, 0u64);
        for (&w, &g) in weak.labels().iter().zip(rec.human_gt.labels().iter()) {
            match w {
                Label::Obstacle => {
                    obs_n += 1;
                    obs_hit += matches!(g, Label::Obstacle | Label::Grey) as u64;
                }
                Label::Drivable => {
                    dri_n += 1;
                    dri_hit += (g == Label::Drivable) as u64;
                }
                _ => {}
            }
        }
        obs_labels += obs_n as usize;
        let po = offroad::metrics::ratio(obs_hit, obs_n);
        let pd = offroad::metrics::ratio(dri_hit, dri_n);
        worst_obs = worst_obs.min(po);
        worst_dri = worst_dri.min(pd);
        failing += (po < 0.95 || pd < 1.0) as usize;
    }
    let total = bench.len() + default_scenes.len();
    verdict(
        failing == 0 && obs_labels > 0,
        format!(
            "{total} scenes ({obs_labels} OBS weak pixels): worst OBS precision {worst_obs:.4} (>= 0.95), worst path DRI precision {worst_dri:.4} (= 1), {failing} failing scenes"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn cli(args: &[&str]) -> i32 {
    offroad::cli::run(std::iter::once("offroad").chain(args.iter().copied()))
}

fn pipeline(root: &Path) -> Option<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    let p = |sub: &str| root.join(sub).to_str().expect("utf-8 path").to_string();
    let (data, runs, pred) = (p("data"), p("runs"), p("pred"));
    let ckpt = root.join("runs").join("model_semi_0.50.gzn");
    let steps: [Vec<&str>; 5] = [
        vec!["synth-gen", "--scenes", "12", "--seed", "5", "--rows", "32", "--cols", "32", "--resolution", "0.4", "--out", &data],
        vec!["autolabel", "--data", &data],
        vec![
            "train", "--data", &data, "--mode", "semi", "--human-ratio", "0.5", "--epochs", "3", "--batch-size", "4",
            "--lr", "1e-3", "--widths", "4,8,8,4", "--seed", "3", "--out", &runs,
        ],
        vec!["infer", "--model", ckpt.to_str()?, "--data", &data, "--out", &pred],
        vec!["eval", "--pred", &pred, "--data", &data],
    ];
    for step in &steps {
        if cli(step) != 0 {
            eprintln!("  pipeline step failed: {}", step[0]);
            return None;
        }
    }
    Some((
        fs::read(root.join("pred").join("report.json")).ok()?,
        fs::read(&ckpt).ok()?,
        fs::read(root.join("runs").join("training_log.jsonl")).ok()?,
    ))
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    match (pipeline(a.path()), pipeline(b.path())) {
        (Some(x), Some(y)) => {
            verdict(
                x == y,
                format!(
                    "report.json {} bytes identical: {}; checkpoint identical: {}; training log identical: {}",
                    x.0.len(),
                    x.0 == y.0,
                    x.1 == y.1,
                    x.2 == y.2
                ),
            )
        }
        _ => verdict(false, "pipeline did not complete"),
    }
}

// ----------------------------------------------------------------

fn report(index: usize, name: &str, v: &Verdict, failures: &mut usize) {
    println!("{} criterion {index}: {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    *failures += usize::from(!v.passed);
}

/// Criteria named by number on the command line run alone; none runs all.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=8).collect()
    } else {
        picked
    }
}

fn main() {
    // the harness passes libtest flags; a --list request expects no output
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let want = selected();
    let on = |i: usize| want.contains(&i);
    let mut failures = 0;
    if on(1) {
        report(1, "gradient correctness", &gradient_correctness(), &mut failures);
    }
    if on(2) {
        report(2, "region-grow oracle", &region_grow_oracle(), &mut failures);
    }
    if on(3) {
        report(3, "fusion table", &fusion_table(), &mut failures);
    }
    if on(4) {
        report(4, "metric fixtures", &metric_fixtures(), &mut failures);
    }
    if on(5) || on(6) || on(7) {
        eprintln!("generating benchmark scenes");
        let records = bench_records();
        if on(7) {
            report(7, "weak-label soundness", &weak_label_soundness(&records), &mut failures);
        }
        if on(5) || on(6) {
            eprintln!("training benchmark (6 settings x {} seeds)", TRAIN_SEEDS.len());
            let bench = run_benchmark(&records);
            if on(5) {
                report(5, "supervision-mode ordering", &mode_ordering(&bench), &mut failures);
            }
            if on(6) {
                report(6, "grey-zone rationale", &grey_zone_rationale(&bench), &mut failures);
            }
        }
    }
    if on(8) {
        report(8, "determinism", &determinism(), &mut failures);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
