//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and share the trained models. Exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use foldless::dataio::{synth_dataset, SynthConfig, SynthPair};
use foldless::gradcheck;
use foldless::losses::LossConfig;
use foldless::metrics::{
    dice, evaluate, folding_fraction, jacobian_det_map, render_det, render_grid, EvalPair, EvalReport, SliceSpec, RED,
};
use foldless::nets::{init_params, ArchConfig, ModelParams};
use foldless::stn::{warp, DisplacementField, LabelMask, ScalarField};
use foldless::trainer::{train_with_observer, Experiment, Phase, TrainConfig, TrainHistory, TrainMode, TrainPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const IDENTITY_BUDGET: Duration = Duration::from_secs(10);
const TRAINING_BUDGET: Duration = Duration::from_secs(45 * 60);

const JACOBIAN_REL_TOL: f64 = 1e-5;
const JACOBIAN_MATRICES: usize = 24;
const DICE_PAIRS: usize = 100;

const IMAGE_DIMS: [usize; 2] = [64, 64];
const TRAIN_PAIRS: usize = 200;
const TEST_PAIRS: usize = 20;
const TEST_SEED_OFFSET: u64 = 10_000;
const DATA_SEED: u64 = 0;
const MODEL_SEED: u64 = 0;
/// Adam step size for the desk-scale comparison. The schedule here is about
/// 2,000 steps; at 1e-4 the network barely leaves the identity and nothing
/// can fold.
const DESK_LR: f64 = 2e-3;
/// Ground-truth amplitudes tried in order until the baseline folds enough.
const AMPLITUDE_LADDER: [f64; 5] = [6.0, 10.0, 14.0, 18.0, 22.0];
const TOO_EASY: f64 = 0.002;
const FOLDS_ENOUGH: f64 = 0.005;
const FOLDING_RATIO: f64 = 0.5;
const DICE_MARGIN: f64 = 0.05;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, id: u32, name: &'static str, passed: bool, detail: String) {
    println!(
        "criterion {id} {} {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    outcomes.push(Outcome {
        id,
        name,
        passed,
        detail,
    });
}

fn criterion_1(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let result = gradcheck::run_suite(0);
    let elapsed = start.elapsed();
    match result {
        Ok(r) => {
            let worst = r
                .results
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .expect("non-empty suite");
            let passed = r.passed() && elapsed < GRADCHECK_BUDGET;
            let detail = format!(
                "{} checks, failures {:?}, worst {} at {:.2e} (< {:e}), {:.1?}",
                r.results.len(),
                r.failures(),
                worst.name,
                worst.max_rel_error,
                gradcheck::TOLERANCE,
                elapsed
            );
            report(out, 1, "gradient suite", passed, detail);
        }
        Err(e) => report(out, 1, "gradient suite", false, e.to_string()),
    }
}

fn textured(dims: &[usize]) -> ScalarField<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    ScalarField::from_fn(dims, |_| rng.gen_range(-3.0..3.0)).unwrap()
}

fn criterion_2(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut failures = Vec::new();
    for dims in [vec![64, 64], vec![16, 24, 8]] {
        let x = textured(&dims);
        let zero = DisplacementField::<f32>::zeros(&dims).unwrap();
        if warp(&x, &zero).unwrap() != x {
            failures.push(format!("warp not identity for {dims:?}"));
        }
        let det = jacobian_det_map(&zero);
        if det.values().iter().any(|&v| v != 1.0) {
            failures.push(format!("det != 1 for {dims:?}"));
        }
        if folding_fraction(&det) != 0.0 {
            failures.push(format!("folding fraction != 0 for {dims:?}"));
        }
        let arch = ArchConfig::for_dims(&dims).with_refine(true);
        for seed in [0, 1, 2] {
            let m = init_params::<f32>(seed, &arch).unwrap();
            let u = m.deformation_field(&x, &textured(&dims)).unwrap();
            if u.vectors().iter().any(|&v| v != 0.0) {
                failures.push(format!("fresh model seed {seed} predicts non-zero field for {dims:?}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = failures.is_empty() && elapsed < IDENTITY_BUDGET;
    report(
        out,
        2,
        "identity invariants",
        passed,
        format!("failures {failures:?}, {elapsed:.1?}"),
    );
}

/// Determinant by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn det_oracle(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for k in 0..n {
        let p = (k..n).max_by(|&a, &b| m[a][k].abs().total_cmp(&m[b][k].abs())).unwrap();
        if p != k {
            m.swap(p, k);
            det = -det;
        }
        if m[k][k] == 0.0 {
            return 0.0;
        }
        det *= m[k][k];
        for r in k + 1..n {
            let f = m[r][k] / m[k][k];
            for c in k..n {
                m[r][c] -= f * m[k][c];
            }
        }
    }
    det
}

fn criterion_3(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for t in 0..JACOBIAN_MATRICES {
        let dims: Vec<usize> = if t % 2 == 0 { vec![16, 20] } else { vec![10, 12, 9] };
        let d = dims.len();
        // Rows rescaled so the max row sum of |A| is at most 0.5.
        let mut a: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let norm = a
            .iter()
            .map(|r| r.iter().map(|v: &f64| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let scale = rng.gen_range(0.05..0.5) / norm;
        for v in a.iter_mut().flatten() {
            *v *= scale;
        }
        let u = DisplacementField::<f32>::from_fn(&dims, |p| {
            (0..d)
                .map(|r| (0..d).map(|c| a[r][c] * p[c] as f64).sum::<f64>() as f32)
                .collect()
        })
        .unwrap();
        let want = det_oracle(
            (0..d)
                .map(|r| (0..d).map(|c| a[r][c] + (r == c) as u8 as f64).collect())
                .collect(),
        );
        let det = jacobian_det_map(&u);
        let n: usize = dims.iter().product();
        for flat in 0..n {
            // Row-major coordinates; interior means every index in 1..n-1.
            let mut rest = flat;
            let mut interior = true;
            for &extent in dims.iter().rev() {
                let i = rest % extent;
                rest /= extent;
                interior &= i > 0 && i + 1 < extent;
            }
            if interior {
                let got = det.values()[flat] as f64;
                worst = worst.max((got - want).abs() / want.abs());
            }
        }
    }
    report(
        out,
        3,
        "analytic Jacobian",
        worst <= JACOBIAN_REL_TOL,
        format!("{JACOBIAN_MATRICES} matrices, worst relative error {worst:.2e} (<= {JACOBIAN_REL_TOL:e})"),
    );
}

fn criterion_4(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for t in 0..DICE_PAIRS {
        let rank = if t % 2 == 0 { 2 } else { 3 };
        let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(2..=32)).collect();
        let n: usize = dims.iter().product();
        let labels = rng.gen_range(1..=4u8);
        let density = rng.gen_range(0.0..1.0);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..n)
                .map(|_| {
                    if rng.gen_bool(density) {
                        rng.gen_range(1..=labels)
                    } else {
                        0
                    }
                })
                .collect()
        };
        let (va, vb) = (draw(&mut rng), draw(&mut rng));
        let a = LabelMask::new(dims.clone(), va.clone()).unwrap();
        let b = LabelMask::new(dims.clone(), vb.clone()).unwrap();
        for l in 0..=labels {
            let set = |v: &[u8]| -> HashSet<usize> {
                v.iter().enumerate().filter(|(_, &x)| x == l).map(|(i, _)| i).collect()
            };
            let (sa, sb) = (set(&va), set(&vb));
            let inter = sa.intersection(&sb).count();
            let want = if sa.len() + sb.len() == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (sa.len() + sb.len()) as f64
            };
            if dice(&a, &b, l).unwrap() != want {
                mismatches += 1;
            }
        }
    }
    report(
        out,
        4,
        "Dice oracle",
        mismatches == 0,
        format!("{DICE_PAIRS} mask pairs, {mismatches} mismatches"),
    );
}

struct Run {
    model: ModelParams<f32>,
    history: TrainHistory,
    report: EvalReport,
    snapshots: Vec<(Phase, ModelParams<f32>)>,
}

struct Data {
    amplitude: f64,
    train: Vec<TrainPair<f32>>,
    test: Vec<EvalPair<f32>>,
}

fn dataset(amplitude: f64) -> Data {
    let cfg = SynthConfig {
        dims: IMAGE_DIMS.to_vec(),
        seed: DATA_SEED,
        amplitude,
        ..SynthConfig::default()
    };
    let train: Vec<SynthPair> = synth_dataset(&cfg, TRAIN_PAIRS).unwrap();
    let test = synth_dataset(
        &SynthConfig {
            seed: DATA_SEED + TEST_SEED_OFFSET,
            ..cfg
        },
        TEST_PAIRS,
    )
    .unwrap();
    Data {
        amplitude,
        train: train.iter().map(SynthPair::train_pair).collect(),
        test: test.iter().map(SynthPair::eval_pair).collect(),
    }
}

fn experiment(mode: TrainMode, lambda: f64) -> Experiment {
    Experiment {
        arch: ArchConfig::for_dims(&IMAGE_DIMS),
        loss: LossConfig::default(),
        train: TrainConfig {
            mode,
            lambda_base: lambda,
            lr: DESK_LR,
            seed: MODEL_SEED,
            ..TrainConfig::default()
        },
    }
}

fn train_and_evaluate(data: &Data, mode: TrainMode, lambda: f64) -> Run {
    let exp = experiment(mode, lambda);
    let start = Instant::now();
    let mut snapshots = Vec::new();
    let (model, history) = train_with_observer(&data.train, &exp, &mut |e, m| {
        if mode == TrainMode::Refine {
            snapshots.push((e.phase, m.clone()));
        }
    })
    .unwrap();
    let report = evaluate(&model, &data.test, mode).unwrap();
    println!(
        "  trained {mode} (lambda {lambda}, a = {}): mu(P) = {:.4}%, sigma(P) = {:.4}%, mean Dice = {:.4}, {:.0?}",
        data.amplitude,
        100.0 * report.mean_p,
        100.0 * report.std_p,
        report.mean_dice.unwrap_or(f64::NAN),
        start.elapsed()
    );
    Run {
        model,
        history,
        report,
        snapshots,
    }
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn checkpoint_bytes(m: &ModelParams<f32>) -> Vec<u8> {
    let mut bytes = Vec::new();
    m.write_to(&mut bytes).unwrap();
    bytes
}

fn final_epoch_smoothness(h: &TrainHistory) -> f64 {
    let last = h.epochs() - 1;
    let v: Vec<f64> = h.records.iter().filter(|r| r.epoch == last).map(|r| r.smooth).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criteria_5_to_9(out: &mut Vec<Outcome>) {
    let start = Instant::now();

    // Amplitude ladder: keep the first amplitude unless the task is too easy to
    // fold, then step up until the baseline folds enough.
    let mut chosen = None;
    for (k, &a) in AMPLITUDE_LADDER.iter().enumerate() {
        let data = dataset(a);
        let run = train_and_evaluate(&data, TrainMode::Baseline, 1.0);
        let p = run.report.mean_p;
        let accept = if k == 0 { p >= TOO_EASY } else { p >= FOLDS_ENOUGH };
        if accept || k + 1 == AMPLITUDE_LADDER.len() {
            chosen = Some((data, run));
            break;
        }
    }
    let (data, baseline) = chosen.expect("ladder is non-empty");

    let cycle = train_and_evaluate(&data, TrainMode::Cycle, 1.0);
    let refine = train_and_evaluate(&data, TrainMode::Refine, 1.0);
    let elapsed = start.elapsed();

    let (pb, pc, pr) = (baseline.report.mean_p, cycle.report.mean_p, refine.report.mean_p);
    let dice_of = |r: &Run| r.report.mean_dice.unwrap_or(f64::NAN);
    let (db, dc, dr) = (dice_of(&baseline), dice_of(&cycle), dice_of(&refine));
    let folds = pb >= FOLDS_ENOUGH || (data.amplitude == AMPLITUDE_LADDER[0] && pb >= TOO_EASY);
    let passed = folds
        && pc <= FOLDING_RATIO * pb
        && pr <= FOLDING_RATIO * pb
        && (dc - db).abs() <= DICE_MARGIN
        && (dr - db).abs() <= DICE_MARGIN
        && elapsed < TRAINING_BUDGET;
    report(
        out,
        5,
        "desk-scale folding reduction",
        passed,
        format!(
            "a = {}, mu(P)/sigma(P) baseline {:.4}%/{:.4}%, cycle {:.4}%/{:.4}%, refine {:.4}%/{:.4}%; \
             mean Dice baseline {db:.4}, cycle {dc:.4}, refine {dr:.4}; ratio gate {FOLDING_RATIO}, Dice margin {DICE_MARGIN}; {elapsed:.0?}",
            data.amplitude,
            100.0 * pb,
            100.0 * baseline.report.std_p,
            100.0 * pc,
            100.0 * cycle.report.std_p,
            100.0 * pr,
            100.0 * refine.report.std_p,
        ),
    );

    // Lambda sweep on the same data and seed.
    let sweep: Vec<(f64, f64, f64)> = [2.0, 4.0]
        .iter()
        .map(|&l| {
            let run = train_and_evaluate(&data, TrainMode::Baseline, l);
            (l, run.report.mean_p, final_epoch_smoothness(&run.history))
        })
        .collect();
    let mut points = vec![(1.0, pb, final_epoch_smoothness(&baseline.history))];
    points.extend(sweep);
    let monotone = points.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].2 <= w[0].2);
    let detail = points
        .iter()
        .map(|(l, p, s)| format!("lambda {l}: mu(P) {:.4}%, final smoothness {s:.5}", 100.0 * p))
        .collect::<Vec<_>>()
        .join("; ");
    report(out, 6, "lambda sweep monotonicity", monotone, detail);

    criterion_7(out, &refine);

    // Determinism: the baseline run repeated from scratch.
    let again = train_and_evaluate(&data, TrainMode::Baseline, 1.0);
    let h1 = sha256(baseline.history.to_csv().as_bytes());
    let h2 = sha256(again.history.to_csv().as_bytes());
    let c1 = sha256(&checkpoint_bytes(&baseline.model));
    let c2 = sha256(&checkpoint_bytes(&again.model));
    report(
        out,
        9,
        "determinism",
        h1 == h2 && c1 == c2,
        format!(
            "history {}.. vs {}.., checkpoint {}.. vs {}..",
            &h1[..12],
            &h2[..12],
            &c1[..12],
            &c2[..12]
        ),
    );
}

fn criterion_7(out: &mut Vec<Outcome>, refine: &Run) {
    let cfg = TrainConfig::default();
    let mut problems = Vec::new();

    let phases = refine.history.epoch_phases();
    let expected: Vec<Phase> = (0..cfg.outer_iterations)
        .flat_map(|_| {
            std::iter::repeat_n(Phase::Generation, cfg.phase_epochs)
                .chain(std::iter::repeat_n(Phase::Refinement, cfg.phase_epochs))
        })
        .collect();
    if phases != expected {
        problems.push(format!("epoch phases {phases:?}"));
    }
    let alternations = phases
        .windows(2)
        .filter(|w| w[0] == Phase::Refinement && w[1] == Phase::Generation)
        .count()
        + 1;
    for r in &refine.history.records {
        let want = if r.phase == Phase::Generation { 1.0 } else { 4.0 };
        if r.lambda != want {
            problems.push(format!("step {} in phase {} uses lambda {}", r.step, r.phase, r.lambda));
            break;
        }
    }

    let arch = ArchConfig::for_dims(&IMAGE_DIMS).with_refine(true);
    let mut prev = init_params::<f32>(MODEL_SEED, &arch).unwrap();
    let mut isolation_checks = 0;
    for (k, (phase, m)) in refine.snapshots.iter().enumerate() {
        let (frozen_same, trained_changed) = match phase {
            Phase::Generation => (m.refine == prev.refine, m.deformation != prev.deformation),
            Phase::Refinement => (m.deformation == prev.deformation, m.refine != prev.refine),
            Phase::Single => (false, false),
        };
        if !(frozen_same && trained_changed) {
            problems.push(format!(
                "epoch {k} ({phase}): frozen unchanged {frozen_same}, trained changed {trained_changed}"
            ));
        }
        isolation_checks += 1;
        prev = m.clone();
    }
    report(
        out,
        7,
        "refinement schedule bookkeeping",
        problems.is_empty() && alternations == 4,
        format!(
            "{alternations} alternations of {}-epoch phases, {isolation_checks} epoch isolation checks, problems {problems:?}",
            cfg.phase_epochs
        ),
    );
}

/// A band of rows where the row displacement falls faster than the grid
/// spacing, so the mapping reverses orientation there.
fn fold_band(dims: &[usize]) -> DisplacementField<f32> {
    DisplacementField::from_fn(dims, |p| {
        let (i, j) = (p[0] as f32, p[1] as f32);
        let inside = (10.0..22.0).contains(&i) && (8.0..24.0).contains(&j);
        vec![if inside { -1.6 * (i - 16.0) } else { 0.0 }, 0.0]
    })
    .unwrap()
}

fn criterion_8(out: &mut Vec<Outcome>) {
    let mut problems = Vec::new();
    let zero2 = DisplacementField::<f32>::zeros(&[32, 32]).unwrap();
    let zero3 = DisplacementField::<f32>::zeros(&[12, 16, 5]).unwrap();
    let goldens: [(&str, Vec<u8>, &[u8]); 3] = [
        (
            "zero_grid_32x32_s4.pgm",
            render_grid(&zero2, None, 4).unwrap().to_pgm(),
            include_bytes!("golden/zero_grid_32x32_s4.pgm"),
        ),
        (
            "zero_grid_3d_axis2_s4.pgm",
            render_grid(&zero3, Some(SliceSpec { axis: 2, index: 3 }), 4)
                .unwrap()
                .to_pgm(),
            include_bytes!("golden/zero_grid_3d_axis2_s4.pgm"),
        ),
        (
            "zero_det_32x32.ppm",
            render_det(&jacobian_det_map(&zero2), None).unwrap().to_ppm(),
            include_bytes!("golden/zero_det_32x32.ppm"),
        ),
    ];
    for (name, got, want) in &goldens {
        if got.as_slice() != *want {
            problems.push(format!("{name} differs"));
        }
    }

    // Negative-determinant oracle for a field with only a row component:
    // det = 1 + d(u_row)/d(row), forward difference, backward on the last row.
    let dims = [32, 32];
    let u = fold_band(&dims);
    let u0 = u.component(0);
    let mut expected = HashSet::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            let (lo, hi) = if i + 1 < dims[0] { (i, i + 1) } else { (i - 1, i) };
            let derivative = u0[hi * dims[1] + j] - u0[lo * dims[1] + j];
            if 1.0 + derivative < 0.0 {
                expected.insert((i, j));
            }
        }
    }
    let img = render_det(&jacobian_det_map(&u), None).unwrap();
    let red: HashSet<(usize, usize)> = (0..dims[0])
        .flat_map(|i| (0..dims[1]).map(move |j| (i, j)))
        .filter(|&(i, j)| img.get(i, j) == RED)
        .collect();
    if expected.is_empty() || red != expected {
        problems.push(format!(
            "red pixels {} vs negative voxels {}",
            red.len(),
            expected.len()
        ));
    }
    report(
        out,
        8,
        "rendering goldens",
        problems.is_empty(),
        format!(
            "{} golden files, {} negative voxels, problems {problems:?}",
            goldens.len(),
            expected.len()
        ),
    );
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a name filter that
    // does not mention this suite skips it.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let start = Instant::now();
    let mut outcomes = Vec::new();
    criterion_1(&mut outcomes);
    criterion_2(&mut outcomes);
    criterion_3(&mut outcomes);
    criterion_4(&mut outcomes);
    criterion_8(&mut outcomes);
    criteria_5_to_9(&mut outcomes);
    outcomes.sort_by_key(|o| o.id);

    println!("\nsummary ({:.0?}):", start.elapsed());
    for o in &outcomes {
        println!(
            "  {} criterion {} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.name
        );
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("criterion {} failed: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
