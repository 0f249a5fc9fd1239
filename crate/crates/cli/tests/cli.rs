use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foldless::dataio;
use foldless::nets::{init_params, ArchConfig};
use foldless::stn::{DisplacementField, ScalarField};

fn foldless(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foldless"))
        .args(args)
        .env("FOLDLESS_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[synth]
dims = [16, 16]
amplitude = 2.0
smoothness = 3.0

[train]
epochs = 1
lr = 1e-3

[loss]
cc_window = 5

[arch]
levels = 2
base_channels = 4
refine_hidden = 4
"#;

fn small_dataset(dir: &Path, pairs: usize) -> (PathBuf, PathBuf) {
    let cfg = dir.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    let o = foldless(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&data),
        "--pairs",
        &pairs.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (cfg, data.join("manifest.csv"))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = foldless(&["synth", "--config", s(&cfg), "--out", s(out), "--pairs", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let files = dir_bytes(&a);
    assert_eq!(files, dir_bytes(&b));
    assert!(files.iter().any(|(n, _)| n == "config.toml"));
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);

    let again = foldless(&["synth", "--config", s(&cfg), "--out", s(&a), "--pairs", "2"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    let forced = foldless(&["synth", "--config", s(&cfg), "--out", s(&a), "--pairs", "2", "--force"]);
    assert!(forced.status.success());
}

#[test]
fn synth_zero_pairs_writes_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    let o = foldless(&["synth", "--out", s(&out), "--pairs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(foldless(&["synth"]).status.code(), Some(1));
    assert_eq!(foldless(&["nonsense"]).status.code(), Some(1));
    assert_eq!(foldless(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let o = foldless(&["synth", "--config", s(&bad), "--out", s(tmp.path()), "--pairs", "0"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn train_writes_reproducible_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_dataset(tmp.path(), 2);
    let run1 = tmp.path().join("run1");
    let o = foldless(&[
        "train",
        "--mode",
        "cycle",
        "--data",
        s(&manifest),
        "--config",
        s(&cfg),
        "--out",
        s(&run1),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(run1.join("history.csv")).unwrap();
    assert!(history.starts_with("step,epoch,phase,total,cc,smooth\n"));
    assert_eq!(history.lines().count(), 3);

    // The echoed config alone reproduces the run.
    let run2 = tmp.path().join("run2");
    let echoed = run1.join("config.toml");
    let o = foldless(&[
        "train",
        "--data",
        s(&manifest),
        "--config",
        s(&echoed),
        "--out",
        s(&run2),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(dir_bytes(&run1), dir_bytes(&run2));
}

#[test]
fn train_refine_runs_the_alternating_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_dataset(tmp.path(), 1);
    let out = tmp.path().join("refine");
    let o = foldless(&[
        "train",
        "--mode",
        "refine",
        "--data",
        s(&manifest),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let phases: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    let expected: Vec<&str> = (0..4).flat_map(|_| ["I", "I", "I", "II", "II", "II"]).collect();
    assert_eq!(phases, expected);
}

#[test]
fn train_reports_missing_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.csv");
    let o = foldless(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

fn identity_checkpoint(dir: &Path, dims: &[usize]) -> PathBuf {
    let arch = ArchConfig {
        levels: 2,
        base_channels: 4,
        ..ArchConfig::for_dims(dims)
    };
    let path = dir.join("identity.fldx");
    init_params::<f32>(0, &arch).unwrap().save(&path).unwrap();
    path
}

fn image(dir: &Path, name: &str, dims: &[usize], k: usize) -> PathBuf {
    let x = ScalarField::from_fn(dims, |p| ((p[0] * 7 + p[1] * k) % 11) as f32 / 11.0).unwrap();
    let path = dir.join(name);
    dataio::save_image(&path, &x).unwrap();
    path
}

#[test]
fn register_with_identity_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(tmp.path(), &[16, 16]);
    let x = image(tmp.path(), "x.vol", &[16, 16], 3);
    let y = image(tmp.path(), "y.vol", &[16, 16], 5);
    for prefix in ["out/a", "out/b"] {
        let out = tmp.path().join(prefix);
        let o = foldless(&[
            "register",
            "--ckpt",
            s(&ckpt),
            "--source",
            s(&x),
            "--target",
            s(&y),
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let warped = dataio::load_image(&tmp.path().join("out/a_warped.vol")).unwrap();
    assert_eq!(warped, dataio::load_image(&x).unwrap());
    let u = dataio::load_field(&tmp.path().join("out/a_field.vol")).unwrap();
    assert!(u.vectors().iter().all(|&v| v == 0.0));
    for suffix in ["_field.raw", "_warped.raw"] {
        assert_eq!(
            std::fs::read(tmp.path().join(format!("out/a{suffix}"))).unwrap(),
            std::fs::read(tmp.path().join(format!("out/b{suffix}"))).unwrap()
        );
    }

    let small = image(tmp.path(), "small.vol", &[8, 8], 3);
    let out = tmp.path().join("out/c");
    let o = foldless(&[
        "register",
        "--ckpt",
        s(&ckpt),
        "--source",
        s(&small),
        "--target",
        s(&y),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[16, 16]"), "{}", stderr(&o));
}

fn field(dir: &Path, name: &str, u: &DisplacementField<f32>) -> PathBuf {
    let path = dir.join(name);
    dataio::save_field(&path, u).unwrap();
    path
}

#[test]
fn analyze_zero_field_without_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let u = field(tmp.path(), "u.vol", &DisplacementField::zeros(&[8, 8]).unwrap());
    let out = tmp.path().join("report");
    let o = foldless(&["analyze", "--field", s(&u), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv, "pair,P,min_det\n0,0,1\n");
    let summary = std::fs::read_to_string(out.join("summary.toml")).unwrap();
    assert!(summary.contains("mean_p = 0.0"));
    assert!(!summary.contains("dice"));
}

#[test]
fn analyze_field_with_labels_adds_dice() {
    let tmp = tempfile::tempdir().unwrap();
    let u = field(tmp.path(), "u.vol", &DisplacementField::zeros(&[4, 4]).unwrap());
    let mask = foldless::stn::LabelMask::new(vec![4, 4], (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
    let m = tmp.path().join("m.vol");
    dataio::save_mask(&m, &mask).unwrap();
    let out = tmp.path().join("report");
    let o = foldless(&["analyze", "--field", s(&u), "--labels", s(&m), s(&m), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    // Label 0 is background and gets no Dice column.
    assert_eq!(csv, "pair,P,min_det,dice_1,dice_2,mean_dice\n0,0,1,1,1,1\n");
}

#[test]
fn analyze_model_over_a_two_pair_set() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, manifest) = small_dataset(tmp.path(), 2);
    let ckpt = identity_checkpoint(tmp.path(), &[16, 16]);
    let out = tmp.path().join("report");
    let o = foldless(&["analyze", "--ckpt", s(&ckpt), "--data", s(&manifest), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    let summary: toml::Table = std::fs::read_to_string(out.join("summary.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let mean_p = summary["mean_p"].as_float().unwrap();
    assert_eq!(mean_p, (rows[0][1] + rows[1][1]) / 2.0);
    assert!(summary.contains_key("mean_dice"));
}

#[test]
fn render_outputs_and_bad_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let u = field(tmp.path(), "u.vol", &DisplacementField::zeros(&[8, 8]).unwrap());
    let grid = tmp.path().join("grid.pgm");
    let o = foldless(&["render", "--field", s(&u), "--what", "grid", "--out", s(&grid)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&grid).unwrap();
    assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
    let det = tmp.path().join("det.ppm");
    let o = foldless(&["render", "--field", s(&u), "--what", "det", "--out", s(&det)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&det).unwrap();
    assert!(bytes.starts_with(b"P6\n8 8\n255\n"));
    assert!(bytes[11..].iter().all(|&b| b == 128));

    let o = foldless(&[
        "render",
        "--field",
        s(&u),
        "--what",
        "det",
        "--slice",
        "0:3",
        "--out",
        s(&det),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let u3 = field(tmp.path(), "u3.vol", &DisplacementField::zeros(&[4, 4, 4]).unwrap());
    for bad in ["3:0", "0:4", "x"] {
        let o = foldless(&[
            "render",
            "--field",
            s(&u3),
            "--what",
            "grid",
            "--slice",
            bad,
            "--out",
            s(&grid),
        ]);
        assert_eq!(o.status.code(), Some(1), "{bad}");
    }
    let o = foldless(&[
        "render",
        "--field",
        s(&u3),
        "--what",
        "grid",
        "--slice",
        "2:1",
        "--out",
        s(&grid),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_repeats_and_names_corruption() {
    let a = foldless(&["gradcheck", "--seed", "3"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stdout));
    let b = foldless(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    let bad = foldless(&["gradcheck", "--corrupt", "warp_2d"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL warp_2d"));
    assert!(stderr(&bad).contains("warp_2d"));
}
