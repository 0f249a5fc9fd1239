//! `foldless`: synthesize data, train, register, analyze, render and
//! self-check gradients.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use foldless::dataio::{self, ManifestRow};
use foldless::gradcheck;
use foldless::metrics::{self, EvalReport, SliceSpec};
use foldless::nets::ModelParams;
use foldless::trainer::{self, Experiment, TrainMode, TrainPair};

use crate::config::RunConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "foldless",
    version,
    about = "Deformable image registration with fold-suppressing training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic registration pairs and a manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        amplitude: Option<f64>,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write its checkpoint and loss history.
    Train {
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register one pair with a trained model.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Output prefix; writes `<prefix>_field.vol` and `<prefix>_warped.vol`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Folding and overlap statistics for a field or a model on a dataset.
    Analyze {
        #[arg(long, conflicts_with_all = ["ckpt", "data"])]
        field: Option<PathBuf>,
        #[arg(long, requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Source and target label masks, used with `--field`.
        #[arg(long, num_args = 2, value_names = ["SOURCE", "TARGET"])]
        labels: Option<Vec<PathBuf>>,
        /// Directory for `report.csv` and `summary.toml`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a field as a deformed grid or a determinant map.
    Render {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, value_enum)]
        what: RenderKind,
        /// `axis:index`, required for 3D fields.
        #[arg(long)]
        slice: Option<String>,
        #[arg(long, default_value_t = 4)]
        spacing: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RenderKind {
    Grid,
    Det,
}

/// Failure that maps to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FOLDLESS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("FOLDLESS_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring thread pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            config,
            out,
            pairs,
            seed,
            amplitude,
            force,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(a) = amplitude {
                cfg.synth.amplitude = a;
            }
            synth(&cfg, &out, pairs, force)
        }
        Command::Train {
            mode,
            data,
            config,
            out,
            epochs,
            lr,
            lambda,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(l) = lambda {
                cfg.train.lambda_base = l;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            train(&cfg, &data, &out)
        }
        Command::Register {
            ckpt,
            source,
            target,
            out,
        } => register(&ckpt, &source, &target, &out),
        Command::Analyze {
            field,
            ckpt,
            data,
            labels,
            out,
        } => {
            let report = match (field, ckpt, data) {
                (Some(field), None, None) => analyze_field(&field, labels.as_deref())?,
                (None, Some(ckpt), Some(data)) => analyze_model(&ckpt, &data)?,
                _ => return Err(usage("analyze needs either --field or --ckpt with --data")),
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("report.csv"), report.to_csv()).context("writing report.csv")?;
            let summary = report.summary();
            std::fs::write(out.join("summary.toml"), &summary).context("writing summary.toml")?;
            print!("{summary}");
            Ok(())
        }
        Command::Render {
            field,
            what,
            slice,
            spacing,
            out,
        } => {
            let slice = slice
                .map(|s| s.parse::<SliceSpec>())
                .transpose()
                .map_err(|e| usage(e.to_string()))?;
            let u = dataio::load_field(&field)?;
            match what {
                RenderKind::Grid => metrics::render_grid(&u, slice, spacing)
                    .map_err(|e| usage(e.to_string()))?
                    .save_pgm(&out)?,
                RenderKind::Det => metrics::render_det(&metrics::jacobian_det_map(&u), slice)
                    .map_err(|e| usage(e.to_string()))?
                    .save_ppm(&out)?,
            }
            Ok(())
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = gradcheck::run_suite_with(seed, corrupt.as_deref())?;
            println!("{report}");
            if !report.passed() {
                bail!("gradient check failed for: {}", report.failures().join(", "));
            }
            Ok(())
        }
    }
}

fn synth(cfg: &RunConfig, out: &Path, pairs: usize, force: bool) -> Result<()> {
    let manifest = out.join("manifest.csv");
    if manifest.exists() && !force {
        bail!("{} already holds a dataset; pass --force to overwrite", out.display());
    }
    cfg.synth.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows: Vec<ManifestRow> = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let pair_cfg = dataio::SynthConfig {
            seed: cfg.synth.seed.wrapping_add(i as u64),
            ..cfg.synth.clone()
        };
        let pair = dataio::synth_pair(&pair_cfg)?;
        rows.push(dataio::save_pair(out, i, &pair)?);
    }
    dataio::write_manifest(&manifest, &rows)?;
    cfg.echo(out)?;
    println!("wrote {pairs} pairs to {}", out.display());
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    let pairs = dataio::load_pairs(data).with_context(|| format!("loading manifest {}", data.display()))?;
    let Some(first) = pairs.first() else {
        bail!("manifest {} lists no pairs", data.display());
    };
    let exp = Experiment {
        arch: cfg
            .arch
            .for_dims(first.source.dims(), cfg.train.mode == TrainMode::Refine),
        loss: cfg.loss.clone(),
        train: cfg.train.clone(),
    };
    let train_pairs: Vec<TrainPair<f32>> = pairs
        .into_iter()
        .map(|p| TrainPair {
            source: p.source,
            target: p.target,
        })
        .collect();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo(out)?;
    let (model, history) = trainer::train_with_observer(&train_pairs, &exp, &mut |e, _| {
        eprintln!("epoch {:>3} phase {:<2} mean loss {:.6}", e.epoch, e.phase, e.mean_loss);
    })?;
    model.save(&out.join("checkpoint.fldx"))?;
    std::fs::write(out.join("history.csv"), history.to_csv()).context("writing history.csv")?;
    println!(
        "trained {} for {} steps; artifacts in {}",
        exp.train.mode,
        history.records.len(),
        out.display()
    );
    Ok(())
}

fn mode_of(model: &ModelParams<f32>) -> TrainMode {
    if model.refine.is_some() {
        TrainMode::Refine
    } else {
        TrainMode::Baseline
    }
}

fn register(ckpt: &Path, source: &Path, target: &Path, out: &Path) -> Result<()> {
    let model = ModelParams::<f32>::load(ckpt)?;
    let x = dataio::load_image(source)?;
    let y = dataio::load_image(target)?;
    for (path, img) in [(source, &x), (target, &y)] {
        if img.dims() != model.arch.image_dims.as_slice() {
            bail!(
                "{} has dims {:?}, but the checkpoint expects {:?}",
                path.display(),
                img.dims(),
                model.arch.image_dims
            );
        }
    }
    let (u, warped) = trainer::predict(&model, &x, &y, mode_of(&model))?;
    let with_suffix = |s: &str| {
        let mut name = out.as_os_str().to_owned();
        name.push(s);
        PathBuf::from(name)
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    dataio::save_field(&with_suffix("_field.vol"), &u)?;
    dataio::save_image(&with_suffix("_warped.vol"), &warped)?;
    Ok(())
}

fn analyze_field(field: &Path, labels: Option<&[PathBuf]>) -> Result<EvalReport> {
    let u = dataio::load_field(field)?;
    let masks = labels
        .map(|l| -> Result<_> { Ok((dataio::load_mask(&l[0])?, dataio::load_mask(&l[1])?)) })
        .transpose()?;
    let m = metrics::pair_metrics(&u, masks.as_ref().map(|m| &m.0), masks.as_ref().map(|m| &m.1))?;
    Ok(EvalReport::from_pairs(vec![m]))
}

fn analyze_model(ckpt: &Path, data: &Path) -> Result<EvalReport> {
    let model = ModelParams::<f32>::load(ckpt)?;
    let pairs = dataio::load_pairs(data).with_context(|| format!("loading manifest {}", data.display()))?;
    if let Some(p) = pairs
        .iter()
        .find(|p| p.source.dims() != model.arch.image_dims.as_slice())
    {
        bail!(
            "pair dims {:?} do not match the checkpoint's {:?}",
            p.source.dims(),
            model.arch.image_dims
        );
    }
    Ok(metrics::evaluate(&model, &pairs, mode_of(&model))?)
}
