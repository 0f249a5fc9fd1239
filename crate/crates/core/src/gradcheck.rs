//! Finite-difference verification of every differentiable operation.
//!
//! Each check builds a small graph in `f64`, projects its output onto a fixed
//! random tensor to get a scalar, and compares the reverse-mode gradient of
//! every input with central differences.
//!
//! Whole networks are piecewise smooth (leaky ReLU, interpolation cells), so a
//! perturbation can straddle a kink. On smooth pieces central differences at
//! `h` and `h / 2` agree to O(h^2); when they do not, the step is halved until
//! two consecutive estimates agree, which moves the stencil off the kink.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::ndtensor::{Padding, Tape, Tensor, Var};
use crate::nets::{self, ArchConfig};
use crate::stn;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound of the relative-error denominator; central differences of an
/// O(1) objective carry roughly 1e-11 of rounding noise.
pub const FLOOR: f64 = 1e-5;
/// Relative disagreement between step sizes that marks a kink.
pub const KINK: f64 = 1e-4;
/// Step halvings tried before giving up on a kink.
const HALVINGS: usize = 6;

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Check {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    graph: Graph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub elements: usize,
    /// Elements whose stencil straddled a kink.
    pub kinks: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub seed: u64,
    pub results: Vec<CheckResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.name).collect()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {:<28} elements={:<5} kinks={:<3} max_rel_error={:.3e}",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.elements,
                r.kinks,
                r.max_rel_error
            )?;
        }
        let failed = self.failures().len();
        write!(
            f,
            "{} of {} checks passed (seed {}, tolerance {TOLERANCE:e})",
            self.results.len() - failed,
            self.results.len(),
            self.seed
        )
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Scalar objective: `sum(graph(inputs) * weights)`.
fn objective(check: &Check, weights: &Tensor<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (check.graph)(&mut tape, &vars)?;
    let value = tape.value(out);
    Ok(value.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

fn run_check(check: &Check, rng: &mut ChaCha8Rng, corrupt: Option<&str>) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = check.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (check.graph)(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let weights = random(rng, &out_shape, -1.0, 1.0);
    let w = tape.constant(weights.clone());
    let projected = tape.mul(out, w)?;
    let loss = tape.sum(projected);
    let grads = tape.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    let mut elements = 0;
    let mut kinks = 0;
    let mut inputs = check.inputs.clone();
    for (k, &v) in vars.iter().enumerate() {
        let mut analytic = grads.get_or_zeros(v, check.inputs[k].shape());
        if corrupt == Some(check.name) {
            analytic = analytic.map(|g| g * 1.01 + 1e-3);
        }
        for i in 0..inputs[k].len() {
            let mut central = |step: f64| -> Result<f64> {
                let orig = inputs[k].data()[i];
                inputs[k].data_mut()[i] = orig + step;
                let plus = objective(check, &weights, &inputs)?;
                inputs[k].data_mut()[i] = orig - step;
                let minus = objective(check, &weights, &inputs)?;
                inputs[k].data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let mut step = STEP;
            let mut numeric = central(step)?;
            for halving in 0..HALVINGS {
                step /= 2.0;
                let finer = central(step)?;
                if rel_error(numeric, finer) <= KINK {
                    break;
                }
                if halving == 0 {
                    kinks += 1;
                }
                numeric = finer;
            }
            max_rel = max_rel.max(rel_error(analytic.data()[i], numeric));
            elements += 1;
        }
    }
    Ok(CheckResult {
        name: check.name,
        elements,
        kinks,
        max_rel_error: max_rel,
    })
}

fn small_arch(dims: &[usize]) -> ArchConfig {
    ArchConfig {
        levels: 2,
        base_channels: 2,
        refine_hidden: 3,
        ..ArchConfig::for_dims(dims)
    }
    .with_refine(true)
}

/// Network weights with a non-zero head so every parameter gets a gradient.
fn network_inputs(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> Vec<Tensor<f64>> {
    let mut layout = arch.deformation_layout();
    layout.extend(arch.refine_layout());
    layout
        .iter()
        .map(|(name, shape)| {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let bound = if name.ends_with(".bias") {
                0.1
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            random(rng, shape, -bound, bound)
        })
        .collect()
}

fn checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let cfg = LossConfig {
        cc_window: 3,
        ..LossConfig::default()
    };
    let mut out: Vec<Check> = Vec::new();
    let mut push = |name, inputs, graph: Graph| out.push(Check { name, inputs, graph });

    push(
        "add",
        vec![random(rng, &[2, 3, 3], -1.0, 1.0), random(rng, &[2, 3, 3], -1.0, 1.0)],
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    push(
        "sub",
        vec![random(rng, &[2, 3, 3], -1.0, 1.0), random(rng, &[2, 3, 3], -1.0, 1.0)],
        Box::new(|t, v| t.sub(v[0], v[1])),
    );
    push(
        "mul",
        vec![random(rng, &[2, 3, 3], -1.0, 1.0), random(rng, &[2, 3, 3], -1.0, 1.0)],
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    push(
        "scalar_mul_square",
        vec![random(rng, &[1, 4, 4], -1.0, 1.0)],
        Box::new(|t, v| {
            let s = t.square(v[0]);
            Ok(t.scalar_mul(s, -0.7))
        }),
    );
    push(
        "sum_mean",
        vec![random(rng, &[2, 4, 4], -1.0, 1.0)],
        Box::new(|t, v| {
            let s = t.sum(v[0]);
            let m = t.mean(v[0]);
            let m2 = t.square(m);
            t.add(s, m2)
        }),
    );
    push(
        "concat_channels",
        vec![random(rng, &[1, 3, 3], -1.0, 1.0), random(rng, &[2, 3, 3], -1.0, 1.0)],
        Box::new(|t, v| t.concat_channels(v[0], v[1])),
    );
    push(
        "conv2d_same_s1",
        vec![
            random(rng, &[2, 6, 5], -1.0, 1.0),
            random(rng, &[3, 2, 3, 3], -1.0, 1.0),
        ],
        Box::new(|t, v| t.conv_nd(v[0], v[1], 1, Padding::Same)),
    );
    push(
        "conv2d_same_s2",
        vec![
            random(rng, &[2, 7, 6], -1.0, 1.0),
            random(rng, &[3, 2, 3, 3], -1.0, 1.0),
        ],
        Box::new(|t, v| t.conv_nd(v[0], v[1], 2, Padding::Same)),
    );
    push(
        "conv2d_valid",
        vec![
            random(rng, &[1, 6, 6], -1.0, 1.0),
            random(rng, &[2, 1, 3, 3], -1.0, 1.0),
        ],
        Box::new(|t, v| t.conv_nd(v[0], v[1], 1, Padding::Valid)),
    );
    push(
        "conv3d_same_s2",
        vec![
            random(rng, &[2, 4, 4, 4], -1.0, 1.0),
            random(rng, &[2, 2, 3, 3, 3], -1.0, 1.0),
        ],
        Box::new(|t, v| t.conv_nd(v[0], v[1], 2, Padding::Same)),
    );
    push(
        "add_bias",
        vec![random(rng, &[3, 3, 3], -1.0, 1.0), random(rng, &[3], -1.0, 1.0)],
        Box::new(|t, v| t.add_bias(v[0], v[1])),
    );
    push(
        "leaky_relu",
        vec![random(rng, &[2, 4, 4], -1.0, 1.0)],
        Box::new(|t, v| t.leaky_relu(v[0], 0.2)),
    );
    push(
        "upsample_nearest_2d",
        vec![random(rng, &[2, 3, 3], -1.0, 1.0)],
        Box::new(|t, v| t.upsample_nearest(v[0], 2)),
    );
    push(
        "upsample_nearest_3d",
        vec![random(rng, &[1, 2, 2, 2], -1.0, 1.0)],
        Box::new(|t, v| t.upsample_nearest(v[0], 2)),
    );

    push(
        "warp_2d",
        vec![random(rng, &[1, 6, 5], 0.0, 1.0), random(rng, &[2, 6, 5], -1.7, 1.7)],
        Box::new(|t, v| stn::warp_on_tape(t, v[0], v[1])),
    );
    push(
        "warp_3d",
        vec![
            random(rng, &[1, 4, 4, 3], 0.0, 1.0),
            random(rng, &[3, 4, 4, 3], -1.3, 1.3),
        ],
        Box::new(|t, v| stn::warp_on_tape(t, v[0], v[1])),
    );

    let cc_2d = cfg.clone();
    push(
        "cc_loss_2d",
        vec![random(rng, &[1, 6, 6], 0.0, 1.0), random(rng, &[1, 6, 6], 0.0, 1.0)],
        Box::new(move |t, v| losses::cc_loss_on_tape(t, v[0], v[1], &cc_2d)),
    );
    let cc_3d = cfg.clone();
    push(
        "cc_loss_3d",
        vec![
            random(rng, &[1, 4, 4, 4], 0.0, 1.0),
            random(rng, &[1, 4, 4, 4], 0.0, 1.0),
        ],
        Box::new(move |t, v| losses::cc_loss_on_tape(t, v[0], v[1], &cc_3d)),
    );
    push(
        "smoothness_2d",
        vec![random(rng, &[2, 5, 4], -1.0, 1.0)],
        Box::new(|t, v| losses::smoothness_loss_on_tape(t, v[0])),
    );
    push(
        "smoothness_3d",
        vec![random(rng, &[3, 3, 4, 3], -1.0, 1.0)],
        Box::new(|t, v| losses::smoothness_loss_on_tape(t, v[0])),
    );

    let base_cfg = cfg.with_lambda(0.5);
    push(
        "baseline_loss",
        vec![
            random(rng, &[1, 6, 6], 0.0, 1.0),
            random(rng, &[1, 6, 6], 0.0, 1.0),
            random(rng, &[2, 6, 6], -1.5, 1.5),
        ],
        Box::new(move |t, v| Ok(losses::baseline_loss_on_tape(t, v[0], v[1], v[2], &base_cfg)?.total)),
    );
    let cycle_cfg = cfg.with_lambda(0.5);
    push(
        "cycle_loss",
        vec![
            random(rng, &[1, 6, 6], 0.0, 1.0),
            random(rng, &[1, 6, 6], 0.0, 1.0),
            random(rng, &[2, 6, 6], -1.5, 1.5),
            random(rng, &[2, 6, 6], -1.5, 1.5),
        ],
        Box::new(move |t, v| {
            let warped = stn::warp_on_tape(t, v[0], v[2])?;
            let recon = stn::warp_on_tape(t, warped, v[3])?;
            Ok(losses::cycle_loss_on_tape(t, v[0], v[1], warped, v[2], recon, v[3], &cycle_cfg)?.total)
        }),
    );

    // Whole training objectives differentiated with respect to network weights.
    let arch = small_arch(&[8, 8]);
    let images = [random(rng, &[1, 8, 8], 0.0, 1.0), random(rng, &[1, 8, 8], 0.0, 1.0)];
    let split = arch.deformation_layout().len();
    let d_only = network_inputs(rng, &arch)[..split].to_vec();
    let (a, imgs, c) = (arch.clone(), images.clone(), cfg.clone());
    push(
        "baseline_objective",
        d_only.clone(),
        Box::new(move |t, v| {
            let (x, y) = (t.constant(imgs[0].clone()), t.constant(imgs[1].clone()));
            let pair = nets::stack_pair(t, x, y)?;
            let u = nets::deformation_forward(t, &a, v, pair)?;
            let u = t.scalar_mul(u, 0.5);
            Ok(losses::baseline_loss_on_tape(t, x, y, u, &c)?.total)
        }),
    );
    let (a, imgs, c) = (arch.clone(), images.clone(), cfg.clone());
    push(
        "cycle_objective",
        d_only,
        Box::new(move |t, v| {
            let (x, y) = (t.constant(imgs[0].clone()), t.constant(imgs[1].clone()));
            let pair = nets::stack_pair(t, x, y)?;
            let u_fwd = nets::deformation_forward(t, &a, v, pair)?;
            let u_fwd = t.scalar_mul(u_fwd, 0.5);
            let warped = stn::warp_on_tape(t, x, u_fwd)?;
            let back = nets::stack_pair(t, warped, x)?;
            let u_bwd = nets::deformation_forward(t, &a, v, back)?;
            let u_bwd = t.scalar_mul(u_bwd, 0.5);
            let recon = stn::warp_on_tape(t, warped, u_bwd)?;
            Ok(losses::cycle_loss_on_tape(t, x, y, warped, u_fwd, recon, u_bwd, &c)?.total)
        }),
    );
    let (a, imgs, c) = (arch.clone(), images, cfg.with_lambda(4.0));
    let all = network_inputs(rng, &arch);
    push(
        "refine_objective",
        all,
        Box::new(move |t, v| {
            let (x, y) = (t.constant(imgs[0].clone()), t.constant(imgs[1].clone()));
            let pair = nets::stack_pair(t, x, y)?;
            let u = nets::deformation_forward(t, &a, &v[..split], pair)?;
            let u = t.scalar_mul(u, 0.5);
            let du = nets::refine_forward(t, &a, &v[split..], u)?;
            let refined = t.add(u, du)?;
            Ok(losses::baseline_loss_on_tape(t, x, y, refined, &c)?.total)
        }),
    );
    out
}

/// Names of all checks in the order they run.
pub fn check_names() -> Vec<&'static str> {
    checks(&mut ChaCha8Rng::seed_from_u64(0))
        .iter()
        .map(|c| c.name)
        .collect()
}

pub fn run_suite(seed: u64) -> Result<GradReport> {
    run_suite_with(seed, None)
}

/// Runs the suite, perturbing the analytic gradient of the check named
/// `corrupt` to exercise the failure path.
pub fn run_suite_with(seed: u64, corrupt: Option<&str>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = checks(&mut rng);
    let results = checks
        .iter()
        .map(|c| run_check(c, &mut rng, corrupt))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport { seed, results })
}
