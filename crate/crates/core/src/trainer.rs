//! Training mechanisms: baseline, cycle-consistent and alternating
//! generation/refinement, plus inference.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossTerms};
use crate::ndtensor::{adam_step, AdamState, Param, Scalar, Tape, Tensor, Var};
use crate::nets::{self, ArchConfig, ModelParams};
use crate::stn::{self, DisplacementField, ScalarField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Baseline,
    Cycle,
    Refine,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Cycle => "cycle",
            TrainMode::Refine => "refine",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "cycle" => Ok(TrainMode::Cycle),
            "refine" => Ok(TrainMode::Refine),
            other => Err(Error::invalid(
                "train_mode",
                format!("expected baseline|cycle|refine, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Smoothness weight for baseline and cycle training and refinement phase I.
    pub lambda_base: f64,
    /// Smoothness weight for refinement phase II.
    pub lambda_refine: f64,
    /// Epochs of baseline or cycle training.
    pub epochs: usize,
    /// Epochs per refinement phase.
    pub phase_epochs: usize,
    /// Number of phase I / phase II alternations.
    pub outer_iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Cycle mode: stop gradients at the warped image fed to the backward pass.
    pub cycle_detach_forward: bool,
    /// Refine mode: keep the (frozen) refinement block in the phase I forward path.
    pub refine_in_phase_one: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Baseline,
            lambda_base: 1.0,
            lambda_refine: 4.0,
            epochs: 10,
            phase_epochs: 3,
            outer_iterations: 4,
            lr: 1e-4,
            batch_size: 1,
            seed: 0,
            cycle_detach_forward: false,
            refine_in_phase_one: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("train_config", reason));
        if self.epochs == 0 || self.phase_epochs == 0 || self.outer_iterations == 0 || self.batch_size == 0 {
            return bad("epochs, phase_epochs, outer_iterations and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lambda_base >= 0.0 && self.lambda_refine >= 0.0) {
            return bad("lambda values must be >= 0".into());
        }
        Ok(())
    }

    /// Total dataset passes the configured schedule performs.
    pub fn total_epochs(&self) -> usize {
        match self.mode {
            TrainMode::Refine => 2 * self.phase_epochs * self.outer_iterations,
            _ => self.epochs,
        }
    }
}

/// Which sub-network a step trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    /// Baseline or cycle training: a single phase.
    Single,
    /// Refinement phase I: the deformation unit is trained.
    Generation,
    /// Refinement phase II: the refinement block is trained.
    Refinement,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Single => "-",
            Phase::Generation => "I",
            Phase::Refinement => "II",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lambda: f64,
    pub total: f64,
    pub cc: f64,
    pub smooth: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    /// `step,epoch,phase,total,cc,smooth`, one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,phase,total,cc,smooth\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.epoch, r.phase, r.total, r.cc, r.smooth
            ));
        }
        out
    }

    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.total)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn epochs(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch + 1)
    }

    /// Phase of each epoch, in order.
    pub fn epoch_phases(&self) -> Vec<Phase> {
        let mut out: Vec<Phase> = Vec::new();
        let mut last = None;
        for r in &self.records {
            if last != Some(r.epoch) {
                out.push(r.phase);
                last = Some(r.epoch);
            }
        }
        out
    }
}

/// A training pair: `source` is warped towards `target`.
#[derive(Clone, Debug)]
pub struct TrainPair<T> {
    pub source: ScalarField<T>,
    pub target: ScalarField<T>,
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

/// Emitted after every epoch together with the current parameters.
#[derive(Clone, Debug)]
pub struct EpochEnd {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn loss_values<T: Scalar>(tape: &Tape<T>, terms: &LossTerms) -> Result<(f64, f64, f64)> {
    Ok((
        tape.value(terms.total).item()?.as_f64(),
        tape.value(terms.cc).item()?.as_f64(),
        tape.value(terms.smooth).item()?.as_f64(),
    ))
}

fn collect_grads<T: Scalar>(tape: &Tape<T>, loss: Var, vars: &[Var], params: &[Param<T>]) -> Result<Vec<Tensor<T>>> {
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
        .collect())
}

/// Builds the loss of one pair on `tape` for the given phase and returns the
/// terms and the handles of the trained parameters.
struct StepGraph {
    terms: LossTerms,
    trained: Vec<Var>,
}

fn build_step<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    exp: &Experiment,
    pair: &TrainPair<T>,
    phase: Phase,
) -> Result<StepGraph> {
    let cfg = &exp.train;
    let arch = &model.arch;
    let source = tape.constant(pair.source.to_tensor());
    let target = tape.constant(pair.target.to_tensor());
    let stacked = nets::stack_pair(tape, source, target)?;
    match (cfg.mode, phase) {
        (TrainMode::Cycle, _) => {
            let d = nets::register(tape, &model.deformation.params, true);
            let u_fwd = nets::deformation_forward(tape, arch, &d, stacked)?;
            let warped = stn::warp_on_tape(tape, source, u_fwd)?;
            let back_source = if cfg.cycle_detach_forward {
                tape.detach(warped)
            } else {
                warped
            };
            let back_pair = nets::stack_pair(tape, back_source, source)?;
            let u_bwd = nets::deformation_forward(tape, arch, &d, back_pair)?;
            let reconstructed = stn::warp_on_tape(tape, back_source, u_bwd)?;
            let loss_cfg = exp.loss.with_lambda(cfg.lambda_base);
            let terms =
                losses::cycle_loss_on_tape(tape, source, target, warped, u_fwd, reconstructed, u_bwd, &loss_cfg)?;
            Ok(StepGraph { terms, trained: d })
        }
        (_, Phase::Refinement) => {
            let refine = model.refine.as_ref().expect("refine mode has a refinement block");
            let d = nets::register(tape, &model.deformation.params, false);
            let r = nets::register(tape, &refine.params, true);
            let u = nets::deformation_forward(tape, arch, &d, stacked)?;
            let du = nets::refine_forward(tape, arch, &r, u)?;
            let refined = tape.add(u, du)?;
            let warped = stn::warp_on_tape(tape, source, refined)?;
            let terms =
                losses::similarity_plus_smoothness(tape, target, warped, refined, cfg.lambda_refine, &exp.loss)?;
            Ok(StepGraph { terms, trained: r })
        }
        (mode, _) => {
            let d = nets::register(tape, &model.deformation.params, true);
            let mut u = nets::deformation_forward(tape, arch, &d, stacked)?;
            if mode == TrainMode::Refine && cfg.refine_in_phase_one {
                let refine = model.refine.as_ref().expect("refine mode has a refinement block");
                let r = nets::register(tape, &refine.params, false);
                let du = nets::refine_forward(tape, arch, &r, u)?;
                u = tape.add(u, du)?;
            }
            let warped = stn::warp_on_tape(tape, source, u)?;
            let terms = losses::similarity_plus_smoothness(tape, target, warped, u, cfg.lambda_base, &exp.loss)?;
            Ok(StepGraph { terms, trained: d })
        }
    }
}

struct Run<'a, T: Scalar> {
    exp: &'a Experiment,
    data: &'a [TrainPair<T>],
    model: ModelParams<T>,
    adam_d: AdamState<T>,
    adam_r: Option<AdamState<T>>,
    history: TrainHistory,
    epoch: usize,
}

impl<'a, T: Scalar> Run<'a, T> {
    fn new(exp: &'a Experiment, data: &'a [TrainPair<T>]) -> Result<Self> {
        let arch = exp.arch.clone().with_refine(exp.train.mode == TrainMode::Refine);
        let model = nets::init_params::<T>(exp.train.seed, &arch)?;
        for pair in data {
            if pair.source.dims() != arch.image_dims.as_slice() || pair.target.dims() != arch.image_dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "train",
                    left: arch.image_dims.clone(),
                    right: pair.source.dims().to_vec(),
                });
            }
        }
        exp.loss.validate()?;
        let adam_d = AdamState::new(&model.deformation.params);
        let adam_r = model.refine.as_ref().map(|r| AdamState::new(&r.params));
        Ok(Self {
            exp,
            data,
            model,
            adam_d,
            adam_r,
            history: TrainHistory::default(),
            epoch: 0,
        })
    }

    fn run_epoch(&mut self, phase: Phase, observer: &mut dyn FnMut(&EpochEnd, &ModelParams<T>)) -> Result<()> {
        let cfg = &self.exp.train;
        let order = epoch_order(cfg.seed, self.epoch, self.data.len());
        let lr = T::of(cfg.lr);
        let lambda = match phase {
            Phase::Refinement => cfg.lambda_refine,
            _ => cfg.lambda_base,
        };
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum_grads: Option<Vec<Tensor<T>>> = None;
            let (mut total, mut cc, mut smooth) = (0.0, 0.0, 0.0);
            for &i in batch {
                let mut tape = Tape::new();
                let graph = build_step(&mut tape, &self.model, self.exp, &self.data[i], phase)?;
                let (t, c, s) = loss_values(&tape, &graph.terms)?;
                total += t;
                cc += c;
                smooth += s;
                let params = match phase {
                    Phase::Refinement => &self.model.refine.as_ref().expect("refine block").params,
                    _ => &self.model.deformation.params,
                };
                let grads = collect_grads(&tape, graph.terms.total, &graph.trained, params)?;
                match &mut sum_grads {
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                    None => sum_grads = Some(grads),
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let record = StepRecord {
                step: self.history.records.len(),
                epoch: self.epoch,
                phase,
                lambda,
                total: total * scale,
                cc: cc * scale,
                smooth: smooth * scale,
            };
            if !(record.total.is_finite() && record.cc.is_finite() && record.smooth.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: record.step,
                    epoch: record.epoch,
                    phase: record.phase.to_string(),
                    total: record.total,
                    cc: record.cc,
                    smooth: record.smooth,
                });
            }
            let mut grads = sum_grads.expect("non-empty batch");
            if batch.len() > 1 {
                let s = T::of(scale);
                grads = grads.iter().map(|g| g.map(|v| v * s)).collect();
            }
            match phase {
                Phase::Refinement => {
                    let refine = self.model.refine.as_mut().expect("refine block");
                    let state = self.adam_r.as_mut().expect("refine optimizer");
                    adam_step(&mut refine.params, &grads, state, lr)?;
                }
                _ => adam_step(&mut self.model.deformation.params, &grads, &mut self.adam_d, lr)?,
            }
            epoch_total += record.total * batch.len() as f64;
            self.history.records.push(record);
        }
        let end = EpochEnd {
            epoch: self.epoch,
            phase,
            mean_loss: epoch_total / self.data.len().max(1) as f64,
        };
        observer(&end, &self.model);
        self.epoch += 1;
        Ok(())
    }

    fn finish(self) -> (ModelParams<T>, TrainHistory) {
        (self.model, self.history)
    }
}

/// Runs the schedule of `exp.train.mode` without validating counts, so tests
/// can request zero epochs.
pub(crate) fn run_schedule<T: Scalar>(
    data: &[TrainPair<T>],
    exp: &Experiment,
    observer: &mut dyn FnMut(&EpochEnd, &ModelParams<T>),
) -> Result<(ModelParams<T>, TrainHistory)> {
    let mut run = Run::new(exp, data)?;
    let cfg = &exp.train;
    match cfg.mode {
        TrainMode::Baseline | TrainMode::Cycle => {
            for _ in 0..cfg.epochs {
                run.run_epoch(Phase::Single, observer)?;
            }
        }
        TrainMode::Refine => {
            for _ in 0..cfg.outer_iterations {
                for _ in 0..cfg.phase_epochs {
                    run.run_epoch(Phase::Generation, observer)?;
                }
                for _ in 0..cfg.phase_epochs {
                    run.run_epoch(Phase::Refinement, observer)?;
                }
            }
        }
    }
    Ok(run.finish())
}

/// Trains according to `exp.train.mode`, reporting every finished epoch.
pub fn train_with_observer<T: Scalar>(
    data: &[TrainPair<T>],
    exp: &Experiment,
    observer: &mut dyn FnMut(&EpochEnd, &ModelParams<T>),
) -> Result<(ModelParams<T>, TrainHistory)> {
    exp.train.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    run_schedule(data, exp, observer)
}

pub fn train<T: Scalar>(data: &[TrainPair<T>], exp: &Experiment) -> Result<(ModelParams<T>, TrainHistory)> {
    train_with_observer(data, exp, &mut |_, _| {})
}

fn with_mode(exp: &Experiment, mode: TrainMode) -> Experiment {
    let mut e = exp.clone();
    e.train.mode = mode;
    e
}

/// Minimizes `CC(y, x(Id + u)) + lambda ||Du||` with `u = D(x, y)`.
pub fn train_baseline<T: Scalar>(data: &[TrainPair<T>], exp: &Experiment) -> Result<(ModelParams<T>, TrainHistory)> {
    train(data, &with_mode(exp, TrainMode::Baseline))
}

/// Runs the deformation unit forward and then backward on (warped, source)
/// with shared parameters, minimizing the sum of both directions' losses.
pub fn train_cycle<T: Scalar>(data: &[TrainPair<T>], exp: &Experiment) -> Result<(ModelParams<T>, TrainHistory)> {
    train(data, &with_mode(exp, TrainMode::Cycle))
}

/// Alternates deformation-unit epochs (weak smoothness) with refinement-block
/// epochs (strong smoothness on the refined field).
pub fn train_refine<T: Scalar>(data: &[TrainPair<T>], exp: &Experiment) -> Result<(ModelParams<T>, TrainHistory)> {
    train(data, &with_mode(exp, TrainMode::Refine))
}

/// Field and warped source for one pair. Refine mode adds the refinement
/// block's correction to the deformation unit's field.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    source: &ScalarField<T>,
    target: &ScalarField<T>,
    mode: TrainMode,
) -> Result<(DisplacementField<T>, ScalarField<T>)> {
    let mut u = params.deformation_field(source, target)?;
    if mode == TrainMode::Refine {
        let du = params.refinement(&u)?;
        for (a, b) in u.vectors_mut().iter_mut().zip(du.vectors()) {
            *a += *b;
        }
    }
    let warped = stn::warp(source, &u)?;
    Ok((u, warped))
}
