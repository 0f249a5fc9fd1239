//! Image similarity and displacement smoothness losses.
//!
//! The similarity term is the negated squared local normalized
//! cross-correlation over a `w^d` window centred on each voxel. Windows are
//! cut at the image border (out-of-range voxels contribute zero to the sums
//! and are not counted), so a constant image has zero variance everywhere and
//! the variance guard `eps` drives the loss to exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{CustomOp, Scalar, Tape, Tensor, Var};
use crate::stn::{self, DisplacementField, ScalarField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the smoothness term.
    pub lambda: f64,
    /// Window extent per axis (odd, at least 3).
    pub cc_window: usize,
    pub cc_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            cc_window: 9,
            cc_epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(
                "loss_config",
                format!("lambda must be >= 0, got {}", self.lambda),
            ));
        }
        if self.cc_window < 3 || self.cc_window.is_multiple_of(2) {
            return Err(Error::invalid(
                "loss_config",
                format!("cc_window must be odd and >= 3, got {}", self.cc_window),
            ));
        }
        if self.cc_epsilon.is_nan() || self.cc_epsilon <= 0.0 {
            return Err(Error::invalid(
                "loss_config",
                format!("cc_epsilon must be > 0, got {}", self.cc_epsilon),
            ));
        }
        Ok(())
    }
}

/// Sum over the `(2r+1)^d` window around each voxel, truncated at the border.
///
/// The window relation is symmetric, so this operator is its own adjoint.
fn box_sum<T: Scalar>(dims: &[usize], values: &[T], radius: usize) -> Vec<T> {
    let strides = stn::strides(dims);
    let mut cur = values.to_vec();
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    for (axis, &len) in dims.iter().enumerate() {
        let step = strides[axis];
        let outer = values.len() / (len * step);
        let mut next = vec![T::zero(); values.len()];
        for o in 0..outer {
            for inner in 0..step {
                let start = o * len * step + inner;
                line.clear();
                line.extend((0..len).map(|i| cur[start + i * step]));
                prefix.clear();
                prefix.push(T::zero());
                let mut acc = T::zero();
                for &v in &line {
                    acc += v;
                    prefix.push(acc);
                }
                for i in 0..len {
                    let lo = i.saturating_sub(radius);
                    let hi = (i + radius + 1).min(len);
                    next[start + i * step] = prefix[hi] - prefix[lo];
                }
            }
        }
        cur = next;
    }
    cur
}

/// Number of in-range voxels in each window.
fn window_counts<T: Scalar>(dims: &[usize], radius: usize) -> Vec<T> {
    let ones = vec![T::one(); dims.iter().product()];
    box_sum(dims, &ones, radius)
}

struct WindowStats<T> {
    count: Vec<T>,
    a_sum: Vec<T>,
    b_sum: Vec<T>,
    cross: Vec<T>,
    a_var: Vec<T>,
    b_var: Vec<T>,
}

impl<T: Scalar> WindowStats<T> {
    fn new(dims: &[usize], a: &[T], b: &[T], radius: usize) -> Self {
        let count = window_counts::<T>(dims, radius);
        let a_sum = box_sum(dims, a, radius);
        let b_sum = box_sum(dims, b, radius);
        let sq = |v: &[T]| v.iter().map(|&x| x * x).collect::<Vec<_>>();
        let a2 = box_sum(dims, &sq(a), radius);
        let b2 = box_sum(dims, &sq(b), radius);
        let ab_prod: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
        let ab = box_sum(dims, &ab_prod, radius);
        let n = a.len();
        let mut cross = Vec::with_capacity(n);
        let mut a_var = Vec::with_capacity(n);
        let mut b_var = Vec::with_capacity(n);
        for p in 0..n {
            let c = count[p];
            cross.push(ab[p] - a_sum[p] * b_sum[p] / c);
            a_var.push(a2[p] - a_sum[p] * a_sum[p] / c);
            b_var.push(b2[p] - b_sum[p] * b_sum[p] / c);
        }
        Self {
            count,
            a_sum,
            b_sum,
            cross,
            a_var,
            b_var,
        }
    }
}

fn cc_value<T: Scalar>(dims: &[usize], target: &[T], warped: &[T], radius: usize, eps: T) -> T {
    let s = WindowStats::new(dims, warped, target, radius);
    let total: T = (0..target.len())
        .map(|p| s.cross[p] * s.cross[p] / (s.a_var[p] * s.b_var[p] + eps))
        .sum();
    -total / T::of(target.len() as f64)
}

struct CcOp<T> {
    dims: Vec<usize>,
    radius: usize,
    eps: T,
}

impl<T: Scalar> CcOp<T> {
    /// Gradient with respect to `a` of `-mean(cross^2 / (var_a var_b + eps))`.
    fn grad_first(&self, a: &[T], b: &[T], upstream: T) -> Vec<T> {
        let dims = &self.dims;
        let s = WindowStats::new(dims, a, b, self.radius);
        let n = a.len();
        let scale = -upstream / T::of(n as f64);
        let two = T::of(2.0);
        let mut g_sum = vec![T::zero(); n];
        let mut g_sq = vec![T::zero(); n];
        let mut g_cross = vec![T::zero(); n];
        for p in 0..n {
            let denom = s.a_var[p] * s.b_var[p] + self.eps;
            let d_cross = scale * two * s.cross[p] / denom;
            let d_var = -scale * s.cross[p] * s.cross[p] * s.b_var[p] / (denom * denom);
            let c = s.count[p];
            g_cross[p] = d_cross;
            g_sq[p] = d_var;
            g_sum[p] = -d_cross * s.b_sum[p] / c - two * d_var * s.a_sum[p] / c;
        }
        let bs = box_sum(dims, &g_sum, self.radius);
        let bq = box_sum(dims, &g_sq, self.radius);
        let bc = box_sum(dims, &g_cross, self.radius);
        (0..n).map(|q| bs[q] + two * a[q] * bq[q] + b[q] * bc[q]).collect()
    }
}

impl<T: Scalar> CustomOp<T> for CcOp<T> {
    fn name(&self) -> &'static str {
        "cc_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        needs_grad: &[bool],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (target, warped) = (inputs[0], inputs[1]);
        let g = grad.data()[0];
        // The statistic is symmetric in its two arguments.
        let d_target = needs_grad[0].then(|| {
            let v = self.grad_first(target.data(), warped.data(), g);
            Tensor::new(target.shape().to_vec(), v).expect("cc grad")
        });
        let d_warped = needs_grad[1].then(|| {
            let v = self.grad_first(warped.data(), target.data(), g);
            Tensor::new(warped.shape().to_vec(), v).expect("cc grad")
        });
        vec![d_target, d_warped]
    }
}

fn check_single_channel<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.channels() != 1 {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    stn::check_rank(op, a.spatial())
}

/// Negated mean squared local NCC between `target` and `warped` (`[1, dims...]`).
pub fn cc_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, target: Var, warped: Var, cfg: &LossConfig) -> Result<Var> {
    let (y, y_hat) = (tape.value(target), tape.value(warped));
    check_single_channel("cc_loss", y, y_hat)?;
    let dims = y.spatial().to_vec();
    let radius = cfg.cc_window / 2;
    let eps = T::of(cfg.cc_epsilon);
    let value = cc_value(&dims, y.data(), y_hat.data(), radius, eps);
    Ok(tape.custom(
        &[target, warped],
        Tensor::scalar(value),
        Box::new(CcOp { dims, radius, eps }),
    ))
}

/// Number of forward differences in a field: one per component, axis and
/// position that has a forward neighbour.
fn difference_count(dims: &[usize]) -> usize {
    let voxels: usize = dims.iter().product();
    let per_component: usize = dims.iter().map(|&n| voxels / n * (n - 1)).sum();
    per_component * dims.len()
}

fn for_each_difference(dims: &[usize], components: usize, mut f: impl FnMut(usize, usize)) {
    let strides = stn::strides(dims);
    let voxels: usize = dims.iter().product();
    for c in 0..components {
        for (axis, &len) in dims.iter().enumerate() {
            let step = strides[axis];
            for p in 0..voxels {
                if (p / step) % len + 1 < len {
                    f(c * voxels + p, c * voxels + p + step);
                }
            }
        }
    }
}

fn smoothness_value<T: Scalar>(dims: &[usize], u: &[T]) -> T {
    let mut total = T::zero();
    for_each_difference(dims, dims.len(), |a, b| {
        let d = u[b] - u[a];
        total += d * d;
    });
    total / T::of(difference_count(dims) as f64)
}

struct SmoothnessOp {
    dims: Vec<usize>,
}

impl<T: Scalar> CustomOp<T> for SmoothnessOp {
    fn name(&self) -> &'static str {
        "smoothness_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _needs_grad: &[bool],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let u = inputs[0];
        let scale = T::of(2.0) * grad.data()[0] / T::of(difference_count(&self.dims) as f64);
        let mut du = Tensor::zeros(u.shape());
        let (src, buf) = (u.data(), du.data_mut());
        for_each_difference(&self.dims, self.dims.len(), |a, b| {
            let d = scale * (src[b] - src[a]);
            buf[b] += d;
            buf[a] -= d;
        });
        vec![Some(du)]
    }
}

/// Mean squared forward difference of a `[d, dims...]` field.
pub fn smoothness_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, field: Var) -> Result<Var> {
    let u = tape.value(field);
    let dims = u.spatial().to_vec();
    stn::check_rank("smoothness_loss", &dims)?;
    if u.channels() != dims.len() {
        return Err(Error::invalid(
            "smoothness_loss",
            format!("field needs {} components, got shape {:?}", dims.len(), u.shape()),
        ));
    }
    let value = smoothness_value(&dims, u.data());
    Ok(tape.custom(&[field], Tensor::scalar(value), Box::new(SmoothnessOp { dims })))
}

/// Handles to a loss and its two ingredients.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cc: Var,
    pub smooth: Var,
}

/// `CC(y, warped) + lambda * ||D u||`.
pub fn similarity_plus_smoothness<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    warped: Var,
    field: Var,
    lambda: f64,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let cc = cc_loss_on_tape(tape, target, warped, cfg)?;
    let smooth = smoothness_loss_on_tape(tape, field)?;
    let weighted = tape.scalar_mul(smooth, T::of(lambda));
    let total = tape.add(cc, weighted)?;
    Ok(LossTerms { total, cc, smooth })
}

/// Baseline loss: warps `source` by `field` and scores it against `target`.
pub fn baseline_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    source: Var,
    target: Var,
    field: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let warped = stn::warp_on_tape(tape, source, field)?;
    similarity_plus_smoothness(tape, target, warped, field, cfg.lambda, cfg)
}

/// Cycle-consistent loss
/// `CC(y, y~) + l ||D u_fwd|| + CC(x, x~) + l ||D u_bwd||`,
/// where `y~ = warp(x, u_fwd)` and `x~ = warp(y~, u_bwd)` are already on the tape.
#[allow(clippy::too_many_arguments)]
pub fn cycle_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    source: Var,
    target: Var,
    warped: Var,
    u_fwd: Var,
    reconstructed: Var,
    u_bwd: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let forward = similarity_plus_smoothness(tape, target, warped, u_fwd, cfg.lambda, cfg)?;
    let backward = similarity_plus_smoothness(tape, source, reconstructed, u_bwd, cfg.lambda, cfg)?;
    Ok(LossTerms {
        total: tape.add(forward.total, backward.total)?,
        cc: tape.add(forward.cc, backward.cc)?,
        smooth: tape.add(forward.smooth, backward.smooth)?,
    })
}

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

/// Tape-free evaluation of the similarity loss.
pub fn cc_loss<T: Scalar>(target: &ScalarField<T>, warped: &ScalarField<T>, cfg: &LossConfig) -> Result<T> {
    same_dims("cc_loss", target.dims(), warped.dims())?;
    cfg.validate()?;
    Ok(cc_value(
        target.dims(),
        target.values(),
        warped.values(),
        cfg.cc_window / 2,
        T::of(cfg.cc_epsilon),
    ))
}

pub fn smoothness_loss<T: Scalar>(u: &DisplacementField<T>) -> T {
    smoothness_value(u.dims(), u.vectors())
}

pub fn baseline_loss<T: Scalar>(
    source: &ScalarField<T>,
    target: &ScalarField<T>,
    u: &DisplacementField<T>,
    cfg: &LossConfig,
) -> Result<T> {
    let warped = stn::warp(source, u)?;
    Ok(cc_loss(target, &warped, cfg)? + T::of(cfg.lambda) * smoothness_loss(u))
}

/// Tape-free cycle loss given both predicted fields.
pub fn cycle_loss<T: Scalar>(
    source: &ScalarField<T>,
    target: &ScalarField<T>,
    u_fwd: &DisplacementField<T>,
    u_bwd: &DisplacementField<T>,
    cfg: &LossConfig,
) -> Result<T> {
    let warped = stn::warp(source, u_fwd)?;
    let reconstructed = stn::warp(&warped, u_bwd)?;
    Ok(baseline_loss(source, target, u_fwd, cfg)?
        + cc_loss(source, &reconstructed, cfg)?
        + T::of(cfg.lambda) * smoothness_loss(u_bwd))
}
