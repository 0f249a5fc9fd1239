use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Standard moments (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
    pub fn new(params: &[Param<T>]) -> Self {
        Self::with_betas(params, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn with_betas(params: &[Param<T>], beta1: T, beta2: T, eps: T) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.shape() != g.shape() || m.len() != p.value.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.value.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
    }

    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let one = T::one();
    let t = state.t as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: &[f64]) -> Vec<Param<f64>> {
        vec![Param::new(
            "w",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        )]
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = one_param(&[0.5, -1.5]);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, 1e-4).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-4;
        for g in [1e-2, -1e-2, 0.3, -7.0, 42.0] {
            let mut params = one_param(&[1.0, 1.0, 1.0]);
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &[Tensor::full(&[3], g)], &mut state, lr).unwrap();
            for &w in params[0].value.data() {
                let expected = 1.0 - lr * f64::signum(g);
                assert!((w - expected).abs() < 1e-6, "g={g}: {w} vs {expected}");
            }
        }
    }

    #[test]
    fn two_steps_follow_recurrence() {
        let g = 0.5;
        let mut params = one_param(&[0.0]);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::full(&[1], g)], &mut state, 1e-3).unwrap();
        adam_step(&mut params, &[Tensor::full(&[1], -g)], &mut state, 1e-3).unwrap();
        assert_eq!(state.step_count(), 2);
        // m2 = b1 (1 - b1) g - (1 - b1) g = -(1 - b1)^2 g
        let m = state.first_moment(0)[0];
        assert!((m - (-(0.1f64 * 0.1) * g)).abs() < 1e-15, "{m}");
        // v2 = b2 (1 - b2) g^2 + (1 - b2) g^2
        let v = state.second_moment(0)[0];
        let expected_v = (0.999 * 0.001 + 0.001) * g * g;
        assert!((v - expected_v).abs() < 1e-15, "{v}");
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut params = vec![
            Param::new("enc.0.weight", Tensor::<f64>::zeros(&[2])),
            Param::new("head.weight", Tensor::zeros(&[1])),
        ];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = [Tensor::ones(&[2]), Tensor::full(&[1], f64::NAN)];
        let err = adam_step(&mut params, &grads, &mut state, 1e-4).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 0);
    }
}
