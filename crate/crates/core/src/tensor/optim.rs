use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-5 }
    }
}

/// Moment estimates keyed by parameter name, created on first use.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub step_count: u64,
    pub hyper: AdamWHyper,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self { step_count: 0, hyper, moments: BTreeMap::new() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|(m, _)| m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|(_, v)| v.as_slice())
    }
}

/// One AdamW update with decoupled weight decay.
///
/// Every entry of `grads` must name a parameter of the same shape. Nothing is
/// modified unless all gradients are finite and shape-compatible.
pub fn adamw_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut AdamWState<T>,
) -> Result<()> {
    for g in grads.iter() {
        let p = params.get(&g.name)?;
        if p.shape() != g.tensor.shape() {
            return Err(Error::shape(format!(
                "gradient {} has shape {:?}, parameter {:?}",
                g.name,
                g.tensor.shape(),
                p.shape()
            )));
        }
        g.tensor.ensure_finite(&format!("gradient of {}", g.name))?;
    }

    state.step_count += 1;
    let h = state.hyper;
    let t = state.step_count as i32;
    let lr = T::of(h.lr);
    let b1 = T::of(h.beta1);
    let b2 = T::of(h.beta2);
    let eps = T::of(h.epsilon);
    let decay = T::one() - lr * T::of(h.weight_decay);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    for g in grads.iter() {
        let n = g.tensor.len();
        let (m, v) = state.moments.entry(g.name.clone()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let theta = params.get_mut(&g.name)?.data_mut();
        for i in 0..n {
            let gi = g.tensor.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = theta[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTag;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("theta", ParamTag::Aggregatable, Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        p
    }

    /// Independent scalar AdamW following the textbook update order.
    fn reference_trajectory(theta0: f64, hyper: AdamWHyper, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = vec![th];
        for t in 1..=steps {
            let g = grad(th);
            th -= hyper.lr * hyper.weight_decay * th;
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
            let mh = m / (1.0 - hyper.beta1.powi(t as i32));
            let vh = v / (1.0 - hyper.beta2.powi(t as i32));
            th -= hyper.lr * mh / (vh.sqrt() + hyper.epsilon);
            out.push(th);
        }
        out
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let hyper = AdamWHyper { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut p = single(2.0);
        let mut st = AdamWState::new(hyper);
        adamw_step(&mut p, &single(0.0), &mut st).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let hyper = AdamWHyper { lr: 0.5, weight_decay: 0.0, ..Default::default() };
        let mut p = single(-1.25);
        let mut st = AdamWState::new(hyper);
        for _ in 0..5 {
            adamw_step(&mut p, &single(0.0), &mut st).unwrap();
        }
        assert_eq!(p, single(-1.25));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let hyper = AdamWHyper { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut p = single(0.0);
        let mut st = AdamWState::new(hyper);
        adamw_step(&mut p, &single(1.0), &mut st).unwrap();
        let got = p.get("theta").unwrap().data()[0];
        assert!((got + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn quadratic_descent_matches_reference_and_shrinks() {
        let hyper = AdamWHyper { lr: 0.1, ..Default::default() };
        let want = reference_trajectory(1.0, hyper, 10, |th| 2.0 * th);
        let mut p = single(1.0);
        let mut st = AdamWState::new(hyper);
        let mut got = vec![1.0];
        for _ in 0..10 {
            let th = p.get("theta").unwrap().data()[0];
            adamw_step(&mut p, &single(2.0 * th), &mut st).unwrap();
            got.push(p.get("theta").unwrap().data()[0]);
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(want.windows(2).all(|w| w[1].abs() < w[0].abs()));
        assert!(st.second_moment("theta").unwrap()[0] >= 0.0);
    }

    #[test]
    fn rejects_bad_gradients_without_mutating() {
        let mut p = single(1.0);
        let mut st = AdamWState::new(AdamWHyper::default());
        assert!(matches!(adamw_step(&mut p, &single(f64::NAN), &mut st), Err(Error::NonFinite(_))));
        let mut wrong = ParameterSet::new();
        wrong.insert("theta", ParamTag::Aggregatable, Tensor::zeros(&[2])).unwrap();
        assert!(matches!(adamw_step(&mut p, &wrong, &mut st), Err(Error::Shape(_))));
        assert_eq!(st.step_count, 0);
        assert_eq!(p, single(1.0));
    }
}
