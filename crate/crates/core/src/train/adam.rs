use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam moments",
                    p.value.shape(),
                    if m.shape() != p.value.shape() { m.shape() } else { v.shape() },
                ));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam step using the gradients stored in `params`.
pub fn adam_apply<T: Element>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    state.check(params)?;
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.data_mut();
        for (i, &g) in p.grad.data().iter().enumerate() {
            let mi = b1 * m.data()[i] + one_b1 * g;
            let vi = b2 * v.data()[i] + one_b2 * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi * inv_bc1;
            let v_hat = vi * inv_bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("theta", Tensor::new(vec![n], values).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(vec![1.0, -2.0]);
        let mut st = AdamState::new(&s);
        adam_apply(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_hand_value() {
        let mut s = store(vec![0.0]);
        s.iter_mut().next().unwrap().grad.data_mut()[0] = 1.0;
        let mut st = AdamState::new(&s);
        adam_apply(&mut s, &mut st, 0.1).unwrap();
        let got = s.iter().next().unwrap().value.data()[0];
        assert!((got - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn quadratic_closed_form_two_steps() {
        // L = 0.5·a·θ², g = a·θ
        let a = 3.0;
        let mut s = store(vec![0.7]);
        let mut st = AdamState::new(&s);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let (mut theta, mut m, mut v) = (0.7f64, 0.0, 0.0);
        for t in 1..=2 {
            let g = a * s.iter().next().unwrap().value.data()[0];
            s.iter_mut().next().unwrap().grad.data_mut()[0] = g;
            adam_apply(&mut s, &mut st, lr).unwrap();
            let g = a * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            assert!((s.iter().next().unwrap().value.data()[0] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut s = store(vec![0.0, 1.0]);
        let mut st = AdamState::new(&store(vec![0.0]));
        assert!(adam_apply(&mut s, &mut st, 0.1).is_err());
    }
}
