//! Parameter-space optimizers: AdamW (bias-corrected, decoupled weight
//! decay) and SGD with momentum.

use crate::error::{Result, VoxError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWParams<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> Default for AdamWParams<T> {
    fn default() -> Self {
        AdamWParams {
            lr: T::from_f64(1e-4),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(0.01),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SgdParams<T: Scalar> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> Default for SgdParams<T> {
    fn default() -> Self {
        SgdParams {
            lr: T::from_f64(0.01),
            momentum: T::from_f64(0.9),
            weight_decay: T::zero(),
        }
    }
}

enum Algo<T: Scalar> {
    AdamW(AdamWParams<T>),
    Sgd(SgdParams<T>),
}

/// Moment/velocity slots plus a step counter. Slots are allocated lazily on
/// the first `apply`, then shape-checked on every later call.
pub struct OptimizerState<T: Scalar> {
    algo: Algo<T>,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn adamw(hp: AdamWParams<T>) -> Self {
        OptimizerState {
            algo: Algo::AdamW(hp),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(hp: SgdParams<T>) -> Self {
        OptimizerState {
            algo: Algo::Sgd(hp),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: T) {
        match &mut self.algo {
            Algo::AdamW(hp) => hp.lr = lr,
            Algo::Sgd(hp) => hp.lr = lr,
        }
    }

    fn ensure_slots(&mut self, params: &[&mut Tensor<T>], want_second: bool) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if want_second {
                self.second = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            }
            return Ok(());
        }
        if self.first.len() != params.len() {
            return Err(VoxError::usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (slot, p) in self.first.iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(VoxError::shape(format!(
                    "optimizer slot shape {:?} does not match parameter {:?}",
                    slot.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    /// One optimizer step over parallel slices. `names` is used only for
    /// diagnostics; any non-finite gradient aborts naming the offender.
    pub fn apply(
        &mut self,
        names: &[&str],
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != names.len() {
            return Err(VoxError::usage(format!(
                "optimizer apply: {} params, {} grads, {} names",
                params.len(),
                grads.len(),
                names.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(VoxError::shape(format!(
                    "gradient shape {:?} does not match parameter '{}' {:?}",
                    g.shape(),
                    names[i],
                    params[i].shape()
                )));
            }
            if !g.all_finite() {
                return Err(VoxError::numerical(format!(
                    "non-finite gradient for parameter '{}'",
                    names[i]
                )));
            }
        }
        match self.algo {
            Algo::AdamW(hp) => {
                self.ensure_slots(params, true)?;
                self.step += 1;
                let t = self.step as i32;
                let one = T::one();
                let bc1 = one - hp.beta1.powi(t);
                let bc2 = one - hp.beta2.powi(t);
                for i in 0..params.len() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let p = params[i].data_mut();
                    let g = grads[i].data();
                    for j in 0..p.len() {
                        p[j] -= hp.lr * hp.weight_decay * p[j];
                        m[j] = hp.beta1 * m[j] + (one - hp.beta1) * g[j];
                        v[j] = hp.beta2 * v[j] + (one - hp.beta2) * g[j] * g[j];
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        p[j] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
                    }
                }
            }
            Algo::Sgd(hp) => {
                self.ensure_slots(params, false)?;
                self.step += 1;
                for i in 0..params.len() {
                    let vel = self.first[i].data_mut();
                    let p = params[i].data_mut();
                    let g = grads[i].data();
                    for j in 0..p.len() {
                        let force = g[j] + hp.weight_decay * p[j];
                        vel[j] = hp.momentum * vel[j] + force;
                        p[j] -= hp.lr * vel[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut st = OptimizerState::adamw(AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::<f64>::default()
        });
        let mut t = Tensor::from_vec(&[3], vec![0.5, -1.2, 2.0]).unwrap();
        let g = [Tensor::zeros(&[3])];
        let before = t.data().to_vec();
        st.apply(&["w"], &mut [&mut t], &g).unwrap();
        assert_eq!(t.data(), before.as_slice());
    }

    #[test]
    fn first_step_closed_form() {
        let mut st = OptimizerState::adamw(AdamWParams {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWParams::<f64>::default()
        });
        let mut t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = [Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        st.apply(&["w"], &mut [&mut t], &g).unwrap();
        // bias-corrected m_hat / sqrt(v_hat) == 1, so the step is -lr
        assert!((t.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn hundred_steps_shrink_quadratic() {
        let mut st = OptimizerState::adamw(AdamWParams {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWParams::<f64>::default()
        });
        let mut t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        for _ in 0..100 {
            let theta = t.data()[0];
            let g = [Tensor::from_vec(&[1], vec![2.0 * theta]).unwrap()];
            st.apply(&["theta"], &mut [&mut t], &g).unwrap();
        }
        assert!(t.data()[0].abs() < 0.5, "theta = {}", t.data()[0]);
        assert_eq!(st.step_count(), 100);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut st = OptimizerState::adamw(AdamWParams::<f64>::default());
        let mut t = Tensor::zeros(&[2]);
        let g = [Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap()];
        let err = st
            .apply(&["encoder.block0.attn.q.weight"], &mut [&mut t], &g)
            .unwrap_err();
        assert!(err.to_string().contains("encoder.block0.attn.q.weight"), "{err}");
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut st = OptimizerState::sgd(SgdParams::<f64> {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        });
        let mut t = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = [Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        st.apply(&["w"], &mut [&mut t], &g).unwrap();
        assert!((t.data()[0] + 0.1).abs() < 1e-12);
        st.apply(&["w"], &mut [&mut t], &g).unwrap();
        // second velocity = 0.5*1 + 1 = 1.5 -> total -0.1 - 0.15
        assert!((t.data()[0] + 0.25).abs() < 1e-12);
    }
}
