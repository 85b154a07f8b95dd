use super::network::NetworkParams;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam moments, mirroring the parameter tensors, plus the step counter
/// and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub const DEFAULT_LR: f64 = 0.001;

    pub fn new(params: &NetworkParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.dims()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: Self::DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    /// One elementwise update of a flat parameter block at step `t`
    /// (already incremented).
    pub fn update_slice(&self, t: u64, theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T]) {
        let b1 = T::lift(self.beta1);
        let b2 = T::lift(self.beta2);
        let c1 = T::lift(1.0 - self.beta1);
        let c2 = T::lift(1.0 - self.beta2);
        let bc1 = T::lift(1.0 - self.beta1.powf(t as f64));
        let bc2 = T::lift(1.0 - self.beta2.powf(t as f64));
        let lr = T::lift(self.lr);
        let eps = T::lift(self.eps);
        for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Applies one Adam step. A non-finite gradient aborts before anything is
/// modified.
pub fn adam_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &NetworkParams<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != state.m.len() {
        return Err(Error::argument("optimizer state does not match the parameters"));
    }
    for ((name, g), m) in grad_tensors.iter().zip(&state.m) {
        if g.dims() != m.dims() {
            return Err(Error::argument(format!(
                "gradient {name} has extents {:?}, optimizer expects {:?}",
                g.dims(),
                m.dims()
            )));
        }
        if let Some(index) = g.first_non_finite() {
            return Err(Error::NonFinite {
                tensor: name.clone(),
                index,
            });
        }
    }
    state.t += 1;
    let t = state.t;
    let mut m = std::mem::take(&mut state.m);
    let mut v = std::mem::take(&mut state.v);
    for (((p, (_, g)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad_tensors)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        state.update_slice(t, p.data_mut(), g.data(), m.data_mut(), v.data_mut());
    }
    state.m = m;
    state.v = v;
    Ok(())
}
