//! Adam with bias correction, stepping a [`ParamSet`] in its fixed order.

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

/// Plain-data snapshot of the optimizer for checkpointing.
pub struct AdamState<S> {
    pub t: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over every parameter. Errors (naming the parameter) if any
    /// gradient is missing; the step counter advances only on success.
    pub fn step(&mut self, params: &ParamSet<S>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, param set has {}",
                self.m.len(),
                params.len()
            )));
        }
        // Collect gradients first so a missing one leaves all state untouched.
        let mut grads: Vec<Vec<S>> = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            match p.grad() {
                Some(g) => grads.push(g),
                None => return Err(Error::MissingGrad(name.to_string())),
            }
        }

        self.t += 1;
        let b1 = S::lit(self.beta1);
        let b2 = S::lit(self.beta2);
        let one = S::one();
        let eps = S::lit(self.eps);
        let bc1 = S::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::lit(self.lr);

        for (i, (_, p)) in params.iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.map_data_mut(|data| {
                for j in 0..data.len() {
                    m[j] = b1 * m[j] + (one - b1) * g[j];
                    v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState<S> {
        AdamState {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Restore a snapshot; moment shapes must match `params`.
    pub fn load_state(&mut self, state: AdamState<S>, params: &ParamSet<S>) -> Result<()> {
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer snapshot tracks {} parameters, param set has {}",
                state.m.len(),
                params.len()
            )));
        }
        for ((mv, vv), (name, p)) in state.m.iter().zip(&state.v).zip(params.iter()) {
            if mv.len() != p.numel() || vv.len() != p.numel() {
                return Err(Error::invalid(format!(
                    "optimizer snapshot for '{name}' has {} elements, parameter has {}",
                    mv.len(),
                    p.numel()
                )));
            }
        }
        self.t = state.t;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }
}

/// Free-function spelling of [`Adam::step`] for call sites that read better
/// as `adam_step(&mut opt, &params)`.
pub fn adam_step<S: Scalar>(opt: &mut Adam<S>, params: &ParamSet<S>) -> Result<()> {
    opt.step(params)
}

impl<S: Scalar> std::fmt::Debug for Adam<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Adam")
            .field("lr", &self.lr)
            .field("t", &self.t)
            .field("params", &self.m.len())
            .finish()
    }
}

#[allow(dead_code)]
fn _assert_send_sync<S: Scalar>() {
    fn check<T: Send>() {}
    check::<Adam<S>>();
    check::<Tensor<S>>();
}
