//! Decoupled weight-decay Adam over [`Var`]s, one fused loop per tensor.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

struct Slot {
    var: Var,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    slots: Vec<Slot>,
    params: AdamWParams,
    t: i32,
}

fn update<T: WithDType>(
    var: &Var,
    grad: &Tensor,
    m: &mut [f64],
    v: &mut [f64],
    p: &AdamWParams,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    let mut theta = var.as_tensor().flatten_all()?.to_vec1::<T>()?;
    let g = grad.flatten_all()?.to_vec1::<T>()?;
    let decay = 1.0 - p.lr * p.weight_decay;
    let (b1, b2) = (p.beta1, p.beta2);
    let rate = p.lr / bc1;
    let inv_bc2 = 1.0 / bc2.sqrt();
    for (((x, &gi), mi), vi) in theta.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let gi = gi.to_f64();
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let step = rate * *mi / (vi.sqrt() * inv_bc2 + p.eps);
        *x = T::from_f64(x.to_f64() * decay - step);
    }
    var.set(&Tensor::from_vec(theta, var.dims(), var.device())?)?;
    Ok(())
}

impl AdamW {
    pub fn new(vars: Vec<Var>, params: AdamWParams) -> Self {
        let slots = vars
            .into_iter()
            .map(|var| {
                let n = var.elem_count();
                Slot { var, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        Self { slots, params, t: 0 }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    /// One update; variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.params.beta1.powi(self.t);
        let bc2 = 1.0 - self.params.beta2.powi(self.t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            match slot.var.dtype() {
                DType::F64 => update::<f64>(&slot.var, g, &mut slot.m, &mut slot.v, &self.params, bc1, bc2)?,
                _ => update::<f32>(&slot.var, &g.to_dtype(DType::F32)?, &mut slot.m, &mut slot.v, &self.params, bc1, bc2)?,
            }
        }
        Ok(())
    }
}
