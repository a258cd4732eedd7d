//! Adam with decoupled weight decay and global-norm gradient clipping.
//!
//! Updates apply only to parameters touched by the backward pass, so a loss
//! term with zero weight leaves its parameter group bit-unchanged.

use ndarray::Array2;

use crate::tape::{Grads, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    step_count: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![None; num_params],
            v: vec![None; num_params],
            step_count: vec![0; num_params],
        }
    }

    /// Clips `grads` in place to the configured global norm and applies one
    /// update to every touched parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut Grads) {
        let norm = grads.global_norm();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        let c = self.cfg;
        let touched: Vec<usize> = grads.touched().map(|(id, _)| id).collect();
        for pid in touched {
            let g = grads.get(pid).unwrap().clone();
            let shape = g.dim();
            let m = self.m[pid].get_or_insert_with(|| Array2::zeros(shape));
            let v = self.v[pid].get_or_insert_with(|| Array2::zeros(shape));
            self.step_count[pid] += 1;
            let t = self.step_count[pid] as i32;
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mi, &gi| {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vi, &gi| {
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            });
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let p = params.get_mut(pid);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *pi -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pi);
                });
        }
    }
}
