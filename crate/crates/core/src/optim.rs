//! Adam for the generator, Nesterov SGD for the quantized model.

use crate::nn::ParamRole;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from each parameter's gradient slot; parameters
    /// without a gradient are left alone.
    pub fn step<T: Real>(&mut self, params: Vec<(ParamRole, &mut Tensor<T>)>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in params.into_iter().enumerate() {
            let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w = T::of(w.to_f64() - update);
            }
        }
    }
}

/// SGD with Nesterov momentum; weight decay applies to [`ParamRole::Weight`] only.
#[derive(Clone, Debug)]
pub struct NesterovSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Vec<f64>>,
}

impl NesterovSgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, buf: Vec::new() }
    }

    pub fn step<T: Real>(&mut self, params: Vec<(ParamRole, &mut Tensor<T>)>) {
        if self.buf.is_empty() {
            self.buf = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        }
        for (i, (role, p)) in params.into_iter().enumerate() {
            let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
            let wd = if role == ParamRole::Weight { self.weight_decay } else { 0.0 };
            let buf = &mut self.buf[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let d = g[j].to_f64() + wd * w.to_f64();
                buf[j] = self.momentum * buf[j] + d;
                let update = d + self.momentum * buf[j];
                *w = T::of(w.to_f64() - self.lr * update);
            }
        }
    }
}
