use crate::tensor::{ParamStore, Scalar};

use super::config::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// Bias-corrected Adam update of every parameter from its accumulated
    /// gradient. Moments are kept in the parameter's precision; the
    /// arithmetic runs in f64.
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>) {
        for (_, p) in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let grads = p.grad.data();
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grads[i].to_f64();
                let mi = self.beta1 * m[i].to_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].to_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                w[i] = T::lit(w[i].to_f64() - update);
            }
        }
    }
}
