use crate::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction, no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamStore<S>, cfg: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients; does not clear them.
    pub fn step(&mut self, params: &mut ParamStore<S>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (ob1, ob2) = (S::lit(1.0 - c.beta1), S::lit(1.0 - c.beta2));
        let step_size = S::lit(c.lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let eps = S::lit(c.eps);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = params.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.value_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                w[j] = w[j] - step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
