use crate::net::{Grads, Param};

/// Adam with bias correction. One instance per update group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Param], betas: (f64, f64), eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0f32; p.data.len()]).collect();
        Self { beta1: betas.0, beta2: betas.1, eps, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}
