//! Adam over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update. `params` and `grads` must list the same tensors in the
    /// same order on every call.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        assert_eq!(params.len(), grads.len(), "params/grads tensor count");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - (beta1 as f64).powi(self.t);
        let bc2 = 1.0 - (beta2 as f64).powi(self.t);
        let step_size = (lr as f64 * bc2.sqrt() / bc1) as f32;
        let eps_hat = (eps as f64 * bc2.sqrt()) as f32;
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.len(), g.len(), "param/grad length");
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
            offset += p.len();
        }
        assert_eq!(offset, self.m.len(), "Adam state size");
    }
}

/// Global L2 norm over several tensors, accumulated in f64.
pub fn global_norm(grads: &[&[f32]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: Vec<&mut [f32]>, max_norm: f32) -> f64 {
    let norm = {
        let view: Vec<&[f32]> = grads.iter().map(|g| &**g).collect();
        global_norm(&view)
    };
    if norm > max_norm as f64 && norm > 0.0 {
        let s = (max_norm as f64 / norm) as f32;
        for g in grads {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
