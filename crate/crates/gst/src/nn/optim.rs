use serde::{Deserialize, Serialize};

use super::{Parameters, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to tensors of rank ≥ 2.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with per-parameter moment buffers kept in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn update<P: Parameters<T> + ?Sized>(&mut self, model: &mut P, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f(c.beta1), T::from_f(c.beta2));
        let (one_b1, one_b2) = (T::from_f(1.0 - c.beta1), T::from_f(1.0 - c.beta2));
        let step_size = T::from_f(lr / bc1);
        let inv_bc2 = T::from_f(1.0 / bc2);
        let eps = T::from_f(c.eps);
        let decay = T::from_f(1.0 - lr * c.weight_decay);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |_, p| {
            if ms.len() <= idx {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            let apply_decay = p.shape.len() >= 2 && c.weight_decay > 0.0;
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                if apply_decay {
                    p.value[i] *= decay;
                }
                p.value[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real, P: Parameters<T> + ?Sized>(model: &P) -> f64 {
    let mut sq = 0.0f64;
    model.visit(&mut |_, p| {
        sq += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm measured before clipping.
pub fn clip_grad_norm<T: Real, P: Parameters<T> + ?Sized>(model: &mut P, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm.is_finite() && norm > max_norm {
        model.scale_grads(T::from_f(max_norm / (norm + 1e-12)));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quad {
        p: Param<f64>,
    }

    impl Parameters<f64> for Quad {
        fn visit(&self, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("p", &self.p)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("p", &mut self.p)
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step has magnitude lr·sign(g).
        let mut q = Quad { p: Param::zeros(&[3]) };
        q.p.grad = vec![2.0, -0.5, 0.0];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.update(&mut q, 0.1);
        assert!((q.p.value[0] + 0.1).abs() < 1e-6);
        assert!((q.p.value[1] - 0.1).abs() < 1e-6);
        assert_eq!(q.p.value[2], 0.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quad { p: Param::filled(&[2], 3.0) };
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..2000 {
            q.p.grad = q.p.value.iter().map(|v| 2.0 * (v - 1.0)).collect();
            opt.update(&mut q, 0.01);
        }
        assert!(q.p.value.iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut q = Quad { p: Param::zeros(&[2]) };
        q.p.grad = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut q, 1.0), 5.0);
        assert!((grad_norm(&q) - 1.0).abs() < 1e-9);
        q.p.grad = vec![0.3, 0.4];
        clip_grad_norm(&mut q, 1.0);
        assert_eq!(q.p.grad, vec![0.3, 0.4]);
    }
}
