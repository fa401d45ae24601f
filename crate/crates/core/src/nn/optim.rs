use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64` so that the
/// update sequence does not depend on the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<S: Scalar>(store: &ParamStore<S>, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: store.values().iter().map(|p| vec![0.0; p.len()]).collect(),
            v: store.values().iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter for which `trainable(id)` holds.
    /// Frozen parameters are left bit-identical and their moments untouched.
    pub fn step<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Matrix<S>],
        lr: f64,
        trainable: impl Fn(usize) -> bool,
    ) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        if lr == 0.0 {
            return;
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            if !trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..p.data.len() {
                let gi = g.data[i].f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut x = p.data[i].f64();
                x -= lr * weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + eps);
                p.data[i] = S::of(x);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Matrix<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = S::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        for _ in 0..2000 {
            let g = vec![Matrix::from_vec(
                1,
                2,
                s.get(0).data.iter().map(|x| 2.0 * x).collect(),
            )];
            opt.step(&mut s, &g, 0.01, |_| true);
        }
        assert!(
            s.get(0).data.iter().all(|x| x.abs() < 1e-3),
            "{:?}",
            s.get(0).data
        );
    }

    #[test]
    fn frozen_and_zero_lr_leave_parameters_unchanged() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Matrix::filled(2, 2, 1.0));
        s.add("b", Matrix::filled(1, 2, 1.0));
        let g = vec![Matrix::filled(2, 2, 1.0), Matrix::filled(1, 2, 1.0)];
        let before = s.clone();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &g, 0.0, |_| true);
        assert_eq!(s, before);
        opt.step(&mut s, &g, 0.1, |id| id == 1);
        assert_eq!(s.get(0), before.get(0));
        assert_ne!(s.get(1), before.get(1));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![Matrix::<f64>::filled(1, 2, 3.0), Matrix::filled(1, 1, 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 34f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().map(|m| m.sq_norm()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
