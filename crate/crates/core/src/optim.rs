//! Adam with a fixed step size and no weight decay.
//!
//! Dense state for MLP parameters; for the tabular policy the moments are
//! kept per context row and materialize lazily, mirroring how the logit
//! table itself grows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grad_check::FlatParams;
use crate::policy::{Grad, Policy, PolicyParams};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Moments {
    Dense { m: Vec<f64>, v: Vec<f64> },
    Sparse { rows: BTreeMap<Vec<u32>, (Vec<f64>, Vec<f64>)> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    moments: Moments,
}

impl Adam {
    pub fn dense(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            t: 0,
            moments: Moments::Dense {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            },
        }
    }

    pub fn sparse(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: Moments::Sparse {
                rows: BTreeMap::new(),
            },
        }
    }

    pub fn for_policy(cfg: AdamConfig, policy: &Policy) -> Self {
        match policy.params() {
            PolicyParams::Mlp(m) => Self::dense(cfg, m.n_params()),
            PolicyParams::Tabular(_) => Self::sparse(cfg),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    fn coord_update(cfg: &AdamConfig, t: u64, m: &mut f64, v: &mut f64, g: f64) -> f64 {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / (1.0 - cfg.beta1.powi(t as i32));
        let v_hat = *v / (1.0 - cfg.beta2.powi(t as i32));
        cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)
    }

    /// One descent step on a policy; the gradient must be the gradient of a
    /// loss (the quantity to minimize).
    pub fn step_policy(&mut self, policy: &mut Policy, grad: &Grad) {
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg;
        match (policy.params_mut(), grad, &mut self.moments) {
            (PolicyParams::Mlp(p), Grad::Dense(g), Moments::Dense { m, v }) => {
                assert_eq!(g.len(), p.n_params(), "gradient/parameter length mismatch");
                for i in 0..g.len() {
                    let delta = Self::coord_update(&cfg, t, &mut m[i], &mut v[i], g[i]);
                    p.flat_set(i, p.flat_get(i) - delta);
                }
            }
            (PolicyParams::Tabular(p), Grad::Sparse(rows), Moments::Sparse { rows: mv }) => {
                let width = p.vocab_size();
                for (ctx, g_row) in rows {
                    let row = p.row_mut(ctx);
                    let (m_row, v_row) = mv
                        .entry(ctx.clone())
                        .or_insert_with(|| (vec![0.0; width], vec![0.0; width]));
                    for i in 0..width {
                        let delta =
                            Self::coord_update(&cfg, t, &mut m_row[i], &mut v_row[i], g_row[i]);
                        row[i] -= delta;
                    }
                }
            }
            _ => panic!("optimizer, parameter and gradient kinds must agree"),
        }
    }

    /// One descent step on any dense flat-parameter object (the value net).
    pub fn step_flat<P: FlatParams>(&mut self, params: &mut P, grad: &[f64]) {
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg;
        match &mut self.moments {
            Moments::Dense { m, v } => {
                assert_eq!(grad.len(), params.flat_len());
                for i in 0..grad.len() {
                    let delta = Self::coord_update(&cfg, t, &mut m[i], &mut v[i], grad[i]);
                    params.flat_set(i, params.flat_get(i) - delta);
                }
            }
            Moments::Sparse { .. } => panic!("step_flat needs dense moments"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic(Vec<f64>);

    impl FlatParams for Quadratic {
        fn flat_len(&self) -> usize {
            self.0.len()
        }
        fn flat_get(&self, i: usize) -> f64 {
            self.0[i]
        }
        fn flat_set(&mut self, i: usize, v: f64) {
            self.0[i] = v;
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Quadratic(vec![3.0, -2.0, 0.5]);
        let mut opt = Adam::dense(AdamConfig::with_lr(0.05), 3);
        for _ in 0..2000 {
            let grad: Vec<f64> = x.0.iter().map(|v| 2.0 * v).collect();
            opt.step_flat(&mut x, &grad);
        }
        for v in &x.0 {
            assert!(v.abs() < 1e-3, "did not converge: {:?}", x.0);
        }
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut x = Quadratic(vec![1.0]);
        let mut opt = Adam::dense(AdamConfig::with_lr(0.1), 1);
        opt.step_flat(&mut x, &[0.004]);
        assert!((x.0[0] - 0.9).abs() < 1e-6, "got {}", x.0[0]);
    }
}
