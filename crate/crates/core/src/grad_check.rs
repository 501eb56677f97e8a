//! Central finite-difference gradient checking.
//!
//! All backprop in this crate is hand-derived, so every loss comes with a
//! numerical cross-check: perturb one coordinate by +/- eps, difference the
//! loss, compare against the analytic gradient at randomly chosen
//! coordinates.

use rand::Rng;

/// Perturbation size. Losses here are smooth with O(1) curvature, so 1e-5
/// balances truncation against cancellation in f64.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Anything exposing a flat mutable view of its parameters.
pub trait FlatParams {
    fn flat_len(&self) -> usize;
    fn flat_get(&self, i: usize) -> f64;
    fn flat_set(&mut self, i: usize, v: f64);
}

impl FlatParams for crate::policy::Policy {
    fn flat_len(&self) -> usize {
        self.params().n_params()
    }
    fn flat_get(&self, i: usize) -> f64 {
        self.params().flat_get(i)
    }
    fn flat_set(&mut self, i: usize, v: f64) {
        self.params_mut().flat_set(i, v);
    }
}

/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps, restoring the parameter.
pub fn central_difference<P: FlatParams>(
    params: &mut P,
    f: &mut dyn FnMut(&P) -> f64,
    coord: usize,
    eps: f64,
) -> f64 {
    let orig = params.flat_get(coord);
    params.flat_set(coord, orig + eps);
    let f_plus = f(params);
    params.flat_set(coord, orig - eps);
    let f_minus = f(params);
    params.flat_set(coord, orig);
    (f_plus - f_minus) / (2.0 * eps)
}

/// Relative error with a floor, so coordinates where both gradients are
/// essentially zero do not divide noise by noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_coord: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err < tol
    }
}

/// Compares the analytic gradient against central differences at the given
/// coordinates.
pub fn check_coords<P: FlatParams>(
    params: &mut P,
    f: &mut dyn FnMut(&P) -> f64,
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_err: 0.0,
        worst_coord: 0,
    };
    for &c in coords {
        let numeric = central_difference(params, f, c, eps);
        let e = rel_err(analytic[c], numeric);
        report.checked += 1;
        if e > report.worst_rel_err {
            report.worst_rel_err = e;
            report.worst_coord = c;
        }
    }
    report
}

/// `count` distinct coordinates drawn without replacement (or all of them,
/// if there are fewer than `count`).
pub fn random_coords(n_params: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n_params <= count {
        return (0..n_params).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        picked.insert(rng.gen_range(0..n_params));
    }
    picked.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{task_from_digits, Difficulty, TokenMdpState, Vocab};
    use crate::policy::{Arch, Policy, PolicyConfig};

    #[test]
    fn log_prob_gradient_matches_finite_differences_mlp() {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let task = task_from_digits(&[1, 0], &diff, &vocab);
        let state = TokenMdpState::initial(&task);
        let config = PolicyConfig {
            arch: Arch::Mlp,
            window: 4,
            d_emb: 3,
            d_hidden: 6,
        };
        let mut policy = Policy::new(vocab, config, 7).unwrap();
        let action = 2u32;
        let snap = policy.snapshot();
        let analytic = snap.grad_log_prob(&state, action).flatten(snap.params());
        let mut rng = crate::rng::stream(1234, &[]);
        let coords = random_coords(policy.flat_len(), 64, &mut rng);
        let mut f = |p: &Policy| p.snapshot().log_prob(&state, action);
        let report = check_coords(&mut policy, &mut f, &analytic, &coords, DEFAULT_EPS);
        assert!(
            report.passes(1e-5),
            "worst rel err {} at coord {}",
            report.worst_rel_err,
            report.worst_coord
        );
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences_tabular() {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let task = task_from_digits(&[0, 1], &diff, &vocab);
        let state = TokenMdpState::initial(&task);
        let config = PolicyConfig {
            arch: Arch::Tabular,
            window: 4,
            d_emb: 0,
            d_hidden: 0,
        };
        let mut policy = Policy::new(vocab, config, 0).unwrap();
        policy.materialize_state(&state);
        if let crate::policy::PolicyParams::Tabular(t) = policy.params_mut() {
            let ctx = state.context(4, vocab.pad());
            *t.row_mut(&ctx) = vec![0.4, -0.2, 1.3, 0.0];
        }
        let snap = policy.snapshot();
        let analytic = snap.grad_log_prob(&state, 1).flatten(snap.params());
        let coords: Vec<usize> = (0..policy.flat_len()).collect();
        let mut f = |p: &Policy| p.snapshot().log_prob(&state, 1);
        let report = check_coords(&mut policy, &mut f, &analytic, &coords, DEFAULT_EPS);
        assert!(
            report.passes(1e-5),
            "worst rel err {} at coord {}",
            report.worst_rel_err,
            report.worst_coord
        );
    }

    #[test]
    fn perturbing_one_mlp_parameter_moves_logits_like_the_jacobian() {
        // Columns of the logit Jacobian, probed one parameter at a time:
        // compare d(logit_a)/d(theta_i) obtained from backprop of a one-hot
        // logit gradient against finite differences of the logits.
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let task = task_from_digits(&[1, 1], &diff, &vocab);
        let state = TokenMdpState::initial(&task);
        let config = PolicyConfig {
            arch: Arch::Mlp,
            window: 4,
            d_emb: 3,
            d_hidden: 5,
        };
        let mut policy = Policy::new(vocab, config, 13).unwrap();
        let snap = policy.snapshot();
        for a in 0..4usize {
            let fwd = snap.forward(&state);
            let mut onehot = vec![0.0; 4];
            onehot[a] = 1.0;
            let mut g = snap.zero_grad();
            snap.backward_logits(&fwd, &onehot, &mut g);
            let analytic = g.flatten(snap.params());
            let mut rng = crate::rng::stream(99 + a as u64, &[]);
            let coords = random_coords(policy.flat_len(), 16, &mut rng);
            let mut f = |p: &Policy| p.snapshot().forward(&state).logits[a];
            let report = check_coords(&mut policy, &mut f, &analytic, &coords, 1e-4);
            assert!(
                report.worst_rel_err < 1e-4,
                "logit {a}: worst rel err {} at coord {}",
                report.worst_rel_err,
                report.worst_coord
            );
        }
    }
}
