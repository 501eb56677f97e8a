//! Parameter-gradient container shared by policies and the value network.
//!
//! MLP gradients are dense vectors in the canonical flat layout of their
//! network. Tabular gradients are sparse row maps keyed by context, since
//! the logit table only materializes contexts as they are touched.

use std::collections::BTreeMap;

/// Gradient with the same shape as the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub enum Grad {
    Dense(Vec<f64>),
    /// Context -> gradient over that context's logit row.
    Sparse(BTreeMap<Vec<u32>, Vec<f64>>),
}

impl Grad {
    pub fn dense(len: usize) -> Self {
        Grad::Dense(vec![0.0; len])
    }

    pub fn sparse() -> Self {
        Grad::Sparse(BTreeMap::new())
    }

    /// `self += a * other`. Shapes (and variants) must match.
    pub fn axpy(&mut self, a: f64, other: &Grad) {
        match (self, other) {
            (Grad::Dense(x), Grad::Dense(y)) => {
                assert_eq!(x.len(), y.len(), "gradient length mismatch");
                for (xi, yi) in x.iter_mut().zip(y) {
                    *xi += a * yi;
                }
            }
            (Grad::Sparse(x), Grad::Sparse(y)) => {
                for (ctx, row) in y {
                    let dst = x
                        .entry(ctx.clone())
                        .or_insert_with(|| vec![0.0; row.len()]);
                    for (d, s) in dst.iter_mut().zip(row) {
                        *d += a * s;
                    }
                }
            }
            _ => panic!("cannot mix dense and sparse gradients"),
        }
    }

    pub fn scale(&mut self, a: f64) {
        match self {
            Grad::Dense(x) => x.iter_mut().for_each(|v| *v *= a),
            Grad::Sparse(x) => x
                .values_mut()
                .for_each(|row| row.iter_mut().for_each(|v| *v *= a)),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Grad::Dense(x) => x.iter().all(|v| v.is_finite()),
            Grad::Sparse(x) => x.values().all(|row| row.iter().all(|v| v.is_finite())),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let sq: f64 = match self {
            Grad::Dense(x) => x.iter().map(|v| v * v).sum(),
            Grad::Sparse(x) => x
                .values()
                .map(|row| row.iter().map(|v| v * v).sum::<f64>())
                .sum(),
        };
        sq.sqrt()
    }

    /// Flattens to the coordinate order used by `flat_get` on the matching
    /// parameter object. Sparse gradients align with the tabular table's
    /// row order; every gradient row must already be materialized there.
    pub fn flatten(&self, params: &super::PolicyParams) -> Vec<f64> {
        match (self, params) {
            (Grad::Dense(x), super::PolicyParams::Mlp(_)) => x.clone(),
            (Grad::Sparse(map), super::PolicyParams::Tabular(t)) => {
                let vocab = t.vocab_size();
                let mut out = Vec::with_capacity(t.n_params());
                for (ctx, _) in t.table.iter() {
                    match map.get(ctx) {
                        Some(row) => out.extend_from_slice(row),
                        None => out.extend(std::iter::repeat(0.0).take(vocab)),
                    }
                }
                let covered = map.keys().all(|k| t.table.contains_key(k));
                assert!(
                    covered,
                    "gradient touches contexts that are not materialized in the table"
                );
                out
            }
            _ => panic!("gradient kind does not match parameter kind"),
        }
    }

    /// Entry-wise maximum absolute difference; used by equivalence tests.
    pub fn max_abs_diff(&self, other: &Grad) -> f64 {
        match (self, other) {
            (Grad::Dense(x), Grad::Dense(y)) => {
                assert_eq!(x.len(), y.len());
                x.iter()
                    .zip(y)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            }
            (Grad::Sparse(x), Grad::Sparse(y)) => {
                let mut m: f64 = 0.0;
                let zero_row = |len: usize| vec![0.0; len];
                for (ctx, row) in x {
                    let other_row = y.get(ctx).cloned().unwrap_or_else(|| zero_row(row.len()));
                    for (a, b) in row.iter().zip(&other_row) {
                        m = m.max((a - b).abs());
                    }
                }
                for (ctx, row) in y {
                    if !x.contains_key(ctx) {
                        for b in row {
                            m = m.max(b.abs());
                        }
                    }
                }
                m
            }
            _ => panic!("cannot mix dense and sparse gradients"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_axpy() {
        let mut g = Grad::dense(3);
        g.axpy(2.0, &Grad::Dense(vec![1.0, 0.5, -1.0]));
        assert_eq!(g, Grad::Dense(vec![2.0, 1.0, -2.0]));
    }

    #[test]
    fn sparse_axpy_merges_rows() {
        let mut g = Grad::sparse();
        let mut other = BTreeMap::new();
        other.insert(vec![1, 2], vec![1.0, 2.0]);
        g.axpy(1.0, &Grad::Sparse(other.clone()));
        g.axpy(0.5, &Grad::Sparse(other));
        match g {
            Grad::Sparse(m) => assert_eq!(m[&vec![1u32, 2u32]], vec![1.5, 3.0]),
            _ => unreachable!(),
        }
    }
}
