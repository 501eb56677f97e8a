//! Context-table softmax policy.
//!
//! Each distinct window of the last W tokens owns one logit row. Rows are
//! materialized lazily; a context without a row behaves as a zero logit
//! vector, i.e. a uniform policy. The closed-form score gradient
//! (onehot(action) - softmax) makes this the architecture of choice for
//! exact gradient checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TabularRepr", into = "TabularRepr")]
pub struct TabularParams {
    vocab_size: usize,
    /// context window -> logits, ordered for deterministic iteration.
    pub table: BTreeMap<Vec<u32>, Vec<f64>>,
}

/// On-disk form: JSON object keys must be strings, so the table serializes
/// as an entry list instead.
#[derive(Serialize, Deserialize)]
struct TabularRepr {
    vocab_size: usize,
    entries: Vec<(Vec<u32>, Vec<f64>)>,
}

impl From<TabularRepr> for TabularParams {
    fn from(r: TabularRepr) -> Self {
        Self {
            vocab_size: r.vocab_size,
            table: r.entries.into_iter().collect(),
        }
    }
}

impl From<TabularParams> for TabularRepr {
    fn from(p: TabularParams) -> Self {
        Self {
            vocab_size: p.vocab_size,
            entries: p.table.into_iter().collect(),
        }
    }
}

impl TabularParams {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            table: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn logits(&self, ctx: &[u32]) -> Vec<f64> {
        self.table
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    /// Inserts a zero row for `ctx` if absent, so that the context has
    /// addressable coordinates (needed before perturbing it numerically).
    pub fn ensure_row(&mut self, ctx: &[u32]) {
        self.table
            .entry(ctx.to_vec())
            .or_insert_with(|| vec![0.0; self.vocab_size]);
    }

    pub fn row_mut(&mut self, ctx: &[u32]) -> &mut Vec<f64> {
        self.ensure_row(ctx);
        self.table.get_mut(ctx).expect("row just ensured")
    }

    pub fn n_params(&self) -> usize {
        self.table.len() * self.vocab_size
    }

    fn locate(&self, i: usize) -> (&Vec<u32>, usize) {
        let row = i / self.vocab_size;
        let col = i % self.vocab_size;
        let ctx = self
            .table
            .keys()
            .nth(row)
            .expect("flat index within materialized table");
        (ctx, col)
    }

    pub fn flat_get(&self, i: usize) -> f64 {
        let (ctx, col) = self.locate(i);
        self.table[ctx][col]
    }

    pub fn flat_set(&mut self, i: usize, v: f64) {
        let (ctx, col) = self.locate(i);
        let ctx = ctx.clone();
        self.table.get_mut(&ctx).expect("row exists")[col] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unseen_context_is_uniform() {
        let p = TabularParams::new(4);
        assert_eq!(p.logits(&[0, 1, 2]), vec![0.0; 4]);
    }

    #[test]
    fn flat_view_tracks_btree_order() {
        let mut p = TabularParams::new(2);
        p.row_mut(&[5, 5])[1] = 3.0;
        p.row_mut(&[1, 2])[0] = -1.0;
        // BTreeMap orders [1,2] before [5,5]
        assert_eq!(p.flat_get(0), -1.0);
        assert_eq!(p.flat_get(3), 3.0);
        p.flat_set(3, 7.0);
        assert_eq!(p.logits(&[5, 5]), vec![0.0, 7.0]);
    }
}
