use super::Real;
use crate::error::{Error, Result};

/// Sparse vector with strictly increasing indices and no stored zeros.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SparseVector<T> {
    entries: Vec<(usize, T)>,
}

impl<T: Real> SparseVector<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Builds from unordered pairs; duplicate indices are summed and zeros dropped.
    pub fn from_pairs(mut pairs: Vec<(usize, T)>) -> Self {
        pairs.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(usize, T)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match entries.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|&(_, v)| v != T::zero());
        Self { entries }
    }

    /// Indicator vector over the given indices (duplicates collapse to 1).
    pub fn indicator(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut idx: Vec<usize> = indices.into_iter().collect();
        idx.sort_unstable();
        idx.dedup();
        Self {
            entries: idx.into_iter().map(|i| (i, T::one())).collect(),
        }
    }

    /// Validates the sortedness and non-zero invariants of raw entries.
    pub fn from_sorted(entries: Vec<(usize, T)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::InvalidInput(
                    "sparse indices must be strictly increasing".into(),
                ));
            }
        }
        if entries.iter().any(|&(_, v)| v == T::zero() || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "sparse values must be finite and non-zero".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.entries.iter().copied()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|&(i, _)| i)
    }

    pub fn get(&self, index: usize) -> T {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|k| self.entries[k].1)
            .unwrap_or_else(|_| T::zero())
    }

    pub fn dot_dense(&self, dense: &[T]) -> T {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<T> {
        let mut out = vec![T::zero(); dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}
