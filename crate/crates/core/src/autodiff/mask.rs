use crate::error::{Error, Result};

/// Boolean attention pattern `[queries, keys]`; `true` means the query may
/// attend to the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[allow.len()]));
        }
        Ok(AttentionMask { rows, cols, allow })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                allow.push(f(q, k));
            }
        }
        AttentionMask { rows, cols, allow }
    }

    /// Standard lower-triangular causal mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| q == k)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.cols..(q + 1) * self.cols]
    }

    pub fn column(&self, k: usize) -> impl Iterator<Item = bool> + '_ {
        (0..self.rows).map(move |q| self.get(q, k))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Rejects masks with a row that allows no key (undefined softmax).
    pub fn validate(&self) -> Result<()> {
        for q in 0..self.rows {
            if !self.row(q).iter().any(|&a| a) {
                return Err(Error::EmptyMaskRow { row: q });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_rows() {
        let m = AttentionMask::causal(3);
        assert_eq!(m.row(0), &[true, false, false]);
        assert_eq!(m.row(2), &[true, true, true]);
        m.validate().unwrap();
    }

    #[test]
    fn empty_row_rejected() {
        let m = AttentionMask::from_fn(2, 2, |q, k| q == 0 && k == 0);
        assert!(matches!(m.validate(), Err(Error::EmptyMaskRow { row: 1 })));
    }
}
