//! Causal segmentation of data bytes into contiguous patches.
//!
//! Data positions are 1-based (`1..=N`); position 0 is the `<bos>` slot.
//! Every segmenter decides "a patch ends at `n`" from information at or
//! before `n`, and the final position always closes the last patch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{linear, linear_row, trunc_normal, INIT_STD};

/// Whitespace-like delimiters: space, tab, line feed, carriage return.
pub const DEFAULT_DELIMITERS: [u8; 4] = [0x20, 0x09, 0x0A, 0x0D];
pub const HNET_THRESHOLD: f64 = 0.5;
pub const RATIO_LOSS_WEIGHT: f64 = 0.03;
pub const DEFAULT_TARGET_PATCH_SIZE: f64 = 6.0;

/// Contiguous inclusive spans `(s, e)` covering data positions `1..=N`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    spans: Vec<(usize, usize)>,
    n: usize,
}

impl Segmentation {
    pub fn new(spans: Vec<(usize, usize)>, n: usize) -> Result<Self> {
        let seg = Segmentation { spans, n };
        seg.validate()?;
        Ok(seg)
    }

    /// Builds spans from per-position end flags (`ends[n - 1]` for position
    /// `n`); the final position is always treated as an end.
    pub fn from_ends(ends: &[bool]) -> Self {
        let n = ends.len();
        let mut spans = Vec::new();
        let mut start = 1;
        for pos in 1..=n {
            if ends[pos - 1] || pos == n {
                spans.push((start, pos));
                start = pos + 1;
            }
        }
        Segmentation { spans, n }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return if self.spans.is_empty() {
                Ok(())
            } else {
                Err(Error::Inconsistent("spans over an empty sequence".into()))
            };
        }
        let mut expect = 1;
        for &(s, e) in &self.spans {
            if s != expect || e < s {
                return Err(Error::Inconsistent(format!(
                    "span ({s}, {e}) breaks contiguity at {expect}"
                )));
            }
            expect = e + 1;
        }
        if expect != self.n + 1 {
            return Err(Error::Inconsistent(format!(
                "spans cover 1..{} but N = {}",
                expect - 1,
                self.n
            )));
        }
        Ok(())
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    /// Number of patches `L`.
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Number of data bytes `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// End flags per data position.
    pub fn ends(&self) -> Vec<bool> {
        let mut ends = vec![false; self.n];
        for &(_, e) in &self.spans {
            ends[e - 1] = true;
        }
        ends
    }

    /// 1-based patch index of each data position.
    pub fn patch_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.n];
        for (l, &(s, e)) in self.spans.iter().enumerate() {
            idx[s - 1..e].iter_mut().for_each(|v| *v = l + 1);
        }
        idx
    }

    pub fn mean_width(&self) -> f64 {
        if self.spans.is_empty() {
            0.0
        } else {
            self.n as f64 / self.spans.len() as f64
        }
    }
}

/// Non-overlapping windows of width `p`; the last window keeps the remainder.
pub fn segment_fixed(n: usize, p: usize) -> Result<Segmentation> {
    if p == 0 {
        return Err(Error::invalid("segment_fixed", "patch width must be >= 1"));
    }
    let ends: Vec<bool> = (1..=n).map(|pos| pos % p == 0).collect();
    Ok(Segmentation::from_ends(&ends))
}

/// Ends a patch at the first delimiter of each delimiter run.
pub fn spacebyte_ends(bytes: &[u8], delims: &[u8]) -> Vec<bool> {
    (0..bytes.len())
        .map(|i| delims.contains(&bytes[i]) && (i == 0 || !delims.contains(&bytes[i - 1])))
        .collect()
}

pub fn segment_spacebyte(bytes: &[u8], delims: &[u8]) -> Segmentation {
    Segmentation::from_ends(&spacebyte_ends(bytes, delims))
}

/// Ends a patch at `n` when `H_n > tau_p`. `entropies[n - 1]` is `H_n`.
pub fn segment_entropy<F: Float>(entropies: &[F], tau_p: f64) -> Segmentation {
    let ends: Vec<bool> = entropies.iter().map(|h| h.as_f64() > tau_p).collect();
    Segmentation::from_ends(&ends)
}

/// Ends a patch where the router score exceeds one half.
pub fn segment_hnet<F: Float>(scores: &[F]) -> Segmentation {
    let ends: Vec<bool> = scores.iter().map(|s| s.as_f64() > HNET_THRESHOLD).collect();
    Segmentation::from_ends(&ends)
}

/// `(C * mean(scores) - 1)^2`, minimised when the mean score is `1/C`.
pub fn ratio_loss(scores: &[f64], target_size: f64) -> f64 {
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    (target_size * mean - 1.0).powi(2)
}

/// Graph form of [`ratio_loss`].
pub fn ratio_loss_graph<F: Float>(g: &mut Graph<F>, scores: Var, target_size: f64) -> Result<Var> {
    let m = g.mean(scores);
    let d = g.affine(m, F::from_f64(target_size), -F::one());
    g.mul(d, d)
}

/// Learned boundary router: a 2-layer MLP over `[x_n, x_{n-1}]` with a
/// sigmoid output; `start` stands in for `x_0` at the first data byte.
#[derive(Clone, Debug)]
pub struct HNetRouter {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub start: ParamId,
    pub target_size: f64,
}

impl HNetRouter {
    pub fn register<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        hidden: usize,
        target_size: f64,
        rng: &mut R,
    ) -> Self {
        HNetRouter {
            w1: store.add(format!("{prefix}.w1"), trunc_normal(rng, &[2 * d, hidden], INIT_STD), true),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]), false),
            w2: store.add(format!("{prefix}.w2"), trunc_normal(rng, &[hidden, 1], INIT_STD), true),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1]), false),
            start: store.add(format!("{prefix}.start"), Tensor::zeros(&[1, d]), false),
            target_size,
        }
    }

    /// Scores for rows `cur[i]` of `states`, each paired with its previous
    /// row `prev[i]`; `None` selects the learned start vector.
    pub fn scores<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        states: Var,
        cur: &[usize],
        prev: &[Option<usize>],
    ) -> Result<Var> {
        let rows = g.value(states).rows();
        let start = g.param(store, self.start);
        let table = g.concat_rows(&[states, start])?;
        let prev: Vec<usize> = prev.iter().map(|p| p.unwrap_or(rows)).collect();
        let c = g.gather_rows(table, cur)?;
        let p = g.gather_rows(table, &prev)?;
        let inp = g.concat_cols(&[c, p])?;
        let h = linear(g, store, self.w1, inp)?;
        let b1 = g.param(store, self.b1);
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let o = linear(g, store, self.w2, h)?;
        let b2 = g.param(store, self.b2);
        let o = g.add_bias(o, b2)?;
        Ok(g.sigmoid(o))
    }

    /// Eager score of one position.
    pub fn score_row<F: Float>(&self, store: &ParamStore<F>, cur: &[F], prev: Option<&[F]>) -> F {
        let start = store.get(self.start).data();
        let mut inp = cur.to_vec();
        inp.extend_from_slice(prev.unwrap_or(start));
        let mut h = linear_row(store, self.w1, &inp);
        for (v, b) in h.iter_mut().zip(store.get(self.b1).data()) {
            *v = kernels::gelu(*v + *b);
        }
        let o = linear_row(store, self.w2, &h)[0] + store.get(self.b2).data()[0];
        kernels::sigmoid(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_examples() {
        assert_eq!(segment_fixed(8, 4).unwrap().spans(), &[(1, 4), (5, 8)]);
        assert_eq!(segment_fixed(9, 4).unwrap().spans(), &[(1, 4), (5, 8), (9, 9)]);
        assert_eq!(segment_fixed(3, 16).unwrap().spans(), &[(1, 3)]);
        assert!(segment_fixed(3, 0).is_err());
    }

    #[test]
    fn spacebyte_examples() {
        let d = DEFAULT_DELIMITERS;
        assert_eq!(segment_spacebyte(b"a b", &d).spans(), &[(1, 2), (3, 3)]);
        assert_eq!(segment_spacebyte(b"a  b", &d).spans(), &[(1, 2), (3, 4)]);
        assert_eq!(segment_spacebyte(b"abc", &d).spans(), &[(1, 3)]);
    }

    #[test]
    fn entropy_examples() {
        let s = segment_entropy(&[3.0f64, 1.0, 2.7, 0.5], 2.5);
        assert_eq!(s.spans(), &[(1, 1), (2, 3), (4, 4)]);
        assert_eq!(segment_entropy(&[0.1f64; 5], 2.5).spans(), &[(1, 5)]);
        assert_eq!(segment_entropy(&[9.0f64; 3], 2.5).len(), 3);
    }

    #[test]
    fn hnet_examples() {
        assert_eq!(segment_hnet(&[0.9f64; 4]).len(), 4);
        assert_eq!(segment_hnet(&[0.1f64; 4]).spans(), &[(1, 4)]);
        assert_eq!(segment_hnet(&[0.1f64, 0.7, 0.2, 0.9]).spans(), &[(1, 2), (3, 4)]);
    }

    #[test]
    fn ratio_loss_examples() {
        assert_eq!(ratio_loss(&[1.0 / 6.0; 6], 6.0), 0.0);
        assert_eq!(ratio_loss(&[1.0; 3], 6.0), 25.0);
        assert_eq!(ratio_loss(&[0.0; 3], 6.0), 1.0);
    }

    #[test]
    fn empty_sequence() {
        let s = segment_fixed(0, 4).unwrap();
        assert!(s.is_empty());
        s.validate().unwrap();
    }

    #[test]
    fn rejects_gaps() {
        assert!(Segmentation::new(vec![(1, 2), (4, 5)], 5).is_err());
        assert!(Segmentation::new(vec![(1, 2)], 3).is_err());
    }
}
