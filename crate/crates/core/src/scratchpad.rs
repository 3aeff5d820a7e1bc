//! Scratchpad trigger policies, the precedence rule, and the unrolled
//! trunk sequence with its attention mask.

use serde::{Deserialize, Serialize};

use crate::autodiff::AttentionMask;
use crate::error::{Error, Result};
use crate::patchify::Segmentation;

/// Rule deciding where a scratchpad update fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TriggerPolicy {
    None,
    /// Fire where the auxiliary next-byte entropy exceeds the threshold.
    Entropy(f64),
    /// Fire every `S` bytes, counted from each patch start.
    Stride(usize),
    /// Fire on delimiter bytes.
    Whitespace(Vec<u8>),
    Dense,
}

impl TriggerPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            TriggerPolicy::Entropy(t) if !(*t >= 0.0) => Err(Error::ConfigInvalid(format!(
                "entropy trigger threshold must be >= 0, got {t}"
            ))),
            TriggerPolicy::Stride(0) => Err(Error::ConfigInvalid("stride must be >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn needs_entropy(&self) -> bool {
        matches!(self, TriggerPolicy::Entropy(_))
    }
}

/// Raw (pre-precedence) trigger indicators for data positions `1..=N`.
///
/// `entropies[n - 1]` and `bytes[n - 1]` describe position `n`; only the
/// input the policy needs is read.
pub fn compute_triggers(
    policy: &TriggerPolicy,
    entropies: &[f64],
    bytes: &[u8],
    seg: &Segmentation,
) -> Result<Vec<bool>> {
    let n = seg.n();
    Ok(match policy {
        TriggerPolicy::None => vec![false; n],
        TriggerPolicy::Dense => vec![true; n],
        TriggerPolicy::Entropy(tau) => {
            if entropies.len() != n {
                return Err(Error::Inconsistent(format!(
                    "{} entropies for {} positions",
                    entropies.len(),
                    n
                )));
            }
            entropies.iter().map(|h| *h > *tau).collect()
        }
        TriggerPolicy::Stride(s) => {
            let mut raw = vec![false; n];
            for &(start, end) in seg.spans() {
                for pos in start..=end {
                    raw[pos - 1] = (pos - start + 1) % s == 0;
                }
            }
            raw
        }
        TriggerPolicy::Whitespace(delims) => {
            if bytes.len() != n {
                return Err(Error::Inconsistent(format!(
                    "{} bytes for {} positions",
                    bytes.len(),
                    n
                )));
            }
            bytes.iter().map(|b| delims.contains(b)).collect()
        }
    })
}

/// Per-position scratchpad indicators after precedence, with per-patch counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScratchpadSchedule {
    /// `p[n - 1]`: a scratchpad fires at data position `n`.
    pub p: Vec<bool>,
    /// `t[l - 1]`: number of scratchpads in patch `l`.
    pub t: Vec<usize>,
}

impl ScratchpadSchedule {
    pub fn total(&self) -> usize {
        self.t.iter().sum()
    }

    pub fn none(seg: &Segmentation) -> Self {
        ScratchpadSchedule {
            p: vec![false; seg.n()],
            t: vec![0; seg.len()],
        }
    }
}

/// Suppresses triggers on patch-final positions and counts the rest.
pub fn apply_precedence(raw: &[bool], seg: &Segmentation) -> Result<ScratchpadSchedule> {
    if raw.len() != seg.n() {
        return Err(Error::Inconsistent(format!(
            "{} indicators for {} positions",
            raw.len(),
            seg.n()
        )));
    }
    let mut p = raw.to_vec();
    let mut t = Vec::with_capacity(seg.len());
    for &(s, e) in seg.spans() {
        p[e - 1] = false;
        t.push(p[s - 1..e].iter().filter(|&&x| x).count());
    }
    Ok(ScratchpadSchedule { p, t })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    Bos,
    /// `t`-th scratchpad (1-based) of patch `patch` (1-based).
    Scratchpad { patch: usize, t: usize },
    Committed { patch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkElement {
    pub kind: ElementKind,
    /// Inclusive data-position span aggregated into this element; `(0, 0)`
    /// for `<bos>`.
    pub span: (usize, usize),
    /// Rotary position: the patch index, 0 for `<bos>`.
    pub position: usize,
}

impl TrunkElement {
    pub fn patch(&self) -> usize {
        self.position
    }

    pub fn is_persistent(&self) -> bool {
        !matches!(self.kind, ElementKind::Scratchpad { .. })
    }
}

/// Unrolled trunk input `[z_0, z_1^1..z_1^T1, z_1, z_2^1.., z_2, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkSequence {
    pub elements: Vec<TrunkElement>,
    pub mask: AttentionMask,
}

impl TrunkSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.elements.iter().map(|e| e.position).collect()
    }

    /// Index of the committed element of patch `l` (`l = 0` is `<bos>`).
    pub fn committed_indices(&self) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_persistent())
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn build_trunk_sequence(seg: &Segmentation, sched: &ScratchpadSchedule) -> Result<TrunkSequence> {
    if sched.p.len() != seg.n() || sched.t.len() != seg.len() {
        return Err(Error::Inconsistent(
            "schedule does not match segmentation".into(),
        ));
    }
    let mut elements = Vec::with_capacity(1 + seg.len() + sched.total());
    elements.push(TrunkElement {
        kind: ElementKind::Bos,
        span: (0, 0),
        position: 0,
    });
    for (l0, &(s, e)) in seg.spans().iter().enumerate() {
        let patch = l0 + 1;
        if sched.p[e - 1] {
            return Err(Error::Inconsistent(format!(
                "scratchpad at patch-final position {e}"
            )));
        }
        let mut t = 0;
        for n in s..e {
            if sched.p[n - 1] {
                t += 1;
                elements.push(TrunkElement {
                    kind: ElementKind::Scratchpad { patch, t },
                    span: (s, n),
                    position: patch,
                });
            }
        }
        if t != sched.t[l0] {
            return Err(Error::Inconsistent(format!(
                "patch {patch} has {t} triggers but T = {}",
                sched.t[l0]
            )));
        }
        elements.push(TrunkElement {
            kind: ElementKind::Committed { patch },
            span: (s, e),
            position: patch,
        });
    }
    let mask = build_mask(&elements);
    Ok(TrunkSequence { elements, mask })
}

/// Each element attends to itself and to persistent (bos or committed)
/// elements of strictly earlier patches.
pub fn build_mask(elements: &[TrunkElement]) -> AttentionMask {
    AttentionMask::from_fn(elements.len(), elements.len(), |q, k| {
        q == k || (elements[k].is_persistent() && elements[k].patch() < elements[q].patch())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchify::segment_fixed;

    fn seg(spans: &[(usize, usize)]) -> Segmentation {
        Segmentation::new(spans.to_vec(), spans.last().map_or(0, |s| s.1)).unwrap()
    }

    #[test]
    fn entropy_trigger_example() {
        let s = seg(&[(1, 3)]);
        let raw = compute_triggers(&TriggerPolicy::Entropy(1.5), &[2.0, 1.0, 1.8], &[], &s).unwrap();
        assert_eq!(raw, vec![true, false, true]);
    }

    #[test]
    fn stride_equal_to_patch_width_is_fully_suppressed() {
        let s = segment_fixed(32, 8).unwrap();
        let raw = compute_triggers(&TriggerPolicy::Stride(8), &[], &[], &s).unwrap();
        let ends = s.ends();
        assert!(raw.iter().zip(&ends).all(|(r, e)| r == e));
        let sched = apply_precedence(&raw, &s).unwrap();
        assert_eq!(sched.total(), 0);
    }

    #[test]
    fn dense_fires_everywhere() {
        let s = segment_fixed(5, 2).unwrap();
        assert!(compute_triggers(&TriggerPolicy::Dense, &[], &[], &s).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn precedence_examples() {
        let s = seg(&[(1, 2), (3, 4)]);
        let sched = apply_precedence(&[true; 4], &s).unwrap();
        assert_eq!(sched.p, vec![true, false, true, false]);
        assert_eq!(sched.t, vec![1, 1]);

        let sched = apply_precedence(&[false; 4], &s).unwrap();
        assert_eq!(sched.t, vec![0, 0]);

        let singles = segment_fixed(4, 1).unwrap();
        let sched = apply_precedence(&[true; 4], &singles).unwrap();
        assert_eq!(sched.total(), 0);
    }

    #[test]
    fn trunk_sequence_layout() {
        let s = seg(&[(1, 2), (3, 3)]);
        let sched = ScratchpadSchedule { p: vec![true, false, false], t: vec![1, 0] };
        let ts = build_trunk_sequence(&s, &sched).unwrap();
        let kinds: Vec<_> = ts.elements.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ElementKind::Bos,
                ElementKind::Scratchpad { patch: 1, t: 1 },
                ElementKind::Committed { patch: 1 },
                ElementKind::Committed { patch: 2 },
            ]
        );
        let m = &ts.mask;
        assert_eq!(m.row(0), &[true, false, false, false]);
        assert_eq!(m.row(1), &[true, true, false, false]);
        assert_eq!(m.row(2), &[true, false, true, false]);
        assert_eq!(m.row(3), &[true, false, true, true]);
    }

    #[test]
    fn prefix_spans() {
        let s = seg(&[(1, 4)]);
        let sched = apply_precedence(&[false, true, true, false], &s).unwrap();
        let ts = build_trunk_sequence(&s, &sched).unwrap();
        let spans: Vec<_> = ts.elements.iter().map(|e| e.span).collect();
        assert_eq!(spans, vec![(0, 0), (1, 2), (1, 3), (1, 4)]);
        assert!(ts.elements.iter().skip(1).all(|e| e.position == 1));
    }

    #[test]
    fn no_scratchpads_gives_causal_mask() {
        let s = segment_fixed(6, 2).unwrap();
        let ts = build_trunk_sequence(&s, &ScratchpadSchedule::none(&s)).unwrap();
        assert_eq!(ts.len(), 4);
        assert_eq!(ts.mask, AttentionMask::causal(4));
    }

    #[test]
    fn inconsistent_schedule_rejected() {
        let s = seg(&[(1, 2)]);
        let bad = ScratchpadSchedule { p: vec![false, true], t: vec![1] };
        assert!(build_trunk_sequence(&s, &bad).is_err());
        let bad = ScratchpadSchedule { p: vec![true, false], t: vec![0] };
        assert!(build_trunk_sequence(&s, &bad).is_err());
    }
}
