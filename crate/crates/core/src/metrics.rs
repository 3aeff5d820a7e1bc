//! Bits per byte, analytic FLOPs accounting, patch lag, and traces.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Float, Graph};
use crate::corpus::{category, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::infer::Session;
use crate::layers::StackConfig;
use crate::model::{ComponentFlops, Model, ModelConfig, Patchifier};
use crate::patchify::Segmentation;
use crate::scratchpad::{build_trunk_sequence, ScratchpadSchedule, TriggerPolicy};

pub const FLOPS_CONVENTION: &str = "2 flops per multiply-accumulate; matrix products only (attention scores and \
     value mixing included, norms/activations/softmax excluded)";

/// Sum of next-byte negative log-likelihoods (nats) over all data bytes of
/// `windows`, each window starting from `<bos>`.
pub fn window_nll<F: Float>(model: &Model<F>, windows: &[Vec<u8>], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let mut g = Graph::inference();
        let tr = model.forward(&mut g, chunk)?;
        let logits = g.value(tr.logits);
        for (r, (&t, w)) in tr.targets.iter().zip(&tr.weights).enumerate() {
            if *w != F::zero() {
                let row = logits.row(r);
                total += (kernels::log_sum_exp(row) - row[t]).as_f64();
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileBpb {
    pub path: PathBuf,
    pub category: String,
    pub bytes: usize,
    pub bpb: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BpbReport {
    pub bpb: f64,
    pub bytes: usize,
    pub files: Vec<FileBpb>,
    pub categories: BTreeMap<String, f64>,
}

/// Bits per byte of `data` cut into `seq_len` windows.
pub fn bpb_bytes<F: Float>(model: &Model<F>, data: &[u8], seq_len: usize, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("bpb", "empty evaluation data"));
    }
    let windows: Vec<Vec<u8>> = data.chunks(seq_len.max(1)).map(<[u8]>::to_vec).collect();
    Ok(window_nll(model, &windows, batch_size)? / (data.len() as f64 * std::f64::consts::LN_2))
}

/// Bits per byte over evaluation files, with per-file and per-category
/// (parent directory) breakdowns.
pub fn bpb<F: Float>(model: &Model<F>, files: &[PathBuf], seq_len: usize, batch_size: usize) -> Result<BpbReport> {
    let mut out = Vec::new();
    let mut cat: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let (mut nats, mut bytes) = (0.0, 0);
    for p in files {
        let data = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        if data.is_empty() {
            continue;
        }
        let windows: Vec<Vec<u8>> = data.chunks(seq_len.max(1)).map(<[u8]>::to_vec).collect();
        let nll = window_nll(model, &windows, batch_size)?;
        let c = category(p);
        let e = cat.entry(c.clone()).or_default();
        e.0 += nll;
        e.1 += data.len();
        nats += nll;
        bytes += data.len();
        out.push(FileBpb {
            path: p.clone(),
            category: c,
            bytes: data.len(),
            bpb: nll / (data.len() as f64 * std::f64::consts::LN_2),
        });
    }
    if bytes == 0 {
        return Err(Error::invalid("bpb", "empty evaluation set"));
    }
    Ok(BpbReport {
        bpb: nats / (bytes as f64 * std::f64::consts::LN_2),
        bytes,
        files: out,
        categories: cat
            .into_iter()
            .map(|(k, (n, b))| (k, n / (b as f64 * std::f64::consts::LN_2)))
            .collect(),
    })
}

/// Segmentation statistics of every `seq_len` window of `data`.
pub fn sequence_stats<F: Float>(
    model: &Model<F>,
    data: &[u8],
    seq_len: usize,
    batch_size: usize,
) -> Result<Vec<SequenceStats>> {
    let windows: Vec<Vec<u8>> = data.chunks(seq_len.max(1)).map(<[u8]>::to_vec).collect();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let mut g = Graph::inference();
        let tr = model.forward(&mut g, chunk)?;
        for s in &tr.seqs {
            out.push(SequenceStats::new(&s.segmentation, &s.schedule)?);
        }
    }
    Ok(out)
}

/// Counts behind the flop estimate of one sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceStats {
    /// Data bytes `N`.
    pub n: usize,
    /// Committed patches `L`.
    pub patches: usize,
    /// Scratchpads `sum T`.
    pub scratchpads: usize,
    /// Total aggregated rows over all trunk elements (including `<bos>`).
    pub span_rows: usize,
    /// Sum over trunk elements of the keys visible in incremental mode.
    pub cached_keys: usize,
}

impl SequenceStats {
    pub fn new(seg: &Segmentation, sched: &ScratchpadSchedule) -> Result<Self> {
        let ts = build_trunk_sequence(seg, sched)?;
        Ok(SequenceStats {
            n: seg.n(),
            patches: seg.len(),
            scratchpads: sched.total(),
            span_rows: ts
                .elements
                .iter()
                .map(|e| if e.span.1 == 0 { 1 } else { e.span.1 - e.span.0 + 1 })
                .sum(),
            cached_keys: ts.elements.iter().map(|e| e.position + 1).sum(),
        })
    }

    pub fn trunk_len(&self) -> usize {
        1 + self.patches + self.scratchpads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopsMode {
    /// Unrolled sequence under the masked-dense attention of training.
    Training,
    /// Byte-by-byte with caches; attention over realized prefixes.
    Incremental,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub mode: FlopsMode,
    pub convention: String,
    pub components: ComponentFlops,
    pub total: u64,
    pub bytes: usize,
    pub flops_per_byte: f64,
    /// Same model with every byte its own patch and no scratchpads.
    pub reference_per_byte: f64,
    pub reduction: f64,
}

fn stack_flops(cfg: &StackConfig, rows: u64, attn_pairs: u64) -> u64 {
    let d = cfg.d_model as u64;
    let ff = cfg.d_ff as u64;
    cfg.n_layers as u64 * (8 * rows * d * d + 6 * rows * d * ff + 4 * attn_pairs * d)
}

fn components(cfg: &ModelConfig, stats: &[SequenceStats], mode: FlopsMode) -> ComponentFlops {
    let d = cfg.d_byte() as u64;
    let dt = cfg.trunk.d_model as u64;
    let v = VOCAB_SIZE as u64;
    let mut c = ComponentFlops::default();
    for s in stats {
        let rows = s.n as u64 + 1;
        let e = s.trunk_len() as u64;
        let (byte_pairs, trunk_pairs) = match mode {
            FlopsMode::Training => (rows * rows, e * e),
            FlopsMode::Incremental => (rows * (rows + 1) / 2, s.cached_keys as u64),
        };
        c.encoder += stack_flops(&cfg.encoder, rows, byte_pairs);
        c.aux += stack_flops(&cfg.aux, rows, byte_pairs);
        c.decoder += stack_flops(&cfg.decoder, rows, byte_pairs);
        c.trunk += stack_flops(&cfg.trunk, e, trunk_pairs);
        c.heads += 2 * (2 * rows * d * v);
        if let Patchifier::HNet { .. } = cfg.patchifier {
            let h = cfg.router_hidden as u64;
            c.patchify += 2 * s.n as u64 * (2 * d * h + h);
        }
        // span-mean query and output projections, key/value projections of
        // every byte row, span attention, and the trunk width maps
        c.patchify += 4 * e * d * d + 4 * rows * d * d + 4 * s.span_rows as u64 * d + 4 * e * d * dt;
    }
    c
}

/// Analytic forward flops for sequences with the given statistics.
pub fn flops_estimate(cfg: &ModelConfig, stats: &[SequenceStats], mode: FlopsMode) -> FlopsReport {
    let comp = components(cfg, stats, mode);
    let bytes: usize = stats.iter().map(|s| s.n).sum();
    let mut reference = cfg.clone();
    reference.patchifier = Patchifier::Fixed { p: 1 };
    reference.trigger = TriggerPolicy::None;
    let ref_stats: Vec<SequenceStats> = stats
        .iter()
        .map(|s| SequenceStats {
            n: s.n,
            patches: s.n,
            scratchpads: 0,
            span_rows: s.n + 1,
            cached_keys: (1..=s.n).map(|l| l + 1).sum::<usize>() + 1,
        })
        .collect();
    let ref_total = components(&reference, &ref_stats, mode).total();
    let per = |t: u64| if bytes == 0 { 0.0 } else { t as f64 / bytes as f64 };
    FlopsReport {
        mode,
        convention: FLOPS_CONVENTION.to_string(),
        total: comp.total(),
        components: comp,
        bytes,
        flops_per_byte: per(comp.total()),
        reference_per_byte: per(ref_total),
        reduction: if comp.total() == 0 { 0.0 } else { ref_total as f64 / comp.total() as f64 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagStats {
    pub mean: f64,
    pub max: usize,
    /// `histogram[k]` counts positions with lag `k`.
    pub histogram: Vec<usize>,
}

/// Per-position lag: distance from each data position to the end of the
/// span behind its fused trunk state (0 for `<bos>`).
pub fn position_lags(seg: &Segmentation, sched: &ScratchpadSchedule) -> Result<Vec<usize>> {
    let ts = build_trunk_sequence(seg, sched)?;
    let idx = crate::model::state_indices(seg, sched);
    Ok((1..=seg.n()).map(|n| n - ts.elements[idx[n]].span.1).collect())
}

pub fn patch_lag_stats(seg: &Segmentation, sched: &ScratchpadSchedule) -> Result<LagStats> {
    let lags = position_lags(seg, sched)?;
    let max = lags.iter().copied().max().unwrap_or(0);
    let mut histogram = vec![0; max + 1];
    lags.iter().for_each(|&l| histogram[l] += 1);
    Ok(LagStats {
        mean: if lags.is_empty() { 0.0 } else { lags.iter().sum::<usize>() as f64 / lags.len() as f64 },
        max,
        histogram,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub position: usize,
    pub byte: u8,
    pub entropy: f64,
    pub patch_boundary: bool,
    pub scratchpad: bool,
    pub suppressed: bool,
    pub state_span_end: usize,
    pub lag: usize,
}

pub const TRACE_HEADER: &str = "position,byte,entropy,patch_boundary,scratchpad,suppressed,state_span_end,lag";

/// Streams `bytes` through an incremental session (the last byte closes
/// its patch) and records one row per byte.
pub fn export_trace<F: Float>(model: &Model<F>, bytes: &[u8]) -> Result<Vec<TraceRow>> {
    let mut s = Session::new(model);
    for (i, &b) in bytes.iter().enumerate() {
        if i + 1 == bytes.len() {
            s.step_last(b)?;
        } else {
            s.step(b)?;
        }
    }
    Ok(s.events()
        .iter()
        .map(|e| TraceRow {
            position: e.position,
            byte: e.byte,
            entropy: e.entropy,
            patch_boundary: e.boundary,
            scratchpad: e.scratchpad,
            suppressed: e.suppressed,
            state_span_end: e.state_span_end,
            lag: e.lag(),
        })
        .collect())
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{},{},{},{},{}",
            r.position,
            r.byte,
            r.entropy,
            r.patch_boundary as u8,
            r.scratchpad as u8,
            r.suppressed as u8,
            r.state_span_end,
            r.lag
        )?;
    }
    Ok(())
}

pub fn save_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(rows, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchify::segment_fixed;
    use crate::scratchpad::apply_precedence;

    #[test]
    fn lag_examples() {
        let s = segment_fixed(8, 4).unwrap();
        let lags = position_lags(&s, &ScratchpadSchedule::none(&s)).unwrap();
        assert_eq!(lags, vec![1, 2, 3, 0, 1, 2, 3, 0]);
        assert_eq!(patch_lag_stats(&s, &ScratchpadSchedule::none(&s)).unwrap().mean, 1.5);

        let dense = apply_precedence(&[true; 8], &s).unwrap();
        let st = patch_lag_stats(&s, &dense).unwrap();
        assert_eq!(st.mean, 0.0);
        assert_eq!(st.max, 0);

        let one = apply_precedence(&[false, true, false, false, false, false, false, false], &s).unwrap();
        assert_eq!(position_lags(&s, &one).unwrap()[..4], [1, 0, 1, 0]);
    }

    #[test]
    fn trace_csv_header() {
        let mut out = Vec::new();
        write_trace_csv(&[], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn ffn_term_scales_linearly() {
        let cfg = ModelConfig::tiny(16, 32, 1, Patchifier::Fixed { p: 4 }, TriggerPolicy::None);
        let s = segment_fixed(16, 4).unwrap();
        let st = [SequenceStats::new(&s, &ScratchpadSchedule::none(&s)).unwrap()];
        let a = flops_estimate(&cfg, &st, FlopsMode::Training).components;
        let mut c2 = cfg.clone();
        c2.trunk.d_ff *= 2;
        let b = flops_estimate(&c2, &st, FlopsMode::Training).components;
        let ffn = 6 * st[0].trunk_len() as u64 * 32 * 64;
        assert_eq!(b.trunk - a.trunk, ffn);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.decoder, b.decoder);
    }
}
