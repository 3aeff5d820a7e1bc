//! Full training-mode forward: encoder, patchifier, unrolled scratchpad
//! trunk, fusion, decoder, and losses.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{counter, AttentionMask, AttnBlock, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{PAD_ID, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::layers::{
    aggregate, entropy_rows, linear, transformer_stack, trunc_normal, AggregateParams, HeadParams, StackConfig,
    StackParams, INIT_STD,
};
use crate::patchify::{
    ratio_loss_graph, segment_entropy, segment_fixed, segment_hnet, segment_spacebyte, HNetRouter, Segmentation,
    DEFAULT_DELIMITERS, DEFAULT_TARGET_PATCH_SIZE, RATIO_LOSS_WEIGHT,
};
use crate::scratchpad::{
    apply_precedence, build_trunk_sequence, compute_triggers, ElementKind, ScratchpadSchedule, TriggerPolicy,
    TrunkSequence,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Patchifier {
    Fixed { p: usize },
    SpaceByte { delimiters: Vec<u8> },
    Entropy { tau_p: f64 },
    HNet { target_size: f64 },
}

impl Patchifier {
    pub fn family(&self) -> &'static str {
        match self {
            Patchifier::Fixed { .. } => "fixed",
            Patchifier::SpaceByte { .. } => "spacebyte",
            Patchifier::Entropy { .. } => "entropy",
            Patchifier::HNet { .. } => "hnet",
        }
    }

    pub fn spacebyte() -> Self {
        Patchifier::SpaceByte {
            delimiters: DEFAULT_DELIMITERS.to_vec(),
        }
    }

    pub fn hnet() -> Self {
        Patchifier::HNet {
            target_size: DEFAULT_TARGET_PATCH_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: StackConfig,
    /// Extra causal layers over the detached encoder output feeding the
    /// entropy head (and the H-Net router).
    pub aux: StackConfig,
    pub trunk: StackConfig,
    pub decoder: StackConfig,
    pub agg_heads: usize,
    pub router_hidden: usize,
    pub patchifier: Patchifier,
    pub trigger: TriggerPolicy,
    pub hnet_smoothing: bool,
}

/// Inference-time overrides that leave parameters untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Knobs {
    pub tau_sp: Option<f64>,
    pub tau_p: Option<f64>,
    pub patch_size: Option<usize>,
}

impl ModelConfig {
    /// Small symmetric configuration: byte-level stacks of width `d_byte`
    /// and a trunk of width `d_trunk`.
    pub fn tiny(d_byte: usize, d_trunk: usize, layers: usize, patchifier: Patchifier, trigger: TriggerPolicy) -> Self {
        ModelConfig {
            encoder: StackConfig::new(layers, d_byte, 2 * d_byte),
            aux: StackConfig::new(2, d_byte, 2 * d_byte),
            trunk: StackConfig::new(layers, d_trunk, 2 * d_trunk),
            decoder: StackConfig::new(layers, d_byte, 2 * d_byte),
            agg_heads: (d_byte / 64).max(1),
            router_hidden: d_byte,
            patchifier,
            trigger,
            hnet_smoothing: false,
        }
    }

    pub fn d_byte(&self) -> usize {
        self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("encoder")?;
        self.aux.validate("aux")?;
        self.trunk.validate("trunk")?;
        self.decoder.validate("decoder")?;
        let d = self.encoder.d_model;
        if self.decoder.d_model != d || self.aux.d_model != d {
            return Err(Error::ConfigInvalid(format!(
                "encoder, aux and decoder widths must match ({d}, {}, {})",
                self.aux.d_model, self.decoder.d_model
            )));
        }
        if self.agg_heads == 0 || d % self.agg_heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "agg_heads {} must divide encoder width {d}",
                self.agg_heads
            )));
        }
        self.trigger.validate()?;
        match &self.patchifier {
            Patchifier::Fixed { p: 0 } => return Err(Error::ConfigInvalid("patch size must be >= 1".into())),
            Patchifier::Entropy { tau_p } => {
                if !(*tau_p >= 0.0) {
                    return Err(Error::ConfigInvalid(format!("tau_p must be >= 0, got {tau_p}")));
                }
                if let TriggerPolicy::Entropy(tau_sp) = self.trigger {
                    if !(*tau_p > tau_sp) {
                        return Err(Error::ConfigInvalid(format!(
                            "tau_p ({tau_p}) must exceed tau_sp ({tau_sp})"
                        )));
                    }
                }
            }
            Patchifier::HNet { target_size } => {
                if !(*target_size > 1.0) {
                    return Err(Error::ConfigInvalid(format!("target patch size must exceed 1, got {target_size}")));
                }
                if self.router_hidden == 0 {
                    return Err(Error::ConfigInvalid("router_hidden must be >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Copy with the given knobs applied and revalidated.
    pub fn with_knobs(&self, k: &Knobs) -> Result<Self> {
        let mut c = self.clone();
        if let Some(t) = k.tau_sp {
            c.trigger = TriggerPolicy::Entropy(t);
        }
        if let Some(t) = k.tau_p {
            match &mut c.patchifier {
                Patchifier::Entropy { tau_p } => *tau_p = t,
                other => {
                    return Err(Error::ConfigInvalid(format!(
                        "tau_p applies to the entropy patchifier, not {}",
                        other.family()
                    )))
                }
            }
        }
        if let Some(ps) = k.patch_size {
            match &mut c.patchifier {
                Patchifier::Fixed { p } => *p = ps,
                other => {
                    return Err(Error::ConfigInvalid(format!(
                        "patch size applies to the fixed patchifier, not {}",
                        other.family()
                    )))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Digest of everything that determines parameter names and shapes.
    /// Thresholds, patch size, delimiters and trigger policy are excluded
    /// so they stay adjustable after training.
    pub fn digest(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Arch<'a> {
            vocab: usize,
            encoder: &'a StackConfig,
            aux: &'a StackConfig,
            trunk: &'a StackConfig,
            decoder: &'a StackConfig,
            agg_heads: usize,
            family: &'a str,
            router_hidden: Option<usize>,
        }
        let arch = Arch {
            vocab: VOCAB_SIZE,
            encoder: &self.encoder,
            aux: &self.aux,
            trunk: &self.trunk,
            decoder: &self.decoder,
            agg_heads: self.agg_heads,
            family: self.patchifier.family(),
            router_hidden: matches!(self.patchifier, Patchifier::HNet { .. }).then_some(self.router_hidden),
        };
        let json = serde_json::to_vec(&arch).expect("serializable");
        Sha256::digest(&json).into()
    }
}

/// All learnable arrays, addressed by id.
#[derive(Clone, Debug)]
pub struct Model<F: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub embed: ParamId,
    pub encoder: StackParams,
    pub aux: StackParams,
    pub aux_head: HeadParams,
    pub router: Option<HNetRouter>,
    pub agg: AggregateParams,
    pub proj_in: ParamId,
    pub trunk: StackParams,
    pub proj_out: ParamId,
    pub decoder: StackParams,
    pub head: HeadParams,
}

impl<F: Float> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_byte();
        let dt = cfg.trunk.d_model;
        let embed = store.add("embed", trunc_normal(&mut rng, &[VOCAB_SIZE, d], INIT_STD), false);
        let encoder = StackParams::register(&mut store, "encoder", &cfg.encoder, &mut rng);
        let aux = StackParams::register(&mut store, "aux", &cfg.aux, &mut rng);
        let aux_head = HeadParams::register(&mut store, "aux_head", d, VOCAB_SIZE, &mut rng);
        let router = match cfg.patchifier {
            Patchifier::HNet { target_size } => Some(HNetRouter::register(
                &mut store,
                "router",
                d,
                cfg.router_hidden,
                target_size,
                &mut rng,
            )),
            _ => None,
        };
        let agg = AggregateParams::register(&mut store, "aggregate", d, cfg.agg_heads, &mut rng);
        let proj_in = store.add("proj_in", trunc_normal(&mut rng, &[d, dt], INIT_STD), true);
        let trunk = StackParams::register(&mut store, "trunk", &cfg.trunk, &mut rng);
        let proj_out = store.add("proj_out", trunc_normal(&mut rng, &[dt, d], INIT_STD), true);
        let decoder = StackParams::register(&mut store, "decoder", &cfg.decoder, &mut rng);
        let head = HeadParams::register(&mut store, "head", d, VOCAB_SIZE, &mut rng);
        Ok(Model {
            cfg,
            store,
            embed,
            encoder,
            aux,
            aux_head,
            router,
            agg,
            proj_in,
            trunk,
            proj_out,
            decoder,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            embed: self.embed,
            encoder: self.encoder.clone(),
            aux: self.aux.clone(),
            aux_head: self.aux_head.clone(),
            router: self.router.clone(),
            agg: self.agg.clone(),
            proj_in: self.proj_in,
            trunk: self.trunk.clone(),
            proj_out: self.proj_out,
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    /// Same parameters under a different (knob-adjusted) configuration.
    pub fn with_config(&self, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.digest() != self.cfg.digest() {
            return Err(Error::DigestMismatch);
        }
        let mut m = self.clone();
        if let (Some(r), Patchifier::HNet { target_size }) = (&mut m.router, &cfg.patchifier) {
            r.target_size = *target_size;
        }
        m.cfg = cfg;
        Ok(m)
    }

    pub fn with_knobs(&self, k: &Knobs) -> Result<Self> {
        self.with_config(self.cfg.with_knobs(k)?)
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<F>)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Format(format!(
                "{} arrays for a model with {}",
                values.len(),
                self.store.len()
            )));
        }
        for (entry, (name, t)) in self.store.entries().iter().zip(&values) {
            if &entry.name != name || entry.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "array {name} {:?} does not match {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
        }
        for (entry, (_, t)) in self.store.entries_mut().iter_mut().zip(values) {
            entry.value = t;
        }
        Ok(())
    }
}

/// Forward flop counts per component (2 per multiply-accumulate).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub encoder: u64,
    pub aux: u64,
    pub patchify: u64,
    pub trunk: u64,
    pub decoder: u64,
    pub heads: u64,
}

impl ComponentFlops {
    pub fn total(&self) -> u64 {
        self.encoder + self.aux + self.patchify + self.trunk + self.decoder + self.heads
    }
}

/// Per-sequence bookkeeping of a forward pass.
#[derive(Clone, Debug)]
pub struct SequenceTrace {
    /// Row of this sequence's `<bos>` in the byte-level tensors.
    pub offset: usize,
    /// First row of this sequence in the trunk tensors.
    pub trunk_offset: usize,
    pub bytes: Vec<u8>,
    /// `H_0..H_N` from the auxiliary head.
    pub entropies: Vec<f64>,
    /// Router scores at positions `1..=N` (H-Net only).
    pub scores: Vec<f64>,
    pub segmentation: Segmentation,
    pub raw_triggers: Vec<bool>,
    pub schedule: ScratchpadSchedule,
    pub trunk: TrunkSequence,
    /// Trunk element behind the fused state of each byte row `0..=N`.
    pub state: Vec<usize>,
}

impl SequenceTrace {
    pub fn n(&self) -> usize {
        self.bytes.len()
    }
}

/// Everything computed by [`Model::forward`].
pub struct ForwardTrace<F> {
    pub seqs: Vec<SequenceTrace>,
    /// Encoder outputs, one row per byte position (including `<bos>`).
    pub x: Var,
    pub aux_logits: Var,
    /// Router scores, one row per data position (H-Net only).
    pub scores: Option<Var>,
    /// Trunk inputs `z`, one row per trunk element.
    pub trunk_in: Var,
    /// Trunk outputs `~z`.
    pub trunk_out: Var,
    /// Fused decoder inputs `u`.
    pub fused: Var,
    pub logits: Var,
    pub targets: Vec<usize>,
    pub weights: Vec<F>,
    pub flops: ComponentFlops,
}

impl<F: Float> ForwardTrace<F> {
    /// Logits rows `0..=N` of sequence `i`.
    pub fn logits_of(&self, g: &Graph<F>, i: usize) -> Tensor<F> {
        rows_of(g.value(self.logits), self.seqs[i].offset, self.seqs[i].n() + 1)
    }

    pub fn trunk_out_of(&self, g: &Graph<F>, i: usize) -> Tensor<F> {
        let s = &self.seqs[i];
        rows_of(g.value(self.trunk_out), s.trunk_offset, s.trunk.len())
    }
}

fn rows_of<F: Float>(t: &Tensor<F>, start: usize, n: usize) -> Tensor<F> {
    let c = t.cols();
    Tensor::new(vec![n, c], t.data()[start * c..(start + n) * c].to_vec()).expect("rows in range")
}

/// Scalar loss nodes and their values.
pub struct Losses {
    pub total: Var,
    pub main: f64,
    pub aux: f64,
    pub ratio: f64,
}

/// Trunk element whose output feeds data position `n` (`n = 0` is
/// `<bos>`): the committed state at a patch end, else the latest
/// scratchpad of the current patch, else the previous committed state.
pub fn select_state(n: usize, seg: &Segmentation, sched: &ScratchpadSchedule) -> Result<usize> {
    if n > seg.n() {
        return Err(Error::invalid(
            "select_state",
            format!("position {n} outside 0..={}", seg.n()),
        ));
    }
    Ok(state_indices(seg, sched)[n])
}

/// [`select_state`] for every position `0..=N`.
pub fn state_indices(seg: &Segmentation, sched: &ScratchpadSchedule) -> Vec<usize> {
    let mut out = Vec::with_capacity(seg.n() + 1);
    out.push(0);
    // index of the element just before patch l's first scratchpad
    let mut base = 0;
    for (l0, &(s, e)) in seg.spans().iter().enumerate() {
        let mut t = 0;
        for n in s..=e {
            if n == e {
                out.push(base + sched.t[l0] + 1);
            } else {
                t += sched.p[n - 1] as usize;
                out.push(if t == 0 { base } else { base + t });
            }
        }
        base += sched.t[l0] + 1;
    }
    out
}

/// Segmentation for the configured patchifier from causal inputs.
pub fn segment(patchifier: &Patchifier, bytes: &[u8], entropies: &[f64], scores: &[f64]) -> Result<Segmentation> {
    Ok(match patchifier {
        Patchifier::Fixed { p } => segment_fixed(bytes.len(), *p)?,
        Patchifier::SpaceByte { delimiters } => segment_spacebyte(bytes, delimiters),
        Patchifier::Entropy { tau_p } => segment_entropy(entropies, *tau_p),
        Patchifier::HNet { .. } => segment_hnet(scores),
    })
}

fn flop_mark(acc: &mut u64, mark: &mut u64) {
    let now = counter::read();
    *acc += now - *mark;
    *mark = now;
}

impl<F: Float> Model<F> {
    /// Parallel forward over a batch of byte strings (each gets its own
    /// `<bos>`; sequences never attend to each other).
    pub fn forward(&self, g: &mut Graph<F>, batch: &[Vec<u8>]) -> Result<ForwardTrace<F>> {
        let store = &self.store;
        let mut flops = ComponentFlops::default();
        let mut mark = counter::read();

        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut blocks = Vec::new();
        let mut offsets = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for seq in batch {
            let off = ids.len();
            offsets.push(off);
            ids.push(crate::corpus::BOS_ID as usize);
            ids.extend(seq.iter().map(|&b| b as usize));
            positions.extend(0..=seq.len());
            blocks.push(AttnBlock {
                q_start: off,
                k_start: off,
                mask: Arc::new(AttentionMask::causal(seq.len() + 1)),
            });
            targets.extend(seq.iter().map(|&b| b as usize));
            targets.push(PAD_ID as usize);
            weights.extend(std::iter::repeat_n(F::one(), seq.len()));
            weights.push(F::zero());
        }

        let table = g.param(store, self.embed);
        let emb = g.embedding(table, &ids)?;
        let x = transformer_stack(g, store, &self.encoder, emb, &blocks, &positions)?;
        flop_mark(&mut flops.encoder, &mut mark);

        let xd = g.stop_gradient(x);
        let a = transformer_stack(g, store, &self.aux, xd, &blocks, &positions)?;
        flop_mark(&mut flops.aux, &mut mark);
        let aux_logits = self.aux_head.forward(g, store, a)?;
        flop_mark(&mut flops.heads, &mut mark);
        let ent: Vec<f64> = entropy_rows(g.value(aux_logits)).iter().map(|h| h.as_f64()).collect();

        let scores = match &self.router {
            Some(r) => {
                let mut cur = Vec::new();
                let mut prev = Vec::new();
                for (seq, &off) in batch.iter().zip(&offsets) {
                    for n in 1..=seq.len() {
                        cur.push(off + n);
                        prev.push((n > 1).then_some(off + n - 1));
                    }
                }
                Some(r.scores(g, store, a, &cur, &prev)?)
            }
            None => None,
        };
        let score_vals: Vec<f64> = scores
            .map(|s| g.value(s).data().iter().map(|v| v.as_f64()).collect())
            .unwrap_or_default();

        let mut seqs = Vec::with_capacity(batch.len());
        let mut score_off = 0;
        let mut trunk_len = 0;
        for (seq, &off) in batch.iter().zip(&offsets) {
            let n = seq.len();
            let entropies = ent[off..=off + n].to_vec();
            let sc = if scores.is_some() {
                score_vals[score_off..score_off + n].to_vec()
            } else {
                Vec::new()
            };
            score_off += n;
            let segmentation = segment(&self.cfg.patchifier, seq, &entropies[1..], &sc)?;
            let raw_triggers = compute_triggers(&self.cfg.trigger, &entropies[1..], seq, &segmentation)?;
            let schedule = apply_precedence(&raw_triggers, &segmentation)?;
            let trunk = build_trunk_sequence(&segmentation, &schedule)?;
            let state = state_indices(&segmentation, &schedule);
            seqs.push(SequenceTrace {
                offset: off,
                trunk_offset: trunk_len,
                bytes: seq.clone(),
                entropies,
                scores: sc,
                segmentation,
                raw_triggers,
                schedule,
                trunk,
                state,
            });
            trunk_len += seqs.last().unwrap().trunk.len();
        }

        // trunk inputs
        let mut spans = Vec::with_capacity(trunk_len);
        let mut tpos = Vec::with_capacity(trunk_len);
        let mut tblocks = Vec::with_capacity(seqs.len());
        for s in &seqs {
            for el in &s.trunk.elements {
                spans.push(match el.kind {
                    ElementKind::Bos => (s.offset, s.offset + 1),
                    _ => (s.offset + el.span.0, s.offset + el.span.1 + 1),
                });
                tpos.push(el.position);
            }
            tblocks.push(AttnBlock {
                q_start: s.trunk_offset,
                k_start: s.trunk_offset,
                mask: Arc::new(s.trunk.mask.clone()),
            });
        }
        let z = aggregate(g, store, &self.agg, x, &spans)?;
        let mut z = linear(g, store, self.proj_in, z)?;
        flop_mark(&mut flops.patchify, &mut mark);

        // committed rows carry the boundary score for the router's gradient
        let mut score_row = Vec::new();
        if let Some(sv) = scores {
            let ones = g.constant(Tensor::full(&[1, 1], F::one()));
            let table = g.concat_rows(&[sv, ones])?;
            let one_row = score_vals.len();
            let mut sidx = Vec::with_capacity(trunk_len);
            let mut score_off = 0;
            for s in &seqs {
                for el in &s.trunk.elements {
                    sidx.push(match el.kind {
                        ElementKind::Committed { .. } => score_off + el.span.1 - 1,
                        _ => one_row,
                    });
                }
                score_off += s.n();
            }
            let st = g.gather_rows(table, &sidx)?;
            z = g.straight_through(z, st)?;
            score_row = sidx;
        }

        let tout = transformer_stack(g, store, &self.trunk, z, &tblocks, &tpos)?;
        flop_mark(&mut flops.trunk, &mut mark);
        let proj = linear(g, store, self.proj_out, tout)?;
        flop_mark(&mut flops.patchify, &mut mark);

        // fused state table: projected trunk outputs, optionally followed by
        // smoothed committed rows
        let mut state_rows = Vec::with_capacity(ids.len());
        let states = if self.cfg.hnet_smoothing && scores.is_some() {
            let mut cur = Vec::new();
            let mut prev = Vec::new();
            let mut c = Vec::new();
            let mut smoothed_at = vec![usize::MAX; trunk_len];
            for s in &seqs {
                let mut last = s.trunk_offset;
                for (i, el) in s.trunk.elements.iter().enumerate() {
                    if let ElementKind::Committed { .. } = el.kind {
                        smoothed_at[s.trunk_offset + i] = trunk_len + cur.len();
                        cur.push(s.trunk_offset + i);
                        prev.push(last);
                        c.push(score_row[s.trunk_offset + i]);
                        last = s.trunk_offset + i;
                    }
                }
            }
            let table = if cur.is_empty() {
                proj
            } else {
                let sv = scores.unwrap();
                let cv = g.gather_rows(sv, &c)?;
                let cur = g.gather_rows(proj, &cur)?;
                let prev = g.gather_rows(proj, &prev)?;
                let neg = g.scale(prev, -F::one());
                let diff = g.add(cur, neg)?;
                let sc = g.scale_rows(diff, cv)?;
                let sm = g.add(prev, sc)?;
                g.concat_rows(&[proj, sm])?
            };
            for s in &seqs {
                for &e in &s.state {
                    let r = s.trunk_offset + e;
                    state_rows.push(if smoothed_at[r] != usize::MAX { smoothed_at[r] } else { r });
                }
            }
            table
        } else {
            for s in &seqs {
                state_rows.extend(s.state.iter().map(|&e| s.trunk_offset + e));
            }
            proj
        };

        let sel = g.gather_rows(states, &state_rows)?;
        let u = g.add(sel, x)?;
        let dec = transformer_stack(g, store, &self.decoder, u, &blocks, &positions)?;
        flop_mark(&mut flops.decoder, &mut mark);
        let logits = self.head.forward(g, store, dec)?;
        flop_mark(&mut flops.heads, &mut mark);

        Ok(ForwardTrace {
            seqs,
            x,
            aux_logits,
            scores,
            trunk_in: z,
            trunk_out: tout,
            fused: u,
            logits,
            targets,
            weights,
            flops,
        })
    }

    /// `main + aux + 0.03 * ratio`, the ratio term only for H-Net.
    pub fn losses(&self, g: &mut Graph<F>, trace: &ForwardTrace<F>) -> Result<Losses> {
        let main = g.cross_entropy(trace.logits, &trace.targets, &trace.weights)?;
        let aux = g.cross_entropy(trace.aux_logits, &trace.targets, &trace.weights)?;
        let mut total = g.add(main, aux)?;
        let mut ratio_v = 0.0;
        if let (Some(s), Some(r)) = (trace.scores, &self.router) {
            if !g.value(s).is_empty() {
                let ratio = ratio_loss_graph(g, s, r.target_size)?;
                ratio_v = g.value(ratio).item().as_f64();
                let w = g.scale(ratio, F::from_f64(RATIO_LOSS_WEIGHT));
                total = g.add(total, w)?;
            }
        }
        Ok(Losses {
            main: g.value(main).item().as_f64(),
            aux: g.value(aux).item().as_f64(),
            ratio: ratio_v,
            total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scratchpad::TriggerPolicy;

    fn seg(spans: &[(usize, usize)]) -> Segmentation {
        Segmentation::new(spans.to_vec(), spans.last().unwrap().1).unwrap()
    }

    #[test]
    fn select_state_example() {
        let s = seg(&[(1, 4)]);
        let sched = apply_precedence(&[false, true, false, false], &s).unwrap();
        let ts = build_trunk_sequence(&s, &sched).unwrap();
        let idx = state_indices(&s, &sched);
        let spans: Vec<_> = idx.iter().map(|&i| ts.elements[i].span).collect();
        assert_eq!(spans, vec![(0, 0), (0, 0), (1, 2), (1, 2), (1, 4)]);
        assert!(select_state(5, &s, &sched).is_err());
    }

    #[test]
    fn select_state_without_triggers_is_two_case_rule() {
        let s = seg(&[(1, 2), (3, 5)]);
        let idx = state_indices(&s, &ScratchpadSchedule::none(&s));
        assert_eq!(idx, vec![0, 0, 1, 1, 1, 2]);
    }

    #[test]
    fn dense_states_end_at_their_position() {
        let s = segment_fixed(8, 4).unwrap();
        let sched = apply_precedence(&[true; 8], &s).unwrap();
        let ts = build_trunk_sequence(&s, &sched).unwrap();
        for (n, i) in state_indices(&s, &sched).into_iter().enumerate().skip(1) {
            assert_eq!(ts.elements[i].span.1, n);
        }
    }

    #[test]
    fn trunk_lengths() {
        let cfg = ModelConfig::tiny(16, 16, 1, Patchifier::Fixed { p: 1 }, TriggerPolicy::None);
        let m = Model::<f64>::new(cfg, 0).unwrap();
        let mut g = Graph::inference();
        let t = m.forward(&mut g, &[b"abcde".to_vec()]).unwrap();
        assert_eq!(t.seqs[0].trunk.len(), 6);

        let cfg = ModelConfig::tiny(16, 16, 1, Patchifier::Fixed { p: 8 }, TriggerPolicy::Dense);
        let m = Model::<f64>::new(cfg, 0).unwrap();
        let mut g = Graph::inference();
        let t = m.forward(&mut g, &[b"abcdefgh".to_vec()]).unwrap();
        assert_eq!(t.seqs[0].trunk.len(), 9);
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let cfg = ModelConfig::tiny(32, 32, 1, Patchifier::Fixed { p: 4 }, TriggerPolicy::Entropy(1.5));
        let m = Model::<f64>::new(cfg, 1).unwrap();
        let mut g = Graph::new();
        let t = m.forward(&mut g, &[b"hello world".to_vec(), b"xy".to_vec()]).unwrap();
        let l = m.losses(&mut g, &t).unwrap();
        let ln320 = (320f64).ln();
        assert!((l.main - ln320).abs() < 0.05, "{}", l.main);
        assert!((l.aux - ln320).abs() < 0.05, "{}", l.aux);
        assert_eq!(l.ratio, 0.0);
        assert!((g.value(l.total).item() - (l.main + l.aux)).abs() < 1e-12);
    }

    #[test]
    fn knob_validation() {
        let cfg = ModelConfig::tiny(16, 16, 1, Patchifier::Entropy { tau_p: 2.5 }, TriggerPolicy::Entropy(1.0));
        assert!(cfg.with_knobs(&Knobs { tau_sp: Some(2.5), ..Knobs::default() }).is_err());
        assert!(cfg.with_knobs(&Knobs { patch_size: Some(4), ..Knobs::default() }).is_err());
        let c = cfg.with_knobs(&Knobs { tau_p: Some(3.0), ..Knobs::default() }).unwrap();
        assert_eq!(c.digest(), cfg.digest());
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut cfg = ModelConfig::tiny(16, 16, 1, Patchifier::Fixed { p: 2 }, TriggerPolicy::None);
        cfg.decoder.d_model = 32;
        assert!(cfg.validate().is_err());
    }
}
