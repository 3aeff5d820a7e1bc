//! Incremental byte-by-byte inference with scratchpad overriding.
//!
//! Only `<bos>` and committed patch states enter the trunk cache.
//! Scratchpad states run through the trunk against that cache, replace the
//! pending fusion state, and are discarded.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Float};
use crate::corpus::BOS_ID;
use crate::error::{Error, Result};
use crate::layers::{aggregate_rows, linear_row, stack_step, StackCache};
use crate::model::{Model, Patchifier};
use crate::scratchpad::TriggerPolicy;

/// What happened at one data position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub position: usize,
    pub byte: u8,
    pub entropy: f64,
    pub boundary: bool,
    /// Trigger before precedence.
    pub raw_trigger: bool,
    pub scratchpad: bool,
    pub suppressed: bool,
    /// End of the span behind the fused state used at this position.
    pub state_span_end: usize,
}

impl StepEvent {
    pub fn lag(&self) -> usize {
        self.position - self.state_span_end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvReport {
    pub trunk_entries: usize,
    pub byte_entries: usize,
    pub scratchpads_fired: usize,
    pub bytes_consumed: usize,
}

impl KvReport {
    /// Bytes per committed trunk entry.
    pub fn trunk_reduction(&self) -> f64 {
        self.bytes_consumed as f64 / (self.trunk_entries - 1).max(1) as f64
    }
}

pub struct Session<'m, F: Float> {
    model: &'m Model<F>,
    enc: StackCache<F>,
    aux: StackCache<F>,
    dec: StackCache<F>,
    trunk: StackCache<F>,
    bytes: Vec<u8>,
    /// Encoder outputs of the current patch, with their aggregation
    /// key/value projections.
    patch_x: Vec<Vec<F>>,
    patch_k: Vec<F>,
    patch_v: Vec<F>,
    prev_aux: Option<Vec<F>>,
    patch_start: usize,
    committed: usize,
    state: Vec<F>,
    state_span_end: usize,
    last_committed: Vec<F>,
    scratchpads: usize,
    logits: Vec<F>,
    events: Vec<StepEvent>,
    finished: bool,
}

impl<'m, F: Float> Session<'m, F> {
    /// Consumes `<bos>`; [`Session::logits`] then predicts the first byte.
    pub fn new(model: &'m Model<F>) -> Self {
        let mut s = Session {
            model,
            enc: StackCache::new(&model.encoder),
            aux: StackCache::new(&model.aux),
            dec: StackCache::new(&model.decoder),
            trunk: StackCache::new(&model.trunk),
            bytes: Vec::new(),
            patch_x: Vec::new(),
            patch_k: Vec::new(),
            patch_v: Vec::new(),
            prev_aux: None,
            patch_start: 1,
            committed: 0,
            state: Vec::new(),
            state_span_end: 0,
            last_committed: Vec::new(),
            scratchpads: 0,
            logits: Vec::new(),
            events: Vec::new(),
            finished: false,
        };
        let x = s.encode(BOS_ID as usize, 0);
        let _ = s.auxiliary(&x, 0);
        s.push_patch_row(x.clone());
        let p = s.trunk_state(true);
        s.last_committed = p.clone();
        s.state = p;
        s.patch_x.clear();
        s.patch_k.clear();
        s.patch_v.clear();
        s.decode(&x, 0);
        s
    }

    pub fn model(&self) -> &Model<F> {
        self.model
    }

    /// Next-byte logits after everything consumed so far.
    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn events(&self) -> &[StepEvent] {
        &self.events
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn trunk_cache_len(&self) -> usize {
        self.trunk.len()
    }

    pub fn kv_report(&self) -> KvReport {
        KvReport {
            trunk_entries: 1 + self.committed,
            byte_entries: 1 + self.bytes.len(),
            scratchpads_fired: self.scratchpads,
            bytes_consumed: self.bytes.len(),
        }
    }

    /// Consumes one byte and returns the logits for the next.
    pub fn step(&mut self, byte: u8) -> Result<&[F]> {
        self.advance(byte, false)
    }

    /// Consumes the final byte of a sequence: its patch is closed as in
    /// training, and the session accepts no further bytes.
    pub fn step_last(&mut self, byte: u8) -> Result<&[F]> {
        self.advance(byte, true)?;
        self.finished = true;
        Ok(&self.logits)
    }

    fn advance(&mut self, byte: u8, last: bool) -> Result<&[F]> {
        if self.finished {
            return Err(Error::SessionFinished);
        }
        let model = self.model;
        let n = self.bytes.len() + 1;
        self.bytes.push(byte);
        let x = self.encode(byte as usize, n);
        let (a, entropy) = self.auxiliary(&x, n);
        self.push_patch_row(x.clone());

        let score = model.router.as_ref().map(|r| {
            r.score_row(&model.store, &a, self.prev_aux.as_deref().filter(|_| n > 1))
        });
        self.prev_aux = Some(a);

        let boundary = last
            || match &model.cfg.patchifier {
                Patchifier::Fixed { p } => n % p == 0,
                Patchifier::SpaceByte { delimiters } => {
                    delimiters.contains(&byte) && (n == 1 || !delimiters.contains(&self.bytes[n - 2]))
                }
                Patchifier::Entropy { tau_p } => entropy > *tau_p,
                Patchifier::HNet { .. } => score.unwrap().as_f64() > crate::patchify::HNET_THRESHOLD,
            };
        let raw_trigger = match &model.cfg.trigger {
            TriggerPolicy::None => false,
            TriggerPolicy::Dense => true,
            TriggerPolicy::Entropy(tau) => entropy > *tau,
            TriggerPolicy::Stride(s) => (n - self.patch_start + 1) % s == 0,
            TriggerPolicy::Whitespace(d) => d.contains(&byte),
        };

        let scratchpad = !boundary && raw_trigger;
        if boundary {
            let p = self.trunk_state(true);
            let c = score.unwrap_or_else(F::one);
            self.state = if model.cfg.hnet_smoothing && score.is_some() {
                let prev = &self.last_committed;
                prev.iter()
                    .zip(&p)
                    .map(|(&pr, &cur)| pr + (cur + -pr) * c)
                    .collect()
            } else {
                p.clone()
            };
            self.last_committed = p;
            self.committed += 1;
            self.patch_start = n + 1;
            self.state_span_end = n;
            self.patch_x.clear();
            self.patch_k.clear();
            self.patch_v.clear();
        } else if scratchpad {
            self.state = self.trunk_state(false);
            self.scratchpads += 1;
            self.state_span_end = n;
        }
        self.events.push(StepEvent {
            position: n,
            byte,
            entropy,
            boundary,
            raw_trigger,
            scratchpad,
            suppressed: boundary && raw_trigger,
            state_span_end: self.state_span_end,
        });
        self.decode(&x, n);
        Ok(&self.logits)
    }

    fn encode(&mut self, id: usize, pos: usize) -> Vec<F> {
        let m = self.model;
        let emb = m.store.get(m.embed).row(id).to_vec();
        stack_step(&m.store, &m.encoder, &mut self.enc, &emb, pos, true)
    }

    fn auxiliary(&mut self, x: &[F], pos: usize) -> (Vec<F>, f64) {
        let m = self.model;
        let a = stack_step(&m.store, &m.aux, &mut self.aux, x, pos, true);
        let logits = m.aux_head.apply(&m.store, &a);
        let h = kernels::entropy_from_logits(&logits).as_f64();
        (a, h)
    }

    fn push_patch_row(&mut self, x: Vec<F>) {
        let m = self.model;
        self.patch_k.extend(linear_row(&m.store, m.agg.attn.wk, &x));
        self.patch_v.extend(linear_row(&m.store, m.agg.attn.wv, &x));
        self.patch_x.push(x);
    }

    /// Aggregates the current patch prefix and runs it through the trunk;
    /// returns the projected output.
    fn trunk_state(&mut self, commit: bool) -> Vec<F> {
        let m = self.model;
        let rows: Vec<&[F]> = self.patch_x.iter().map(Vec::as_slice).collect();
        let z = aggregate_rows(&m.store, &m.agg, &rows, &self.patch_k, &self.patch_v);
        let z = linear_row(&m.store, m.proj_in, &z);
        let pos = if self.bytes.is_empty() { 0 } else { self.committed + 1 };
        let out = stack_step(&m.store, &m.trunk, &mut self.trunk, &z, pos, commit);
        linear_row(&m.store, m.proj_out, &out)
    }

    fn decode(&mut self, x: &[F], pos: usize) {
        let m = self.model;
        let u: Vec<F> = self.state.iter().zip(x).map(|(s, x)| *s + *x).collect();
        let h = stack_step(&m.store, &m.decoder, &mut self.dec, &u, pos, true);
        self.logits = m.head.apply(&m.store, &h);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.2,
            top_p: 0.95,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("sampler", format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid("sampler", format!("top_p {} must be in (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// Samples a byte value (sentinel ids are never produced).
pub fn sample_byte<F: Float, R: rand::Rng>(logits: &[F], cfg: &SamplerConfig, rng: &mut R) -> u8 {
    let l: Vec<f64> = logits[..256].iter().map(|v| v.as_f64()).collect();
    if cfg.temperature == 0.0 {
        let mut best = 0;
        for (i, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = i;
            }
        }
        return best as u8;
    }
    let mut p: Vec<f64> = l.iter().map(|v| v / cfg.temperature).collect();
    kernels::softmax_row(&mut p);
    if cfg.top_p < 1.0 {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mut acc = 0.0;
        let mut keep = vec![false; p.len()];
        for &i in &order {
            keep[i] = true;
            acc += p[i];
            if acc >= cfg.top_p {
                break;
            }
        }
        p.iter_mut().zip(&keep).for_each(|(v, k)| {
            if !k {
                *v = 0.0
            }
        });
    }
    let dist = WeightedIndex::new(&p).expect("at least one positive weight");
    dist.sample(rng) as u8
}

/// Feeds `prompt` through the session, then samples `max_new` bytes.
pub fn generate<F: Float>(
    session: &mut Session<'_, F>,
    prompt: &[u8],
    max_new: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<u8>> {
    sampler.validate()?;
    for &b in prompt {
        session.step(b)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let b = sample_byte(session.logits(), sampler, &mut rng);
        out.push(b);
        session.step(b)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(p: Patchifier, t: TriggerPolicy) -> Model<f64> {
        Model::new(ModelConfig::tiny(16, 16, 1, p, t), 3).unwrap()
    }

    #[test]
    fn trunk_cache_holds_only_committed() {
        for t in [TriggerPolicy::None, TriggerPolicy::Dense, TriggerPolicy::Entropy(0.0)] {
            let m = model(Patchifier::Fixed { p: 8 }, t);
            let mut s = Session::new(&m);
            for b in 0..32u8 {
                s.step(b).unwrap();
            }
            assert_eq!(s.trunk_cache_len(), 5);
            assert_eq!(s.kv_report().trunk_entries, 5);
            assert_eq!(s.kv_report().byte_entries, 33);
        }
    }

    #[test]
    fn reduction_factor() {
        let m = model(Patchifier::Fixed { p: 16 }, TriggerPolicy::None);
        let mut s = Session::new(&m);
        for b in 0..160u8 {
            s.step(b).unwrap();
        }
        assert_eq!(s.kv_report().trunk_reduction(), 16.0);
    }

    #[test]
    fn finished_session_rejects_steps() {
        let m = model(Patchifier::Fixed { p: 4 }, TriggerPolicy::None);
        let mut s = Session::new(&m);
        s.step_last(b'a').unwrap();
        assert!(matches!(s.step(b'b'), Err(Error::SessionFinished)));
    }

    #[test]
    fn greedy_generation_is_repeatable() {
        let m = model(Patchifier::Fixed { p: 4 }, TriggerPolicy::Dense);
        let cfg = SamplerConfig { temperature: 0.0, ..SamplerConfig::default() };
        let run = || generate(&mut Session::new(&m), b"ab", 5, &cfg).unwrap();
        assert_eq!(run(), run());
        let mut s = Session::new(&m);
        assert!(generate(&mut s, b"xyz", 0, &cfg).unwrap().is_empty());
        assert_eq!(s.kv_report().bytes_consumed, 3);
    }

    #[test]
    fn sampler_validation() {
        let bad = SamplerConfig { top_p: 0.0, ..SamplerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig { temperature: -1.0, ..SamplerConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn top_p_keeps_the_mode() {
        let mut logits = vec![0.0f64; 320];
        logits[65] = 10.0;
        let cfg = SamplerConfig { temperature: 1.0, top_p: 0.5, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_byte(&logits, &cfg, &mut rng), 65);
        }
    }
}
