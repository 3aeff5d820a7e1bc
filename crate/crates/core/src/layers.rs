//! Transformer building blocks.
//!
//! Every block has two forms: a graph form used by the parallel training
//! forward, and an eager single-row form used by incremental inference.
//! Both call the same kernels so their results agree to rounding.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, AttnBlock, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub use crate::autodiff::AttentionMask;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub rope_base: f64,
}

impl StackConfig {
    /// Heads default to `d_model / 64` (at least one).
    pub fn new(n_layers: usize, d_model: usize, d_ff: usize) -> Self {
        StackConfig {
            n_layers,
            d_model,
            d_ff,
            n_heads: (d_model / 64).max(1),
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    pub fn with_heads(mut self, n_heads: usize) -> Self {
        self.n_heads = n_heads;
        self
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "{name}: d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::ConfigInvalid(format!(
                "{name}: head width {} must be even for rotary embedding",
                self.d_model / self.n_heads
            )));
        }
        if self.n_layers > 0 && self.d_ff == 0 {
            return Err(Error::ConfigInvalid(format!("{name}: d_ff must be positive")));
        }
        Ok(())
    }
}

/// Truncated normal initializer (cut at two standard deviations).
pub fn trunc_normal<F: Float, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::from_f64(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register<F: Float>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> Self {
        NormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[d], F::one()), false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]), false),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn apply<F: Float>(&self, store: &ParamStore<F>, x: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); x.len()];
        kernels::layer_norm(
            x,
            x.len(),
            store.get(self.gamma).data(),
            store.get(self.beta).data(),
            &mut out,
        );
        out
    }
}

/// Linear map applied to a single row: `x[1,in] @ w[in,out]`.
pub fn linear_row<F: Float>(store: &ParamStore<F>, w: ParamId, x: &[F]) -> Vec<F> {
    let wt = store.get(w);
    let (k, n) = wt.dims2();
    kernels::matmul_fwd(x, wt.data(), 1, k, n)
}

pub fn linear<F: Float>(g: &mut Graph<F>, store: &ParamStore<F>, w: ParamId, x: Var) -> Result<Var> {
    let wv = g.param(store, w);
    g.matmul(x, wv)
}

/// Query/key/value/output projections of a multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn register<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        AttentionParams {
            wq: store.add(format!("{prefix}.wq"), trunc_normal(rng, &[d, d], INIT_STD), true),
            wk: store.add(format!("{prefix}.wk"), trunc_normal(rng, &[d, d], INIT_STD), true),
            wv: store.add(format!("{prefix}.wv"), trunc_normal(rng, &[d, d], INIT_STD), true),
            wo: store.add(format!("{prefix}.wo"), trunc_normal(rng, &[d, d], out_std), true),
        }
    }
}

/// Masked multi-head self-attention with rotary positions.
#[allow(clippy::too_many_arguments)]
pub fn mha<F: Float>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &AttentionParams,
    x: Var,
    blocks: &[AttnBlock],
    positions: &[usize],
    heads: usize,
    rope_base: f64,
) -> Result<Var> {
    let rows = g.value(x).rows();
    if positions.len() != rows {
        return Err(Error::shape("mha", g.shape(x), &[positions.len()]));
    }
    let q = linear(g, store, p.wq, x)?;
    let k = linear(g, store, p.wk, x)?;
    let v = linear(g, store, p.wv, x)?;
    let q = g.rope(q, positions, heads, rope_base)?;
    let k = g.rope(k, positions, heads, rope_base)?;
    let a = g.attention(q, k, v, heads, blocks)?;
    linear(g, store, p.wo, a)
}

/// GEGLU feed-forward: `(gelu(x Wg) * (x Wu)) Wd`.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

impl FfnParams {
    pub fn register<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        d_ff: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        FfnParams {
            w_gate: store.add(format!("{prefix}.w_gate"), trunc_normal(rng, &[d, d_ff], INIT_STD), true),
            w_up: store.add(format!("{prefix}.w_up"), trunc_normal(rng, &[d, d_ff], INIT_STD), true),
            w_down: store.add(format!("{prefix}.w_down"), trunc_normal(rng, &[d_ff, d], out_std), true),
        }
    }

    pub fn apply<F: Float>(&self, store: &ParamStore<F>, x: &[F]) -> Vec<F> {
        let gate = linear_row(store, self.w_gate, x);
        let up = linear_row(store, self.w_up, x);
        let h: Vec<F> = gate
            .iter()
            .zip(&up)
            .map(|(a, b)| kernels::gelu(*a) * *b)
            .collect();
        linear_row(store, self.w_down, &h)
    }
}

pub fn geglu_block<F: Float>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &FfnParams,
    x: Var,
) -> Result<Var> {
    let gate = linear(g, store, p.w_gate, x)?;
    let gate = g.gelu(gate);
    let up = linear(g, store, p.w_up, x)?;
    let h = g.mul(gate, up)?;
    linear(g, store, p.w_down, h)
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
}

/// Pre-norm transformer stack parameters.
#[derive(Clone, Debug)]
pub struct StackParams {
    pub cfg: StackConfig,
    pub layers: Vec<LayerParams>,
}

impl StackParams {
    pub fn register<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &StackConfig,
        rng: &mut R,
    ) -> Self {
        let out_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                LayerParams {
                    norm1: NormParams::register(store, &format!("{p}.norm1"), cfg.d_model),
                    attn: AttentionParams::register(store, &format!("{p}.attn"), cfg.d_model, out_std, rng),
                    norm2: NormParams::register(store, &format!("{p}.norm2"), cfg.d_model),
                    ffn: FfnParams::register(store, &format!("{p}.ffn"), cfg.d_model, cfg.d_ff, out_std, rng),
                }
            })
            .collect();
        StackParams {
            cfg: cfg.clone(),
            layers,
        }
    }
}

/// `x += mha(norm(x)); x += geglu(norm(x))` per layer.
pub fn transformer_stack<F: Float>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    sp: &StackParams,
    x: Var,
    blocks: &[AttnBlock],
    positions: &[usize],
) -> Result<Var> {
    let d = g.value(x).cols();
    if d != sp.cfg.d_model && !sp.layers.is_empty() {
        return Err(Error::shape("transformer_stack", g.shape(x), &[sp.cfg.d_model]));
    }
    let mut h = x;
    for layer in &sp.layers {
        let n = layer.norm1.forward(g, store, h)?;
        let a = mha(g, store, &layer.attn, n, blocks, positions, sp.cfg.n_heads, sp.cfg.rope_base)?;
        h = g.add(h, a)?;
        let n = layer.norm2.forward(g, store, h)?;
        let f = geglu_block(g, store, &layer.ffn, n)?;
        h = g.add(h, f)?;
    }
    Ok(h)
}

/// Per-layer rotated keys and values of already-processed rows.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<F> {
    pub keys: Vec<F>,
    pub values: Vec<F>,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct StackCache<F> {
    pub layers: Vec<LayerCache<F>>,
}

impl<F: Float> StackCache<F> {
    pub fn new(sp: &StackParams) -> Self {
        StackCache {
            layers: (0..sp.layers.len())
                .map(|_| LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                    len: 0,
                })
                .collect(),
        }
    }

    /// Number of cached rows (identical across layers).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs one new row through the stack, attending to the cached rows and
/// itself. With `commit` the row's keys/values stay in the cache;
/// otherwise the cache is left exactly as it was.
pub fn stack_step<F: Float>(
    store: &ParamStore<F>,
    sp: &StackParams,
    cache: &mut StackCache<F>,
    x: &[F],
    position: usize,
    commit: bool,
) -> Vec<F> {
    let d = sp.cfg.d_model;
    let heads = sp.cfg.n_heads;
    let mut h = x.to_vec();
    for (layer, lc) in sp.layers.iter().zip(cache.layers.iter_mut()) {
        let n = layer.norm1.apply(store, &h);
        let mut q = linear_row(store, layer.attn.wq, &n);
        let mut k = linear_row(store, layer.attn.wk, &n);
        let v = linear_row(store, layer.attn.wv, &n);
        kernels::rope(&mut q, d, &[position], heads, sp.cfg.rope_base, false);
        kernels::rope(&mut k, d, &[position], heads, sp.cfg.rope_base, false);
        lc.keys.extend_from_slice(&k);
        lc.values.extend_from_slice(&v);
        let a = kernels::attend_one(&q, &lc.keys, &lc.values, lc.len + 1, heads);
        if commit {
            lc.len += 1;
        } else {
            lc.keys.truncate(lc.len * d);
            lc.values.truncate(lc.len * d);
        }
        let a = linear_row(store, layer.attn.wo, &a);
        h.iter_mut().zip(&a).for_each(|(x, y)| *x += *y);
        let n = layer.norm2.apply(store, &h);
        let f = layer.ffn.apply(store, &n);
        h.iter_mut().zip(&f).for_each(|(x, y)| *x += *y);
    }
    h
}

/// Cross-attention aggregation of byte states into one patch vector.
#[derive(Clone, Debug)]
pub struct AggregateParams {
    pub attn: AttentionParams,
    pub heads: usize,
}

impl AggregateParams {
    pub fn register<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        AggregateParams {
            attn: AttentionParams::register(store, prefix, d, INIT_STD, rng),
            heads,
        }
    }
}

/// Aggregates rows `x[s..e]` for every half-open span: the span mean is the
/// query of a multi-head cross-attention restricted to the span.
pub fn aggregate<F: Float>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &AggregateParams,
    x: Var,
    spans: &[(usize, usize)],
) -> Result<Var> {
    if spans.iter().any(|&(s, e)| s >= e) {
        return Err(Error::invalid("aggregate", "empty span"));
    }
    let mean = g.mean_spans(x, spans)?;
    let q = linear(g, store, p.attn.wq, mean)?;
    let k = linear(g, store, p.attn.wk, x)?;
    let v = linear(g, store, p.attn.wv, x)?;
    let z = g.span_attention(q, k, v, p.heads, spans)?;
    linear(g, store, p.attn.wo, z)
}

/// Eager aggregation over `rows` (the span, in order) given their
/// precomputed key and value projections.
pub fn aggregate_rows<F: Float>(
    store: &ParamStore<F>,
    p: &AggregateParams,
    rows: &[&[F]],
    keys: &[F],
    values: &[F],
) -> Vec<F> {
    let d = rows[0].len();
    let mut mean = vec![F::zero(); d];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, x)| *m += *x);
    }
    let inv = F::one() / F::from_f64(rows.len() as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    let q = linear_row(store, p.attn.wq, &mean);
    let z = kernels::attend_one(&q, keys, values, rows.len(), p.heads);
    linear_row(store, p.attn.wo, &z)
}

/// Final norm followed by a projection to vocabulary logits.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub norm: NormParams,
    pub w: ParamId,
}

impl HeadParams {
    pub fn register<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        HeadParams {
            norm: NormParams::register(store, &format!("{prefix}.norm"), d),
            w: store.add(format!("{prefix}.w"), trunc_normal(rng, &[d, vocab], INIT_STD), true),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, store, x)?;
        linear(g, store, self.w, n)
    }

    pub fn apply<F: Float>(&self, store: &ParamStore<F>, x: &[F]) -> Vec<F> {
        let n = self.norm.apply(store, x);
        linear_row(store, self.w, &n)
    }
}

/// Per-row next-byte entropy `H = -sum p ln p` of a logits matrix.
pub fn entropy_rows<F: Float>(logits: &Tensor<F>) -> Vec<F> {
    (0..logits.rows())
        .map(|r| kernels::entropy_from_logits(logits.row(r)))
        .collect()
}

/// One block covering `n` rows starting at `start` with the given mask.
pub fn block(start: usize, mask: AttentionMask) -> AttnBlock {
    AttnBlock {
        q_start: start,
        k_start: start,
        mask: Arc::new(mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        trunc_normal(rng, shape, 1.0)
    }

    #[test]
    fn zero_layer_stack_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let cfg = StackConfig::new(0, 8, 16);
        let sp = StackParams::register(&mut store, "s", &cfg, &mut rng());
        let mut g = Graph::new();
        let x0 = random(&mut rng(), &[3, 8]);
        let x = g.constant(x0.clone());
        let y = transformer_stack(&mut g, &store, &sp, x, &[block(0, AttentionMask::causal(3))], &[0, 1, 2]).unwrap();
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn zero_weights_pass_through() {
        let mut store = ParamStore::<f64>::new();
        let cfg = StackConfig::new(2, 8, 16).with_heads(2);
        let sp = StackParams::register(&mut store, "s", &cfg, &mut rng());
        for e in store.entries_mut() {
            if e.decay {
                e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let x0 = random(&mut rng(), &[4, 8]);
        let x = g.constant(x0.clone());
        let y = transformer_stack(&mut g, &store, &sp, x, &[block(0, AttentionMask::causal(4))], &[0, 1, 2, 3]).unwrap();
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn identity_mask_returns_own_value_projection() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::register(&mut store, "a", 4, 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.constant(random(&mut r, &[3, 4]));
        let y = mha(&mut g, &store, &p, x, &[block(0, AttentionMask::identity(3))], &[0, 1, 2], 1, DEFAULT_ROPE_BASE).unwrap();
        let v = linear(&mut g, &store, p.wv, x).unwrap();
        let expect = linear(&mut g, &store, p.wo, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-14);
    }

    #[test]
    fn empty_mask_row_rejected() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::register(&mut store, "a", 4, 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.constant(random(&mut r, &[2, 4]));
        let mask = AttentionMask::from_fn(2, 2, |q, k| q == 0 && k == 0);
        let res = mha(&mut g, &store, &p, x, &[block(0, mask)], &[0, 1], 1, DEFAULT_ROPE_BASE);
        assert!(matches!(res, Err(Error::EmptyMaskRow { row: 1 })));
    }

    #[test]
    fn single_row_span_with_identity_projections() {
        let mut store = ParamStore::<f64>::new();
        let p = AggregateParams::register(&mut store, "agg", 4, 2, &mut rng());
        for id in [p.attn.wq, p.attn.wk, p.attn.wv, p.attn.wo] {
            *store.get_mut(id) = Tensor::eye(4);
        }
        let mut g = Graph::new();
        let x0 = random(&mut rng(), &[3, 4]);
        let x = g.constant(x0.clone());
        let z = aggregate(&mut g, &store, &p, x, &[(1, 2)]).unwrap();
        assert!(g.value(z).row(0).iter().zip(x0.row(1)).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(aggregate(&mut g, &store, &p, x, &[(1, 1)]).is_err());
    }

    #[test]
    fn uniform_and_saturated_entropy() {
        let uniform = Tensor::<f64>::zeros(&[1, 320]);
        assert!((entropy_rows(&uniform)[0] - 320f64.ln()).abs() < 1e-12);
        let mut hot = Tensor::<f64>::zeros(&[1, 320]);
        hot.data_mut()[3] = 1000.0;
        assert!(entropy_rows(&hot)[0] < 1e-12);
    }

    #[test]
    fn eager_step_matches_graph_stack() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let cfg = StackConfig::new(2, 8, 12).with_heads(2);
        let sp = StackParams::register(&mut store, "s", &cfg, &mut r);
        let x0 = random(&mut r, &[5, 8]);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = transformer_stack(&mut g, &store, &sp, x, &[block(0, AttentionMask::causal(5))], &[0, 1, 2, 3, 4]).unwrap();
        let mut cache = StackCache::new(&sp);
        for i in 0..5 {
            // a transient row must leave the cache untouched
            let _ = stack_step(&store, &sp, &mut cache, x0.row(i), i, false);
            assert_eq!(cache.len(), i);
            let out = stack_step(&store, &sp, &mut cache, x0.row(i), i, true);
            for (a, b) in out.iter().zip(g.value(y).row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
