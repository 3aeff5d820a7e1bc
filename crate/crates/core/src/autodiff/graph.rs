use std::collections::HashMap;
use std::sync::Arc;

use super::counter;
use super::kernels;
use super::mask::AttentionMask;
use super::params::{ParamId, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// One block of a block-diagonal self-attention: query rows
/// `q_start..q_start + mask.rows()` attend keys `k_start..k_start + mask.cols()`.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q_start: usize,
    pub k_start: usize,
    pub mask: Arc<AttentionMask>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Affine(Var, F),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Arc<[usize]>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskedFill(Var, Arc<[bool]>),
    MeanSpans(Var, Arc<[(usize, usize)]>),
    StopGrad,
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
        weights: Arc<[F]>,
        probs: Vec<F>,
        denom: F,
    },
    Rope {
        x: Var,
        positions: Arc<[usize]>,
        heads: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Arc<[AttnBlock]>,
        probs: Vec<Vec<F>>,
    },
    SpanAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Arc<[(usize, usize)]>,
        probs: Vec<F>,
    },
    StraightThrough(Var, Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of forward operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and backward is a single reverse sweep.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    record: bool,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Gradients aligned with the store's parameter order; parameters that
    /// did not take part in the graph get zeros.
    pub fn for_store(&self, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Float>, b: &Tensor<impl Float>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn require_2d<G: Float>(op: &'static str, t: &Tensor<G>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::invalid(
            op,
            format!("expected a 2-D tensor, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Strided gemm over slices with offsets; `c += / = alpha * a * b`.
#[allow(clippy::too_many_arguments)]
fn gemm_at<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[F],
    b_off: usize,
    rsb: usize,
    csb: usize,
    beta: F,
    c: &mut [F],
    c_off: usize,
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, r: usize, cc: usize, rs: usize, cs: usize| {
        off + (r.max(1) - 1) * rs + (cc.max(1) - 1) * cs
    };
    assert!(k == 0 || last(a_off, m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(b_off, k, n, rsb, csb) < b.len());
    assert!(last(c_off, m, n, rsc, 1) < c.len());
    if k == 0 {
        if beta == F::zero() {
            for i in 0..m {
                for j in 0..n {
                    c[c_off + i * rsc + j] = F::zero();
                }
            }
        }
        return;
    }
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}

impl<F: Float> Graph<F> {
    /// A recording graph (supports backward).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
        }
    }

    /// A forward-only graph: nothing requires gradients and no backward
    /// state is kept.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
            params: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_fwd(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul_t", self.value(a))?;
        let (n, k2) = require_2d("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            true,
            false,
        );
        counter::add_matmul(m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = require_2d("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = require_2d("add_bias", self.value(x))?;
        if self.value(bias).len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += *bb;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Multiplies row `r` of `x[m,n]` by `s[r]` (`s` has `m` elements).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = require_2d("scale_rows", self.value(x))?;
        if self.value(s).len() != m {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let mut out = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (r, row) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            for o in row.iter_mut() {
                *o *= sv[r];
            }
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleRows(x, s), ng))
    }

    /// `a * x + b` elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, a: F, b: F) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = a * *o + b;
        }
        let ng = self.needs(x);
        self.push(out, Op::Affine(x, a), ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.affine(x, c, F::zero())
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(xs.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![F::zero(); rows * total];
        let mut off = 0;
        for &x in xs {
            let t = self.value(x);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start + len > m {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {}..{} out of {}", start, start + len, m),
            ));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![len, n], data)?, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start + len > n {
            return Err(Error::invalid(
                "slice_cols",
                format!("cols {}..{} out of {}", start, start + len, n),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols(x, start), ng))
    }

    /// Row gather; with an embedding table this is the embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("index {} out of {} rows", i, m),
                ));
            }
            data.extend_from_slice(src.row(i));
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::Gather(x, idx.into()),
            ng,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, n) = require_2d("layer_norm", self.value(x))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = vec![F::zero(); self.value(x).len()];
        let (xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            n,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut out,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, rstd) = if ng && self.record {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = kernels::sigmoid(*v));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols().max(1);
        out.data_mut().chunks_mut(n).for_each(kernels::softmax_row);
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Writes the most negative finite value where `fill` is true.
    pub fn masked_fill(&mut self, x: Var, fill: &[bool]) -> Result<Var> {
        if fill.len() != self.value(x).len() {
            return Err(Error::shape("masked_fill", self.shape(x), &[fill.len()]));
        }
        let mut out = self.value(x).clone();
        for (o, &f) in out.data_mut().iter_mut().zip(fill) {
            if f {
                *o = F::min_value();
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaskedFill(x, fill.into()), ng))
    }

    /// Mean of rows `start..end` for each span.
    pub fn mean_spans(&mut self, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        let src = self.value(x);
        let mut data = vec![F::zero(); spans.len() * n];
        for (i, &(s, e)) in spans.iter().enumerate() {
            if s >= e || e > m {
                return Err(Error::invalid(
                    "mean_spans",
                    format!("span {}..{} invalid for {} rows", s, e, m),
                ));
            }
            let out = &mut data[i * n..(i + 1) * n];
            for r in s..e {
                for (o, v) in out.iter_mut().zip(src.row(r)) {
                    *o += *v;
                }
            }
            let inv = F::one() / F::from_f64((e - s) as f64);
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![spans.len(), n], data)?,
            Op::MeanSpans(x, spans.into()),
            ng,
        ))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGrad, false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::from_f64(t.len().max(1) as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Weighted mean next-byte cross-entropy (nats) over logit rows.
    ///
    /// Rows with zero weight contribute nothing; the mean divides by the
    /// weight sum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let (m, v) = require_2d("cross_entropy", self.value(logits))?;
        if targets.len() != m || weights.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { target: t, vocab: v });
        }
        let denom: F = weights.iter().copied().sum();
        let src = self.value(logits);
        let mut total = F::zero();
        let keep = self.record && self.needs(logits);
        let mut probs = if keep { vec![F::zero(); m * v] } else { Vec::new() };
        for r in 0..m {
            let row = src.row(r);
            let lse = kernels::log_sum_exp(row);
            if weights[r] != F::zero() {
                total += weights[r] * (lse - row[targets[r]]);
            }
            if keep {
                for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (l - lse).exp();
                }
            }
        }
        let loss = if denom > F::zero() {
            total / denom
        } else {
            F::zero()
        };
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                weights: weights.into(),
                probs,
                denom,
            },
            ng,
        ))
    }

    /// Rotary position embedding over `heads` column groups.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        let (m, n) = require_2d("rope", self.value(x))?;
        if positions.len() != m || heads == 0 || n % heads != 0 {
            return Err(Error::shape("rope", self.shape(x), &[positions.len(), heads]));
        }
        let mut out = self.value(x).clone();
        kernels::rope(out.data_mut(), n, positions, heads, base, false);
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.into(),
                heads,
                base,
            },
            ng,
        ))
    }

    /// Block-diagonal masked multi-head scaled dot-product attention.
    ///
    /// Disallowed pairs receive exactly zero weight. Score and value
    /// products are dense over each block (`4 * qn * kn * d` flops).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: &[AttnBlock],
    ) -> Result<Var> {
        let (rq, d) = require_2d("attention", self.value(q))?;
        let (rk, dk) = require_2d("attention", self.value(k))?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("width {} not divisible into {} heads", d, heads),
            ));
        }
        for b in blocks {
            if b.q_start + b.mask.rows() > rq || b.k_start + b.mask.cols() > rk {
                return Err(Error::invalid("attention", "block exceeds input rows"));
            }
            b.mask.validate()?;
        }
        let dh = d / heads;
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let keep = self.record && (self.needs(q) || self.needs(k) || self.needs(v));
        let mut out = vec![F::zero(); rq * d];
        let mut probs = Vec::new();
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for b in blocks {
                let (qn, kn) = (b.mask.rows(), b.mask.cols());
                for h in 0..heads {
                    let mut p = vec![F::zero(); qn * kn];
                    gemm_at(
                        qn, dh, kn, scale, qd, b.q_start * d + h * dh, d, 1, kd,
                        b.k_start * d + h * dh, 1, d, F::zero(), &mut p, 0, kn,
                    );
                    for r in 0..qn {
                        kernels::masked_softmax_row(&mut p[r * kn..(r + 1) * kn], b.mask.row(r));
                    }
                    gemm_at(
                        qn, kn, dh, F::one(), &p, 0, kn, 1, vd, b.k_start * d + h * dh, d, 1,
                        F::zero(), &mut out, b.q_start * d + h * dh, d,
                    );
                    counter::add_matmul(qn, dh, kn);
                    counter::add_matmul(qn, kn, dh);
                    if keep {
                        probs.push(p);
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![rq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks: blocks.into(),
                probs,
            },
            ng,
        ))
    }

    /// Each query row `i` attends to key/value rows `spans[i].0..spans[i].1`.
    pub fn span_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        let (rq, d) = require_2d("span_attention", self.value(q))?;
        let (rk, dk) = require_2d("span_attention", self.value(k))?;
        if dk != d || self.shape(v) != self.shape(k) || spans.len() != rq {
            return Err(Error::shape("span_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("span_attention", "width not divisible by heads"));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let keep = self.record && (self.needs(q) || self.needs(k) || self.needs(v));
        let mut out = vec![F::zero(); rq * d];
        let mut probs = Vec::new();
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for (i, &(s, e)) in spans.iter().enumerate() {
                if s >= e || e > rk {
                    return Err(Error::invalid(
                        "span_attention",
                        format!("empty or out-of-range span {}..{}", s, e),
                    ));
                }
                for h in 0..heads {
                    let off = h * dh;
                    let qh = &qd[i * d + off..i * d + off + dh];
                    let mut p: Vec<F> = (s..e)
                        .map(|j| kernels::dot(qh, &kd[j * d + off..j * d + off + dh]) * scale)
                        .collect();
                    kernels::softmax_row(&mut p);
                    let oh = &mut out[i * d + off..i * d + off + dh];
                    for (j, &pj) in (s..e).zip(&p) {
                        for (o, vv) in oh.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                            *o += pj * *vv;
                        }
                    }
                    if keep {
                        probs.extend_from_slice(&p);
                    }
                }
                counter::add_matmul(2, e - s, d);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![rq, d], out)?,
            Op::SpanAttention {
                q,
                k,
                v,
                heads,
                spans: spans.into(),
                probs,
            },
            ng,
        ))
    }

    /// Forward value `z`; backward treats the output as `z * s` evaluated
    /// at `s = 1`, routing `sum(grad * z)` per row into `s`.
    pub fn straight_through(&mut self, z: Var, s: Var) -> Result<Var> {
        let (m, _) = require_2d("straight_through", self.value(z))?;
        if self.value(s).len() != m {
            return Err(Error::shape("straight_through", self.shape(z), self.shape(s)));
        }
        let out = self.value(z).clone();
        let ng = self.needs(z) || self.needs(s);
        Ok(self.push(out, Op::StraightThrough(z, s), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul(gd, self.value(*b).data(), &mut da, m, n, k, false, true, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul(self.value(*a).data(), gd, &mut db, k, m, n, true, false, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul(gd, self.value(*b).data(), &mut da, m, n, k, false, false, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); n * k];
                    kernels::matmul(gd, self.value(*a).data(), &mut db, n, m, k, true, false, false);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db)?);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2();
                let mut dx = vec![F::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = gd[c * m + r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![F::zero(); n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(x, y)| *x * *y).collect();
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| *x * *y).collect();
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), d)?);
                }
            }
            Op::ScaleRows(x, s) => {
                let n = self.value(*x).cols().max(1);
                let sv = self.value(*s).data();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|v| *v *= sv[r]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let ds = gd
                        .chunks(n)
                        .zip(xv.chunks(n))
                        .map(|(gr, xr)| kernels::dot(gr, xr))
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(self.shape(*s).to_vec(), ds)?);
                }
            }
            Op::Affine(x, a) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= *a);
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(xs) => {
                let cols = g.cols();
                let mut off = 0;
                for &x in xs {
                    let r = self.value(x).rows();
                    if self.needs(x) {
                        let d = gd[off * cols..(off + r) * cols].to_vec();
                        self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), d)?);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = g.dims2();
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                        }
                        self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), d)?);
                    }
                    off += c;
                }
            }
            Op::SliceRows(x, start) => {
                let (_, n) = self.value(*x).dims2();
                let mut dx = Tensor::zeros(self.shape(*x));
                dx.data_mut()[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.value(*x).dims2();
                let len = g.cols();
                let mut dx = Tensor::zeros(self.shape(*x));
                for r in 0..m {
                    dx.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather(x, idx) => {
                let n = self.value(*x).cols();
                let mut dx = Tensor::zeros(self.shape(*x));
                for (j, &i) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i * n..(i + 1) * n];
                    for (d, v) in dst.iter_mut().zip(&gd[j * n..(j + 1) * n]) {
                        *d += *v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*x).cols();
                let gam = self.value(*gamma).data();
                let mut dgam = vec![F::zero(); n];
                let mut dbet = vec![F::zero(); n];
                let mut dx = vec![F::zero(); gd.len()];
                let inv_n = F::one() / F::from_f64(n as f64);
                for r in 0..rstd.len() {
                    let gr = &gd[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = F::zero();
                    let mut mean_dhh = F::zero();
                    for c in 0..n {
                        let dh = gr[c] * gam[c];
                        mean_dh += dh;
                        mean_dhh += dh * hr[c];
                        dgam[c] += gr[c] * hr[c];
                        dbet[c] += gr[c];
                    }
                    mean_dh *= inv_n;
                    mean_dhh *= inv_n;
                    for c in 0..n {
                        let dh = gr[c] * gam[c];
                        dx[r * n + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dhh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dgam)?);
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), dbet)?);
            }
            Op::Gelu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| *g * kernels::gelu_grad(*x))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| *g * *y * (F::one() - *y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), d)?);
            }
            Op::Softmax(x) => {
                let n = node.value.cols().max(1);
                let mut dx = vec![F::zero(); gd.len()];
                for ((dr, gr), pr) in dx
                    .chunks_mut(n)
                    .zip(gd.chunks(n))
                    .zip(node.value.data().chunks(n))
                {
                    let s = kernels::dot(gr, pr);
                    for c in 0..n {
                        dr[c] = pr[c] * (gr[c] - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::MaskedFill(x, fill) => {
                let d = gd
                    .iter()
                    .zip(fill.iter())
                    .map(|(g, &f)| if f { F::zero() } else { *g })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), d)?);
            }
            Op::MeanSpans(x, spans) => {
                let n = self.value(*x).cols();
                let mut dx = Tensor::zeros(self.shape(*x));
                for (i, &(s, e)) in spans.iter().enumerate() {
                    let inv = F::one() / F::from_f64((e - s) as f64);
                    for r in s..e {
                        let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for (d, v) in dst.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *d += *v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::Mean(x) => {
                let n = F::from_f64(self.value(*x).len().max(1) as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0] / n));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                denom,
            } => {
                let (m, v) = self.value(*logits).dims2();
                let mut dx = vec![F::zero(); m * v];
                if *denom > F::zero() {
                    for r in 0..m {
                        if weights[r] == F::zero() {
                            continue;
                        }
                        let w = gd[0] * weights[r] / *denom;
                        for c in 0..v {
                            dx[r * v + c] = w * probs[r * v + c];
                        }
                        dx[r * v + targets[r]] -= w;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![m, v], dx)?);
            }
            Op::Rope {
                x,
                positions,
                heads,
                base,
            } => {
                let n = g.cols();
                let mut dx = g.clone();
                kernels::rope(dx.data_mut(), n, positions, *heads, *base, true);
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, blocks, probs, grads)?,
            Op::SpanAttention {
                q,
                k,
                v,
                heads,
                spans,
                probs,
            } => self.span_attention_backward(g, *q, *k, *v, *heads, spans, probs, grads)?,
            Op::StraightThrough(z, s) => {
                self.accumulate(grads, *z, g.clone());
                if self.needs(*s) {
                    let n = g.cols().max(1);
                    let ds = gd
                        .chunks(n)
                        .zip(self.value(*z).data().chunks(n))
                        .map(|(gr, zr)| kernels::dot(gr, zr))
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(self.shape(*s).to_vec(), ds)?);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<F>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: &[AttnBlock],
        probs: &[Vec<F>],
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let gd = g.data();
        let mut dq = vec![F::zero(); qd.len()];
        let mut dk = vec![F::zero(); kd.len()];
        let mut dv = vec![F::zero(); vd.len()];
        let mut pi = 0;
        for b in blocks {
            let (qn, kn) = (b.mask.rows(), b.mask.cols());
            let qo = b.q_start * d;
            let ko = b.k_start * d;
            for h in 0..heads {
                let p = &probs[pi];
                pi += 1;
                let off = h * dh;
                // dP = dO V^T
                let mut dp = vec![F::zero(); qn * kn];
                gemm_at(
                    qn, dh, kn, F::one(), gd, qo + off, d, 1, vd, ko + off, 1, d, F::zero(),
                    &mut dp, 0, kn,
                );
                // dV += P^T dO
                gemm_at(
                    kn, qn, dh, F::one(), p, 0, 1, kn, gd, qo + off, d, 1, F::one(), &mut dv,
                    ko + off, d,
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for r in 0..qn {
                    let pr = &p[r * kn..(r + 1) * kn];
                    let dr = &mut dp[r * kn..(r + 1) * kn];
                    let s = kernels::dot(pr, dr);
                    for c in 0..kn {
                        dr[c] = pr[c] * (dr[c] - s) * scale;
                    }
                }
                gemm_at(
                    qn, kn, dh, F::one(), &dp, 0, kn, 1, kd, ko + off, d, 1, F::one(), &mut dq,
                    qo + off, d,
                );
                gemm_at(
                    kn, qn, dh, F::one(), &dp, 0, 1, kn, qd, qo + off, d, 1, F::one(), &mut dk,
                    ko + off, d,
                );
            }
        }
        self.accumulate(grads, q, Tensor::new(self.shape(q).to_vec(), dq)?);
        self.accumulate(grads, k, Tensor::new(self.shape(k).to_vec(), dk)?);
        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), dv)?);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn span_attention_backward(
        &self,
        g: &Tensor<F>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: &[(usize, usize)],
        probs: &[F],
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let gd = g.data();
        let mut dq = vec![F::zero(); qd.len()];
        let mut dk = vec![F::zero(); kd.len()];
        let mut dv = vec![F::zero(); vd.len()];
        let mut pi = 0;
        for (i, &(s, e)) in spans.iter().enumerate() {
            let len = e - s;
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[pi..pi + len];
                pi += len;
                let go = &gd[i * d + off..i * d + off + dh];
                let dp: Vec<F> = (s..e)
                    .map(|j| kernels::dot(go, &vd[j * d + off..j * d + off + dh]))
                    .collect();
                let sdot = kernels::dot(p, &dp);
                for (jj, j) in (s..e).enumerate() {
                    for (dvv, gg) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                        *dvv += p[jj] * *gg;
                    }
                    let ds = p[jj] * (dp[jj] - sdot) * scale;
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * kd[j * d + off + c];
                        dk[j * d + off + c] += ds * qd[i * d + off + c];
                    }
                }
            }
        }
        self.accumulate(grads, q, Tensor::new(self.shape(q).to_vec(), dq)?);
        self.accumulate(grads, k, Tensor::new(self.shape(k).to_vec(), dk)?);
        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), dv)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[2.5; 4]));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_scaled_gradient_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let z = g.scale(p, 0.0);
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stop_gradient_contract() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.5, -2.0]));
        let y = g.input(t(&[2], &[3.0, 4.0]));
        let sx = g.stop_gradient(x);
        let prod = g.mul(sx, y).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt(y).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[1, 320]));
        let l = g.cross_entropy(uniform, &[17], &[1.0]).unwrap();
        assert!((g.value(l).item() - 5.768_320_995_793_772).abs() < 1e-12);

        let mut hot = Tensor::zeros(&[1, 320]);
        hot.data_mut()[5] = 1000.0;
        let hot = g.constant(hot);
        let l = g.cross_entropy(hot, &[5], &[1.0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let two = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = g.cross_entropy(two, &[1], &[1.0]).unwrap();
        assert!((g.value(l).item() - 0.287_682_072_451_780_9).abs() < 1e-12);

        assert!(matches!(
            g.cross_entropy(two, &[2], &[1.0]),
            Err(Error::TargetOutOfRange { target: 2, vocab: 2 })
        ));
    }

    #[test]
    fn masked_softmax_is_negligible() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.3, 1.2, -0.7]));
        let f = g.masked_fill(x, &[false, true, false]).unwrap();
        let p = g.softmax(f);
        let v = g.value(p).data();
        assert!(v[1] < 1e-30);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
