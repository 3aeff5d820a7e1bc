//! AdamW with warmup + cosine schedule, and the deterministic training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Graph, ParamStore, Tensor};
use crate::checkpoint;
use crate::corpus::windows;
use crate::error::{Error, Result};
use crate::metrics::bpb_bytes;
use crate::model::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    /// Raw training bytes to consume; `ceil(budget / seq_len)` windows.
    pub byte_budget: u64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Checkpoint period in steps (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Validation period in steps (0: at the end only).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 256,
            batch_size: 16,
            byte_budget: 1 << 20,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            checkpoint_every: 0,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn windows(&self) -> u64 {
        self.byte_budget.div_ceil(self.seq_len as u64)
    }

    pub fn total_steps(&self) -> usize {
        self.windows().div_ceil(self.batch_size as u64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 || self.batch_size == 0 || self.byte_budget == 0 {
            return Err(Error::ConfigInvalid(
                "seq_len >= 2, batch_size >= 1 and byte_budget >= 1 are required".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::ConfigInvalid("lr and grad_clip must be positive, weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::ConfigInvalid("betas must be in [0, 1), eps > 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to `0.1 * peak` at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales gradients in place to global norm at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Decoupled-weight-decay Adam; decay applies only to entries flagged
/// for it (matrices).
pub struct AdamW<F> {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamW {
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid("adamw", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (e, g) in store.entries().iter().zip(grads) {
            if e.value.shape() != g.shape() {
                return Err(Error::shape("adamw", e.value.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let c1 = F::from_f64(1.0 - self.beta1.powi(t));
        let c2 = F::from_f64(1.0 - self.beta2.powi(t));
        let lr_f = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        let one = F::one();
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let decay = if e.decay { F::from_f64(lr * self.weight_decay) } else { F::zero() };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in e.value.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr_f * (mhat / (vhat.sqrt() + eps)) - decay * *p;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub main: f64,
    pub aux: f64,
    pub ratio: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub flops_per_byte: f64,
    pub trunk_len_mean: f64,
    pub patch_size_mean: f64,
    pub scratchpads_per_patch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub val_bpb: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Step(StepLog),
    Eval(EvalLog),
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub logs: Vec<LogLine>,
    pub final_val_bpb: Option<f64>,
    pub seconds: f64,
}

/// Where the loop writes its metrics log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct OutputDir(pub Option<PathBuf>);

impl OutputDir {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(name))
    }
}

/// Trains a freshly initialised model on `corpus` for the configured byte
/// budget. Identical inputs produce identical logs and checkpoints.
pub fn train_loop(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    corpus: &[u8],
    validation: Option<&[u8]>,
    out: &OutputDir,
    mut progress: impl FnMut(&LogLine),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("train", "empty training corpus"));
    }
    let start = Instant::now();
    let mut model = Model::<f32>::new(cfg.clone(), tc.seed)?;
    let mut opt = AdamW::new(&model.store, tc.beta1, tc.beta2, tc.eps, tc.weight_decay);
    let total = tc.total_steps();
    let mut log_file = match out.path("metrics.jsonl") {
        Some(p) => {
            if let Some(d) = &out.0 {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut logs = Vec::new();
    let mut emit = |line: LogLine, logs: &mut Vec<LogLine>| -> Result<()> {
        if let Some((f, p)) = &mut log_file {
            let s = serde_json::to_string(&line).expect("serializable");
            writeln!(f, "{s}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        progress(&line);
        logs.push(line);
        Ok(())
    };

    let mut remaining = tc.windows();
    let mut epoch = 0u64;
    let mut pending: Vec<&[u8]> = Vec::new();
    let mut final_val = None;
    for step in 1..=total {
        let mut batch: Vec<Vec<u8>> = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size && remaining > 0 {
            if pending.is_empty() {
                pending = windows(corpus, tc.seq_len, tc.seed.wrapping_add(epoch))?;
                pending.reverse();
                epoch += 1;
            }
            batch.push(pending.pop().unwrap().to_vec());
            remaining -= 1;
        }

        let mut g = Graph::new();
        let trace = model.forward(&mut g, &batch)?;
        let losses = model.losses(&mut g, &trace)?;
        let grads = g.backward(losses.total)?;
        let mut grads = grads.for_store(&model.store);
        drop(g);
        let grad_norm = clip_grad_norm(&mut grads, tc.grad_clip);
        let lr = lr_at(step, tc.lr, tc.warmup_steps, total);
        opt.update(&mut model.store, &grads, lr)?;

        let bytes: usize = batch.iter().map(Vec::len).sum();
        let seqs = trace.seqs.len() as f64;
        let patches: usize = trace.seqs.iter().map(|s| s.segmentation.len()).sum();
        let pads: usize = trace.seqs.iter().map(|s| s.schedule.total()).sum();
        emit(
            LogLine::Step(StepLog {
                step,
                loss: losses.main + losses.aux + crate::patchify::RATIO_LOSS_WEIGHT * losses.ratio,
                main: losses.main,
                aux: losses.aux,
                ratio: losses.ratio,
                lr,
                grad_norm,
                flops_per_byte: trace.flops.total() as f64 / bytes.max(1) as f64,
                trunk_len_mean: trace.seqs.iter().map(|s| s.trunk.len()).sum::<usize>() as f64 / seqs,
                patch_size_mean: bytes as f64 / patches.max(1) as f64,
                scratchpads_per_patch: pads as f64 / patches.max(1) as f64,
            }),
            &mut logs,
        )?;

        let last = step == total;
        if let Some(v) = validation {
            if (tc.eval_every > 0 && step % tc.eval_every == 0) || last {
                let b = bpb_bytes(&model, v, tc.seq_len, tc.batch_size)?;
                final_val = Some(b);
                emit(LogLine::Eval(EvalLog { step, val_bpb: b }), &mut logs)?;
            }
        }
        if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && !last {
            if let Some(p) = out.path(&format!("step_{step}.ckpt")) {
                checkpoint::save(&model, &p)?;
            }
        }
    }
    if let Some(p) = out.path("final.ckpt") {
        checkpoint::save(&model, &p)?;
    }
    Ok(TrainOutcome {
        model,
        logs,
        final_val_bpb: final_val,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Reads a metrics log back.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(100, 1e-3, 100, 1000), 1e-3);
        assert!((lr_at(1000, 1e-3, 100, 1000) - 1e-4).abs() < 1e-18);
        assert!((lr_at(550, 1e-3, 100, 1000) - 0.55e-3).abs() < 1e-15);
        assert_eq!(lr_at(0, 1e-3, 100, 1000), 0.0);
        assert_eq!(lr_at(5, 1e-3, 0, 0), 1e-3);
    }

    fn scalar_store(v: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[1], &[v]).unwrap(), decay);
        s
    }

    #[test]
    fn adamw_first_step() {
        let mut s = scalar_store(0.5, false);
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-12, 0.0);
        opt.update(&mut s, &[Tensor::from_f64(&[1], &[1.0]).unwrap()], 1e-3).unwrap();
        assert!((s.entries()[0].value.item() - (0.5 - 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient() {
        let mut s = scalar_store(0.5, true);
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-12, 0.0);
        opt.update(&mut s, &[Tensor::zeros(&[1])], 1e-3).unwrap();
        assert_eq!(s.entries()[0].value.item(), 0.5);

        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-12, 0.1);
        opt.update(&mut s, &[Tensor::zeros(&[1])], 1e-3).unwrap();
        assert_eq!(s.entries()[0].value.item(), 0.5 - 1e-3 * 0.1 * 0.5);
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut s = scalar_store(0.5, true);
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-12, 0.0);
        assert!(opt.update(&mut s, &[Tensor::zeros(&[2])], 1e-3).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn budget_to_windows() {
        let tc = TrainConfig { byte_budget: 1000, seq_len: 64, batch_size: 4, ..TrainConfig::default() };
        assert_eq!(tc.windows(), 16);
        assert_eq!(tc.total_steps(), 4);
    }
}
