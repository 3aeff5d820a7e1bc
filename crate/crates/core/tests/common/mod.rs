#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scratchpatch::autodiff::Float;
use scratchpatch::model::{Model, ModelConfig, Patchifier};
use scratchpatch::scratchpad::TriggerPolicy;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Text-like random bytes: lowercase letters, spaces and some punctuation.
pub fn random_text(r: &mut impl Rng, n: usize) -> Vec<u8> {
    const ALPHA: &[u8] = b"etaoinshrdlucmfwyp      .,\n";
    (0..n)
        .map(|_| if r.random_bool(0.05) { r.random_range(0..=255u8) } else { ALPHA[r.random_range(0..ALPHA.len())] })
        .collect()
}

fn median_entropy(m: &Model<f64>, bytes: &[u8]) -> f64 {
    let mut g = scratchpatch::autodiff::Graph::inference();
    let t = m.forward(&mut g, &[bytes.to_vec()]).unwrap();
    let mut e = t.seqs[0].entropies.clone();
    e.sort_by(f64::total_cmp);
    e[e.len() / 2]
}

/// Multiplies a parameter tensor in place.
pub fn scale_param<F: Float>(m: &mut Model<F>, id: scratchpatch::autodiff::ParamId, by: f64) {
    let f = F::from_f64(by);
    m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= f);
}

/// Random tiny model whose auxiliary entropies and router scores are spread
/// out (at initialisation they sit near ln 320 and 0.5), so that entropy
/// patching, entropy triggers and learned boundaries all fire non-trivially.
pub fn random_model(seed: u64, patchifier: Patchifier, trigger: TriggerPolicy) -> Model<f64> {
    let mut r = rng(seed ^ 0x5eed);
    let d_byte = [16, 32][r.random_range(0..2)];
    let d_trunk = [16, 32, 64][r.random_range(0..3)];
    let layers = r.random_range(1..=2);
    let mut cfg = ModelConfig::tiny(d_byte, d_trunk, layers, patchifier, trigger);
    cfg.agg_heads = [1, 2][r.random_range(0..2)];
    cfg.trunk.n_heads = [1, 2][r.random_range(0..2)];
    cfg.hnet_smoothing = r.random_bool(0.5);
    let mut m = Model::<f64>::new(cfg, seed).unwrap();
    // bisect the aux head scale so the median entropy on a probe text sits
    // near a per-model target between 1.5 and 2.5 nats
    let target = r.random_range(1.5..2.5);
    let probe = random_text(&mut r, 64);
    let w = m.aux_head.w;
    let (mut lo, mut hi) = (0.0f64, 7.0f64);
    for _ in 0..14 {
        let mid = 0.5 * (lo + hi);
        let mut t = Model::<f64>::new(m.cfg.clone(), seed).unwrap();
        scale_param(&mut t, w, mid.exp());
        if median_entropy(&t, &probe) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    scale_param(&mut m, w, (0.5 * (lo + hi)).exp());
    if let Some(rt) = m.router.clone() {
        scale_param(&mut m, rt.w2, 400.0);
        scale_param(&mut m, rt.w1, 4.0);
    }
    m
}
