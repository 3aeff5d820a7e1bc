use scratchpatch::autodiff::Graph;
use scratchpatch::infer::Session;
use scratchpatch::model::{Model, ModelConfig, Patchifier};
use scratchpatch::scratchpad::TriggerPolicy;

fn check(p: Patchifier, t: TriggerPolicy, seed: u64) -> f64 {
    let cfg = ModelConfig::tiny(16, 32, 2, p, t);
    let m = Model::<f64>::new(cfg, seed).unwrap();
    let bytes: Vec<u8> = (0..64u32).map(|i| ((i * 37 + seed as u32 * 11) % 97 + 32) as u8).collect();
    let mut g = Graph::inference();
    let tr = m.forward(&mut g, &[bytes.clone()]).unwrap();
    let l = tr.logits_of(&g, 0);
    let mut s = Session::new(&m);
    let mut diff = l.row(0).iter().zip(s.logits()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for (i, &b) in bytes.iter().enumerate() {
        let out = if i + 1 == bytes.len() { s.step_last(b).unwrap() } else { s.step(b).unwrap() };
        let d = l.row(i + 1).iter().zip(out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        diff = diff.max(d);
    }
    diff
}

#[test]
fn quick_equivalence() {
    for p in [Patchifier::Fixed { p: 4 }, Patchifier::spacebyte(), Patchifier::Entropy { tau_p: 5.77 }, Patchifier::hnet()] {
        for t in [TriggerPolicy::None, TriggerPolicy::Entropy(1.5), TriggerPolicy::Stride(4), TriggerPolicy::Dense] {
            let d = check(p.clone(), t.clone(), 1);
            println!("{p:?} {t:?} {d:e}");
            assert!(d < 1e-8);
        }
    }
}
