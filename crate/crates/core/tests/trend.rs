//! Full desk-scale trend experiment (hours on one core):
//! `cargo test --release -p scratchpatch --test trend -- --ignored`.
//! Needs the corpus from `experiments/fetch_sotu.sh`.

use std::path::PathBuf;

use scratchpatch::config::load_config;
use scratchpatch::corpus::{read_files, read_manifest};
use scratchpatch::train::{train_loop, OutputDir};

fn val_bpb(name: &str) -> f64 {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../experiments");
    let rc = load_config(&dir.join(format!("sotu_{name}.cfg"))).unwrap();
    let corpus = read_files(&read_manifest(&rc.data.train).unwrap()).unwrap();
    let valid = read_files(&read_manifest(rc.data.validation.as_ref().unwrap()).unwrap()).unwrap();
    let out = train_loop(&rc.model, &rc.train, &corpus, Some(&valid), &OutputDir(None), |_| {}).unwrap();
    println!("{name}: val bpb {:.4} in {:.0}s", out.final_val_bpb.unwrap(), out.seconds);
    out.final_val_bpb.unwrap()
}

#[test]
#[ignore]
fn scratchpads_close_the_patch_size_gap() {
    let p2 = val_bpb("p2");
    let p8 = val_bpb("p8");
    let sp = val_bpb("p8_sp");
    assert!(p8 > p2, "p=8 ({p8}) should be worse than p=2 ({p2})");
    assert!(sp < p8);
    assert!((p8 - sp) / (p8 - p2) >= 0.25, "closed {:.1}% of the gap", 100.0 * (p8 - sp) / (p8 - p2));
}
