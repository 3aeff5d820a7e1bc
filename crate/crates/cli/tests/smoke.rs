use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use std::io::Write;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scratchpatch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const TEXT: &str = "the quick brown fox jumps over the lazy dog. \
a stitch in time saves nine; all that glitters is not gold.\n";

/// Writes data, manifests and a tiny config; returns the config path.
fn setup(dir: &Path, model: &str) -> PathBuf {
    std::fs::create_dir_all(dir.join("text")).unwrap();
    std::fs::write(dir.join("text/train.txt"), TEXT.repeat(20)).unwrap();
    std::fs::write(dir.join("text/valid.txt"), TEXT.repeat(2)).unwrap();
    std::fs::write(dir.join("train.manifest"), "# training\ntext/train.txt\n").unwrap();
    std::fs::write(dir.join("valid.manifest"), "text/valid.txt\n").unwrap();
    let cfg = format!(
        "seed = 3\n\n[model]\n{model}\n\n\
         [encoder]\nn_layers = 1\nd_model = 16\nd_ff = 32\n\
         [aux]\nn_layers = 1\n\
         [trunk]\nn_layers = 1\nd_model = 32\nd_ff = 64\n\
         [decoder]\nn_layers = 1\n\n\
         [train]\nseq_len = 64\nbatch_size = 4\nbyte_budget = 1024\nwarmup_steps = 1\neval_every = 2\n\n\
         [data]\ntrain = train.manifest\nvalidation = valid.manifest\n"
    );
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, cfg).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_use_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "patchifier = fixed\npatch_size = 4\ntrigger = entropy\ntau_sp = 1.5");
    let out = tmp.path().join("run");

    let o = run(&["train", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", text(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 4);
    let ckpt = out.join("final.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"loss\"")).count(), 4);
    assert_eq!(log.lines().filter(|l| l.contains("val_bpb")).count(), 2);

    let o = run(&["eval-bpb", "--config", s(&cfg), "--ckpt", s(&ckpt), "--data", s(&tmp.path().join("valid.manifest"))]);
    assert!(o.status.success(), "{}", text(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let bpb = r["bpb"].as_f64().unwrap();
    assert!(bpb > 0.0 && bpb < 9.0, "{bpb}");
    assert_eq!(r["bytes"], 2 * TEXT.len());
    assert!(r["categories"]["text"].is_number());

    let prompt = tmp.path().join("prompt.txt");
    std::fs::write(&prompt, "the quick ").unwrap();
    let gen = |extra: &[&str]| {
        let mut a = vec!["generate", "--config", s(&cfg), "--ckpt", s(&ckpt), "--prompt-file", s(&prompt)];
        a.extend_from_slice(extra);
        run(&a)
    };
    let a = gen(&["--max-new", "12", "--temperature", "1.0", "--seed", "5"]);
    assert!(a.status.success(), "{}", text(&a));
    assert_eq!(a.stdout.len(), 12);
    let b = gen(&["--max-new", "12", "--temperature", "1.0", "--seed", "5"]);
    assert_eq!(a.stdout, b.stdout);
    let z = gen(&["--max-new", "0", "--tau-sp", "inf", "--patch-size", "8"]);
    assert!(z.status.success(), "{}", text(&z));
    assert!(z.stdout.is_empty());

    let mut child = bin()
        .args(["generate", "--config", s(&cfg), "--ckpt", s(&ckpt), "--max-new", "3", "--temperature", "0"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"a stitch").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(o.stdout.len(), 3);

    let input = tmp.path().join("text/valid.txt");
    let csv = tmp.path().join("trace.csv");
    let o = run(&["trace", "--config", s(&cfg), "--ckpt", s(&ckpt), "--input", s(&input), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", text(&o));
    let body = std::fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(
        lines.next().unwrap(),
        "position,byte,entropy,patch_boundary,scratchpad,suppressed,state_span_end,lag"
    );
    assert_eq!(lines.count(), 2 * TEXT.len());

    let o = run(&["trace", "--config", s(&cfg), "--ckpt", s(&ckpt), "--input", s(&prompt), "--tau-sp", "inf"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().skip(1).all(|l| l.split(',').nth(4) == Some("0")), "{out}");

    let o = run(&["flops", "--config", s(&cfg), "--ckpt", s(&ckpt)]);
    assert!(o.status.success(), "{}", text(&o));

    let o = run(&[
        "sweep", "--config", s(&cfg), "--ckpt", s(&ckpt), "--knob", "tau_sp", "--values", "0.5,1.5,2.5", "--data",
        s(&tmp.path().join("valid.manifest")), "--json",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let rows: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    let f: Vec<f64> = rows.iter().map(|r| r["flops_per_byte"].as_f64().unwrap()).collect();
    assert!(f.windows(2).all(|w| w[1] <= w[0]), "{f:?}");

    let o = run(&["sweep", "--config", s(&cfg), "--ckpt", s(&ckpt), "--knob", "patch_size", "--values", "2,8"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 3);

    // training is reproducible
    let out2 = tmp.path().join("run2");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out2), "--quiet"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(out2.join("final.ckpt")).unwrap());
}

#[test]
fn flops_on_fresh_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "patchifier = fixed\npatch_size = 4");
    let o = run(&["flops", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    let reports: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["mode"], "Training");
    assert!(reports[1]["flops_per_byte"].as_f64().unwrap() > 0.0);
    assert!(reports[0]["convention"].as_str().unwrap().contains("multiply-accumulate"));
}

#[test]
fn hnet_and_entropy_families_run() {
    for (i, m) in ["patchifier = hnet\ntarget_patch_size = 4", "patchifier = entropy\ntau_p = 2.5\ntau_sp = 1.0", "patchifier = spacebyte\ntrigger = stride\nstride = 3"]
        .iter()
        .enumerate()
    {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path(), m);
        let out = tmp.path().join(format!("run{i}"));
        let o = run(&["train", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
        assert!(o.status.success(), "{m}: {}", text(&o));
        let o = run(&["flops", "--config", s(&cfg), "--ckpt", s(&out.join("final.ckpt"))]);
        assert!(o.status.success(), "{m}: {}", text(&o));
    }
}

#[test]
fn threshold_constraint_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "patchifier = entropy\ntau_p = 2.5");
    let o = bin()
        .args(["generate", "--config", s(&cfg), "--tau-sp", "3.0", "--max-new", "1"])
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"), "{}", text(&o));

    let o = run(&["flops", "--config", s(&cfg), "--patch-size", "4"]);
    assert!(!o.status.success());
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = run(&["flops", "--config", "x.cfg", "--bogus"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = run(&["sweep", "--config", "x.cfg", "--knob", "lr", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn bad_config_names_line() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.cfg");
    std::fs::write(&p, "[data]\ntrain = x\n[model]\npatch_sise = 4\n").unwrap();
    let o = run(&["flops", "--config", s(&p)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("patch_sise"), "{err}");

    let o = run(&["train", "--config", s(&tmp.path().join("missing.cfg"))]);
    assert_eq!(o.status.code(), Some(1));
}
