use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scratchpatch::checkpoint;
use scratchpatch::config::{load_config, parse_threshold, RunConfig};
use scratchpatch::corpus::{read_files, read_manifest};
use scratchpatch::infer::{generate, SamplerConfig, Session};
use scratchpatch::metrics::{self, flops_estimate, FlopsMode};
use scratchpatch::model::{Knobs, Model};
use scratchpatch::train::{train_loop, LogLine, OutputDir};

/// Scratchpad patching: byte-level language models over patches.
#[derive(Parser)]
#[command(name = "scratchpatch", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Bits per byte of a checkpoint over the files of a manifest.
    EvalBpb {
        #[command(flatten)]
        model: ModelArgs,
        /// Manifest listing evaluation files (defaults to the config's eval manifest).
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        knobs: KnobArgs,
    },
    /// Continue a prompt read from a file or standard input.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        max_new: usize,
        #[command(flatten)]
        knobs: KnobArgs,
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
        #[arg(long, default_value_t = 0.95)]
        top_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-byte entropy, boundary and scratchpad trace as CSV.
    Trace {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        /// CSV destination (standard output if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: KnobArgs,
    },
    /// Analytic forward FLOPs per byte, in training and incremental mode.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        /// Text to segment (defaults to the config's evaluation data, then a built-in sample).
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        knobs: KnobArgs,
    },
    /// Sweep an inference-time knob, reporting BPB and FLOPs per value.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = ["tau_sp", "tau_p", "patch_size"])]
        knob: String,
        /// Comma-separated values (`inf` allowed for thresholds).
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Configuration describing the architecture.
    #[arg(long)]
    config: PathBuf,
    /// Trained parameters; freshly initialised ones are used if omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct KnobArgs {
    #[arg(long, value_parser = threshold)]
    tau_sp: Option<f64>,
    #[arg(long, value_parser = threshold)]
    tau_p: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
}

impl KnobArgs {
    fn knobs(&self) -> Knobs {
        Knobs {
            tau_sp: self.tau_sp,
            tau_p: self.tau_p,
            patch_size: self.patch_size,
        }
    }
}

fn threshold(s: &str) -> std::result::Result<f64, String> {
    parse_threshold(s).ok_or_else(|| format!("`{s}` is not a number or `inf`"))
}

const SAMPLE: &str = "It was the best of times, it was the worst of times, it was the age of wisdom, \
it was the age of foolishness, it was the epoch of belief, it was the epoch of incredulity, it was the \
season of Light, it was the season of Darkness, it was the spring of hope, it was the winter of despair.\n";

fn load(args: &ModelArgs, knobs: &Knobs) -> Result<(RunConfig, Model<f32>)> {
    let rc = load_config(&args.config)?;
    let model = match &args.ckpt {
        Some(p) => checkpoint::load::<f32>(p, &rc.model).with_context(|| format!("loading {}", p.display()))?,
        None => Model::new(rc.model.clone(), rc.seed)?,
    };
    let model = model.with_knobs(knobs)?;
    Ok((rc, model))
}

fn eval_files(rc: &RunConfig, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    let manifest = match data.map(Path::to_path_buf).or_else(|| rc.eval.manifest.clone()) {
        Some(m) => m,
        None => bail!("no evaluation data: pass --data or set [eval] manifest"),
    };
    Ok(read_manifest(&manifest)?)
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    match cli.cmd {
        Cmd::Train { config, out, quiet } => {
            let rc = load_config(&config)?;
            let corpus = read_files(&read_manifest(&rc.data.train)?)?;
            let validation = match &rc.data.validation {
                Some(m) => Some(read_files(&read_manifest(m)?)?),
                None => None,
            };
            let dir = out
                .or(rc.out_dir.clone())
                .unwrap_or_else(|| config.parent().unwrap_or(Path::new(".")).join("run"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::copy(&config, dir.join("config.cfg")).context("copying config")?;
            let params = Model::<f32>::new(rc.model.clone(), rc.seed)?.num_params();
            eprintln!(
                "training {params} parameters on {} bytes for {} steps -> {}",
                corpus.len(),
                rc.train.total_steps(),
                dir.display()
            );
            let outcome = train_loop(
                &rc.model,
                &rc.train,
                &corpus,
                validation.as_deref(),
                &OutputDir(Some(dir.clone())),
                |l| {
                    if quiet {
                        return;
                    }
                    match l {
                        LogLine::Step(s) if s.step % 10 == 0 || s.step == 1 => {
                            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", s.step, s.loss, s.lr)
                        }
                        LogLine::Eval(e) => eprintln!("step {:>6}  val_bpb {:.4}", e.step, e.val_bpb),
                        _ => {}
                    }
                },
            )?;
            let summary = serde_json::json!({
                "params": params,
                "steps": rc.train.total_steps(),
                "final_val_bpb": outcome.final_val_bpb,
                "seconds": outcome.seconds,
                "checkpoint": dir.join("final.ckpt"),
            });
            writeln!(stdout.lock(), "{summary}")?;
        }
        Cmd::EvalBpb { model, data, knobs } => {
            let (rc, m) = load(&model, &knobs.knobs())?;
            let files = eval_files(&rc, data.as_deref())?;
            let report = metrics::bpb(&m, &files, rc.eval.seq_len, rc.eval.batch_size)?;
            writeln!(stdout.lock(), "{}", serde_json::to_string(&report)?)?;
        }
        Cmd::Generate {
            model,
            prompt_file,
            max_new,
            knobs,
            temperature,
            top_p,
            seed,
        } => {
            let (_, m) = load(&model, &knobs.knobs())?;
            let prompt = match prompt_file {
                Some(p) => std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?,
                None => {
                    let mut buf = Vec::new();
                    std::io::stdin().read_to_end(&mut buf).context("reading prompt from stdin")?;
                    buf
                }
            };
            let sampler = SamplerConfig { temperature, top_p, seed };
            let mut session = Session::new(&m);
            let out = generate(&mut session, &prompt, max_new, &sampler)?;
            let mut w = stdout.lock();
            w.write_all(&out)?;
            w.flush()?;
        }
        Cmd::Trace { model, input, out, knobs } => {
            let (_, m) = load(&model, &knobs.knobs())?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let rows = metrics::export_trace(&m, &bytes)?;
            match out {
                Some(p) => metrics::save_trace_csv(&rows, &p)?,
                None => metrics::write_trace_csv(&rows, stdout.lock())?,
            }
        }
        Cmd::Flops { model, input, knobs } => {
            let (rc, m) = load(&model, &knobs.knobs())?;
            let data = match input {
                Some(p) => std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?,
                None => match rc.eval.manifest.as_deref().filter(|p| p.exists()) {
                    Some(man) => read_files(&read_manifest(man)?)?,
                    None => SAMPLE.as_bytes().to_vec(),
                },
            };
            if data.is_empty() {
                bail!("no bytes to segment");
            }
            let stats = metrics::sequence_stats(&m, &data, rc.eval.seq_len, rc.eval.batch_size)?;
            let mut w = stdout.lock();
            for mode in [FlopsMode::Training, FlopsMode::Incremental] {
                let r = flops_estimate(&m.cfg, &stats, mode);
                writeln!(w, "{}", serde_json::to_string(&r)?)?;
            }
        }
        Cmd::Sweep {
            model,
            knob,
            values,
            data,
            json,
        } => {
            let (rc, base) = load(&model, &Knobs::default())?;
            let files = eval_files(&rc, data.as_deref())?;
            let bytes = read_files(&files)?;
            let mut w = stdout.lock();
            if !json {
                writeln!(
                    w,
                    "{:>10}  {:>8}  {:>14}  {:>9}  {:>12}  {:>13}",
                    knob, "bpb", "flops/byte", "reduction", "patch_size", "scratch/patch"
                )?;
            }
            for v in &values {
                let mut k = Knobs::default();
                match knob.as_str() {
                    "tau_sp" => k.tau_sp = Some(threshold(v).map_err(anyhow::Error::msg)?),
                    "tau_p" => k.tau_p = Some(threshold(v).map_err(anyhow::Error::msg)?),
                    _ => k.patch_size = Some(v.parse().with_context(|| format!("patch size `{v}`"))?),
                }
                let m = base.with_knobs(&k)?;
                let bpb = metrics::bpb_bytes(&m, &bytes, rc.eval.seq_len, rc.eval.batch_size)?;
                let stats = metrics::sequence_stats(&m, &bytes, rc.eval.seq_len, rc.eval.batch_size)?;
                let f = flops_estimate(&m.cfg, &stats, FlopsMode::Incremental);
                let patches: usize = stats.iter().map(|s| s.patches).sum();
                let pads: usize = stats.iter().map(|s| s.scratchpads).sum();
                let patch_size = f.bytes as f64 / patches.max(1) as f64;
                let per_patch = pads as f64 / patches.max(1) as f64;
                if json {
                    let row = serde_json::json!({
                        "knob": knob, "value": v, "bpb": bpb,
                        "flops_per_byte": f.flops_per_byte, "reduction": f.reduction,
                        "patch_size": patch_size, "scratchpads_per_patch": per_patch,
                    });
                    writeln!(w, "{row}")?;
                } else {
                    writeln!(
                        w,
                        "{:>10}  {:>8.4}  {:>14.1}  {:>9.3}  {:>12.3}  {:>13.3}",
                        v, bpb, f.flops_per_byte, f.reduction, patch_size, per_patch
                    )?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
