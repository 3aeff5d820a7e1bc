//! Run configuration: `[section]` headers, `key = value` lines, `#` comments.
//!
//! ```text
//! seed = 0
//!
//! [model]
//! patchifier = fixed        # fixed | spacebyte | entropy | hnet
//! patch_size = 8            # fixed
//! tau_p = 2.5               # entropy
//! delimiters = 32,9,10,13   # spacebyte
//! target_patch_size = 6     # hnet
//! hnet_smoothing = false
//! router_hidden = 64
//! agg_heads = 1
//! trigger = entropy         # none | entropy | stride | whitespace | dense
//! tau_sp = 1.5              # default per family: fixed/spacebyte 1.5, entropy 1.0, hnet 2.5
//! stride = 4
//! trigger_delimiters = 32,9,10,13
//!
//! [encoder]                 # also [aux], [trunk], [decoder]
//! n_layers = 1
//! d_model = 64
//! d_ff = 192
//! n_heads = 1               # default d_model / 64
//! rope_base = 10000
//!
//! [train]
//! seq_len = 256
//! batch_size = 16
//! byte_budget = 1048576
//! lr = 0.001
//! warmup_steps = 100
//! weight_decay = 0.1
//! grad_clip = 1.0
//! checkpoint_every = 0
//! eval_every = 0
//! out_dir = runs/default
//!
//! [data]
//! train = train.manifest    # required
//! validation = valid.manifest
//!
//! [eval]
//! manifest = valid.manifest # defaults to data.validation
//! seq_len = 256
//! batch_size = 16
//! ```
//!
//! Relative paths resolve against the configuration file's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::StackConfig;
use crate::model::{ModelConfig, Patchifier};
use crate::patchify::{DEFAULT_DELIMITERS, DEFAULT_TARGET_PATCH_SIZE};
use crate::scratchpad::TriggerPolicy;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: PathBuf,
    pub validation: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub manifest: Option<PathBuf>,
    pub seq_len: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

pub fn default_tau_sp(p: &Patchifier) -> f64 {
    match p {
        Patchifier::Fixed { .. } | Patchifier::SpaceByte { .. } => 1.5,
        Patchifier::Entropy { .. } => 1.0,
        Patchifier::HNet { .. } => 2.5,
    }
}

pub const DEFAULT_TAU_P: f64 = 2.5;

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Table {
    entries: HashMap<(String, String), Entry>,
    sections: HashMap<String, usize>,
    last_line: usize,
}

const SECTIONS: [&str; 9] = ["", "model", "encoder", "aux", "trunk", "decoder", "train", "data", "eval"];

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut sections = HashMap::new();
        let mut section = String::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(rest) = l.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config { line, msg: format!("malformed section header `{l}`") })?
                    .trim();
                if !SECTIONS.contains(&name) || name.is_empty() {
                    return Err(Error::Config { line, msg: format!("unknown section [{name}]") });
                }
                if sections.insert(name.to_string(), line).is_some() {
                    return Err(Error::Config { line, msg: format!("duplicate section [{name}]") });
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got `{l}`") })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config { line, msg: "empty key".into() });
            }
            let key = (section.clone(), k.to_string());
            if let Some(prev) = entries.get(&key) {
                let prev: &Entry = prev;
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{k}` (first set on line {})", prev.line),
                });
            }
            entries.insert(key, Entry { value: v.trim().to_string(), line, used: false });
        }
        Ok(Table { entries, sections, last_line })
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(&(section.to_string(), key.to_string())).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(|e| e.line)
            .or_else(|| self.sections.get(section).copied())
            .unwrap_or(self.last_line)
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line,
                msg: format!("invalid value `{v}` for `{key}`: {e}"),
            }),
        }
    }

    fn or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    fn bytes(&mut self, section: &str, key: &str, default: &[u8]) -> Result<Vec<u8>> {
        match self.raw(section, key) {
            None => Ok(default.to_vec()),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<u8>().map_err(|_| Error::Config {
                        line,
                        msg: format!("`{key}` must be a comma-separated list of byte values, got `{v}`"),
                    })
                })
                .collect(),
        }
    }

    fn stack(&mut self, section: &str, default: StackConfig) -> Result<StackConfig> {
        let d_model = self.or(section, "d_model", default.d_model)?;
        let heads_default = if d_model == default.d_model { default.n_heads } else { (d_model / 64).max(1) };
        let cfg = StackConfig {
            n_layers: self.or(section, "n_layers", default.n_layers)?,
            d_model,
            d_ff: self.or(section, "d_ff", default.d_ff)?,
            n_heads: self.or(section, "n_heads", heads_default)?,
            rope_base: self.or(section, "rope_base", default.rope_base)?,
        };
        cfg.validate(section).map_err(|e| Error::Config {
            line: self.line_of(section, "d_model"),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }
}

/// Default model shapes: 64-wide byte-level stacks and a 4-layer,
/// 128-wide trunk.
pub fn default_model() -> ModelConfig {
    ModelConfig {
        encoder: StackConfig::new(1, 64, 192),
        aux: StackConfig::new(2, 64, 192),
        trunk: StackConfig::new(4, 128, 384),
        decoder: StackConfig::new(1, 64, 192),
        agg_heads: 1,
        router_hidden: 64,
        patchifier: Patchifier::Fixed { p: 8 },
        trigger: TriggerPolicy::Entropy(1.5),
        hnet_smoothing: false,
    }
}

pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let mut t = Table::parse(text)?;
    let seed: u64 = t.or("", "seed", 0)?;

    let dm = default_model();
    let family: String = t.or("model", "patchifier", "fixed".to_string())?;
    let patchifier = match family.as_str() {
        "fixed" => Patchifier::Fixed { p: t.or("model", "patch_size", 8)? },
        "spacebyte" => Patchifier::SpaceByte { delimiters: t.bytes("model", "delimiters", &DEFAULT_DELIMITERS)? },
        "entropy" => Patchifier::Entropy { tau_p: t.or("model", "tau_p", DEFAULT_TAU_P)? },
        "hnet" => Patchifier::HNet { target_size: t.or("model", "target_patch_size", DEFAULT_TARGET_PATCH_SIZE)? },
        other => {
            return Err(Error::Config {
                line: t.line_of("model", "patchifier"),
                msg: format!("unknown patchifier `{other}` (fixed, spacebyte, entropy, hnet)"),
            })
        }
    };
    let trig: String = t.or("model", "trigger", "entropy".to_string())?;
    let trigger = match trig.as_str() {
        "none" => TriggerPolicy::None,
        "dense" => TriggerPolicy::Dense,
        "entropy" => TriggerPolicy::Entropy(t.or("model", "tau_sp", default_tau_sp(&patchifier))?),
        "stride" => TriggerPolicy::Stride(t.or("model", "stride", 4)?),
        "whitespace" => TriggerPolicy::Whitespace(t.bytes("model", "trigger_delimiters", &DEFAULT_DELIMITERS)?),
        other => {
            return Err(Error::Config {
                line: t.line_of("model", "trigger"),
                msg: format!("unknown trigger `{other}` (none, entropy, stride, whitespace, dense)"),
            })
        }
    };
    let encoder = t.stack("encoder", dm.encoder.clone())?;
    let byte_default = |mut s: StackConfig| {
        s.d_model = encoder.d_model;
        s.n_heads = encoder.n_heads;
        s.d_ff = encoder.d_ff;
        s
    };
    let model = ModelConfig {
        aux: t.stack("aux", byte_default(dm.aux.clone()))?,
        trunk: t.stack("trunk", dm.trunk.clone())?,
        decoder: t.stack("decoder", byte_default(dm.decoder.clone()))?,
        encoder,
        agg_heads: t.or("model", "agg_heads", dm.agg_heads)?,
        router_hidden: t.or("model", "router_hidden", dm.router_hidden)?,
        hnet_smoothing: t.or("model", "hnet_smoothing", false)?,
        patchifier,
        trigger,
    };
    model.validate().map_err(|e| {
        let key = match &e {
            Error::ConfigInvalid(m) if m.contains("tau_p") => "tau_p",
            Error::ConfigInvalid(m) if m.contains("agg_heads") => "agg_heads",
            _ => "patchifier",
        };
        Error::Config { line: t.line_of("model", key), msg: e.to_string() }
    })?;

    let d = TrainConfig::default();
    let train = TrainConfig {
        seq_len: t.or("train", "seq_len", d.seq_len)?,
        batch_size: t.or("train", "batch_size", d.batch_size)?,
        byte_budget: t.or("train", "byte_budget", d.byte_budget)?,
        lr: t.or("train", "lr", d.lr)?,
        warmup_steps: t.or("train", "warmup_steps", d.warmup_steps)?,
        weight_decay: t.or("train", "weight_decay", d.weight_decay)?,
        grad_clip: t.or("train", "grad_clip", d.grad_clip)?,
        beta1: d.beta1,
        beta2: d.beta2,
        eps: d.eps,
        checkpoint_every: t.or("train", "checkpoint_every", d.checkpoint_every)?,
        eval_every: t.or("train", "eval_every", d.eval_every)?,
        seed,
    };
    train.validate().map_err(|e| Error::Config { line: t.line_of("train", "seq_len"), msg: e.to_string() })?;
    let out_dir = t.get::<String>("train", "out_dir")?.map(|p| base.join(p));

    let train_path = t.get::<String>("data", "train")?.ok_or_else(|| Error::Config {
        line: t.line_of("data", "train"),
        msg: "missing required key `train` in [data]".into(),
    })?;
    let data = DataConfig {
        train: base.join(train_path),
        validation: t.get::<String>("data", "validation")?.map(|p| base.join(p)),
    };
    let eval = EvalConfig {
        manifest: t.get::<String>("eval", "manifest")?.map(|p| base.join(p)).or_else(|| data.validation.clone()),
        seq_len: t.or("eval", "seq_len", train.seq_len)?,
        batch_size: t.or("eval", "batch_size", train.batch_size)?,
    };

    let mut unused: Vec<_> = t.entries.iter().filter(|(_, e)| !e.used).collect();
    unused.sort_by_key(|(_, e)| e.line);
    if let Some(((s, k), e)) = unused.first() {
        let sec = if s.is_empty() { "top level".to_string() } else { format!("[{s}]") };
        return Err(Error::Config { line: e.line, msg: format!("unknown key `{k}` in {sec}") });
    }
    Ok(RunConfig { seed, model, train, out_dir, data, eval })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Accepts `inf` for an infinite threshold.
pub fn parse_threshold(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
        v => v.parse().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DEFAULT_ROPE_BASE;

    fn parse(s: &str) -> Result<RunConfig> {
        parse_config(s, Path::new("/base"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse("[data]\ntrain = t.manifest\n").unwrap();
        assert_eq!(c.data.train, PathBuf::from("/base/t.manifest"));
        assert_eq!(c.model.patchifier, Patchifier::Fixed { p: 8 });
        assert_eq!(c.model.trigger, TriggerPolicy::Entropy(1.5));
        assert_eq!(c.train.eps, 1e-12);
        assert_eq!(c.model.encoder.rope_base, DEFAULT_ROPE_BASE);
    }

    #[test]
    fn family_default_thresholds() {
        let c = parse("[model]\npatchifier = entropy\n[data]\ntrain = t\n").unwrap();
        assert_eq!(c.model.trigger, TriggerPolicy::Entropy(1.0));
        assert_eq!(c.model.patchifier, Patchifier::Entropy { tau_p: 2.5 });
        let c = parse("[model]\npatchifier = hnet\n[data]\ntrain = t\n").unwrap();
        assert_eq!(c.model.trigger, TriggerPolicy::Entropy(2.5));
        let c = parse("[model]\npatchifier = spacebyte\n[data]\ntrain = t\n").unwrap();
        assert_eq!(c.model.trigger, TriggerPolicy::Entropy(1.5));
    }

    #[test]
    fn threshold_order_enforced() {
        let e = parse("[model]\npatchifier = entropy\ntau_p = 1.0\ntau_sp = 1.5\n[data]\ntrain = t\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("tau_p") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn rejects_bad_input() {
        let dup = parse("[data]\ntrain = a\ntrain = b\n").unwrap_err().to_string();
        assert!(dup.contains("duplicate") && dup.contains("line 3"), "{dup}");
        let unk = parse("[data]\ntrain = a\n[model]\nfoo = 1\n").unwrap_err().to_string();
        assert!(unk.contains("unknown key `foo`") && unk.contains("line 4"), "{unk}");
        assert!(parse("[model]\npatch_size = 4\n").unwrap_err().to_string().contains("missing"));
        assert!(parse("[bogus]\n").is_err());
        assert!(parse("[data]\ntrain = a\n[model]\npatch_size = x\n").is_err());
        assert!(parse("just words\n").is_err());
        assert!(parse("[model\n").is_err());
        assert!(parse("[data]\ntrain = a\n[encoder]\nd_model = 31\n").is_err());
    }

    #[test]
    fn widths_follow_encoder() {
        let c = parse("[encoder]\nd_model = 32\nd_ff = 64\n[data]\ntrain = t\n").unwrap();
        assert_eq!(c.model.decoder.d_model, 32);
        assert_eq!(c.model.aux.d_model, 32);
        c.model.validate().unwrap();
    }

    #[test]
    fn infinite_threshold() {
        assert_eq!(parse_threshold("inf"), Some(f64::INFINITY));
        assert_eq!(parse_threshold("1.5"), Some(1.5));
        let c = parse("[model]\ntau_sp = inf\n[data]\ntrain = t\n").unwrap();
        assert_eq!(c.model.trigger, TriggerPolicy::Entropy(f64::INFINITY));
    }
}
