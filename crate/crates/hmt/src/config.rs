//! Flat `key = value` run configuration: one file (plus command-line
//! overrides) resolves every knob of a run, and the resolved text is embedded
//! verbatim in every artifact and checkpoint so results stay re-derivable.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{HmtError, Result};
use crate::memory::HmtConfig;
use crate::recurrence::TrainConfig;

pub const RECOGNIZED_KEYS: &[&str] = &[
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "vocab_size",
    "max_pos",
    "segment_len",
    "sensory_len",
    "repr_len",
    "cache_size",
    "dh",
    "recall",
    "unroll",
    "stage",
    "lr",
    "lr_decay",
    "lr_decay_every",
    "clip_norm",
    "steps",
    "batch",
    "seed",
    "train_path",
    "eval_path",
    "out_dir",
];

/// Fully resolved view of one run: backbone + mechanism + training knobs
/// plus data paths. `explicit` records which keys the user actually set
/// (eval commands use it to tell overrides from defaults); it does not
/// participate in equality.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub hmt: HmtConfig,
    pub train: TrainConfig,
    pub train_path: Option<String>,
    pub eval_path: Option<String>,
    pub out_dir: Option<String>,
    pub explicit: std::collections::BTreeSet<String>,
}

impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.backbone == other.backbone
            && self.hmt == other.hmt
            && self.train == other.train
            && self.train_path == other.train_path
            && self.eval_path == other.eval_path
            && self.out_dir == other.out_dir
    }
}

impl Default for RunConfig {
    /// Paper-flavored defaults at desk scale: segment_len 256, sensory 32,
    /// cache 300, repr_len = segment_len/2, lr 1e-5 decaying by 0.7 every
    /// 100 steps. Stage 1 runs without recall at T = 2 for 200 steps.
    fn default() -> Self {
        let segment_len = 256;
        let sensory_len = 32;
        let repr_len = segment_len / 2;
        let d_model = 64;
        RunConfig {
            backbone: BackboneConfig {
                d_model,
                n_layers: 2,
                n_heads: 4,
                d_ff: 4 * d_model,
                vocab_size: 256,
                max_pos: segment_len + sensory_len + 2,
            },
            hmt: HmtConfig {
                segment_len,
                sensory_len,
                repr_len,
                cache_size: 300,
                d_h: d_model,
                recall_enabled: false,
                unroll: 2,
            },
            train: TrainConfig {
                stage: 1,
                unroll: 2,
                lr0: 1e-5,
                decay_factor: 0.7,
                decay_every: 100,
                steps: 200,
                batch: 1,
                clip_norm: 1.0,
                seed: 0,
            },
            train_path: None,
            eval_path: None,
            out_dir: None,
            explicit: std::collections::BTreeSet::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        HmtError::Config(format!(
            "unparsable value {value:?} for key {key} (line {line})"
        ))
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(HmtError::Config(format!(
            "unparsable boolean {other:?} for key {key} (line {line})"
        ))),
    }
}

impl RunConfig {
    /// Parse a config file plus `--key value` overrides. Later occurrences of
    /// a key win, with a warning on standard error; unknown keys are
    /// rejected with their line number.
    pub fn parse(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = parse_kv_pairs(&text)?;
        for (k, v) in overrides {
            pairs.push((k.clone(), v.clone(), 0));
        }
        RunConfig::from_pairs(&pairs)
    }

    /// Resolve from `key = value` text alone (checkpoint configs).
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let pairs = parse_kv_pairs(text)?;
        RunConfig::from_pairs(&pairs)
    }

    /// Build from in-order `(key, value, line)` pairs, applying defaults and
    /// the documented derivation rules for unset keys.
    pub fn from_pairs(pairs: &[(String, String, usize)]) -> Result<RunConfig> {
        let mut seen: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (k, v, line) in pairs {
            if !RECOGNIZED_KEYS.contains(&k.as_str()) {
                return Err(HmtError::Config(format!(
                    "unknown key {k:?} (line {line})"
                )));
            }
            if let Some((prev, prev_line)) = seen.get(k) {
                eprintln!(
                    "warning: duplicate key {k} (line {line}) overrides {prev:?} (line {prev_line})"
                );
            }
            seen.insert(k.clone(), (v.clone(), *line));
        }
        let get = |k: &str| seen.get(k).map(|(v, l)| (v.clone(), *l));

        let mut cfg = RunConfig::default();
        cfg.explicit = seen.keys().cloned().collect();

        // Stage first: it drives the recall/unroll/steps defaults.
        if let Some((v, l)) = get("stage") {
            cfg.train.stage = parse_num("stage", &v, l)?;
        }
        if cfg.train.stage == 2 {
            cfg.hmt.recall_enabled = true;
            cfg.train.unroll = 15;
            cfg.train.steps = 500;
        }

        if let Some((v, l)) = get("d_model") {
            cfg.backbone.d_model = parse_num("d_model", &v, l)?;
            cfg.backbone.d_ff = 4 * cfg.backbone.d_model;
            cfg.hmt.d_h = cfg.backbone.d_model;
        }
        if let Some((v, l)) = get("n_layers") {
            cfg.backbone.n_layers = parse_num("n_layers", &v, l)?;
        }
        if let Some((v, l)) = get("n_heads") {
            cfg.backbone.n_heads = parse_num("n_heads", &v, l)?;
        }
        if let Some((v, l)) = get("d_ff") {
            cfg.backbone.d_ff = parse_num("d_ff", &v, l)?;
        }
        if let Some((v, l)) = get("vocab_size") {
            cfg.backbone.vocab_size = parse_num("vocab_size", &v, l)?;
        }
        if let Some((v, l)) = get("segment_len") {
            cfg.hmt.segment_len = parse_num("segment_len", &v, l)?;
            cfg.hmt.repr_len = (cfg.hmt.segment_len / 2).max(1);
        }
        if let Some((v, l)) = get("sensory_len") {
            cfg.hmt.sensory_len = parse_num("sensory_len", &v, l)?;
        }
        if let Some((v, l)) = get("repr_len") {
            cfg.hmt.repr_len = parse_num("repr_len", &v, l)?;
        }
        if let Some((v, l)) = get("cache_size") {
            cfg.hmt.cache_size = parse_num("cache_size", &v, l)?;
        }
        if let Some((v, l)) = get("dh") {
            cfg.hmt.d_h = parse_num("dh", &v, l)?;
        }
        if let Some((v, l)) = get("recall") {
            cfg.hmt.recall_enabled = parse_bool("recall", &v, l)?;
        }
        if let Some((v, l)) = get("unroll") {
            cfg.train.unroll = parse_num("unroll", &v, l)?;
        }
        if let Some((v, l)) = get("lr") {
            cfg.train.lr0 = parse_num("lr", &v, l)?;
        }
        if let Some((v, l)) = get("lr_decay") {
            cfg.train.decay_factor = parse_num("lr_decay", &v, l)?;
        }
        if let Some((v, l)) = get("lr_decay_every") {
            cfg.train.decay_every = parse_num("lr_decay_every", &v, l)?;
        }
        if let Some((v, l)) = get("clip_norm") {
            cfg.train.clip_norm = parse_num("clip_norm", &v, l)?;
        }
        if let Some((v, l)) = get("steps") {
            cfg.train.steps = parse_num("steps", &v, l)?;
        }
        if let Some((v, l)) = get("batch") {
            cfg.train.batch = parse_num("batch", &v, l)?;
        }
        if let Some((v, l)) = get("seed") {
            cfg.train.seed = parse_num("seed", &v, l)?;
        }
        if let Some((v, _)) = get("train_path") {
            cfg.train_path = Some(v.trim().to_string());
        }
        if let Some((v, _)) = get("eval_path") {
            cfg.eval_path = Some(v.trim().to_string());
        }
        if let Some((v, _)) = get("out_dir") {
            cfg.out_dir = Some(v.trim().to_string());
        }

        // Derived default: positions must cover the augmented segment and
        // the representation-extraction input.
        let derived_max_pos = (cfg.hmt.segment_len + cfg.hmt.sensory_len + 2)
            .max(cfg.hmt.repr_len + 2);
        cfg.backbone.max_pos = derived_max_pos;
        if let Some((v, l)) = get("max_pos") {
            cfg.backbone.max_pos = parse_num("max_pos", &v, l)?;
        }

        cfg.hmt.unroll = cfg.train.unroll;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hmt.validate()?;
        self.train.validate()?;
        let need = (self.hmt.segment_len + self.hmt.sensory_len + 2)
            .max(self.hmt.repr_len + 2);
        if self.backbone.max_pos < need {
            return Err(HmtError::Config(format!(
                "max_pos {} below the required {need} (L+k+2 and j+2)",
                self.backbone.max_pos
            )));
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order. Feeding this back
    /// through `parse_text` reproduces the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("d_model", self.backbone.d_model.to_string());
        kv("n_layers", self.backbone.n_layers.to_string());
        kv("n_heads", self.backbone.n_heads.to_string());
        kv("d_ff", self.backbone.d_ff.to_string());
        kv("vocab_size", self.backbone.vocab_size.to_string());
        kv("max_pos", self.backbone.max_pos.to_string());
        kv("segment_len", self.hmt.segment_len.to_string());
        kv("sensory_len", self.hmt.sensory_len.to_string());
        kv("repr_len", self.hmt.repr_len.to_string());
        kv("cache_size", self.hmt.cache_size.to_string());
        kv("dh", self.hmt.d_h.to_string());
        kv("recall", self.hmt.recall_enabled.to_string());
        kv("unroll", self.train.unroll.to_string());
        kv("stage", self.train.stage.to_string());
        kv("lr", format!("{:e}", self.train.lr0));
        kv("lr_decay", self.train.decay_factor.to_string());
        kv("lr_decay_every", self.train.decay_every.to_string());
        kv("clip_norm", self.train.clip_norm.to_string());
        kv("steps", self.train.steps.to_string());
        kv("batch", self.train.batch.to_string());
        kv("seed", self.train.seed.to_string());
        if let Some(p) = &self.train_path {
            kv("train_path", p.clone());
        }
        if let Some(p) = &self.eval_path {
            kv("eval_path", p.clone());
        }
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.clone());
        }
        s
    }

    /// FNV-1a 64-bit hash of the canonical text; embedded in artifacts.
    pub fn content_hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    /// The tiny reference configuration used by the gradient-check gate:
    /// d_model 32, 2 layers, 4 heads, L 16, k 4, j 8, N 8, d_h 32, T 3.
    pub fn tiny_reference() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone = BackboneConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            max_pos: 22,
        };
        cfg.hmt = HmtConfig {
            segment_len: 16,
            sensory_len: 4,
            repr_len: 8,
            cache_size: 8,
            d_h: 32,
            recall_enabled: true,
            unroll: 3,
        };
        cfg.train.unroll = 3;
        cfg.train.stage = 2;
        cfg
    }
}

/// Split config text into in-order `(key, value, line)` pairs.
pub fn parse_kv_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((k, v)) = stripped.split_once('=') else {
            return Err(HmtError::Config(format!(
                "expected `key = value`, got {stripped:?} (line {line})"
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string(), line));
    }
    Ok(out)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
