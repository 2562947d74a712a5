//! Run configuration: profile defaults, a TOML file and `key=value`
//! overrides, merged in that order and validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use neurotok::encoder::{BranchConfig, EncoderConfig};
use neurotok::pretrain::{BackboneConfig, PretrainConfig, ProbeConfig};
use neurotok::rvq::RvqConfig;
use neurotok::signal::SynthSpec;
use neurotok::spectral::{check_patch_len, LossWeights};
use neurotok::tokenizer::{Fusion, TokenizerConfig, TrainConfig};
use neurotok::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("profile: unknown profile `{other}` (desk, paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Recording files; empty means the synthetic corpus from `[synth]`.
    pub recordings: Vec<PathBuf>,
    /// Time slots per training sample.
    pub slots: usize,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub recordings: usize,
    pub channels: usize,
    /// Seconds per recording.
    pub duration: f64,
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Patch length `w`; recordings are resampled to `w` Hz.
    pub patch_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Number of temporal branches `S`, taken in order from the reference set.
    pub branches: usize,
    /// Codebook levels per branch `N`.
    pub levels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub decoder_depth: usize,
    pub lambda_circle: f64,
    pub beta: f64,
    pub ema_decay: f64,
    pub fusion: Fusion,
    pub num_electrodes: usize,
    pub max_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub kmeans_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub recordings_per_class: usize,
    pub duration: f64,
    pub test_fraction: f64,
    pub iters: usize,
    pub lr: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub levels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub tokenizer: TokenizerSection,
    pub pretrain: PretrainSection,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
    pub gradcheck: GradcheckSection,
}

/// Profile defaults without a seed; an unset seed is drawn at resolution.
fn defaults(profile: Profile) -> Table {
    let (enc, rvq, dec_depth, tok, pre) = match profile {
        Profile::Desk => (
            EncoderConfig::desk(),
            RvqConfig::desk(),
            2,
            TrainConfig {
                batch_size: 8,
                lr: 5e-3,
                ..TrainConfig::desk()
            },
            PretrainConfig::desk(),
        ),
        Profile::Paper => (
            EncoderConfig::paper(),
            RvqConfig::paper(),
            3,
            TrainConfig::paper(),
            PretrainConfig::paper(),
        ),
    };
    let desk = profile == Profile::Desk;
    let loss = LossWeights::default();
    let probe = ProbeConfig::default();
    let cfg = RunConfig {
        profile,
        seed: 0,
        output_dir: PathBuf::from("runs"),
        data: DataSection {
            recordings: vec![],
            slots: if desk { 1 } else { 4 },
            val_fraction: 0.1,
        },
        synth: SynthSection {
            recordings: if desk { 32 } else { 64 },
            channels: 8,
            duration: 60.0,
            noise_level: 0.05,
        },
        model: ModelSection {
            patch_len: enc.patch_len,
            dim: enc.dim,
            depth: enc.depth,
            heads: enc.heads,
            mlp_hidden: enc.mlp_hidden,
            branches: enc.branches.len(),
            levels: rvq.levels,
            codebook_size: rvq.codebook_size,
            code_dim: rvq.code_dim,
            decoder_depth: dec_depth,
            lambda_circle: loss.lambda_circle,
            beta: rvq.beta,
            ema_decay: rvq.decay,
            fusion: Fusion::Sum,
            num_electrodes: enc.num_electrodes,
            max_slots: enc.max_slots,
        },
        tokenizer: TokenizerSection {
            epochs: tok.epochs,
            batch_size: tok.batch_size,
            lr: tok.lr,
            min_lr: tok.min_lr,
            warmup_epochs: tok.warmup_epochs,
            weight_decay: tok.weight_decay,
            clip: tok.clip,
            kmeans_iters: tok.kmeans_iters,
        },
        pretrain: PretrainSection {
            mask_ratio: pre.mask_ratio,
            epochs: pre.epochs,
            batch_size: pre.batch_size,
            lr: pre.lr,
            min_lr: pre.min_lr,
            warmup_epochs: pre.warmup_epochs,
            weight_decay: pre.weight_decay,
        },
        probe: ProbeSection {
            recordings_per_class: 12,
            duration: 20.0,
            test_fraction: 0.25,
            iters: probe.iters,
            lr: probe.lr,
            l2: probe.l2,
        },
        sweep: SweepSection { levels: vec![2, 4, 8] },
        gradcheck: GradcheckSection { seeds: 20 },
    };
    let mut t = Table::try_from(&cfg).expect("defaults serialize");
    t.remove("seed");
    t
}

/// Every config key as `section.key = default` for the desk profile,
/// sorted by key.
pub fn config_keys() -> Vec<(String, String)> {
    let mut out = vec![("seed".to_string(), "drawn and recorded when unset".to_string())];
    flatten("", &defaults(Profile::Desk), &mut out);
    out
}

fn flatten(prefix: &str, t: &Table, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(inner) => flatten(&key, inner, out),
            other => out.push((key, other.to_string())),
        }
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Sets `key` (dotted) in `base`, checking that it exists there with a
/// compatible type. Integers are accepted where floats are expected.
fn set_key(base: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = base;
    for p in &parts[..parts.len() - 1] {
        t = match t.get_mut(*p) {
            Some(Value::Table(inner)) => inner,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        };
    }
    let last = parts[parts.len() - 1];
    if key == "seed" {
        return match value {
            Value::Integer(i) if i >= 0 => {
                t.insert(last.into(), Value::Integer(i));
                Ok(())
            }
            other => Err(Error::Config(format!(
                "key `seed`: expected non-negative integer, found {}",
                type_name(&other)
            ))),
        };
    }
    let current = t
        .get(last)
        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    let value = match (current, value) {
        (Value::Table(_), v) => {
            return Err(Error::Config(format!(
                "key `{key}` is a section; found {}",
                type_name(&v)
            )))
        }
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (c, v) if std::mem::discriminant(c) == std::mem::discriminant(&v) => v,
        (c, v) => {
            return Err(Error::Config(format!(
                "key `{key}`: expected {}, found {}",
                type_name(c),
                type_name(&v)
            )))
        }
    };
    t.insert(last.into(), value);
    Ok(())
}

fn merge(base: &mut Table, layer: &Table, prefix: &str) -> Result<()> {
    for (k, v) in layer {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(inner) => {
                let mut t: &Table = base;
                for p in key.split('.') {
                    t = match t.get(p) {
                        Some(Value::Table(x)) => x,
                        Some(_) => return Err(Error::Config(format!("key `{key}` is not a section"))),
                        None => return Err(Error::Config(format!("unknown key `{key}`"))),
                    };
                }
                merge(base, inner, &key)?;
            }
            other => set_key(base, &key, other.clone())?,
        }
    }
    Ok(())
}

/// Parses the right-hand side of a `key=value` override as a TOML value,
/// falling back to a bare string.
fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = match format!("v = {v}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(v.to_string()),
    };
    Ok((k, value))
}

/// Layered sources for one resolution.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub profile: Option<Profile>,
    pub file: Option<PathBuf>,
    /// `key=value` strings, applied last.
    pub overrides: Vec<String>,
}

/// Profile defaults, then the file, then overrides; validated.
pub fn resolve(src: &ConfigSources) -> Result<RunConfig> {
    let file: Option<Table> = match &src.file {
        Some(p) => Some(load_table(p)?),
        None => None,
    };
    let overrides = src
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let profile = match src.profile {
        Some(p) => p,
        None => {
            let from_override = overrides.iter().rev().find(|(k, _)| k == "profile");
            let from_file = file.as_ref().and_then(|t| t.get("profile"));
            match from_override.map(|(_, v)| v).or(from_file) {
                Some(Value::String(s)) => s.parse()?,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "key `profile`: expected string, found {}",
                        type_name(other)
                    )))
                }
                None => Profile::Desk,
            }
        }
    };
    let mut table = defaults(profile);
    if let Some(f) = &file {
        merge(&mut table, f, "")?;
    }
    for (k, v) in overrides {
        set_key(&mut table, &k, v)?;
    }
    if let Some(p) = src.profile {
        set_key(&mut table, "profile", Value::String(profile_name(p).into()))?;
    }
    if !table.contains_key("seed") {
        let s: u32 = rand::random();
        log::info!("no seed given; drew {s}");
        table.insert("seed".into(), Value::Integer(i64::from(s)));
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Desk => "desk",
        Profile::Paper => "paper",
    }
}

fn load_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    text.parse::<Table>()
        .map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.message().to_string(),
        })
}

/// Reads and validates a file with every key present, as written by
/// [`RunConfig::to_toml`] or embedded in a manifest.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    resolve(&ConfigSources {
        file: Some(path.to_path_buf()),
        ..Default::default()
    })
}

fn err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn scoped(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => err(key, m),
        other => err(key, other),
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        check_patch_len(m.patch_len).map_err(|e| scoped("model.patch_len", e))?;
        if m.branches == 0 || m.branches > BranchConfig::reference().len() {
            return Err(err(
                "model.branches",
                format!("must be in 1..={}", BranchConfig::reference().len()),
            ));
        }
        if m.heads == 0 || m.dim % m.heads != 0 {
            return Err(err("model.heads", format!("{} heads do not divide dim {}", m.heads, m.dim)));
        }
        if m.codebook_size < 2 {
            return Err(err("model.codebook_size", "must be at least 2"));
        }
        if !(m.lambda_circle >= 0.0) {
            return Err(err("model.lambda_circle", "must be non-negative"));
        }
        if self.data.slots == 0 || self.data.slots > m.max_slots {
            return Err(err(
                "data.slots",
                format!("must be in 1..=model.max_slots ({})", m.max_slots),
            ));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(err("data.val_fraction", "must be in [0, 1)"));
        }
        if self.data.recordings.is_empty() {
            if self.synth.recordings == 0 || self.synth.channels == 0 || !(self.synth.duration > 0.0) {
                return Err(err("synth", "recordings, channels and duration must be positive"));
            }
            if self.synth.channels > m.num_electrodes {
                return Err(err(
                    "synth.channels",
                    format!("exceeds model.num_electrodes ({})", m.num_electrodes),
                ));
            }
        }
        if !(self.pretrain.mask_ratio > 0.0 && self.pretrain.mask_ratio < 1.0) {
            return Err(err("pretrain.mask_ratio", "must be in (0, 1)"));
        }
        if self.probe.recordings_per_class < 2 || !(self.probe.test_fraction > 0.0 && self.probe.test_fraction < 1.0) {
            return Err(err(
                "probe",
                "needs at least 2 recordings per class and test_fraction in (0, 1)",
            ));
        }
        if self.sweep.levels.is_empty() || self.sweep.levels.contains(&0) {
            return Err(err("sweep.levels", "must be a non-empty list of positive counts"));
        }
        if self.gradcheck.seeds == 0 {
            return Err(err("gradcheck.seeds", "must be positive"));
        }
        self.tokenizer_config().validate().map_err(|e| scoped("model", e))?;
        self.train_config().validate().map_err(|e| scoped("tokenizer", e))?;
        self.pretrain_config().validate().map_err(|e| scoped("pretrain", e))?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            patch_len: m.patch_len,
            dim: m.dim,
            depth: m.depth,
            heads: m.heads,
            mlp_hidden: m.mlp_hidden,
            branches: BranchConfig::reference()[..m.branches].to_vec(),
            groups: 4,
            num_electrodes: m.num_electrodes,
            max_slots: m.max_slots,
            qk_norm: true,
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        let m = &self.model;
        let base = match self.profile {
            Profile::Desk => RvqConfig::desk(),
            Profile::Paper => RvqConfig::paper(),
        };
        TokenizerConfig {
            encoder: self.encoder_config(),
            rvq: RvqConfig {
                levels: m.levels,
                codebook_size: m.codebook_size,
                code_dim: m.code_dim,
                beta: m.beta,
                decay: m.ema_decay,
                ..base
            },
            decoder_depth: m.decoder_depth,
            fusion: m.fusion,
            loss: LossWeights {
                lambda_circle: m.lambda_circle,
                ..LossWeights::default()
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.tokenizer;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            min_lr: t.min_lr,
            warmup_epochs: t.warmup_epochs,
            weight_decay: t.weight_decay,
            clip: t.clip,
            seed: self.seed,
            kmeans_iters: t.kmeans_iters,
            ..TrainConfig::paper()
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            encoder: self.encoder_config(),
            levels: self.model.levels,
            codebook_size: self.model.codebook_size,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            mask_ratio: p.mask_ratio,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            min_lr: p.min_lr,
            warmup_epochs: p.warmup_epochs,
            weight_decay: p.weight_decay,
            seed: self.seed,
            ..PretrainConfig::paper()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            iters: self.probe.iters,
            lr: self.probe.lr,
            l2: self.probe.l2,
        }
    }

    /// Recipe of synthetic recording `i`; the sample rate equals `w`.
    pub fn synth_spec(&self, i: usize) -> SynthSpec {
        SynthSpec {
            noise_level: self.synth.noise_level,
            ..SynthSpec::all_bands(
                self.model.patch_len as f64,
                self.synth.channels,
                self.synth.duration,
                self.seed.wrapping_mul(1000).wrapping_add(i as u64),
            )
        }
    }
}
