//! Sectioned `key = value` configuration text, used both for input configs
//! and for run manifests.
//!
//! ```text
//! # manifest
//! [train]
//! supervision = x0_from_native
//! steps = 5000
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys before
//! the first section header belong to the unnamed section `""`.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{Direction, MauccConfig};
use crate::param::PredKind;
use crate::sampler::{EtaMode, SamplerConfig, SamplerKind};
use crate::toytrainer::{ToyTask, TrainConfig};

pub const MANIFEST_HEADER: &str = "# manifest";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", i + 1)))?;
                section = name.trim().to_string();
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            let prev = cfg
                .sections
                .entry(section.clone())
                .or_default()
                .insert(key.to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Typed lookup; `Ok(None)` when the key is absent.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("[{section}] {key} = {v}: {e}"))),
        }
    }

    /// Overwrites `*slot` when the key is present.
    pub fn read_into<T: FromStr>(&self, section: &str, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => parse_list(v)
                .map(Some)
                .map_err(|e| Error::Config(format!("[{section}] {key}: {e}"))),
        }
    }

    /// Keys of `section` not in `known`.
    pub fn unknown_keys(&self, section: &str, known: &[&str]) -> Vec<String> {
        self.sections
            .get(section)
            .map(|m| m.keys().filter(|k| !known.contains(&k.as_str())).cloned().collect())
            .unwrap_or_default()
    }

    /// Errors on keys of `section` not in `known`.
    pub fn reject_unknown(&self, section: &str, known: &[&str]) -> Result<()> {
        let extra = self.unknown_keys(section, known);
        if extra.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("[{section}] unknown keys: {}", extra.join(", "))))
        }
    }

    pub fn remove_section(&mut self, section: &str) {
        self.sections.remove(section);
    }

    pub fn merge(&mut self, other: &Config) {
        for (sec, kv) in &other.sections {
            let dst = self.sections.entry(sec.clone()).or_default();
            for (k, v) in kv {
                dst.insert(k.clone(), v.clone());
            }
        }
    }

    /// Hex SHA-256 of `blob <len>\0<canonical text>`.
    pub fn content_hash(&self) -> String {
        let body = self.to_string();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }

    /// Canonical text under a `# manifest` header.
    pub fn to_manifest(&self) -> String {
        format!("{MANIFEST_HEADER}\n{self}")
    }
}

/// Canonical form: sections and keys sorted, `key = value`, LF endings.
impl Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (sec, kv) in &self.sections {
            if !first {
                writeln!(f)?;
            }
            first = false;
            if !sec.is_empty() {
                writeln!(f, "[{sec}]")?;
            }
            for (k, v) in kv {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| format!("`{x}`: {e}")))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub const TRAIN_KEYS: &[&str] = &[
    "supervision",
    "native_kind",
    "schedule",
    "lr",
    "batch",
    "steps",
    "eval_every",
    "seed",
    "hidden",
    "time_features",
    "eval_samples",
    "eval_steps",
    "eval_seed",
    "linear_skip",
];

impl TrainConfig {
    /// Reads `[section]` over the defaults. Without an explicit
    /// `native_kind` the schedule's default native kind is used.
    pub fn from_config(cfg: &Config, section: &str) -> Result<Self> {
        cfg.reject_unknown(section, TRAIN_KEYS)?;
        let mut c = TrainConfig::default();
        cfg.read_into(section, "schedule", &mut c.schedule)?;
        match cfg.get::<PredKind>(section, "native_kind")? {
            Some(k) => c.native_kind = k,
            None => {
                c.native_kind =
                    TrainConfig::default_native(&crate::schedule::Schedule::from_name(&c.schedule)?)
            }
        }
        cfg.read_into(section, "supervision", &mut c.supervision)?;
        cfg.read_into(section, "lr", &mut c.lr)?;
        cfg.read_into(section, "batch", &mut c.batch)?;
        cfg.read_into(section, "steps", &mut c.steps)?;
        cfg.read_into(section, "eval_every", &mut c.eval_every)?;
        cfg.read_into(section, "seed", &mut c.seed)?;
        cfg.read_into(section, "hidden", &mut c.hidden)?;
        cfg.read_into(section, "time_features", &mut c.time_features)?;
        cfg.read_into(section, "eval_samples", &mut c.eval_samples)?;
        cfg.read_into(section, "eval_steps", &mut c.eval_steps)?;
        cfg.read_into(section, "eval_seed", &mut c.eval_seed)?;
        cfg.read_into(section, "linear_skip", &mut c.linear_skip)?;
        Ok(c)
    }

    pub fn write_config(&self, cfg: &mut Config, section: &str) {
        cfg.set(section, "supervision", self.supervision);
        cfg.set(section, "native_kind", self.native_kind);
        cfg.set(section, "schedule", &self.schedule);
        cfg.set(section, "lr", fmt_f64(self.lr));
        cfg.set(section, "batch", self.batch);
        cfg.set(section, "steps", self.steps);
        cfg.set(section, "eval_every", self.eval_every);
        cfg.set(section, "seed", self.seed);
        cfg.set(section, "hidden", self.hidden);
        cfg.set(section, "time_features", self.time_features);
        cfg.set(section, "eval_samples", self.eval_samples);
        cfg.set(section, "eval_steps", self.eval_steps);
        cfg.set(section, "eval_seed", self.eval_seed);
        cfg.set(section, "linear_skip", self.linear_skip);
    }
}

pub const TASK_KEYS: &[&str] = &["image_side", "mask_blobs_min", "mask_blobs_max", "texture_amp", "seed"];

impl ToyTask {
    pub fn from_config(cfg: &Config, section: &str) -> Result<Self> {
        cfg.reject_unknown(section, TASK_KEYS)?;
        let mut t = ToyTask::default();
        cfg.read_into(section, "image_side", &mut t.image_side)?;
        cfg.read_into(section, "mask_blobs_min", &mut t.mask_blobs.0)?;
        cfg.read_into(section, "mask_blobs_max", &mut t.mask_blobs.1)?;
        cfg.read_into(section, "texture_amp", &mut t.texture_amp)?;
        cfg.read_into(section, "seed", &mut t.seed)?;
        t.validate()?;
        Ok(t)
    }

    pub fn write_config(&self, cfg: &mut Config, section: &str) {
        cfg.set(section, "image_side", self.image_side);
        cfg.set(section, "mask_blobs_min", self.mask_blobs.0);
        cfg.set(section, "mask_blobs_max", self.mask_blobs.1);
        cfg.set(section, "texture_amp", fmt_f64(self.texture_amp));
        cfg.set(section, "seed", self.seed);
    }
}

pub const SAMPLER_KEYS: &[&str] = &["kind", "n_steps", "eta_mode", "seed"];

impl SamplerConfig {
    pub fn from_config(cfg: &Config, section: &str) -> Result<Self> {
        cfg.reject_unknown(section, SAMPLER_KEYS)?;
        let kind: SamplerKind = cfg.get(section, "kind")?.unwrap_or(SamplerKind::Ddim);
        let n_steps = cfg.get(section, "n_steps")?.unwrap_or(50);
        let seed = cfg.get(section, "seed")?.unwrap_or(0);
        let mut c = match kind {
            SamplerKind::Ddim => SamplerConfig::ddim(n_steps, seed),
            SamplerKind::Ddpm => SamplerConfig::ddpm(n_steps, seed),
            SamplerKind::EulerFlow => SamplerConfig::euler_flow(n_steps, seed),
        };
        if let Some(m) = cfg.get::<EtaMode>(section, "eta_mode")? {
            c.eta_mode = m;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn write_config(&self, cfg: &mut Config, section: &str) {
        cfg.set(section, "kind", self.kind.name());
        cfg.set(section, "n_steps", self.n_steps);
        cfg.set(section, "eta_mode", self.eta_mode.name());
        cfg.set(section, "seed", self.seed);
    }
}

pub const MAUCC_KEYS: &[&str] = &["horizons", "ema_weight", "report_scale", "max_value", "direction"];

/// mAUCC settings plus the curve normalization they apply to.
#[derive(Clone, Debug, PartialEq)]
pub struct MauccSettings {
    pub maucc: MauccConfig,
    pub max_value: f64,
    pub direction: Direction,
}

impl Default for MauccSettings {
    fn default() -> Self {
        MauccSettings {
            maucc: MauccConfig::default(),
            max_value: 100.0,
            direction: Direction::HigherBetter,
        }
    }
}

impl MauccSettings {
    pub fn from_config(cfg: &Config, section: &str) -> Result<Self> {
        cfg.reject_unknown(section, MAUCC_KEYS)?;
        let mut m = MauccSettings::default();
        if let Some(h) = cfg.get_list(section, "horizons")? {
            m.maucc.horizons = h;
        }
        cfg.read_into(section, "ema_weight", &mut m.maucc.ema_weight)?;
        cfg.read_into(section, "report_scale", &mut m.maucc.report_scale)?;
        cfg.read_into(section, "max_value", &mut m.max_value)?;
        cfg.read_into(section, "direction", &mut m.direction)?;
        m.maucc.validate()?;
        if !(m.max_value > 0.0 && m.max_value.is_finite()) {
            return Err(Error::Config("max_value must be positive".into()));
        }
        Ok(m)
    }

    pub fn write_config(&self, cfg: &mut Config, section: &str) {
        let h: Vec<String> = self.maucc.horizons.iter().map(|v| fmt_f64(*v)).collect();
        cfg.set(section, "horizons", join(&h));
        cfg.set(section, "ema_weight", fmt_f64(self.maucc.ema_weight));
        cfg.set(section, "report_scale", fmt_f64(self.maucc.report_scale));
        cfg.set(section, "max_value", fmt_f64(self.max_value));
        cfg.set(section, "direction", self.direction.name());
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Joins a list for a config value.
pub fn fmt_list<T: Display>(xs: &[T]) -> String {
    join(xs)
}
