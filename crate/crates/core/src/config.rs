//! Flat `key = value` configuration text.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are case-sensitive. Lists are comma-separated (`branching = 4,3,2,2`).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key-value pairs; later assignments override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `key=value` override strings such as those from `--set`.
    pub fn from_overrides<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let mut kv = KeyValues::default();
        for item in items {
            let item = item.as_ref();
            let (k, v) = item.split_once('=').ok_or_else(|| Error::Config {
                key: item.to_string(),
                message: "override must look like key=value".into(),
            })?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub(crate) fn parse_array<T: FromStr + Copy, const N: usize>(
    key: &str,
    value: &str,
) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let v: Vec<T> = parse_list(key, value)?;
    match v.len() {
        // A single value fills every slot.
        1 => Ok([v[0]; N]),
        n if n == N => Ok(std::array::from_fn(|i| v[i])),
        n => Err(Error::Config {
            key: key.to_string(),
            message: format!("expected {N} values, got {n}"),
        }),
    }
}

pub(crate) fn unknown_key(key: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        message: "unknown key".into(),
    }
}

/// Applies generation keys onto `cfg`.
pub fn apply_gen_config(cfg: &mut crate::dataset::GenConfig, kv: &KeyValues) -> Result<()> {
    for (k, v) in kv.iter() {
        match k {
            "n_items" => cfg.n_items = parse_value(k, v)?,
            "branching" => cfg.branching = parse_array(k, v)?,
            "d_in" => cfg.d_in = parse_value(k, v)?,
            "proto_scales" => cfg.proto_scales = parse_array(k, v)?,
            "caption_noise" => cfg.caption_noise = parse_array(k, v)?,
            "audio_noise" => cfg.audio_noise = parse_value(k, v)?,
            "item_scale" => cfg.item_scale = parse_value(k, v)?,
            "seed" => cfg.seed = parse_value(k, v)?,
            _ => return Err(unknown_key(k)),
        }
    }
    cfg.validate()
}

/// Every generation key with its value in `cfg`.
pub fn gen_config_key_values(cfg: &crate::dataset::GenConfig) -> KeyValues {
    fn list<T: std::fmt::Debug>(v: &[T]) -> String {
        v.iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(",")
    }
    let mut kv = KeyValues::default();
    kv.set("n_items", &cfg.n_items.to_string());
    kv.set("branching", &list(&cfg.branching));
    kv.set("d_in", &cfg.d_in.to_string());
    kv.set("proto_scales", &list(&cfg.proto_scales));
    kv.set("caption_noise", &list(&cfg.caption_noise));
    kv.set("audio_noise", &format!("{:?}", cfg.audio_noise));
    kv.set("item_scale", &format!("{:?}", cfg.item_scale));
    kv.set("seed", &cfg.seed.to_string());
    kv
}
