use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metaevo::{MetaConfig, RunMode};
use crate::substrate::{ChannelLayout, WorldConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("unknown setting `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    #[default]
    Builtin,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// `host:port`; `PETRI_EMBED_ENDPOINT` overrides it.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Builtin,
            endpoint: None,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub meta: MetaConfig,
    pub embedder: EmbedderConfig,
    pub output_dir: PathBuf,
    /// Save a checkpoint every this many meta-iterations; 0 saves only at
    /// the end.
    pub checkpoint_interval: u64,
    /// Export every this many frames of each rollout as PNG; 0 disables.
    pub frame_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small enough for a laptop: 4 worlds of 3 agents on 32x32 for 20
    /// meta-iterations of 4 segments.
    pub fn desk() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            world: WorldConfig {
                height: 32,
                width: 32,
                agents: 3,
                layout: ChannelLayout::default(),
                hidden_width: 64,
            },
            meta: MetaConfig {
                population: 4,
                iterations: 20,
                world_segments: 4,
                ..MetaConfig::default()
            },
            embedder: EmbedderConfig::default(),
            output_dir: PathBuf::from("runs/run"),
            checkpoint_interval: 5,
            frame_stride: 0,
        }
    }

    /// Population 30, 500 meta-iterations of 12 segments, on 64x64.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.world.height = 64;
        c.world.width = 64;
        c.meta = MetaConfig::default();
        c.checkpoint_interval = 25;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.world.validate().map_err(|e| invalid(&e))?;
        if self.world.height < 8 || self.world.width < 8 {
            return Err(ConfigError::Invalid("grid must be at least 8x8".into()));
        }
        self.meta.validate().map_err(|e| invalid(&e))?;
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(ConfigError::Invalid(
                "run_id must be non-empty and use only letters, digits, '-', '_' or '.'".into(),
            ));
        }
        if self.embedder.kind == EmbedderKind::External
            && self.embedder.endpoint.is_none()
            && std::env::var_os(crate::diversity::ENDPOINT_ENV).is_none()
        {
            log::warn!(
                "external embedder selected without an endpoint; builtin features will be used"
            );
        }
        Ok(())
    }

    /// Apply `key=value`, with dotted keys for nested fields
    /// (`meta.population=8`, `world.layout.hidden=4`).
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::BadValue {
                key: assignment.to_string(),
                reason: "expected key=value".into(),
            })?;
        let key = key.trim();
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        let raw = raw.trim();
        *slot = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        *self = serde_json::from_value(tree).map_err(|e| ConfigError::BadValue {
            key: key.to_string(),
            reason: e.to_string(),
        })?;
        Ok(())
    }

    pub fn mode(&self) -> RunMode {
        self.meta.mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        for c in [RunConfig::desk(), RunConfig::paper()] {
            let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
            assert_eq!(back, c);
            c.validate().unwrap();
        }
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "meta": {"population": 2}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.meta.population, 2);
        assert_eq!(c.meta.k_nn, 8);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn dotted_assignments() {
        let mut c = RunConfig::desk();
        c.set("meta.population=6").unwrap();
        c.set("meta.mode=random-search").unwrap();
        c.set("world.layout.hidden=2").unwrap();
        c.set("embedder.endpoint=127.0.0.1:9000").unwrap();
        c.set("meta.exploit.sigma_w=0").unwrap();
        assert_eq!(c.meta.population, 6);
        assert_eq!(c.meta.mode, RunMode::RandomSearch);
        assert_eq!(c.world.layout.hidden, 2);
        assert_eq!(c.embedder.endpoint.as_deref(), Some("127.0.0.1:9000"));
        assert_eq!(c.meta.exploit.sigma_w, 0.0);
        assert!(matches!(
            c.set("meta.nope=1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            c.set("meta.population=-1"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::desk();
        c.meta.exploit.rho = 0.9;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.world.height = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.run_id = "a/b".into();
        assert!(c.validate().is_err());
    }
}
