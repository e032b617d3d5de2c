//! Resolved run configuration: defaults, optional file, then `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use uwloc_core::features::FeatureConfig;
use uwloc_core::learn::FoldScheme;
use uwloc_core::net::InputShape;
use uwloc_core::{AgcParams, Error, Hyper, MelConfig, NetConfig, Result, Scenario, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgcSection {
    /// `false` bypasses the gain stage (gain ≡ 1).
    pub enabled: bool,
    pub e_target: f64,
    pub alpha: f64,
}

impl Default for AgcSection {
    fn default() -> Self {
        let p = AgcParams::default();
        Self {
            enabled: true,
            e_target: p.e_target,
            alpha: p.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GccSection {
    /// Lag count; defaults to `mel.n_mels`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lags: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub agc: AgcSection,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub gcc: GccSection,
    pub net: NetConfig,
    pub train: Hyper,
    pub split: FoldScheme,
    pub scenario: Scenario,
}

impl RunConfig {
    pub fn agc(&self) -> Option<AgcParams> {
        self.agc.enabled.then(|| AgcParams {
            e_target: self.agc.e_target,
            alpha: self.agc.alpha,
            ..AgcParams::default()
        })
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            stft: self.stft,
            mel: self.mel,
            gcc_lags: self.gcc.lags,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.net.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.agc() {
            a.validate()?;
        }
        self.stft.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        self.scenario.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, overlaid by `file` and then by `key=value` assignments.
    pub fn resolve(base: RunConfig, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut table, overlay);
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        // Input shape always comes from the data.
        cfg.net.input = InputShape::default();
        Ok(cfg)
    }
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Applies one `dotted.key=value`; values parse as TOML, falling back to a
/// bare string.
pub fn apply_set(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut node = table;
    for p in parents {
        node = match node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{key}: {p} is not a section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
