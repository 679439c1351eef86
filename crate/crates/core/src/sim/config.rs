//! Scenario files.
//!
//! Scenarios are TOML documents. Top-level keys hold run settings; the
//! `[protocol]`, `[radio]`, `[harvest]`, `[profile]` and `[storage]` tables
//! override model defaults; `[[esa]]`, `[[eha]]` and `[mono]` place nodes.
//! See `scenarios/README.md` for the full schema.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{HarvestModel, PowerProfile, StorageParams};
use crate::protocol::{optimal_tc, Mode};
use crate::radio::RadioParams;

/// Scale from measured round energy over nominal harvest to the reported
/// charging period, absorbing harvester losses the model leaves out.
pub const DEFAULT_CP_CALIBRATION: f64 = 21.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing scenario: {0}")]
    Parse(String),
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

/// A point given either as `x` or `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Position {
    X(f64),
    Xy([f64; 2]),
}

impl Position {
    pub fn xy(self) -> [f64; 2] {
        match self {
            Position::X(x) => [x, 0.0],
            Position::Xy(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerSource {
    #[default]
    Harvested,
    Wired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    #[default]
    WakeAll,
    RangeEstimation,
    TwoWave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub mode: ModeName,
    /// Border anchor ID for two-wave mode.
    pub border: Option<u16>,
    /// Range threshold in dBm of harvested power; defaults to the report of
    /// the middle anchor.
    pub rho_dbm: Option<f64>,
    /// Spread replies with orthogonal codes; plain CRC-checked IDs otherwise.
    pub spreading: bool,
    pub fec_length: Option<usize>,
    pub chip_length: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { mode: ModeName::WakeAll, border: None, rho_dbm: None, spreading: true, fec_length: None, chip_length: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestConfig {
    /// `[distance m, power W]` pairs; the built-in curve when absent.
    pub anchors: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsaConfig {
    pub id: u16,
    pub position: Position,
    #[serde(default = "default_strong_tx")]
    pub tx_power_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EhaConfig {
    pub id: u16,
    pub position: Position,
    #[serde(default)]
    pub power: PowerSource,
    /// Skip passive wakeup and answer every beacon request.
    #[serde(default)]
    pub always_listening: bool,
    #[serde(default = "default_weak_tx")]
    pub tx_power_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathConfig {
    /// Cycles through `positions`, staying `rounds_per_position` rounds at
    /// each.
    Fixed {
        positions: Vec<Position>,
        #[serde(default = "one")]
        rounds_per_position: usize,
    },
    /// A fresh uniform point on the segment every round.
    Uniform { from: Position, to: Position },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoConfig {
    pub id: u16,
    #[serde(default)]
    pub power: PowerSource,
    #[serde(default = "default_strong_tx")]
    pub tx_power_dbm: f64,
    pub path: PathConfig,
}

fn default_strong_tx() -> f64 {
    4.0
}
fn default_weak_tx() -> f64 {
    -20.0
}
fn one() -> usize {
    1
}
fn default_t_m() -> f64 {
    1.0
}
fn default_t_off() -> f64 {
    0.05
}
fn default_guard() -> f64 {
    1e-4
}
fn default_calibration() -> f64 {
    DEFAULT_CP_CALIBRATION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    /// Beacon period, s.
    #[serde(default = "default_t_m")]
    pub t_m: f64,
    /// Anchor ADC poll period, s; the power-optimal value when absent.
    #[serde(default)]
    pub t_c: Option<f64>,
    /// Transmitter-off time of the wakeup signal, s.
    #[serde(default = "default_t_off")]
    pub t_off: f64,
    #[serde(default = "default_guard")]
    pub guard: f64,
    #[serde(default = "default_calibration")]
    pub cp_calibration: f64,
    /// Standard deviation of ADC power readings, W.
    #[serde(default)]
    pub sensor_noise: f64,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub radio: RadioParams,
    #[serde(default)]
    pub harvest: HarvestConfig,
    #[serde(default)]
    pub profile: PowerProfile,
    #[serde(default)]
    pub storage: StorageParams,
    #[serde(default)]
    pub esa: Vec<EsaConfig>,
    #[serde(default)]
    pub eha: Vec<EhaConfig>,
    pub mono: MonoConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Parses and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg = Self::from_path(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn harvest_model(&self) -> Result<HarvestModel, String> {
        match &self.harvest.anchors {
            None => Ok(HarvestModel::default()),
            Some(a) => HarvestModel::new(a.iter().map(|p| (p[0], p[1])).collect()).map_err(|e| e.to_string()),
        }
    }

    pub fn t_c(&self) -> f64 {
        self.t_c.unwrap_or_else(|| {
            optimal_tc(self.t_m, self.profile.t_adc, self.profile.p_adc, self.profile.p_rx).unwrap_or(0.01)
        })
    }

    pub fn mode(&self) -> Mode {
        match self.protocol.mode {
            ModeName::WakeAll => Mode::WakeAll,
            ModeName::RangeEstimation => Mode::RangeEstimation,
            ModeName::TwoWave => Mode::TwoWave { border: self.protocol.border.unwrap_or(0) },
        }
    }

    /// Longest a round can take: two full waves.
    pub fn round_span(&self) -> f64 {
        let air = self.profile.t_tx;
        2.0 * (self.t_off + self.t_c() + 6.0 * air + 4.0 * self.guard)
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        if self.rounds == 0 {
            v.push("rounds must be at least 1".to_string());
        }
        if self.esa.is_empty() {
            v.push("at least one [[esa]] is required".to_string());
        }
        if self.eha.is_empty() {
            v.push("at least one [[eha]] is required".to_string());
        }
        let mut seen = BTreeSet::new();
        let ids = self.esa.iter().map(|e| e.id).chain(self.eha.iter().map(|e| e.id)).chain([self.mono.id]);
        for id in ids {
            if !seen.insert(id) {
                v.push(format!("node id {id} is used more than once"));
            }
        }
        let positions = self.esa.iter().map(|e| e.position).chain(self.eha.iter().map(|e| e.position));
        for p in positions {
            if p.xy().iter().any(|c| !c.is_finite()) {
                v.push(format!("position {p:?} is not finite"));
            }
        }
        for (name, val) in [("t_m", self.t_m), ("t_off", self.t_off), ("guard", self.guard), ("cp_calibration", self.cp_calibration)] {
            if !(val.is_finite() && val > 0.0) {
                v.push(format!("{name} must be positive"));
            }
        }
        if !(self.sensor_noise >= 0.0) {
            v.push("sensor_noise must be non-negative".to_string());
        }
        let t_c = self.t_c();
        if !(t_c.is_finite() && t_c > 0.0) {
            v.push("t_c must be positive".to_string());
        } else {
            if t_c >= self.t_m {
                v.push(format!("t_c ({t_c}) must be shorter than t_m ({})", self.t_m));
            }
            if self.t_off < t_c {
                v.push(format!("t_off ({}) must be at least t_c ({t_c}) so every anchor sees the drop", self.t_off));
            }
            if self.round_span() >= self.t_m {
                v.push(format!("t_m ({}) is shorter than a two-wave round ({})", self.t_m, self.round_span()));
            }
        }
        v.extend(self.radio.validate());
        if let Err(e) = self.profile.validate() {
            v.push(format!("profile: {e}"));
        }
        if let Err(e) = self.storage.validate() {
            v.push(format!("storage: {e}"));
        }
        if let Err(e) = self.harvest_model() {
            v.push(format!("harvest: {e}"));
        }
        match self.protocol.mode {
            ModeName::TwoWave => match self.protocol.border {
                None => v.push("two-wave mode needs protocol.border".to_string()),
                Some(b) if !self.eha.iter().any(|e| e.id == b) => {
                    v.push(format!("protocol.border {b} is not an anchor id"))
                }
                _ => {}
            },
            _ => {
                if self.protocol.border.is_some() {
                    v.push("protocol.border only applies to two-wave mode".to_string());
                }
            }
        }
        if self.protocol.rho_dbm.is_some() && self.protocol.mode != ModeName::RangeEstimation {
            v.push("protocol.rho_dbm only applies to range-estimation mode".to_string());
        }
        if self.protocol.fec_length.is_some() != self.protocol.chip_length.is_some() {
            v.push("protocol.fec_length and protocol.chip_length must be given together".to_string());
        }
        if self.protocol.spreading {
            if let Err(e) = crate::sim::engine::codebooks_for(self) {
                v.push(format!("codebook: {e}"));
            }
        }
        match &self.mono.path {
            PathConfig::Fixed { positions, rounds_per_position } => {
                if positions.is_empty() {
                    v.push("mono.path.positions must not be empty".to_string());
                }
                if *rounds_per_position == 0 {
                    v.push("mono.path.rounds_per_position must be at least 1".to_string());
                }
                if positions.iter().any(|p| p.xy().iter().any(|c| !c.is_finite())) {
                    v.push("mono.path.positions must be finite".to_string());
                }
            }
            PathConfig::Uniform { from, to } => {
                if from.xy().iter().chain(to.xy().iter()).any(|c| !c.is_finite()) {
                    v.push("mono.path endpoints must be finite".to_string());
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
rounds = 3

[[esa]]
id = 100
position = 0.0

[[eha]]
id = 1
position = [0.5, 0.0]

[mono]
id = 200
path = { kind = "fixed", positions = [0.4] }
"#;

    #[test]
    fn minimal_scenario_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.t_m, 1.0);
        assert_eq!(cfg.radio, RadioParams::default());
        assert_eq!(cfg.eha[0].tx_power_dbm, -20.0);
        assert_eq!(cfg.esa[0].position.xy(), [0.0, 0.0]);
        assert!((cfg.t_c() - 0.010437).abs() < 1e-5);
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn all_violations_reported() {
        let mut cfg = ScenarioConfig::from_toml_str(MINIMAL).unwrap();
        cfg.rounds = 0;
        cfg.eha[0].id = 100;
        cfg.protocol.mode = ModeName::TwoWave;
        cfg.radio.sigma = -1.0;
        let ConfigError::Invalid(v) = cfg.validate().unwrap_err() else { panic!() };
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("rounds = 3", "rounds = 3\nbogus = 1");
        assert!(matches!(ScenarioConfig::from_toml_str(&text), Err(ConfigError::Parse(_))));
    }
}
