//! Experiment configuration: one TOML file, `--override key.path=value`
//! edits, then schema validation. Every run writes the resolved config back.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use duallink::coupling::{CouplingOptions, Region, RegionSamplerConfig};
use duallink::drift::{gradient_drift, Potential};
use duallink::logistic::{ingest_training_data, toy_logistic_2d, LogisticModel};
use duallink::suites::{DualitySuiteParams, FlowWienerParams, ReversalParams};
use duallink::{DriftField, DualState, ReflectionRule, TimeGrid};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub replicas: usize,
    /// Worker threads; 0 uses every available core. Results do not depend on it.
    pub threads: usize,
    /// Output root; the `--out` flag and `DUALLINK_OUT` take precedence.
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub simulate: SimulateConfig,
    pub dual: DualConfig,
    pub pitman: PitmanConfig,
    pub verify: VerifyConfig,
    pub posterior: PosteriorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            replicas: 100,
            threads: 0,
            out: None,
            model: ModelConfig::Constant { mu: vec![0.5] },
            grid: GridConfig::default(),
            simulate: SimulateConfig::default(),
            dual: DualConfig::default(),
            pitman: PitmanConfig::default(),
            verify: VerifyConfig::default(),
            posterior: PosteriorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// beta = mu, one entry per coordinate.
    Constant { mu: Vec<f64> },
    /// gamma = sum k_i x_i^2 / 2.
    Quadratic { k: Vec<f64> },
    /// gamma = x1 x2.
    Bilinear,
    /// Bernoulli-logistic posterior; the bundled toy data when `data` is absent.
    Logistic { data: Option<PathBuf> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub x0: Vec<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { x0: vec![0.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualFamily {
    Interval,
    Wedge,
    Slab,
}

/// Start state of `dual` and `couple`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualConfig {
    pub family: DualFamily,
    /// Lower and upper anchors. An entrance start only uses `y`.
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    /// Wedge direction with u2 > |u1|.
    pub u: [f64; 2],
    pub entrance: bool,
    pub rule: ReflectionRule,
    pub refine: Option<usize>,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            family: DualFamily::Interval,
            z: vec![-1.0],
            y: vec![1.0],
            u: [0.3, 1.0],
            entrance: false,
            rule: CouplingOptions::default().rule,
            refine: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitmanConfig {
    /// Entrance level of the interval dual.
    pub level: f64,
    pub threshold: f64,
}

impl Default for PitmanConfig {
    fn default() -> Self {
        Self { level: 0.0, threshold: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub suites: Vec<SuiteName>,
    pub duality: DualitySuiteParams,
    pub flow_wiener: FlowWienerParams,
    pub reversal: ReversalParams,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            suites: vec![SuiteName::Duality, SuiteName::FlowWiener, SuiteName::Reversal],
            duality: DualitySuiteParams::default(),
            flow_wiener: FlowWienerParams::default(),
            reversal: ReversalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Duality,
    FlowWiener,
    Reversal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorConfig {
    /// Training file; the bundled toy data when absent.
    pub data: Option<PathBuf>,
    pub region: Region,
    pub sampler: RegionSamplerConfig,
    pub oracle_samples: usize,
    pub threshold: f64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            data: None,
            region: Region::SlabRect { offset_lo: -0.5, offset_hi: 0.5, h_lo: vec![-1.0], h_hi: vec![1.0] },
            sampler: RegionSamplerConfig::default(),
            oracle_samples: 20_000,
            threshold: 0.01,
        }
    }
}

/// Sets `path` (dot separated) in `doc` to `raw`, read as a TOML value when it
/// parses as one and as a string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(format!("{assignment}: {key} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.replicas == 0 {
            return bad("replicas must be positive".into());
        }
        self.time_grid()?;
        match &self.model {
            ModelConfig::Constant { mu } if mu.is_empty() || mu.iter().any(|m| !m.is_finite()) => {
                return bad("model.mu needs finite entries".into())
            }
            ModelConfig::Quadratic { k } if k.is_empty() || k.iter().any(|v| !v.is_finite()) => {
                return bad("model.k needs finite entries".into())
            }
            _ => {}
        }
        if self.posterior.oracle_samples < 20 {
            return bad("posterior.oracle_samples must be at least 20".into());
        }
        for t in [self.pitman.threshold, self.posterior.threshold] {
            if !(0.0..1.0).contains(&t) {
                return bad(format!("threshold {t} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ConfigError> {
        TimeGrid::new(self.grid.horizon, self.grid.steps).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn coupling_options(&self) -> CouplingOptions {
        CouplingOptions { rule: self.dual.rule, refine: self.dual.refine }
    }

    /// Builds the drift, reading the training file for logistic models.
    pub fn drift(&self) -> duallink::Result<DriftField> {
        Ok(match &self.model {
            ModelConfig::Constant { mu } => DriftField::constant(mu.clone()),
            ModelConfig::Quadratic { k } => gradient_drift(Potential::Quadratic(k.clone()), k.len())?,
            ModelConfig::Bilinear => DriftField::Bilinear2D,
            ModelConfig::Logistic { data } => DriftField::LogisticRegression(self.logistic_model(data.as_deref())?),
        })
    }

    pub fn logistic_model(&self, data: Option<&Path>) -> duallink::Result<Arc<LogisticModel>> {
        match data {
            Some(p) => ingest_training_data(p),
            None => Ok(toy_logistic_2d()),
        }
    }

    /// Start state of `dual` and `couple`.
    pub fn dual_state(&self, model: &DriftField) -> duallink::Result<DualState> {
        let d = &self.dual;
        let pair = |v: &[f64], what: &str| -> duallink::Result<[f64; 2]> {
            <[f64; 2]>::try_from(v).map_err(|_| duallink::Error::Precondition(format!("dual.{what} needs two entries")))
        };
        let scalar = |v: &[f64], what: &str| -> duallink::Result<f64> {
            match v {
                [x] => Ok(*x),
                _ => Err(duallink::Error::Precondition(format!("dual.{what} needs one entry"))),
            }
        };
        match d.family {
            DualFamily::Interval if d.entrance => Ok(DualState::entrance_interval(scalar(&d.y, "y")?)),
            DualFamily::Interval => DualState::interval(scalar(&d.z, "z")?, scalar(&d.y, "y")?),
            DualFamily::Wedge if d.entrance => DualState::entrance_wedge(d.u, pair(&d.y, "y")?),
            DualFamily::Wedge => DualState::wedge(d.u, pair(&d.z, "z")?, pair(&d.y, "y")?),
            DualFamily::Slab => {
                let DriftField::LogisticRegression(m) = model else {
                    return Err(duallink::Error::Precondition("slab duals need model.family = \"logistic\"".into()));
                };
                let normal = m.geometry()?.normal.clone();
                if d.entrance {
                    DualState::entrance_slab(d.y.clone(), &normal)
                } else {
                    DualState::slab(d.z.clone(), d.y.clone(), &normal)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml("", &["verify.duality.paths=10".into(), "model.family=\"bilinear\"".into()]).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model, ModelConfig::Bilinear);
        assert_eq!(back.verify.duality.paths, 10);
    }

    #[test]
    fn bundled_default_config_matches_defaults() {
        let text = include_str!("../configs/default.toml");
        assert_eq!(ExperimentConfig::from_toml(text, &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_create_tables_and_fall_back_to_strings() {
        let mut doc = toml::Table::new();
        apply_override(&mut doc, "a.b.c = 3").unwrap();
        apply_override(&mut doc, "a.name=plain words").unwrap();
        assert_eq!(doc["a"]["b"]["c"].as_integer(), Some(3));
        assert_eq!(doc["a"]["name"].as_str(), Some("plain words"));
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
        assert!(apply_override(&mut doc, "a.b.c.d=1").is_err());
    }

    #[test]
    fn schema_violations_are_rejected() {
        for bad in ["unknown_key = 1", "replicas = 0", "version = 7", "[grid]\nsteps = 0", "[model]\nfamily = \"nope\""] {
            assert!(ExperimentConfig::from_toml(bad, &[]).is_err(), "{bad}");
        }
    }

    #[test]
    fn dual_states_from_config() {
        let cfg = ExperimentConfig::default();
        let m = cfg.drift().unwrap();
        assert_eq!(cfg.dual_state(&m).unwrap(), DualState::interval(-1.0, 1.0).unwrap());
        let cfg = ExperimentConfig::from_toml("[model]\nfamily = \"logistic\"\n[dual]\nfamily = \"slab\"\nz = [0.0, 0.0]\ny = [0.5, -0.5]", &[]).unwrap();
        let m = cfg.drift().unwrap();
        assert!(cfg.dual_state(&m).unwrap().separation() > 0.0);
        let cfg = ExperimentConfig::from_toml("[dual]\nfamily = \"slab\"", &[]).unwrap();
        assert!(cfg.dual_state(&cfg.drift().unwrap()).is_err());
    }
}
