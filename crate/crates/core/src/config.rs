//! TOML scenario configuration and its resolution into validated runtime
//! values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_policy, BatteryState, DomainError, ModeId, ModeProfile, ModeTable, Policy};
use crate::nodesim::{ConfusionProfile, NodeConfig, NodeError};
use crate::protocol::DEFAULT_PORT;
use crate::qrm::{CollectorSettings, PolicyAssignment};

/// Configuration shipped with the binary.
pub const BUILTIN_CONFIG: &str = include_str!("../config/defaults.toml");

/// Environment variable consulted when no `--config` is given.
pub const CONFIG_ENV: &str = "QRM_EDGE_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing configuration: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectorConfig {
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_retry_timeout_s")]
    pub retry_timeout_s: f64,
    #[serde(default = "default_energy_window_s")]
    pub energy_window_s: f64,
}

fn default_port() -> u16 {
    DEFAULT_PORT
}
fn default_retry_timeout_s() -> f64 {
    5.0
}
fn default_energy_window_s() -> f64 {
    60.0
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self {
            port: default_port(),
            retry_timeout_s: default_retry_timeout_s(),
            energy_window_s: default_energy_window_s(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_log_file")]
    pub log_file: String,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("qrm-out")
}
fn default_log_file() -> String {
    "monitoring.ndjson".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            log_file: default_log_file(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeDefaults {
    pub input_fps: f64,
    pub batch_frames: u32,
    pub telemetry_period_ms: u64,
    pub switch_latency_s: f64,
    pub base_temperature_c: f64,
}

impl Default for NodeDefaults {
    fn default() -> Self {
        Self {
            input_fps: crate::nodesim::DEFAULT_INPUT_FPS,
            batch_frames: crate::nodesim::DEFAULT_BATCH_FRAMES,
            telemetry_period_ms: crate::nodesim::DEFAULT_TELEMETRY_PERIOD_MS,
            switch_latency_s: 0.0,
            base_temperature_c: crate::nodesim::DEFAULT_BASE_TEMPERATURE_C,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Relative frequency; weights are normalized over all classes.
    pub weight: f64,
}

/// Explicit confusion matrix for one mode, replacing the uniform-error default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionSpec {
    pub mode: ModeId,
    pub rows: ConfusionProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_mode: Option<ModeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_wh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_latency_s: Option<f64>,
}

impl NodeSpec {
    pub fn named(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            policy: None,
            seed: None,
            initial_mode: None,
            capacity_wh: None,
            switch_latency_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub capacity_wh: f64,
    pub seed: u64,
    pub active_policy: String,
    /// Virtual seconds per wall second in real-time runs.
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
    #[serde(default)]
    pub collector: CollectorConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub node_defaults: NodeDefaults,
    pub classes: Vec<ClassSpec>,
    pub modes: Vec<ModeProfile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub confusion: Vec<ConfusionSpec>,
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
}

fn default_time_scale() -> f64 {
    1.0
}

impl ScenarioConfig {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_CONFIG).expect("built-in configuration parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// `explicit`, else the path in [`CONFIG_ENV`], else the built-in defaults.
    pub fn load_or_default(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::builtin()),
        }
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Validate every cross-reference and build the runtime view.
    pub fn resolve(&self) -> Result<Scenario, ConfigError> {
        let modes = ModeTable::new(self.modes.clone())?;
        if modes.is_empty() {
            return Err(ConfigError::Invalid("no modes defined".into()));
        }
        if !(self.capacity_wh.is_finite() && self.capacity_wh > 0.0) {
            return Err(ConfigError::Invalid(format!("capacity_wh must be > 0, got {}", self.capacity_wh)));
        }
        if !(self.time_scale > 0.0) {
            return Err(ConfigError::Invalid("time_scale must be > 0".into()));
        }
        let mut policies: Vec<Policy> = Vec::with_capacity(self.policies.len());
        for p in &self.policies {
            if policies.iter().any(|q| q.name == p.name) {
                return Err(ConfigError::Invalid(format!("duplicate policy `{}`", p.name)));
            }
            policies.push(validate_policy(p.clone(), &modes)?);
        }
        if self.classes.is_empty() {
            return Err(ConfigError::Invalid("no classes defined".into()));
        }
        if self.classes.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(ConfigError::Invalid("class weights must be >= 0".into()));
        }
        let total: f64 = self.classes.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(ConfigError::Invalid("class weights sum to zero".into()));
        }
        let scenario = Scenario {
            class_labels: self.classes.iter().map(|c| c.name.clone()).collect(),
            class_distribution: self.classes.iter().map(|c| c.weight / total).collect(),
            modes,
            policies,
            config: self.clone(),
        };
        scenario.policy(&self.active_policy)?;
        for c in &self.confusion {
            if !scenario.modes.contains(c.mode) {
                return Err(ConfigError::Invalid(format!("confusion matrix for unknown mode {}", c.mode)));
            }
        }
        // surfaces bad node references and malformed matrices up front
        scenario.node_configs(None, None, None)?;
        Ok(scenario)
    }
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub modes: ModeTable,
    pub policies: Vec<Policy>,
    pub class_labels: Vec<String>,
    pub class_distribution: Vec<f64>,
}

impl Scenario {
    pub fn builtin() -> Self {
        ScenarioConfig::builtin().resolve().expect("built-in configuration is valid")
    }

    pub fn policy(&self, name: &str) -> Result<&Policy, ConfigError> {
        self.policies
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| ConfigError::UnknownPolicy(name.to_string()))
    }

    pub fn collector_settings(&self) -> CollectorSettings {
        CollectorSettings {
            retry_timeout_ms: (self.config.collector.retry_timeout_s * 1000.0).round() as u64,
            energy_window_ms: (self.config.collector.energy_window_s * 1000.0).round() as u64,
        }
    }

    /// Node configurations with their policies.
    ///
    /// `policy_override` replaces every node's policy, `node_count` replaces
    /// the node list with `node-1..=node-N`, and `seed` replaces the base
    /// seed. Node `i` without an explicit seed uses `base + i`.
    pub fn node_configs(
        &self,
        policy_override: Option<&str>,
        node_count: Option<usize>,
        seed: Option<u64>,
    ) -> Result<Vec<(NodeConfig, Policy)>, ConfigError> {
        let specs: Vec<NodeSpec> = match node_count {
            Some(n) => (1..=n).map(|i| NodeSpec::named(format!("node-{i}"))).collect(),
            None if self.config.nodes.is_empty() => vec![NodeSpec::named("node-1")],
            None => self.config.nodes.clone(),
        };
        let base_seed = seed.unwrap_or(self.config.seed);
        let defaults = &self.config.node_defaults;
        let mut out = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if specs[..i].iter().any(|s| s.id == spec.id) {
                return Err(ConfigError::Invalid(format!("duplicate node id `{}`", spec.id)));
            }
            let policy_name = policy_override
                .or(spec.policy.as_deref())
                .unwrap_or(&self.config.active_policy);
            let policy = self.policy(policy_name)?.clone();
            let initial_mode = spec
                .initial_mode
                .or_else(|| policy.initial_mode())
                .ok_or_else(|| ConfigError::Invalid("empty policy".into()))?;
            let battery = BatteryState::full(spec.capacity_wh.unwrap_or(self.config.capacity_wh))?;
            let node_seed = spec.seed.unwrap_or(base_seed.wrapping_add(i as u64));
            let mut cfg = NodeConfig::with_defaults(
                spec.id.clone(),
                initial_mode,
                battery,
                self.class_labels.clone(),
                self.class_distribution.clone(),
                &self.modes,
                node_seed,
            );
            for c in &self.config.confusion {
                cfg.confusion_profiles.insert(c.mode, c.rows.clone());
            }
            cfg.input_fps = defaults.input_fps;
            cfg.batch_frames = defaults.batch_frames;
            cfg.telemetry_period_ms = defaults.telemetry_period_ms;
            cfg.switch_latency_s = spec.switch_latency_s.unwrap_or(defaults.switch_latency_s);
            cfg.base_temperature_c = defaults.base_temperature_c;
            cfg.validate(&self.modes)?;
            out.push((cfg, policy));
        }
        Ok(out)
    }

    /// Per-node policy assignment for the collector.
    pub fn policy_assignment(&self, nodes: &[(NodeConfig, Policy)]) -> Result<PolicyAssignment, ConfigError> {
        let default = self.policy(&self.config.active_policy)?.clone();
        Ok(PolicyAssignment {
            default,
            per_node: nodes.iter().map(|(c, p)| (c.node_id.clone(), p.clone())).collect(),
        })
    }
}
