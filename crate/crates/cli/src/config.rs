//! Experiment configuration, read from TOML.
//!
//! ```toml
//! config_version = 1
//! seed = 7
//! policies = ["NATIVE", "SW_B", "HW_ATOMRED"]
//! thresholds = "sweep"          # or a list such as [0, 8, 16]
//! machines = ["rtx3060like"]    # preset names or inline tables
//! output_dir = "out"
//!
//! [scene]
//! num_primitives = 4096
//! params_per_primitive = 3
//! ...
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use warpred::tuner::PolicyFamily;
use warpred::{BalancingThreshold, MachineConfig, Policy, SceneSpec};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_GRAD_FRACTION: f64 = 0.44;

/// A machine given by preset name or spelled out in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MachineSpec {
    Preset(String),
    Custom(MachineConfig),
}

impl MachineSpec {
    pub fn resolve(&self) -> anyhow::Result<MachineConfig> {
        let cfg = match self {
            MachineSpec::Preset(name) => MachineConfig::preset(name).with_context(|| {
                format!(
                    "machines: unknown preset `{name}` (known: {})",
                    warpred::hwsim::PRESET_NAMES.join(", ")
                )
            })?,
            MachineSpec::Custom(cfg) => cfg.clone(),
        };
        cfg.validate().with_context(|| format!("machines: `{}`", cfg.name))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Thresholds {
    /// `"sweep"`: every threshold 0..=32.
    Keyword(String),
    List(Vec<u32>),
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Keyword("sweep".into())
    }
}

impl Thresholds {
    pub fn resolve(&self) -> anyhow::Result<Vec<BalancingThreshold>> {
        match self {
            Thresholds::Keyword(k) if k.eq_ignore_ascii_case("sweep") => Ok(BalancingThreshold::sweep().collect()),
            Thresholds::Keyword(k) => bail!("thresholds: expected \"sweep\" or a list, got `{k}`"),
            Thresholds::List(v) => v
                .iter()
                .map(|&t| BalancingThreshold::new(t).with_context(|| "thresholds".to_string()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    /// Overrides `scene.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scene: SceneSpec,
    /// Load this trace file instead of generating one from `scene`.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    pub machines: Vec<MachineSpec>,
    pub policies: Vec<String>,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Copy the trace onto every SM of each machine so all SMs see the same work.
    #[serde(default)]
    pub replicate_per_sm: bool,
    /// Fraction of end-to-end time spent in the gradient kernel.
    #[serde(default = "default_grad_fraction")]
    pub grad_fraction: f64,
    /// Write a threshold profile for each machine and thresholded policy family.
    #[serde(default = "default_true")]
    pub tune: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_grad_fraction() -> f64 {
    DEFAULT_GRAD_FRACTION
}

fn default_true() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            seed: None,
            scene: SceneSpec::default(),
            trace: None,
            machines: vec![MachineSpec::Preset("single_sm".into())],
            policies: vec!["NATIVE".into()],
            thresholds: Thresholds::default(),
            replicate_per_sm: false,
            grad_fraction: DEFAULT_GRAD_FRACTION,
            tune: true,
            output_dir: default_output_dir(),
        }
    }
}

/// A policy entry: either fixed, or a family expanded over `thresholds`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicySpec {
    Fixed(Policy),
    Family(PolicyFamily),
}

pub fn parse_policy(s: &str) -> anyhow::Result<PolicySpec> {
    if let Ok(family) = s.parse::<PolicyFamily>() {
        return Ok(PolicySpec::Family(family));
    }
    s.parse::<Policy>()
        .map(PolicySpec::Fixed)
        .with_context(|| format!("policies: `{s}`"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        // a relative trace path is relative to the config file
        if let (Some(trace), Some(dir)) = (&cfg.trace, path.parent()) {
            if trace.is_relative() {
                cfg.trace = Some(dir.join(trace));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.config_version != CONFIG_VERSION {
            bail!(
                "config_version: expected {CONFIG_VERSION}, found {}",
                self.config_version
            );
        }
        self.effective_scene().validate().context("scene")?;
        if self.machines.is_empty() {
            bail!("machines: at least one machine is required");
        }
        for m in &self.machines {
            m.resolve()?;
        }
        if self.policies.is_empty() {
            bail!("policies: at least one policy is required");
        }
        for p in &self.policies {
            parse_policy(p)?;
        }
        self.thresholds.resolve()?;
        if !(self.grad_fraction > 0.0 && self.grad_fraction <= 1.0) {
            bail!("grad_fraction: must be in (0, 1], found {}", self.grad_fraction);
        }
        Ok(())
    }

    pub fn effective_scene(&self) -> SceneSpec {
        let mut scene = self.scene.clone();
        if let Some(seed) = self.seed {
            scene.seed = seed;
        }
        scene
    }

    /// Every (policy) cell in config order, families expanded over thresholds.
    pub fn policy_cells(&self) -> anyhow::Result<Vec<Policy>> {
        let thresholds = self.thresholds.resolve()?;
        let mut out = Vec::new();
        for p in &self.policies {
            match parse_policy(p)? {
                PolicySpec::Fixed(policy) => out.push(policy),
                PolicySpec::Family(f) => out.extend(thresholds.iter().map(|&t| f.with_threshold(t))),
            }
        }
        Ok(out)
    }

    /// Families whose threshold profile should be written.
    pub fn tuned_families(&self) -> Vec<PolicyFamily> {
        if !self.tune {
            return Vec::new();
        }
        PolicyFamily::ALL
            .into_iter()
            .filter(|f| {
                self.policies.iter().any(|p| match parse_policy(p) {
                    Ok(PolicySpec::Family(g)) => g == *f,
                    Ok(PolicySpec::Fixed(policy)) => PolicyFamily::of(policy) == Some(*f),
                    Err(_) => false,
                })
            })
            .collect()
    }

    /// SHA-256 of every semantic field; `output_dir` does not count.
    pub fn config_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = PathBuf::new();
        semantic.scene = self.effective_scene();
        semantic.seed = None;
        let canonical = serde_json::to_string(&semantic).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
config_version = 1
machines = ["single_sm"]
policies = ["NATIVE"]
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.policy_cells().unwrap(), vec![Policy::Native]);
        assert_eq!(cfg.grad_fraction, DEFAULT_GRAD_FRACTION);
        assert!(cfg.tuned_families().is_empty());
    }

    #[test]
    fn sweep_expands_both_families() {
        let cfg = ExperimentConfig::from_toml(
            r#"
config_version = 1
machines = ["single_sm"]
policies = ["SW_S", "SW_B"]
thresholds = "sweep"
"#,
        )
        .unwrap();
        assert_eq!(cfg.policy_cells().unwrap().len(), 66);
        assert_eq!(cfg.tuned_families(), PolicyFamily::ALL.to_vec());
    }

    #[test]
    fn explicit_thresholds_and_inline_machine() {
        let cfg = ExperimentConfig::from_toml(
            r#"
config_version = 1
policies = ["SW_S(4)", "SW_B", "CCCL"]
thresholds = [0, 16]
machines = ["rtx3060like", { name = "tiny", num_sms = 2, rop_units = 1, lsu_queue_depth = "inf" }]
"#,
        )
        .unwrap();
        let cells = cfg.policy_cells().unwrap();
        assert_eq!(cells.len(), 4);
        let tiny = cfg.machines[1].resolve().unwrap();
        assert_eq!(tiny.lsu_queue_depth, warpred::QueueDepth::Unbounded);
        assert_eq!(tiny.subcores_per_sm, 4);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = [
            (
                "config_version = 2\nmachines=[\"single_sm\"]\npolicies=[\"NATIVE\"]",
                "config_version",
            ),
            (
                "config_version = 1\nmachines=[\"nope\"]\npolicies=[\"NATIVE\"]",
                "machines",
            ),
            (
                "config_version = 1\nmachines=[\"single_sm\"]\npolicies=[\"FOO\"]",
                "policies",
            ),
            (
                "config_version = 1\nmachines=[\"single_sm\"]\npolicies=[\"SW_S\"]\nthresholds=[40]",
                "thresholds",
            ),
            (
                "config_version = 1\nmachines=[\"single_sm\"]\npolicies=[\"NATIVE\"]\ngrad_fraction=0",
                "grad_fraction",
            ),
            (
                "config_version = 1\nmachines=[\"single_sm\"]\npolicies=[\"NATIVE\"]\n[scene]\nlocality=2.0",
                "locality",
            ),
        ];
        for (text, field) in bad {
            let err = format!("{:#}", ExperimentConfig::from_toml(text).unwrap_err());
            assert!(err.contains(field), "`{err}` should mention {field}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let base = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut moved = base.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(base.config_hash(), moved.config_hash());

        let mut reseeded = base.clone();
        reseeded.seed = Some(9);
        assert_ne!(base.config_hash(), reseeded.config_hash());
        // the same effective seed hashes the same either way
        let mut scene_seeded = base.clone();
        scene_seeded.scene.seed = 9;
        assert_eq!(reseeded.config_hash(), scene_seeded.config_hash());

        let mut other = base.clone();
        other.grad_fraction = 0.5;
        assert_ne!(base.config_hash(), other.config_hash());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
