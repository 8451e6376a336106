//! Scenario files, run orchestration and fraction sweeps.
//!
//! Scenarios are TOML documents. Unit-bearing keys carry the unit in their name
//! (`*_s`, `*_mb`, `*_gb`, `*_mips`). A scenario describes either a federation
//! experiment (a `[broker]` with submissions) or a burst experiment (`[burst]`
//! plus `[workload]`).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::burst::{run_burst, BurstConfig, BurstError, WorkloadParams};
use crate::currency::Cents;
use crate::federation::{FederationError, FederationParams, FederationSim, ProviderSetup};
use crate::kernel::{EntityId, EntityKind, SimTime};
use crate::market::{Application, Qos};
use crate::report::{Aggregates, ExperimentKind, RunMetadata, RunReport, SweepRow};
use crate::resource::{Datacenter, HostSpec, VmSpec};

pub const SEED_ENV: &str = "FEDSIM_SEED";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid value for `{key}`: {reason}")]
    Validation { key: String, reason: String },
    #[error("simulation failed: {0}")]
    Runtime(String),
}

impl ScenarioError {
    /// 1 for configuration problems, 2 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Runtime(_) => 2,
            _ => 1,
        }
    }

    fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ScenarioError::Validation { key: key.into(), reason: reason.into() }
    }
}

impl From<FederationError> for ScenarioError {
    fn from(e: FederationError) -> Self {
        ScenarioError::Runtime(e.to_string())
    }
}

impl From<BurstError> for ScenarioError {
    fn from(e: BurstError) -> Self {
        ScenarioError::Runtime(e.to_string())
    }
}

fn default_time_limit() -> f64 {
    1e12
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_policy() -> String {
    "slot-migration".into()
}

fn default_public_price() -> f64 {
    0.10
}

fn default_public_vm() -> VmConfig {
    VmConfig { ram_mb: 1740, storage_gb: 160, pe_count: 1 }
}

fn default_public_mips() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_time_limit")]
    pub time_limit_s: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { time_limit_s: default_time_limit() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub name: String,
    pub host_count: usize,
    pub pe_count: u32,
    pub mips_per_pe: f64,
    pub ram_mb: u64,
    pub storage_gb: u64,
    #[serde(default)]
    pub price_per_hour: f64,
    #[serde(default = "one")]
    pub oversubscription: f64,
    #[serde(default)]
    pub sla_terms: BTreeMap<String, String>,
}

impl ProviderConfig {
    pub fn host_spec(&self) -> HostSpec {
        HostSpec { pe_count: self.pe_count, mips_per_pe: self.mips_per_pe, ram_mb: self.ram_mb, storage_gb: self.storage_gb }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmConfig {
    pub ram_mb: u64,
    pub storage_gb: u64,
    pub pe_count: u32,
}

impl From<VmConfig> for VmSpec {
    fn from(v: VmConfig) -> Self {
        VmSpec::new(v.ram_mb, v.storage_gb, v.pe_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosConfig {
    #[serde(default = "one")]
    pub max_utilization: f64,
    #[serde(default)]
    pub budget_per_hour: Option<f64>,
}

impl Default for QosConfig {
    fn default() -> Self {
        QosConfig { max_utilization: 1.0, budget_per_hour: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmissionConfig {
    pub origin: String,
    #[serde(default)]
    pub submit_at_s: f64,
    pub vm_count: usize,
    pub vm: VmConfig,
    /// One length for every cloudlet.
    #[serde(default)]
    pub cloudlet_length_mi: Option<f64>,
    /// One length per VM, in VM order.
    #[serde(default)]
    pub cloudlet_lengths_mi: Option<Vec<f64>>,
}

impl SubmissionConfig {
    pub fn lengths(&self) -> Vec<f64> {
        match (&self.cloudlet_lengths_mi, self.cloudlet_length_mi) {
            (Some(list), _) => list.clone(),
            (None, Some(len)) => vec![len; self.vm_count],
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    #[serde(default)]
    pub qos: QosConfig,
    #[serde(default)]
    pub submissions: Vec<SubmissionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_policy")]
    pub policy: String,
    #[serde(default)]
    pub migration_delay_s: f64,
    #[serde(default)]
    pub transfer_cost_per_mb: f64,
    /// Periodic sensing interval; 0 disables the tick.
    #[serde(default)]
    pub sense_period_s: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig { enabled: true, policy: default_policy(), migration_delay_s: 0.0, transfer_cost_per_mb: 0.0, sense_period_s: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstSection {
    pub private: String,
    #[serde(default)]
    pub fraction: f64,
    #[serde(default)]
    pub sweep: Option<Vec<f64>>,
    #[serde(default = "default_public_price")]
    pub price_per_hour: f64,
    #[serde(default)]
    pub boot_delay_s: f64,
    #[serde(default = "default_public_vm")]
    pub public_vm: VmConfig,
    #[serde(default = "default_public_mips")]
    pub public_mips_per_pe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub n: usize,
    pub mean_s: f64,
    pub sd_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub reference_mips: f64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadParams::default();
        WorkloadSection { n: w.n, mean_s: w.mean_s, sd_s: w.sd_s, min_s: w.min_s, max_s: w.max_s, reference_mips: w.reference_mips }
    }
}

impl From<&WorkloadSection> for WorkloadParams {
    fn from(w: &WorkloadSection) -> Self {
        WorkloadParams { n: w.n, mean_s: w.mean_s, sd_s: w.sd_s, min_s: w.min_s, max_s: w.max_s, reference_mips: w.reference_mips }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default)]
    pub run: RunSection,
    pub providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub broker: Option<BrokerConfig>,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub burst: Option<BurstSection>,
    #[serde(default)]
    pub workload: Option<WorkloadSection>,
}

fn location_of(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    format!("line {line}, column {col}")
}

fn dollars(key: &str, value: f64) -> Result<Cents, ScenarioError> {
    Cents::from_dollars(value).ok_or_else(|| ScenarioError::invalid(key, format!("must be a non-negative amount, got {value}")))
}

fn non_negative(key: &str, value: f64) -> Result<(), ScenarioError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(ScenarioError::invalid(key, format!("must be a finite non-negative number, got {value}")))
    }
}

fn check_fraction(key: &str, f: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(ScenarioError::invalid(key, format!("must lie in [0, 1], got {f}")))
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            location: e.span().map_or_else(|| "unknown location".to_string(), |s| location_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> ExperimentKind {
        if self.burst.is_some() {
            ExperimentKind::Burst
        } else {
            ExperimentKind::Federation { enabled: self.federation.enabled }
        }
    }

    fn provider_index(&self, key: &str, name: &str) -> Result<usize, ScenarioError> {
        self.providers.iter().position(|p| p.name == name).ok_or_else(|| ScenarioError::invalid(key, format!("no provider named '{name}'")))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.providers.is_empty() {
            return Err(ScenarioError::invalid("providers", "at least one provider is required"));
        }
        let mut names = HashSet::new();
        for (i, p) in self.providers.iter().enumerate() {
            let key = |field: &str| format!("providers[{i}].{field}");
            if !names.insert(p.name.as_str()) {
                return Err(ScenarioError::invalid(key("name"), format!("provider '{}' defined more than once", p.name)));
            }
            if p.host_count == 0 {
                return Err(ScenarioError::invalid(key("host_count"), "must be at least 1"));
            }
            if p.pe_count == 0 {
                return Err(ScenarioError::invalid(key("pe_count"), "must be at least 1"));
            }
            if !(p.mips_per_pe.is_finite() && p.mips_per_pe > 0.0) {
                return Err(ScenarioError::invalid(key("mips_per_pe"), "must be positive"));
            }
            if p.ram_mb == 0 {
                return Err(ScenarioError::invalid(key("ram_mb"), "must be positive"));
            }
            if p.storage_gb == 0 {
                return Err(ScenarioError::invalid(key("storage_gb"), "must be positive"));
            }
            if !(p.oversubscription.is_finite() && p.oversubscription >= 1.0) {
                return Err(ScenarioError::invalid(key("oversubscription"), "must be >= 1.0"));
            }
            dollars(&key("price_per_hour"), p.price_per_hour)?;
        }
        non_negative("run.time_limit_s", self.run.time_limit_s)?;

        let f = &self.federation;
        if f.policy != "slot-migration" {
            return Err(ScenarioError::invalid("federation.policy", format!("unknown policy '{}', expected slot-migration", f.policy)));
        }
        non_negative("federation.migration_delay_s", f.migration_delay_s)?;
        non_negative("federation.sense_period_s", f.sense_period_s)?;
        dollars("federation.transfer_cost_per_mb", f.transfer_cost_per_mb)?;

        match (&self.broker, &self.burst) {
            (Some(_), Some(_)) => {
                return Err(ScenarioError::invalid("burst", "a scenario runs either broker submissions or a burst, not both"));
            }
            (None, None) => return Err(ScenarioError::invalid("broker", "a [broker] or [burst] section is required")),
            (Some(b), None) => self.validate_broker(b)?,
            (None, Some(b)) => self.validate_burst(b)?,
        }
        Ok(())
    }

    fn validate_broker(&self, broker: &BrokerConfig) -> Result<(), ScenarioError> {
        let u = broker.qos.max_utilization;
        if !(u > 0.0 && u <= 1.0) {
            return Err(ScenarioError::invalid("broker.qos.max_utilization", format!("must lie in (0, 1], got {u}")));
        }
        if let Some(b) = broker.qos.budget_per_hour {
            dollars("broker.qos.budget_per_hour", b)?;
        }
        for (i, s) in broker.submissions.iter().enumerate() {
            let key = |field: &str| format!("broker.submissions[{i}].{field}");
            self.provider_index(&key("origin"), &s.origin)?;
            non_negative(&key("submit_at_s"), s.submit_at_s)?;
            let vm: VmSpec = s.vm.into();
            vm.validate().map_err(|e| ScenarioError::invalid(key("vm"), e.to_string()))?;
            let lengths = match (&s.cloudlet_lengths_mi, s.cloudlet_length_mi) {
                (Some(_), Some(_)) => {
                    return Err(ScenarioError::invalid(key("cloudlet_length_mi"), "give either cloudlet_length_mi or cloudlet_lengths_mi"));
                }
                (None, None) if s.vm_count > 0 => {
                    return Err(ScenarioError::invalid(key("cloudlet_length_mi"), "cloudlet length missing"));
                }
                _ => s.lengths(),
            };
            if lengths.len() != s.vm_count {
                return Err(ScenarioError::invalid(
                    key("cloudlet_lengths_mi"),
                    format!("{} lengths for {} VMs; cloudlets bind one-to-one to VMs", lengths.len(), s.vm_count),
                ));
            }
            if let Some(bad) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
                return Err(ScenarioError::invalid(key("cloudlet_lengths_mi"), format!("lengths must be positive, got {bad}")));
            }
        }
        Ok(())
    }

    fn validate_burst(&self, b: &BurstSection) -> Result<(), ScenarioError> {
        self.provider_index("burst.private", &b.private)?;
        check_fraction("burst.fraction", b.fraction)?;
        for (i, f) in b.sweep.iter().flatten().enumerate() {
            check_fraction(&format!("burst.sweep[{i}]"), *f)?;
        }
        dollars("burst.price_per_hour", b.price_per_hour)?;
        non_negative("burst.boot_delay_s", b.boot_delay_s)?;
        let vm: VmSpec = b.public_vm.into();
        vm.validate().map_err(|e| ScenarioError::invalid("burst.public_vm", e.to_string()))?;
        if !(b.public_mips_per_pe.is_finite() && b.public_mips_per_pe > 0.0) {
            return Err(ScenarioError::invalid("burst.public_mips_per_pe", "must be positive"));
        }
        let Some(w) = &self.workload else {
            return Err(ScenarioError::invalid("workload", "a burst scenario needs a [workload] section"));
        };
        WorkloadParams::from(w).validate().map_err(|e| ScenarioError::invalid("workload", e.to_string()))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("scenario serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_fraction(&self, fraction: f64) -> Self {
        let mut cfg = self.clone();
        if let Some(b) = cfg.burst.as_mut() {
            b.fraction = fraction;
        }
        cfg
    }

    fn burst_config(&self, b: &BurstSection) -> BurstConfig {
        BurstConfig {
            fraction: b.fraction,
            price_per_hour: Cents::from_dollars(b.price_per_hour).expect("validated"),
            public_vm_spec: b.public_vm.into(),
            boot_delay_s: b.boot_delay_s,
            public_mips_per_pe: b.public_mips_per_pe,
        }
    }

    fn datacenter(&self, index: usize) -> Result<Datacenter, ScenarioError> {
        let p = &self.providers[index];
        Datacenter::uniform(EntityId::new(EntityKind::Datacenter, index), p.host_count, p.host_spec(), p.oversubscription)
            .map_err(|e| ScenarioError::invalid(format!("providers[{index}]"), e.to_string()))
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    ScenarioConfig::parse(&text)
}

/// Flag beats environment beats scenario file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, scenario: u64) -> Result<u64, ScenarioError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match env {
        Some(raw) => raw.trim().parse().map_err(|_| ScenarioError::invalid(SEED_ENV, format!("not an unsigned integer: '{raw}'"))),
        None => Ok(scenario),
    }
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunReport, ScenarioError> {
    cfg.validate()?;
    let metadata = RunMetadata { seed: cfg.seed, scenario_hash: cfg.hash(), tool_version: TOOL_VERSION.to_string() };
    let (rows, total_cost) = match (&cfg.broker, &cfg.burst) {
        (_, Some(b)) => {
            let workload = cfg.workload.as_ref().expect("validated");
            if workload.n == 0 {
                (Vec::new(), Cents::ZERO)
            } else {
                let private = cfg.datacenter(cfg.provider_index("burst.private", &b.private)?)?;
                let tasks = WorkloadParams::from(workload).generate(cfg.seed);
                let out = run_burst(&private, &cfg.burst_config(b), tasks)?;
                (out.rows, out.total_cost)
            }
        }
        (Some(broker), None) => (run_federation(cfg, broker)?, Cents::ZERO),
        (None, None) => unreachable!("validated"),
    };
    let aggregates = Aggregates::from_rows(&rows, total_cost);
    Ok(RunReport { kind: cfg.kind(), rows, aggregates, metadata })
}

fn run_federation(cfg: &ScenarioConfig, broker: &BrokerConfig) -> Result<Vec<crate::report::TaskRow>, ScenarioError> {
    let providers = (0..cfg.providers.len())
        .map(|i| {
            let p = &cfg.providers[i];
            Ok(ProviderSetup {
                name: p.name.clone(),
                datacenter: cfg.datacenter(i)?,
                price_per_hour: Cents::from_dollars(p.price_per_hour).expect("validated"),
                sla_terms: p.sla_terms.clone(),
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let f = &cfg.federation;
    let params = FederationParams {
        enabled: f.enabled,
        migration_delay_s: f.migration_delay_s,
        transfer_cost_per_mb: Cents::from_dollars(f.transfer_cost_per_mb).expect("validated"),
        sense_period_s: (f.sense_period_s > 0.0).then_some(f.sense_period_s),
        qos: Qos {
            max_utilization: broker.qos.max_utilization,
            budget_per_hour: broker.qos.budget_per_hour.map(|b| Cents::from_dollars(b).expect("validated")),
        },
    };
    let mut sim = FederationSim::new(providers, params)?;
    for s in &broker.submissions {
        let origin = cfg.provider_index("origin", &s.origin)?;
        sim.submit(Application {
            origin: EntityId::new(EntityKind::Datacenter, origin),
            submit_at: SimTime::secs(s.submit_at_s),
            vms: vec![s.vm.into(); s.vm_count],
            cloudlet_lengths_mi: s.lengths(),
        })?;
    }
    Ok(sim.run(SimTime::secs(cfg.run.time_limit_s))?.rows)
}

/// One row per fraction, in input order. Fractions run in parallel.
pub fn sweep(cfg: &ScenarioConfig, fractions: &[f64]) -> Result<Vec<SweepRow>, ScenarioError> {
    if cfg.burst.is_none() {
        return Err(ScenarioError::invalid("burst", "a sweep needs a burst scenario"));
    }
    for (i, f) in fractions.iter().enumerate() {
        check_fraction(&format!("fractions[{i}]"), *f)?;
    }
    fractions
        .par_iter()
        .map(|&fraction| {
            let report = run(&cfg.with_fraction(fraction))?;
            Ok(SweepRow { fraction, makespan_s: report.aggregates.makespan_s, cost: report.aggregates.total_cost })
        })
        .collect()
}
