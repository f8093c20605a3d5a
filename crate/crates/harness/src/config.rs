//! Scenario description: cluster parameters, fault plan and workload.
//!
//! All three deserialize from TOML so a scenario can live in a file:
//!
//! ```toml
//! duration_ms = 20000
//!
//! [config]
//! nodes = 4
//! seed = 7
//!
//! [[faults.nodes]]
//! node = 0
//! kind = "mute_primary"
//!
//! [workload]
//! requests = 50
//! ```

use std::str::FromStr;
use std::time::Duration;

use quorate_core::agreement::Strategy;
use quorate_core::distance::Metric;
use quorate_core::domain::NodeIndex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown metric {0}")]
    Metric(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    ExecuteAgreeAttest,
    AgreeExecute,
}

impl From<StrategyName> for Strategy {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::ExecuteAgreeAttest => Strategy::ExecuteAgreeAttest,
            StrategyName::AgreeExecute => Strategy::AgreeExecute,
        }
    }
}

/// Cluster and network parameters. Times are milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub nodes: usize,
    /// Defaults to `(nodes - 1) / 3`.
    pub f: Option<u32>,
    pub seed: u64,
    pub view_timeout_ms: u64,
    pub strategy: StrategyName,
    pub exec_batch_max: u32,
    pub agree_batch_max: u32,
    pub agree_pipeline: u32,
    pub checkpoint_interval: u32,
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    /// Synthetic accelerator time per execution batch: fixed plus per item.
    pub exec_fixed_ms: f64,
    pub exec_per_item_ms: f64,
    /// Per-node output noise, standing in for heterogeneous hardware.
    pub noise: f64,
    pub metric: String,
    pub epsilon: f64,
    pub dim: usize,
    /// Client wait before trying the next proxy; defaults to four view
    /// timeouts.
    pub client_retry_ms: Option<u64>,
    /// Record every network send in the trace.
    pub trace_sends: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            f: None,
            seed: 1,
            view_timeout_ms: 400,
            strategy: StrategyName::ExecuteAgreeAttest,
            exec_batch_max: 4,
            agree_batch_max: 25,
            agree_pipeline: 2,
            checkpoint_interval: 16,
            latency_min_ms: 1.0,
            latency_max_ms: 5.0,
            exec_fixed_ms: 4.0,
            exec_per_item_ms: 0.5,
            noise: 1e-3,
            metric: "chebyshev".into(),
            epsilon: 0.05,
            dim: 8,
            client_retry_ms: None,
            trace_sends: true,
        }
    }
}

impl SimConfig {
    pub fn f(&self) -> u32 {
        self.f.unwrap_or(((self.nodes.max(1) - 1) / 3) as u32)
    }

    pub fn metric(&self) -> Result<Metric, ConfigError> {
        Metric::from_str(&self.metric).map_err(|_| ConfigError::Metric(self.metric.clone()))
    }

    pub fn view_timeout(&self) -> Duration {
        Duration::from_millis(self.view_timeout_ms)
    }

    pub fn client_retry(&self) -> Duration {
        self.client_retry_ms
            .map(Duration::from_millis)
            .unwrap_or(4 * self.view_timeout())
    }

    pub fn exec_cost(&self, items: usize) -> Duration {
        Duration::from_secs_f64((self.exec_fixed_ms + self.exec_per_item_ms * items as f64) / 1000.0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        self.metric()?;
        if self.nodes == 0 || self.nodes < 3 * self.f() as usize + 1 {
            return bad("need nodes >= 3f + 1");
        }
        if !(self.latency_min_ms >= 0.0 && self.latency_max_ms >= self.latency_min_ms) {
            return bad("latency range");
        }
        if !(self.exec_fixed_ms >= 0.0 && self.exec_per_item_ms >= 0.0) {
            return bad("execution cost");
        }
        if !(self.noise >= 0.0 && self.epsilon >= 0.0) || self.dim == 0 {
            return bad("noise, epsilon or dim");
        }
        if self.metric()? == Metric::MaxMinusMin && self.dim != 1 {
            return bad("max_minus_min needs dim = 1");
        }
        Ok(())
    }
}

/// What one node does wrong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    Honest,
    /// Shift every output coordinate by `magnitude * epsilon`; above 1 the
    /// result falls outside the threshold.
    CorruptResult { magnitude: f64 },
    Equivocate,
    MutePrimary,
    /// Lose this fraction of the node's outgoing messages.
    DropFraction { p: f64 },
    BadSignature,
    StaleVersionPrimary,
    /// Discard client requests received as proxy.
    ProxyDiscard,
}

impl Fault {
    /// Every non-honest behavior with a representative parameter.
    pub fn catalogue() -> Vec<Fault> {
        vec![
            Fault::CorruptResult { magnitude: 0.5 },
            Fault::CorruptResult { magnitude: 4.0 },
            Fault::Equivocate,
            Fault::MutePrimary,
            Fault::DropFraction { p: 0.3 },
            Fault::BadSignature,
            Fault::StaleVersionPrimary,
            Fault::ProxyDiscard,
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Fault::Honest => "honest".into(),
            Fault::CorruptResult { magnitude } => format!("corrupt_result({magnitude})"),
            Fault::Equivocate => "equivocate".into(),
            Fault::MutePrimary => "mute_primary".into(),
            Fault::DropFraction { p } => format!("drop_fraction({p})"),
            Fault::BadSignature => "bad_signature".into(),
            Fault::StaleVersionPrimary => "stale_version_primary".into(),
            Fault::ProxyDiscard => "proxy_discard".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeFault {
    pub node: NodeIndex,
    #[serde(flatten)]
    pub fault: Fault,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultPlan {
    pub nodes: Vec<NodeFault>,
    /// More than `f` faulty nodes is only allowed when the run is expected
    /// to lose liveness or certificates.
    pub expect_failure: bool,
}

impl FaultPlan {
    pub fn honest() -> Self {
        Self::default()
    }

    pub fn single(node: NodeIndex, fault: Fault) -> Self {
        Self {
            nodes: vec![NodeFault { node, fault }],
            expect_failure: false,
        }
    }

    pub fn fault_of(&self, node: NodeIndex) -> Fault {
        self.nodes
            .iter()
            .rev()
            .find(|f| f.node == node)
            .map_or(Fault::Honest, |f| f.fault)
    }

    pub fn is_honest(&self, node: NodeIndex) -> bool {
        self.fault_of(node) == Fault::Honest
    }

    pub fn faulty_count(&self, n: usize) -> usize {
        (0..n as NodeIndex).filter(|i| !self.is_honest(*i)).count()
    }

    pub fn validate(&self, n: usize, f: usize) -> Result<(), ConfigError> {
        if let Some(x) = self.nodes.iter().find(|x| x.node as usize >= n) {
            return Err(ConfigError::Invalid(format!("fault on unknown node {}", x.node)));
        }
        for x in &self.nodes {
            match x.fault {
                Fault::DropFraction { p } if !(0.0..=1.0).contains(&p) => {
                    return Err(ConfigError::Invalid("drop fraction outside [0, 1]".into()))
                }
                Fault::CorruptResult { magnitude } if !magnitude.is_finite() => {
                    return Err(ConfigError::Invalid("corruption magnitude".into()))
                }
                _ => {}
            }
        }
        if self.faulty_count(n) > f && !self.expect_failure {
            return Err(ConfigError::Invalid(format!(
                "more than f = {f} faulty nodes; set expect_failure"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Inference requests to issue after setup.
    pub requests: usize,
    /// Mean arrival rate (Poisson), requests per simulated second.
    pub rate_per_sec: f64,
    /// Share of arrivals that are group updates (define a new version, then
    /// activate it) instead of requests.
    pub update_fraction: f64,
    pub groups: usize,
    pub clients: usize,
    pub seed: u64,
    pub epsilon_override: Option<f64>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            requests: 100,
            rate_per_sec: 200.0,
            update_fraction: 0.0,
            groups: 1,
            clients: 4,
            seed: 1,
            epsilon_override: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rate_per_sec > 0.0) || self.groups == 0 || self.clients == 0 {
            return Err(ConfigError::Invalid("rate, groups and clients must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.update_fraction) {
            return Err(ConfigError::Invalid("update fraction outside [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub config: SimConfig,
    pub faults: FaultPlan,
    pub workload: WorkloadSpec,
    /// Simulated time limit.
    pub duration_ms: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            config: SimConfig::default(),
            faults: FaultPlan::default(),
            workload: WorkloadSpec::default(),
            duration_ms: 60_000,
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.config.validate()?;
        self.faults.validate(self.config.nodes, self.config.f() as usize)?;
        self.workload.validate()
    }

    pub fn duration(&self) -> Duration {
        Duration::from_millis(self.duration_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let s = Scenario::from_toml(
            r#"
            duration_ms = 20000
            [config]
            nodes = 4
            seed = 7
            [[faults.nodes]]
            node = 0
            kind = "mute_primary"
            [[faults.nodes]]
            node = 0
            kind = "corrupt_result"
            magnitude = 3.0
            [workload]
            requests = 50
            "#,
        )
        .unwrap();
        assert_eq!(s.config.seed, 7);
        assert_eq!(s.workload.requests, 50);
        assert_eq!(s.faults.fault_of(0), Fault::CorruptResult { magnitude: 3.0 });
        assert_eq!(s.faults.fault_of(1), Fault::Honest);
    }

    #[test]
    fn too_many_faults_need_the_flag() {
        let mut s = Scenario::default();
        s.faults = FaultPlan::single(0, Fault::Equivocate);
        s.faults.nodes.push(NodeFault {
            node: 1,
            fault: Fault::BadSignature,
        });
        assert!(s.validate().is_err());
        s.faults.expect_failure = true;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn default_f_and_cost() {
        let c = SimConfig {
            nodes: 7,
            ..SimConfig::default()
        };
        assert_eq!(c.f(), 2);
        // Default costs: batches of four run about three times the items per second.
        let one = c.exec_cost(1).as_secs_f64();
        let four = c.exec_cost(4).as_secs_f64();
        assert!((4.0 / four) / (1.0 / one) > 2.9);
    }
}
