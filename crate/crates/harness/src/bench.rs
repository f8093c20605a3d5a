//! Throughput experiments on the simulator: execution placement and
//! execution batch size. Throughput is certified requests per simulated
//! second, so results depend only on the cost model and seeds.

use std::time::Duration;

use crate::config::{ConfigError, FaultPlan, SimConfig, StrategyName, WorkloadSpec};
use crate::sim::run_scenario;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub execute_agree_attest_tps: f64,
    pub agree_execute_tps: f64,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.execute_agree_attest_tps / self.agree_execute_tps
    }
}

/// A saturating workload over ten model groups: arrivals well above what
/// one accelerator serves.
pub fn saturating_workload(requests: usize, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        requests,
        rate_per_sec: 5000.0,
        clients: 16,
        groups: 10,
        seed,
        ..WorkloadSpec::default()
    }
}

fn limit(workload: &WorkloadSpec) -> Duration {
    Duration::from_secs(600 + workload.requests as u64)
}

fn throughput(config: &SimConfig, workload: &WorkloadSpec) -> Result<f64, ConfigError> {
    // Clients wait out the whole backlog; a retry under overload only
    // measures client patience.
    let cfg = SimConfig {
        trace_sends: false,
        client_retry_ms: Some(limit(workload).as_millis() as u64),
        ..config.clone()
    };
    let run = run_scenario(&cfg, &FaultPlan::honest(), workload, limit(workload))?;
    if !run.all_requests_certified() {
        return Err(ConfigError::Invalid(format!(
            "benchmark run certified only {} of {} requests",
            run.certified(),
            run.requests().count()
        )));
    }
    Ok(run.throughput())
}

/// Runs both execution placements on the same workload and seeds.
pub fn bench_strategies(config: &SimConfig, workload: &WorkloadSpec) -> Result<BenchReport, ConfigError> {
    let with = |strategy| SimConfig {
        strategy,
        ..config.clone()
    };
    Ok(BenchReport {
        execute_agree_attest_tps: throughput(&with(StrategyName::ExecuteAgreeAttest), workload)?,
        agree_execute_tps: throughput(&with(StrategyName::AgreeExecute), workload)?,
    })
}

/// Throughput for each execution batch size.
pub fn batch_sweep(
    config: &SimConfig,
    workload: &WorkloadSpec,
    sizes: &[u32],
) -> Result<Vec<(u32, f64)>, ConfigError> {
    sizes
        .iter()
        .map(|&b| {
            let cfg = SimConfig {
                exec_batch_max: b,
                ..config.clone()
            };
            Ok((b, throughput(&cfg, workload)?))
        })
        .collect()
}
