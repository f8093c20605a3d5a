use std::time::Duration;

use quorate_core::client::Outcome;
use quorate_core::domain::FailureCode;
use quorate_harness::accuracy::{run_accuracy, AccuracyConfig};
use quorate_harness::bench::{bench_strategies, saturating_workload};
use quorate_harness::oracle::{check_liveness, check_safety};
use quorate_harness::{run, run_scenario, Fault, FaultPlan, NodeFault, Scenario, SimConfig, WorkloadSpec};

fn workload(requests: usize) -> WorkloadSpec {
    WorkloadSpec {
        requests,
        ..WorkloadSpec::default()
    }
}

const LIMIT: Duration = Duration::from_secs(60);

#[test]
fn honest_cluster_certifies_everything() {
    let run = run_scenario(&SimConfig::default(), &FaultPlan::honest(), &workload(20), LIMIT).unwrap();
    assert!(run.deadlock.is_none());
    assert!(run.all_requests_certified());
    let safety = check_safety(&run);
    assert!(safety.is_safe(), "{}", safety.summary());
    assert!(safety.certificates_checked >= 20);
}

#[test]
fn equal_seeds_give_identical_traces() {
    let faults = FaultPlan::single(1, Fault::DropFraction { p: 0.2 });
    let wl = WorkloadSpec {
        update_fraction: 0.1,
        ..workload(30)
    };
    let a = run_scenario(&SimConfig::default(), &faults, &wl, LIMIT).unwrap();
    let b = run_scenario(&SimConfig::default(), &faults, &wl, LIMIT).unwrap();
    assert!(!a.trace.is_empty());
    assert_eq!(a.trace.to_bytes(), b.trace.to_bytes());

    let other = SimConfig {
        seed: 2,
        ..SimConfig::default()
    };
    let c = run_scenario(&other, &faults, &wl, LIMIT).unwrap();
    assert_ne!(a.trace.to_bytes(), c.trace.to_bytes());
}

#[test]
fn two_mute_primaries_in_seven_nodes() {
    let cfg = SimConfig {
        nodes: 7,
        ..SimConfig::default()
    };
    let faults = FaultPlan {
        nodes: vec![
            NodeFault {
                node: 0,
                fault: Fault::MutePrimary,
            },
            NodeFault {
                node: 1,
                fault: Fault::MutePrimary,
            },
        ],
        expect_failure: false,
    };
    let run = run_scenario(&cfg, &faults, &workload(20), LIMIT).unwrap();
    let live = check_liveness(&run);
    assert!(live.views_entered.contains(&2), "{:?}", live.views_entered);
    assert!(live.wrong_primaries.is_empty());
    assert!(run.all_requests_certified());
    assert!(check_safety(&run).is_safe());
}

#[test]
fn discarding_proxy_is_routed_around() {
    let run = run_scenario(
        &SimConfig::default(),
        &FaultPlan::single(2, Fault::ProxyDiscard),
        &workload(24),
        LIMIT,
    )
    .unwrap();
    assert!(run.all_requests_certified());
    let mut rerouted = 0;
    for c in run.requests() {
        if let Some(Outcome::Certified { proxy, .. }) = &c.outcome {
            assert_ne!(*proxy, 2);
            if c.session % 4 == 2 {
                rerouted += 1;
            }
        }
    }
    assert!(rerouted > 0);
}

#[test]
fn tiny_epsilon_yields_certified_failures() {
    let wl = WorkloadSpec {
        epsilon_override: Some(1e-12),
        ..workload(10)
    };
    let run = run_scenario(&SimConfig::default(), &FaultPlan::honest(), &wl, LIMIT).unwrap();
    assert!(run.all_requests_certified());
    for c in run.requests() {
        match &c.outcome {
            Some(Outcome::Failed { cert, .. }) => assert_eq!(cert.code, FailureCode::QuorumUnsatisfied),
            other => panic!("expected a certified failure, got {other:?}"),
        }
    }
    assert!(check_safety(&run).is_safe());
}

#[test]
fn result_beyond_epsilon_never_certified() {
    let run = run_scenario(
        &SimConfig::default(),
        &FaultPlan::single(3, Fault::CorruptResult { magnitude: 4.0 }),
        &workload(20),
        LIMIT,
    )
    .unwrap();
    assert!(run.all_requests_certified());
    for c in run.requests() {
        if let Some(Outcome::Certified { results, .. }) = &c.outcome {
            assert!(results.iter().all(|r| r.node_index != 3));
        }
    }
    assert!(check_safety(&run).is_safe());
}

#[test]
fn too_many_faults_fail_visibly() {
    let text = r#"
        duration_ms = 20000

        [faults]
        expect_failure = true

        [[faults.nodes]]
        node = 2
        kind = "corrupt_result"
        magnitude = 4.0

        [[faults.nodes]]
        node = 3
        kind = "corrupt_result"
        magnitude = 4.0

        [workload]
        requests = 10
    "#;
    let scenario = Scenario::from_toml(text).unwrap();
    let run = run(&scenario).unwrap();
    let safety = check_safety(&run);
    assert!(safety.invalid_certificates.is_empty());
    // Two agreeing liars and two honest nodes: no N - f quorum exists.
    for c in run.requests() {
        assert!(
            !matches!(c.outcome, Some(Outcome::Certified { .. })),
            "a result set was certified with more than f liars"
        );
    }
}

#[test]
fn too_many_faults_rejected_without_flag() {
    let text = r#"
        [[faults.nodes]]
        node = 0
        kind = "mute_primary"

        [[faults.nodes]]
        node = 1
        kind = "equivocate"
    "#;
    assert!(Scenario::from_toml(text).is_err());
}

#[test]
fn bench_smoke() {
    let r = bench_strategies(&SimConfig::default(), &saturating_workload(120, 1)).unwrap();
    assert!(r.execute_agree_attest_tps > 0.0 && r.agree_execute_tps > 0.0);
    assert!(r.ratio() > 1.0, "{r:?}");
}

#[test]
fn accuracy_smoke() {
    let cfg = AccuracyConfig {
        trials: 500,
        ..AccuracyConfig::default()
    };
    let r = run_accuracy(&cfg).unwrap();
    assert_eq!(r.beyond_excluded, 1.0);
    assert!(r.honest >= r.best_single() - 0.02);
    assert!(r.worst_case_within() <= r.honest);
}
