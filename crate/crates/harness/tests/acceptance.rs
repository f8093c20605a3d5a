//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use quorate_core::codec::{Decode, Encode};
use quorate_core::crypto::{Hash32, PublicKey, Signature};
use quorate_core::distance::{select_quorum, Metric};
use quorate_core::domain::{InferenceRequest, InferenceResult, NodeIndex};
use quorate_core::merkle::{get_merkle_root, AuthPath, MerkleTree, PathStep};
use quorate_harness::accuracy::{run_accuracy, AccuracyConfig};
use quorate_harness::bench::{batch_sweep, bench_strategies, saturating_workload};
use quorate_harness::fuzz::{collect, fuzz};
use quorate_harness::oracle::{check_liveness, check_safety};
use quorate_harness::{run_scenario, Fault, FaultPlan, SimConfig, WorkloadSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn certificate_fuzz() -> Outcome {
    let t = Instant::now();
    let corpus = match collect(&SimConfig::default(), 10, 100) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("collecting certificates: {e}")),
    };
    let r = fuzz(&corpus, 10_000, 1);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.honest_checked >= 1000 && r.honest_accepted == r.honest_checked && r.mutants == 10_000 && r.accepted == 0 && secs < 60.0,
        format!(
            "{}/{} honest accepted, {}/{} mutants accepted over {} kinds, {:.1}s",
            r.honest_accepted,
            r.honest_checked,
            r.accepted,
            r.mutants,
            r.by_kind.len(),
            secs
        ),
    )
}

// Independent reference for subset selection: every subset as a bitmask.
fn reference_distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::MaxMinusMin => (a[0] - b[0]).abs(),
        Metric::Chebyshev => a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

fn powerset_select(points: &[Vec<f64>], n: usize, f: usize, metric: Metric, eps: f64) -> Option<BTreeSet<NodeIndex>> {
    let m = points.len();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for mask in 1u32..(1 << m) {
        let members: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if members.len() < n - f {
            continue;
        }
        let mut diam = 0.0f64;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                diam = diam.max(reference_distance(metric, &points[i], &points[j]));
            }
        }
        if diam > eps {
            continue;
        }
        let better = match &best {
            None => true,
            Some((size, d, tuple)) => {
                members.len() > *size || (members.len() == *size && (diam < *d || (diam == *d && members < *tuple)))
            }
        };
        if better {
            best = Some((members.len(), diam, members));
        }
    }
    best.map(|(_, _, t)| t.into_iter().map(|i| i as NodeIndex).collect())
}

fn quorum_vs_powerset() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut satisfied = 0;
    let mut instances = 0;
    for n in [4usize, 7, 10] {
        let f = (n - 1) / 3;
        for (dim, metric) in [(1, Metric::MaxMinusMin), (8, Metric::Chebyshev), (8, Metric::Euclidean)] {
            for trial in 0..1000 {
                // Half the instances use a coarse grid so that equal distances
                // and equal-size candidates exercise the tie-break.
                let coarse = trial % 2 == 0;
                let points: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        (0..dim)
                            .map(|_| if coarse { rng.gen_range(0..4) as f64 } else { rng.gen::<f64>() })
                            .collect()
                    })
                    .collect();
                let eps = if coarse { rng.gen_range(0..5) as f64 } else { rng.gen_range(0.0..1.5) };
                let map: BTreeMap<NodeIndex, Vec<f64>> =
                    points.iter().enumerate().map(|(i, p)| (i as NodeIndex, p.clone())).collect();
                let got = select_quorum(&map, n, f, metric, eps).expect("valid instance");
                let want = powerset_select(&points, n, f, metric, eps);
                let same = match &want {
                    Some(set) => got.satisfied && &got.selected == set,
                    None => !got.satisfied && got.selected.is_empty(),
                };
                mismatches += usize::from(!same);
                satisfied += usize::from(got.satisfied);
                instances += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 30.0,
        format!("{instances} instances (N=4,7,10; scalar, 8-dim chebyshev and euclidean), {satisfied} satisfied, {mismatches} mismatches, {secs:.1}s"),
    )
}

fn single_byzantine_safety() -> Outcome {
    let cfg = SimConfig::default();
    let mut scenarios = 0;
    let (mut divergent, mut outside, mut thin, mut other) = (0, 0, 0, 0);
    let mut certificates = 0;
    let mut failures = Vec::new();
    for fault in Fault::catalogue() {
        for node in [0, 1] {
            for seed in 1..=4u64 {
                let cfg = SimConfig { seed, ..cfg.clone() };
                let wl = WorkloadSpec {
                    requests: 40,
                    update_fraction: 0.1,
                    seed,
                    ..WorkloadSpec::default()
                };
                let run = match run_scenario(&cfg, &FaultPlan::single(node, fault), &wl, Duration::from_secs(120)) {
                    Ok(r) => r,
                    Err(e) => return outcome(false, format!("{}: {e}", fault.name())),
                };
                let rep = check_safety(&run);
                scenarios += 1;
                certificates += rep.certificates_checked;
                divergent += rep.divergent_logs.len();
                outside += rep.outside_quorum.len() + rep.bad_quorums.len() + rep.invalid_certificates.len();
                thin += rep.thin_attestations.len();
                other += rep.version_violations.len();
                if !rep.is_safe() {
                    failures.push(format!("{} on node {node} seed {seed}: {}", fault.name(), rep.summary()));
                }
            }
        }
    }
    failures.truncate(3);
    outcome(
        scenarios >= 50 && failures.is_empty(),
        format!(
            "{scenarios} scenarios, {certificates} certificates re-verified; divergent logs {divergent}, outside quorum {outside}, thin attestations {thin}, other {other} {failures:?}"
        ),
    )
}

fn faulty_primary_liveness() -> Outcome {
    let cfg = SimConfig::default();
    let limit = cfg.view_timeout() * 10;
    let mut lines = Vec::new();
    let mut pass = true;
    for fault in [Fault::MutePrimary, Fault::StaleVersionPrimary] {
        for seed in 1..=3u64 {
            let cfg = SimConfig { seed, ..cfg.clone() };
            let wl = WorkloadSpec {
                requests: 30,
                update_fraction: 0.1,
                seed,
                ..WorkloadSpec::default()
            };
            let run = match run_scenario(&cfg, &FaultPlan::single(0, fault), &wl, Duration::from_secs(120)) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("{}: {e}", fault.name())),
            };
            let live = check_liveness(&run);
            let ok = live.views_entered.contains(&1)
                && live.wrong_primaries.is_empty()
                && live.all_completed_within(limit)
                && run.all_requests_certified();
            pass &= ok;
            if seed == 1 || !ok {
                lines.push(format!(
                    "{} seed {seed}: views {:?}, {}/{} sessions, max latency {:?}",
                    fault.name(),
                    live.views_entered,
                    live.completed,
                    live.sessions,
                    live.max_latency
                ));
            }
        }
    }
    outcome(pass, format!("limit {limit:?}; {}", lines.join("; ")))
}

fn version_serializability() -> Outcome {
    let mut violations = 0;
    let mut updates = 0;
    let mut certified = 0;
    let mut other = Vec::new();
    for seed in 1..=20u64 {
        let cfg = SimConfig { seed, ..SimConfig::default() };
        let wl = WorkloadSpec {
            requests: 60,
            update_fraction: 0.1,
            groups: 2,
            seed,
            ..WorkloadSpec::default()
        };
        let run = match run_scenario(&cfg, &FaultPlan::honest(), &wl, Duration::from_secs(120)) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let rep = check_safety(&run);
        violations += rep.version_violations.len();
        if rep.violations() != rep.version_violations.len() {
            other.push(format!("seed {seed}: {}", rep.summary()));
        }
        updates += run.clients.iter().filter(|c| !c.is_request()).count();
        certified += run.certified();
    }
    other.truncate(3);
    outcome(
        violations == 0 && other.is_empty(),
        format!("20 seeds, {updates} update sessions, {certified} certified requests, {violations} version violations {other:?}"),
    )
}

fn batching_bench() -> Outcome {
    let cfg = SimConfig::default();
    let wl = saturating_workload(400, 1);
    let strategies = match bench_strategies(&cfg, &wl) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let sweep = match batch_sweep(&cfg, &wl, &[1, 4]) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let batch_ratio = sweep[1].1 / sweep[0].1;
    outcome(
        strategies.ratio() >= 1.5 && batch_ratio >= 2.0,
        format!(
            "execute/agree/attest {:.0} req/s vs agree/execute {:.0} req/s ({:.2}x); execution batch 4 vs 1: {:.0} vs {:.0} req/s ({:.2}x)",
            strategies.execute_agree_attest_tps,
            strategies.agree_execute_tps,
            strategies.ratio(),
            sweep[1].1,
            sweep[0].1,
            batch_ratio
        ),
    )
}

fn accuracy() -> Outcome {
    let t = Instant::now();
    let r = match run_accuracy(&AccuracyConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = t.elapsed().as_secs_f64();
    let a = r.honest >= r.best_single() - 0.005;
    let b = r.beyond_excluded == 1.0;
    let c = r.worst_case_within() >= r.worst_single();
    outcome(
        a && b && c && secs < 120.0,
        format!(
            "{} trials: single {:?}; (a) honest {:.4} vs best {:.4}; (b) beyond-eps excluded {:.1}%, accuracy {:.4} (honest-only {:.4}); (c) steered {:.4}, colluding {:.4} vs worst {:.4}; {secs:.1}s",
            r.config.trials,
            r.single.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            r.honest,
            r.best_single(),
            100.0 * r.beyond_excluded,
            r.beyond,
            r.honest_only,
            r.steered,
            r.colluding,
            r.worst_single()
        ),
    )
}

fn random_hash(rng: &mut ChaCha8Rng) -> Hash32 {
    Hash32(rng.gen())
}

fn random_floats(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = rng.gen_range(0..10);
    (0..len)
        .map(|_| match rng.gen_range(0..4) {
            0 => f64::from_bits(rng.gen()),
            1 => 0.0,
            _ => rng.gen_range(-1e3..1e3),
        })
        .collect()
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(0..12);
    (0..len).map(|_| rng.gen_range('a'..='z')).collect()
}

fn random_result(rng: &mut ChaCha8Rng) -> InferenceResult {
    InferenceResult {
        request_id: random_hash(rng),
        node_index: rng.gen_range(0..16),
        group_id: random_string(rng),
        group_version: rng.gen_range(0..5),
        output: random_floats(rng),
        model_digest: random_hash(rng),
    }
}

fn random_request(rng: &mut ChaCha8Rng) -> InferenceRequest {
    InferenceRequest {
        request_id: random_hash(rng),
        client_key: PublicKey(rng.gen::<[u8; 32]>().to_vec()),
        nonce: rng.gen(),
        group_id: random_string(rng),
        input: random_floats(rng),
        epsilon_override: rng.gen::<bool>().then(|| rng.gen_range(0.0..2.0)),
        client_sig: Signature((0..64).map(|_| rng.gen()).collect()),
    }
}

fn random_path(rng: &mut ChaCha8Rng) -> AuthPath {
    let len = rng.gen_range(0..8);
    AuthPath {
        leaf_index: rng.gen_range(0..256),
        steps: (0..len)
            .map(|_| match rng.gen_range(0..3) {
                0 => PathStep::Promoted,
                1 => PathStep::Sibling(random_hash(rng), quorate_core::merkle::Side::Left),
                _ => PathStep::Sibling(random_hash(rng), quorate_core::merkle::Side::Right),
            })
            .collect(),
    }
}

/// Round trip at the byte level (NaN payloads compare unequal as floats)
/// and injectivity against an independently drawn value.
fn codec_trial<T: Encode + Decode>(a: &T, b: &T, a_eq_b: bool) -> (bool, bool) {
    let ea = a.to_canonical();
    let round = T::from_canonical(&ea).map(|d| d.to_canonical() == ea).unwrap_or(false);
    let injective = a_eq_b || ea != b.to_canonical();
    (round, injective)
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn merkle_and_codec() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut path_fail, mut mutation_fail, mut length_fail) = (0, 0, 0);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let leaves: Vec<Vec<u8>> = (0..n)
            .map(|_| {
                let len = rng.gen_range(0..40);
                (0..len).map(|_| rng.gen()).collect()
            })
            .collect();
        let tree = MerkleTree::build(&leaves).expect("non-empty");
        for (i, leaf) in leaves.iter().enumerate() {
            let path = tree.auth_path(i).expect("index in range");
            if get_merkle_root(&path, leaf) != tree.root() || !path.is_consistent() {
                path_fail += 1;
            }
            let depth = (n as f64).log2().ceil() as usize;
            if path.steps.len() != depth {
                length_fail += 1;
            }
        }
        let i = rng.gen_range(0..n);
        let mut changed = leaves.clone();
        if changed[i].is_empty() || rng.gen() {
            changed[i].push(rng.gen());
        } else {
            let j = rng.gen_range(0..changed[i].len());
            changed[i][j] ^= 1 << rng.gen_range(0..8);
        }
        if MerkleTree::build(&changed).expect("non-empty").root() == tree.root() {
            mutation_fail += 1;
        }
    }

    let (mut round_fail, mut inject_fail) = (0, 0);
    for _ in 0..10_000 {
        let (a, b) = (random_result(&mut rng), random_result(&mut rng));
        let same = a.to_canonical() == b.to_canonical() && bits_eq(&a.output, &b.output);
        let (r, i) = codec_trial(&a, &b, same);
        let (c, d) = (random_request(&mut rng), random_request(&mut rng));
        let (r2, i2) = codec_trial(&c, &d, false);
        let (p, q) = (random_path(&mut rng), random_path(&mut rng));
        let (r3, i3) = codec_trial(&p, &q, p == q);
        round_fail += usize::from(!(r && r2 && r3));
        inject_fail += usize::from(!(i && i2 && i3));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        path_fail + mutation_fail + length_fail + round_fail + inject_fail == 0,
        format!(
            "merkle: 10000 trees, path failures {path_fail}, path-length mismatches {length_fail}, undetected leaf changes {mutation_fail}; codec: 10000 trials x 3 types, round-trip failures {round_fail}, collisions {inject_fail}; {secs:.1}s"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 certificate fuzz", certificate_fuzz),
        ("2 quorum selection vs powerset", quorum_vs_powerset),
        ("3 single-Byzantine safety", single_byzantine_safety),
        ("4 liveness with faulty primary", faulty_primary_liveness),
        ("5 version serializability", version_serializability),
        ("6 batching benchmark", batching_bench),
        ("7 accuracy under dishonesty", accuracy),
        ("8 merkle and codec properties", merkle_and_codec),
    ];
    let results: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria.iter().map(|(_, run)| s.spawn(run)).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| outcome(false, "panicked".into()))).collect()
    });
    let mut all = true;
    for ((name, _), r) in criteria.iter().zip(&results) {
        all &= r.pass;
        println!("criterion {name}: {} ({})", if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
