//! Certificate mutation testing: certificates collected from honest runs
//! are corrupted one field or one bit at a time and re-verified.

use std::collections::BTreeMap;
use std::time::Duration;

use quorate_core::certificate::{verify_cert, AttestationPath, InferenceCertificate};
use quorate_core::client::Outcome;
use quorate_core::codec::{Decode, Encode};
use quorate_core::crypto::{Hash32, PublicKey};
use quorate_core::domain::{InferenceRequest, InferenceResult, Op};
use quorate_core::merkle::PathStep;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, FaultPlan, SimConfig, WorkloadSpec};
use crate::sim::run_scenario;

#[derive(Debug, Clone)]
pub struct CertSample {
    pub request: InferenceRequest,
    pub results: Vec<InferenceResult>,
    pub cert: InferenceCertificate,
}

impl CertSample {
    fn encode(&self) -> Vec<u8> {
        (&self.results, &self.cert).to_canonical()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub keys: Vec<PublicKey>,
    pub f: usize,
    pub samples: Vec<CertSample>,
}

impl Corpus {
    pub fn verify(&self, s: &CertSample) -> bool {
        verify_cert(&s.request, &s.results, &s.cert, &self.keys, self.f)
    }
}

/// Collects certificates from honest runs that share one key set. Runs
/// differ in workload seed only; node keys derive from the config seed.
pub fn collect(config: &SimConfig, runs: usize, requests_per_run: usize) -> Result<Corpus, ConfigError> {
    let mut corpus = Corpus {
        keys: Vec::new(),
        f: config.f() as usize,
        samples: Vec::new(),
    };
    for r in 0..runs {
        let workload = WorkloadSpec {
            requests: requests_per_run,
            seed: 1 + r as u64,
            ..WorkloadSpec::default()
        };
        let run = run_scenario(config, &FaultPlan::honest(), &workload, Duration::from_secs(600))?;
        corpus.keys = run.keys.clone();
        for c in run.requests() {
            if let (Op::Request(request), Some(Outcome::Certified { results, cert, .. })) = (&c.op, &c.outcome) {
                corpus.samples.push(CertSample {
                    request: request.clone(),
                    results: results.clone(),
                    cert: cert.clone(),
                });
            }
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuzzReport {
    pub honest_checked: usize,
    pub honest_accepted: usize,
    pub mutants: usize,
    pub accepted: usize,
    /// Bit flips that no longer decoded; not counted in `mutants`.
    pub undecodable: usize,
    pub by_kind: BTreeMap<&'static str, usize>,
    /// Accepted mutants, by kind.
    pub accepted_by_kind: BTreeMap<&'static str, usize>,
}

fn flip_hash(h: &mut Hash32, rng: &mut ChaCha8Rng) {
    let i = rng.gen_range(0..32);
    h.0[i] ^= 1 << rng.gen_range(0..8);
}

fn flip_path(steps: &mut [PathStep], rng: &mut ChaCha8Rng) -> bool {
    let sibs: Vec<usize> = (0..steps.len())
        .filter(|&i| matches!(steps[i], PathStep::Sibling(..)))
        .collect();
    let Some(&i) = sibs.choose(rng) else {
        return false;
    };
    if let PathStep::Sibling(h, _) = &mut steps[i] {
        flip_hash(h, rng);
    }
    true
}

/// Applies one structured mutation. Returns the kind, or `None` if the
/// drawn mutation does not apply to this sample.
fn mutate_field(s: &mut CertSample, rng: &mut ChaCha8Rng) -> Option<&'static str> {
    let nodes: Vec<_> = s.cert.signatures.keys().copied().collect();
    let res_idx = rng.gen_range(0..s.results.len());
    let res_node = s.results[res_idx].node_index;
    Some(match rng.gen_range(0..16) {
        0 => {
            s.cert.view += 1;
            "view"
        }
        1 => {
            s.cert.seq = s.cert.seq.wrapping_add(if rng.gen() { 1 } else { u64::MAX });
            "seq"
        }
        2 => {
            flip_hash(&mut s.cert.ops_digest, rng);
            "ops_digest"
        }
        3 => {
            flip_hash(&mut s.cert.primary_root, rng);
            "primary_root"
        }
        4 => {
            let out = &mut s.results[res_idx].output;
            let j = rng.gen_range(0..out.len());
            // Well inside any sensible epsilon: only the signatures object.
            out[j] += 1e-9;
            "result_output"
        }
        5 => {
            s.results[res_idx].group_version += 1;
            "result_version"
        }
        6 => {
            flip_hash(&mut s.results[res_idx].model_digest, rng);
            "result_model"
        }
        7 => {
            let path = s.cert.result_paths.get_mut(&res_node)?;
            if !flip_path(&mut path.steps, rng) {
                return None;
            }
            "result_path_sibling"
        }
        8 => {
            let path = s.cert.result_paths.get_mut(&res_node)?;
            path.leaf_index ^= 1;
            "result_path_index"
        }
        9 => {
            let k = *nodes.choose(rng)?;
            let sig = s.cert.signatures.get_mut(&k)?;
            let target = if rng.gen() { &mut sig.order } else { &mut sig.commit };
            let sig = target.as_mut()?;
            let i = rng.gen_range(0..sig.0.len());
            sig.0[i] ^= 1 << rng.gen_range(0..8);
            "signature_bits"
        }
        10 => {
            let (a, b) = {
                let mut two = nodes.choose_multiple(rng, 2);
                (*two.next()?, *two.next()?)
            };
            let sa = s.cert.signatures.get(&a)?.clone();
            let sb = s.cert.signatures.get(&b)?.clone();
            if sa == sb {
                return None;
            }
            s.cert.signatures.insert(a, sb);
            s.cert.signatures.insert(b, sa);
            "signature_swap"
        }
        11 => {
            let atts = s.cert.attestations.get_mut(&res_node)?;
            let pick = rng.gen_range(0..atts.len());
            let ap = atts.values_mut().nth(pick)?;
            *ap = match ap.clone() {
                AttestationPath::Direct(p) => AttestationPath::ViaBatchRoot(p),
                AttestationPath::ViaBatchRoot(p) => AttestationPath::Direct(p),
            };
            "attestation_kind"
        }
        12 => {
            let atts = s.cert.attestations.get_mut(&res_node)?;
            let pick = rng.gen_range(0..atts.len());
            let p = match atts.values_mut().nth(pick)? {
                AttestationPath::Direct(p) | AttestationPath::ViaBatchRoot(p) => p,
            };
            if rng.gen() {
                if !flip_path(&mut p.steps, rng) {
                    return None;
                }
            } else {
                p.leaf_index ^= 1;
            }
            "attestation_path"
        }
        13 => {
            // Credit an attestation to a node that did not make it.
            let atts = s.cert.attestations.get_mut(&res_node)?;
            let from = *atts.keys().copied().collect::<Vec<_>>().choose(rng)?;
            let n = s.cert.signatures.len().max(4) as u32;
            let to = (0..n).find(|k| !atts.contains_key(k) && s.cert.signatures.contains_key(k))?;
            let ap = atts.remove(&from)?;
            atts.insert(to, ap);
            "attestation_owner"
        }
        14 => {
            let other = (res_idx + 1) % s.results.len();
            if other == res_idx {
                return None;
            }
            let a = s.results[res_idx].output.clone();
            s.results[res_idx].output = s.results[other].output.clone();
            s.results[other].output = a;
            if s.results[res_idx].output == s.results[other].output {
                return None;
            }
            "result_output_swap"
        }
        _ => {
            s.results[res_idx].request_id.0[0] ^= 1;
            "result_request_id"
        }
    })
}

/// Flips one bit of the canonical `(results, cert)` encoding. `None` if the
/// flipped bytes no longer decode.
fn mutate_bits(s: &CertSample, rng: &mut ChaCha8Rng) -> Option<CertSample> {
    let mut bytes = s.encode();
    let i = rng.gen_range(0..bytes.len());
    bytes[i] ^= 1 << rng.gen_range(0..8);
    let (results, cert) = <(Vec<InferenceResult>, InferenceCertificate)>::from_canonical(&bytes).ok()?;
    Some(CertSample {
        request: s.request.clone(),
        results,
        cert,
    })
}

/// Verifies every honest sample, then `mutants` single mutations, half bit
/// flips and half structured field changes.
pub fn fuzz(corpus: &Corpus, mutants: usize, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport {
        honest_checked: corpus.samples.len(),
        honest_accepted: corpus.samples.iter().filter(|s| corpus.verify(s)).count(),
        ..FuzzReport::default()
    };
    if corpus.samples.is_empty() {
        return report;
    }
    while report.mutants < mutants {
        let base = corpus.samples.choose(&mut rng).expect("non-empty corpus");
        let (kind, m) = if report.mutants.is_multiple_of(2) {
            match mutate_bits(base, &mut rng) {
                Some(m) => ("bit_flip", m),
                None => {
                    report.undecodable += 1;
                    continue;
                }
            }
        } else {
            let mut m = base.clone();
            match mutate_field(&mut m, &mut rng) {
                Some(kind) => (kind, m),
                None => continue,
            }
        };
        // A mutation must change the encoded pair to count.
        if m.encode() == base.encode() {
            continue;
        }
        report.mutants += 1;
        *report.by_kind.entry(kind).or_default() += 1;
        if corpus.verify(&m) {
            report.accepted += 1;
            *report.accepted_by_kind.entry(kind).or_default() += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fuzz_rejects_all_mutants() {
        let corpus = collect(&SimConfig::default(), 1, 10).unwrap();
        assert!(corpus.samples.len() >= 10);
        let r = fuzz(&corpus, 200, 7);
        assert_eq!(r.honest_accepted, r.honest_checked);
        assert_eq!(r.mutants, 200);
        assert_eq!(r.accepted, 0, "{:?}", r.accepted_by_kind);
    }
}
