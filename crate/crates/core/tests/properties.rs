use std::collections::BTreeMap;

use proptest::prelude::*;
use quorate_core::codec::{CodecError, Decode, Encode, Encoder};
use quorate_core::crypto::{sign_value, verify_value, Hash32, KeyPair};
use quorate_core::distance::{select_quorum, Metric};
use quorate_core::domain::{primary_index, InferenceRequest, InferenceResult, NodeIndex};
use quorate_core::merkle::{get_merkle_root, MerkleTree};

fn finite() -> impl Strategy<Value = f64> {
    -1e6f64..1e6
}

fn request() -> impl Strategy<Value = InferenceRequest> {
    (
        any::<[u8; 32]>(),
        any::<u64>(),
        "[a-z]{0,12}",
        prop::collection::vec(finite(), 0..8),
        prop::option::of(0.0f64..10.0),
    )
        .prop_map(|(seed, nonce, group, input, eps)| {
            InferenceRequest::new(&KeyPair::from_seed(seed), nonce, &group, input, eps)
        })
}

fn result() -> impl Strategy<Value = InferenceResult> {
    (
        any::<[u8; 32]>(),
        0u32..16,
        "[a-z]{0,8}",
        any::<u64>(),
        prop::collection::vec(finite(), 0..8),
        any::<[u8; 32]>(),
    )
        .prop_map(|(id, node_index, group_id, group_version, output, digest)| InferenceResult {
            request_id: Hash32(id),
            node_index,
            group_id,
            group_version,
            output,
            model_digest: Hash32(digest),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn request_round_trips(r in request()) {
        let bytes = r.to_canonical();
        let back = InferenceRequest::from_canonical(&bytes).unwrap();
        prop_assert_eq!(back.to_canonical(), bytes);
        prop_assert_eq!(back, r);
    }

    #[test]
    fn result_round_trips(r in result()) {
        let bytes = r.to_canonical();
        prop_assert_eq!(InferenceResult::from_canonical(&bytes).unwrap(), r);
    }

    #[test]
    fn distinct_results_encode_distinctly(a in result(), b in result()) {
        prop_assume!(a != b);
        prop_assert_ne!(a.to_canonical(), b.to_canonical());
    }

    #[test]
    fn one_field_change_changes_encoding(r in result(), bump in 1u64..1000) {
        let mut s = r.clone();
        s.group_version = s.group_version.wrapping_add(bump);
        prop_assert_ne!(r.to_canonical(), s.to_canonical());
    }

    #[test]
    fn strict_prefixes_do_not_decode(r in result(), cut in any::<prop::sample::Index>()) {
        let bytes = r.to_canonical();
        let cut = cut.index(bytes.len());
        prop_assert!(InferenceResult::from_canonical(&bytes[..cut]).is_err());
    }

    #[test]
    fn trailing_bytes_rejected(r in result(), extra in prop::collection::vec(any::<u8>(), 1..4)) {
        let mut bytes = r.to_canonical();
        bytes.extend(extra);
        prop_assert!(InferenceResult::from_canonical(&bytes).is_err());
    }

    #[test]
    fn maps_must_be_sorted(a in any::<u32>(), b in any::<u32>()) {
        prop_assume!(a != b);
        let (lo, hi) = (a.min(b), a.max(b));
        let mut enc = Encoder::new();
        enc.len_prefix(2);
        enc.put(&hi);
        enc.put(&1u64);
        enc.put(&lo);
        enc.put(&2u64);
        let res = BTreeMap::<u32, u64>::from_canonical(&enc.finish());
        prop_assert_eq!(res, Err(CodecError::NonCanonicalMap));
        let good = BTreeMap::from([(lo, 2u64), (hi, 1u64)]);
        prop_assert_eq!(BTreeMap::<u32, u64>::from_canonical(&good.to_canonical()).unwrap(), good);
    }

    #[test]
    fn merkle_paths_verify(leaves in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..24), 1..48)) {
        let tree = MerkleTree::build(&leaves).unwrap();
        let expected_len = leaves.len().next_power_of_two().trailing_zeros() as usize;
        for (i, leaf) in leaves.iter().enumerate() {
            let path = tree.auth_path(i).unwrap();
            prop_assert_eq!(path.steps.len(), expected_len);
            prop_assert!(path.is_consistent());
            prop_assert_eq!(get_merkle_root(&path, leaf), tree.root());
            let mut other = leaf.clone();
            other.push(0x5a);
            prop_assert_ne!(get_merkle_root(&path, &other), tree.root());
        }
    }

    #[test]
    fn merkle_root_binds_every_leaf(
        leaves in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..8), 1..20),
        pick in any::<prop::sample::Index>(),
    ) {
        let i = pick.index(leaves.len());
        let mut changed = leaves.clone();
        changed[i][0] ^= 1;
        prop_assert_ne!(MerkleTree::build(&leaves).unwrap().root(), MerkleTree::build(&changed).unwrap().root());
    }

    #[test]
    fn signatures_bind_key_and_message(seed in any::<[u8; 32]>(), other in any::<[u8; 32]>(), msg in any::<u64>()) {
        prop_assume!(seed != other);
        let k = KeyPair::from_seed(seed);
        let sig = sign_value(&k, &msg);
        prop_assert!(verify_value(k.public_key(), &msg, &sig));
        prop_assert!(!verify_value(k.public_key(), &msg.wrapping_add(1), &sig));
        prop_assert!(!verify_value(KeyPair::from_seed(other).public_key(), &msg, &sig));
    }

    #[test]
    fn primary_rotates_through_every_node(n in 1usize..20, start in 0u64..1_000_000) {
        let mut seen: Vec<NodeIndex> = (start..start + n as u64).map(|v| primary_index(v, n)).collect();
        prop_assert_eq!(primary_index(start, n), primary_index(start + n as u64, n));
        prop_assert_eq!(primary_index(start + 1, n), (primary_index(start, n) + 1) % n as NodeIndex);
        seen.sort();
        prop_assert_eq!(seen, (0..n as NodeIndex).collect::<Vec<_>>());
    }
}

/// Reference quorum selection over every subset, written without the
/// library's combination enumerator.
fn brute_force(results: &BTreeMap<NodeIndex, Vec<f64>>, n: usize, f: usize, eps: f64) -> Option<Vec<NodeIndex>> {
    let nodes: Vec<NodeIndex> = results.keys().copied().collect();
    let m = nodes.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut best: Option<(usize, f64, Vec<NodeIndex>)> = None;
    for mask in 0u32..(1 << m) {
        let set: Vec<NodeIndex> = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| nodes[i]).collect();
        if set.len() < n - f {
            continue;
        }
        let mut diam = 0.0f64;
        for a in &set {
            for b in &set {
                diam = diam.max(dist(&results[a], &results[b]));
            }
        }
        if diam > eps {
            continue;
        }
        let better = match &best {
            None => true,
            Some((len, d, s)) => {
                set.len() > *len || (set.len() == *len && (diam < *d || (diam == *d && set < *s)))
            }
        };
        if better {
            best = Some((set.len(), diam, set));
        }
    }
    best.map(|(_, _, s)| s)
}

fn outputs(n: usize, dim: usize) -> impl Strategy<Value = BTreeMap<NodeIndex, Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0i32..6, dim), n).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, r)| (i as NodeIndex, r.into_iter().map(|x| f64::from(x) * 0.25).collect()))
            .collect()
    })
}

fn sized(o: &quorate_core::distance::AgreementOutcome) -> usize {
    if o.satisfied {
        o.selected.len()
    } else {
        0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn quorum_matches_powerset(
        (n, results) in (4usize..=8).prop_flat_map(|n| (Just(n), outputs(n, 3))),
        eps in 0.0f64..1.5,
    ) {
        let f = (n - 1) / 3;
        let got = select_quorum(&results, n, f, Metric::Chebyshev, eps).unwrap();
        let want = brute_force(&results, n, f, eps);
        prop_assert_eq!(got.satisfied, want.is_some());
        if let Some(w) = want {
            prop_assert_eq!(got.selected.into_iter().collect::<Vec<_>>(), w);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn shrinking_epsilon_never_grows_quorum(
        (n, results) in (4usize..=8).prop_flat_map(|n| (Just(n), outputs(n, 2))),
        a in 0.0f64..2.0,
        b in 0.0f64..2.0,
    ) {
        let f = (n - 1) / 3;
        let (lo, hi) = (a.min(b), a.max(b));
        let small = select_quorum(&results, n, f, Metric::Euclidean, lo).unwrap();
        let large = select_quorum(&results, n, f, Metric::Euclidean, hi).unwrap();
        prop_assert!(sized(&small) <= sized(&large));
    }

    #[test]
    fn far_result_changes_nothing(
        (n, mut results) in (4usize..=8).prop_flat_map(|n| (Just(n), outputs(n, 2))),
        eps in 0.0f64..1.0,
    ) {
        let f = (n - 1) / 3;
        prop_assume!(f >= 1);
        let missing = (n - 1) as NodeIndex;
        results.remove(&missing);
        let before = select_quorum(&results, n, f, Metric::Chebyshev, eps).unwrap();
        results.insert(missing, vec![1e6, -1e6]);
        let after = select_quorum(&results, n, f, Metric::Chebyshev, eps).unwrap();
        prop_assert_eq!(before, after);
    }
}
