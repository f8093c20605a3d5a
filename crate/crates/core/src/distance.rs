//! Distance metrics, result-set diameter and trustworthy-subset selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::domain::NodeIndex;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistanceError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("metric {0} is only defined on scalars, got length {1}")]
    NotScalar(Metric, usize),
    #[error("diameter of an empty result set")]
    Empty,
    #[error("need at least {needed} results, have {have}")]
    InsufficientResults { needed: usize, have: usize },
    #[error("invalid distance descriptor {0:?}")]
    BadDescriptor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Euclidean,
    /// Absolute difference of scalar results (`max(set) - min(set)` over a set).
    MaxMinusMin,
    Chebyshev,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Euclidean, Metric::MaxMinusMin, Metric::Chebyshev];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::MaxMinusMin => "max_minus_min",
            Metric::Chebyshev => "chebyshev",
        }
    }

    /// Whether the metric is defined for results of this length.
    pub fn accepts_dim(self, dim: usize) -> bool {
        match self {
            Metric::MaxMinusMin => dim == 1,
            _ => dim >= 1,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Metric::Euclidean => 0,
            Metric::MaxMinusMin => 1,
            Metric::Chebyshev => 2,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = DistanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DistanceError::BadDescriptor(s.to_string()))
    }
}

impl Encode for Metric {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.tag(self.tag());
    }
}

impl Decode for Metric {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let tag = dec.tag()?;
        Metric::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or(CodecError::InvalidTag { ty: "Metric", tag })
    }
}

/// A named metric plus the group's default agreement threshold.
/// The selection rule is always "largest subset within epsilon".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceDescriptor {
    pub metric: Metric,
    pub default_epsilon: f64,
}

impl DistanceDescriptor {
    pub fn new(metric: Metric, default_epsilon: f64) -> Result<Self, DistanceError> {
        if !(default_epsilon >= 0.0) {
            return Err(DistanceError::BadDescriptor(format!(
                "{metric}:{default_epsilon}"
            )));
        }
        Ok(Self {
            metric,
            default_epsilon,
        })
    }

    pub fn is_valid(&self) -> bool {
        self.default_epsilon >= 0.0
    }

    /// Threshold to apply: the client's override when present.
    pub fn effective_epsilon(&self, override_eps: Option<f64>) -> f64 {
        override_eps.unwrap_or(self.default_epsilon)
    }
}

impl fmt::Display for DistanceDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.metric, self.default_epsilon)
    }
}

/// Parses the `metric:epsilon` text form, e.g. `max_minus_min:0.2`.
impl FromStr for DistanceDescriptor {
    type Err = DistanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, e) = s
            .split_once(':')
            .ok_or_else(|| DistanceError::BadDescriptor(s.to_string()))?;
        let metric: Metric = m.trim().parse()?;
        let eps: f64 = e
            .trim()
            .parse()
            .map_err(|_| DistanceError::BadDescriptor(s.to_string()))?;
        DistanceDescriptor::new(metric, eps)
    }
}

impl Encode for DistanceDescriptor {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.put(&self.metric);
        enc.put(&self.default_epsilon);
    }
}

impl Decode for DistanceDescriptor {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let metric = dec.get()?;
        let default_epsilon: f64 = dec.get()?;
        if !(default_epsilon >= 0.0) {
            return Err(CodecError::Invalid("negative epsilon"));
        }
        Ok(Self {
            metric,
            default_epsilon,
        })
    }
}

pub fn delta(metric: Metric, x: &[f64], y: &[f64]) -> Result<f64, DistanceError> {
    if x.len() != y.len() {
        return Err(DistanceError::LengthMismatch(x.len(), y.len()));
    }
    Ok(match metric {
        Metric::Euclidean => x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        Metric::Chebyshev => x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        Metric::MaxMinusMin => {
            if x.len() != 1 {
                return Err(DistanceError::NotScalar(metric, x.len()));
            }
            (x[0] - y[0]).abs()
        }
    })
}

/// Largest pairwise distance; zero for a single result.
pub fn diameter(metric: Metric, results: &[&[f64]]) -> Result<f64, DistanceError> {
    if results.is_empty() {
        return Err(DistanceError::Empty);
    }
    let mut max = 0.0f64;
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let d = delta(metric, results[i], results[j])?;
            // NaN must dominate so that it can never satisfy a bound.
            if d.is_nan() || d > max {
                max = d;
            }
        }
    }
    Ok(max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementOutcome {
    pub selected: BTreeSet<NodeIndex>,
    /// Diameter of `selected`; infinite when no subset qualified.
    pub diameter: f64,
    pub satisfied: bool,
}

impl AgreementOutcome {
    pub fn unsatisfied() -> Self {
        Self {
            selected: BTreeSet::new(),
            diameter: f64::INFINITY,
            satisfied: false,
        }
    }
}

/// Picks the largest subset of at least `n - f` results whose diameter is at
/// most `epsilon`.
///
/// Ties between equally large subsets go to the smaller diameter, then to the
/// lexicographically smallest sorted tuple of node indices, so every honest
/// node derives the same set from the same inputs.
pub fn select_quorum(
    results: &BTreeMap<NodeIndex, Vec<f64>>,
    n: usize,
    f: usize,
    metric: Metric,
    epsilon: f64,
) -> Result<AgreementOutcome, DistanceError> {
    let needed = n.saturating_sub(f).max(1);
    if results.len() < needed {
        return Err(DistanceError::InsufficientResults {
            needed,
            have: results.len(),
        });
    }
    let nodes: Vec<NodeIndex> = results.keys().copied().collect();
    let vecs: Vec<&[f64]> = results.values().map(Vec::as_slice).collect();
    let m = nodes.len();

    let mut dist = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = delta(metric, vecs[i], vecs[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let within = |d: f64| d <= epsilon;

    for size in (needed..=m).rev() {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for combo in Combinations::new(m, size) {
            let mut diam = 0.0f64;
            let mut ok = true;
            'outer: for (a, &i) in combo.iter().enumerate() {
                for &j in &combo[a + 1..] {
                    let d = dist[i][j];
                    if !within(d) {
                        ok = false;
                        break 'outer;
                    }
                    diam = diam.max(d);
                }
            }
            if !ok {
                continue;
            }
            // Combinations arrive in lexicographic order, so only a strictly
            // smaller diameter displaces the incumbent.
            if best.as_ref().is_none_or(|(bd, _)| diam < *bd) {
                best = Some((diam, combo.clone()));
            }
        }
        if let Some((diam, combo)) = best {
            return Ok(AgreementOutcome {
                selected: combo.into_iter().map(|i| nodes[i]).collect(),
                diameter: diam,
                satisfied: true,
            });
        }
    }
    Ok(AgreementOutcome::unsatisfied())
}

/// k-combinations of `0..n` in lexicographic order.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        let current = (k <= n).then(|| (0..k).collect());
        Self { n, current }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.current = Some(next);
                break;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(vals: &[f64]) -> BTreeMap<NodeIndex, Vec<f64>> {
        vals.iter()
            .enumerate()
            .map(|(i, v)| (i as NodeIndex, vec![*v]))
            .collect()
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta(Metric::Euclidean, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(delta(Metric::Chebyshev, &[1.0, 2.0], &[4.0, 0.0]).unwrap(), 3.0);
        for m in Metric::ALL {
            assert_eq!(delta(m, &[1.5], &[1.5]).unwrap(), 0.0);
        }
        assert!(matches!(
            delta(Metric::Euclidean, &[1.0], &[1.0, 2.0]),
            Err(DistanceError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            delta(Metric::MaxMinusMin, &[1.0, 2.0], &[1.0, 2.0]),
            Err(DistanceError::NotScalar(..))
        ));
    }

    #[test]
    fn diameter_examples() {
        assert_eq!(diameter(Metric::Euclidean, &[&[4.0]]).unwrap(), 0.0);
        let d = diameter(Metric::Euclidean, &[&[1.0], &[1.3], &[1.1]]).unwrap();
        assert!((d - 0.3).abs() < 1e-12);
        assert_eq!(diameter(Metric::Euclidean, &[]), Err(DistanceError::Empty));
    }

    #[test]
    fn quorum_excludes_outlier() {
        let out = select_quorum(&scalars(&[1.00, 1.01, 1.02, 5.0]), 4, 1, Metric::Euclidean, 0.2)
            .unwrap();
        assert!(out.satisfied);
        assert_eq!(out.selected, [0, 1, 2].into_iter().collect());
    }

    #[test]
    fn identical_results_select_everyone() {
        let out = select_quorum(&scalars(&[0.5; 4]), 4, 1, Metric::Euclidean, 0.0).unwrap();
        assert_eq!(out.selected.len(), 4);
        assert_eq!(out.diameter, 0.0);
    }

    #[test]
    fn spread_results_are_unsatisfied() {
        let out =
            select_quorum(&scalars(&[1.0, 1.5, 2.0, 2.5]), 4, 1, Metric::Euclidean, 0.2).unwrap();
        assert!(!out.satisfied);
        assert!(out.selected.is_empty());
    }

    #[test]
    fn too_few_results_is_an_error() {
        assert_eq!(
            select_quorum(&scalars(&[1.0, 1.0]), 4, 1, Metric::Euclidean, 1.0),
            Err(DistanceError::InsufficientResults { needed: 3, have: 2 })
        );
    }

    #[test]
    fn tie_break_prefers_smaller_diameter_then_lower_indices() {
        // {0,1,2} has diameter 0.2, {1,2,3} has 0.1: both size 3.
        let out =
            select_quorum(&scalars(&[0.0, 0.1, 0.2, 0.2]), 4, 1, Metric::Euclidean, 0.2).unwrap();
        assert_eq!(out.selected.len(), 4);
        let out =
            select_quorum(&scalars(&[0.0, 0.15, 0.2, 0.25]), 4, 1, Metric::Euclidean, 0.2)
                .unwrap();
        assert_eq!(out.selected, [1, 2, 3].into_iter().collect());
        // Equal diameters: lowest tuple wins.
        let out =
            select_quorum(&scalars(&[0.0, 0.125, 0.25, 0.375]), 4, 1, Metric::Euclidean, 0.25)
                .unwrap();
        assert_eq!(out.selected, [0, 1, 2].into_iter().collect());
    }

    #[test]
    fn infinite_epsilon_takes_all_present() {
        let out = select_quorum(&scalars(&[0.0, 1e9, -1e9]), 4, 1, Metric::Euclidean, f64::INFINITY)
            .unwrap();
        assert_eq!(out.selected.len(), 3);
    }

    #[test]
    fn nan_results_never_qualify() {
        let out = select_quorum(&scalars(&[1.0, 1.0, 1.0, f64::NAN]), 4, 1, Metric::Euclidean, 1.0)
            .unwrap();
        assert_eq!(out.selected, [0, 1, 2].into_iter().collect());
    }

    #[test]
    fn descriptor_text_form() {
        let d: DistanceDescriptor = "max_minus_min:0.2".parse().unwrap();
        assert_eq!(d.metric, Metric::MaxMinusMin);
        assert_eq!(d.default_epsilon, 0.2);
        assert_eq!(d.to_string(), "max_minus_min:0.2");
        assert!("cosine:1".parse::<DistanceDescriptor>().is_err());
        assert!("euclidean:-1".parse::<DistanceDescriptor>().is_err());
        let inf: DistanceDescriptor = "euclidean:inf".parse().unwrap();
        assert!(inf.default_epsilon.is_infinite());
    }

    #[test]
    fn combinations_enumerate_in_order() {
        let all: Vec<_> = Combinations::new(4, 2).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[5], vec![2, 3]);
        assert_eq!(Combinations::new(3, 0).count(), 1);
    }
}
