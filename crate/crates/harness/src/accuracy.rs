//! Ensemble accuracy on a synthetic classification task, with and without
//! dishonest group members.
//!
//! Each trial draws a true label and one confidence vector per model. The
//! vectors share a per-trial component, so models tend to err on the same
//! inputs, plus a per-model component. Model 0 is the weakest; the others
//! get a growing bonus on the true label. A fraction of trials are easy
//! (strong signal) and the rest hard.
//!
//! The group's epsilon is the largest Chebyshev distance two honest models
//! can produce, so honest results always form a quorum.

use std::collections::BTreeMap;

use quorate_core::distance::{select_quorum, Metric};
use quorate_core::domain::NodeIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigError;

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyConfig {
    pub group_size: usize,
    pub faulty: usize,
    pub classes: usize,
    pub trials: usize,
    pub seed: u64,
    /// Weight of the component shared by all models in a trial.
    pub shared: f64,
    pub easy_fraction: f64,
    pub easy_signal: f64,
    pub hard_signal: f64,
    /// True-label bonus of model 1; model k > 1 adds `skill_step` per step.
    pub skill_base: f64,
    pub skill_step: f64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            faulty: 1,
            classes: 1000,
            trials: 10_000,
            seed: 1,
            shared: 0.5,
            easy_fraction: 0.4,
            easy_signal: 1.0,
            hard_signal: 0.4,
            skill_base: 0.15,
            skill_step: 0.02,
        }
    }
}

impl AccuracyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.group_size == 0 {
            return bad("group size must be positive");
        }
        if 3 * self.faulty >= self.group_size {
            return bad("need 3f < group size");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if !(0.0..1.0).contains(&self.shared) || !(0.0..=1.0).contains(&self.easy_fraction) {
            return bad("shared weight must be in [0,1) and easy fraction in [0,1]");
        }
        Ok(())
    }

    pub fn skills(&self) -> Vec<f64> {
        (0..self.group_size)
            .map(|k| match k {
                0 => 0.0,
                k => self.skill_base + self.skill_step * (k - 1) as f64,
            })
            .collect()
    }

    /// Largest honest pairwise distance, plus a hair for float rounding.
    pub fn epsilon(&self) -> f64 {
        let s = self.skills();
        let spread = s.iter().cloned().fold(f64::MIN, f64::max) - s.iter().cloned().fold(f64::MAX, f64::min);
        spread + (1.0 - self.shared) + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub config: AccuracyConfig,
    pub epsilon: f64,
    pub single: Vec<f64>,
    pub honest: f64,
    /// Trials where every honest result was selected.
    pub honest_quorum_full: f64,
    /// Dishonest results beyond epsilon of every honest result.
    pub beyond: f64,
    pub beyond_excluded: f64,
    /// Ensemble over the honest results only, for comparison with `beyond`.
    pub honest_only: f64,
    /// Dishonest nodes (chosen among those that were right) move their own
    /// result toward their runner-up label as far as epsilon allows.
    pub steered: f64,
    /// Dishonest nodes back whichever wrong label an honest node predicted,
    /// at the highest confidence epsilon allows.
    pub colluding: f64,
}

impl AccuracyReport {
    pub fn best_single(&self) -> f64 {
        self.single.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn worst_single(&self) -> f64 {
        self.single.iter().cloned().fold(f64::MAX, f64::min)
    }

    /// Accuracy under the stronger of the two within-epsilon adversaries.
    pub fn worst_case_within(&self) -> f64 {
        self.steered.min(self.colluding)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Label with the highest confidence among those predicted by more than `f`
/// of the results; `None` if no label has that support.
pub fn ensemble_label(results: &[&[f64]], f: usize) -> Option<usize> {
    let preds: Vec<(usize, f64)> = results.iter().map(|r| {
        let l = argmax(r);
        (l, r[l])
    }).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1).then(a.cmp(&b)));
    order.into_iter().map(|i| preds[i].0).find(|&l| preds.iter().filter(|p| p.0 == l).count() > f)
}

struct Group<'a> {
    cfg: &'a AccuracyConfig,
    epsilon: f64,
}

impl Group<'_> {
    /// Selects the trustworthy subset and applies the ensemble rule.
    fn decide(&self, outputs: &[Vec<f64>]) -> (Option<usize>, Vec<NodeIndex>) {
        let results: BTreeMap<NodeIndex, Vec<f64>> =
            outputs.iter().enumerate().map(|(i, v)| (i as NodeIndex, v.clone())).collect();
        let n = self.cfg.group_size;
        let q = select_quorum(&results, n, self.cfg.faulty, Metric::Chebyshev, self.epsilon)
            .expect("group returns n results of equal length");
        if !q.satisfied {
            return (None, Vec::new());
        }
        let selected: Vec<NodeIndex> = q.selected.into_iter().collect();
        let chosen: Vec<&[f64]> = selected.iter().map(|&i| outputs[i as usize].as_slice()).collect();
        (ensemble_label(&chosen, self.cfg.faulty), selected)
    }

    /// Per-coordinate range that keeps a vector within epsilon of every
    /// result in `honest`.
    fn bounds(&self, honest: &[&Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let c = self.cfg.classes;
        let mut lo = vec![f64::MIN; c];
        let mut hi = vec![f64::MAX; c];
        for h in honest {
            for j in 0..c {
                lo[j] = lo[j].max(h[j] - self.epsilon);
                hi[j] = hi[j].min(h[j] + self.epsilon);
            }
        }
        (lo, hi)
    }
}

fn sample(cfg: &AccuracyConfig, skills: &[f64], rng: &mut ChaCha8Rng) -> (usize, Vec<Vec<f64>>) {
    let c = cfg.classes;
    let y = rng.gen_range(0..c);
    let signal = if rng.gen_bool(cfg.easy_fraction) {
        cfg.easy_signal
    } else {
        cfg.hard_signal
    };
    let base: Vec<f64> = (0..c).map(|_| cfg.shared * rng.gen::<f64>()).collect();
    let outputs = skills
        .iter()
        .map(|s| {
            let mut v: Vec<f64> = base.iter().map(|b| b + (1.0 - cfg.shared) * rng.gen::<f64>()).collect();
            v[y] += signal + s;
            v
        })
        .collect();
    (y, outputs)
}

/// Worst case for the dishonest set: nodes that predicted correctly, most
/// skilled first, topped up with the most skilled of the rest.
fn pick_dishonest(outputs: &[Vec<f64>], y: usize, f: usize) -> Vec<usize> {
    let by_skill: Vec<usize> = (0..outputs.len()).rev().collect();
    let mut picked: Vec<usize> = by_skill.iter().copied().filter(|&k| argmax(&outputs[k]) == y).take(f).collect();
    for k in by_skill {
        if picked.len() == f {
            break;
        }
        if !picked.contains(&k) {
            picked.push(k);
        }
    }
    picked
}

pub fn run_accuracy(cfg: &AccuracyConfig) -> Result<AccuracyReport, ConfigError> {
    cfg.validate()?;
    let n = cfg.group_size;
    let f = cfg.faulty;
    let skills = cfg.skills();
    let group = Group {
        cfg,
        epsilon: cfg.epsilon(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut single = vec![0usize; n];
    let (mut honest, mut full, mut beyond, mut excluded, mut honest_only, mut steered, mut colluding) =
        (0usize, 0usize, 0usize, 0usize, 0usize, 0usize, 0usize);

    for _ in 0..cfg.trials {
        let (y, outputs) = sample(cfg, &skills, &mut rng);
        for (k, v) in outputs.iter().enumerate() {
            single[k] += usize::from(argmax(v) == y);
        }
        let (label, selected) = group.decide(&outputs);
        honest += usize::from(label == Some(y));
        full += usize::from(selected.len() == n);

        let bad = pick_dishonest(&outputs, y, f);
        let honest_set: Vec<&Vec<f64>> = (0..n).filter(|k| !bad.contains(k)).map(|k| &outputs[k]).collect();
        let (lo, hi) = group.bounds(&honest_set);

        // Beyond epsilon: the runner-up label pushed past every honest score.
        let mut out = outputs.clone();
        for &k in &bad {
            let w = runner_up(&outputs[k], y);
            let top = honest_set.iter().map(|h| h[w]).fold(f64::MIN, f64::max);
            out[k][w] = top + 2.0 * group.epsilon;
        }
        let (label, selected) = group.decide(&out);
        beyond += usize::from(label == Some(y));
        excluded += usize::from(bad.iter().all(|&k| !selected.contains(&(k as NodeIndex))));
        let refs: Vec<&[f64]> = honest_set.iter().map(|v| v.as_slice()).collect();
        honest_only += usize::from(ensemble_label(&refs, f) == Some(y));

        let mut out = outputs.clone();
        for &k in &bad {
            let w = runner_up(&outputs[k], y);
            out[k][y] = lo[y];
            out[k][w] = hi[w];
        }
        steered += usize::from(group.decide(&out).0 == Some(y));

        let mut targets: Vec<usize> = honest_set.iter().map(|h| argmax(h)).filter(|&l| l != y).collect();
        targets.push(runner_up(&outputs[bad[0]], y));
        targets.sort_unstable();
        targets.dedup();
        let mut fooled = false;
        for w in targets {
            let mut out = outputs.clone();
            for &k in &bad {
                out[k] = lo.clone();
                out[k][w] = hi[w];
            }
            if group.decide(&out).0 != Some(y) {
                fooled = true;
                break;
            }
        }
        colluding += usize::from(!fooled);
    }

    let t = cfg.trials.max(1) as f64;
    let frac = |x: usize| x as f64 / t;
    Ok(AccuracyReport {
        config: cfg.clone(),
        epsilon: group.epsilon,
        single: single.into_iter().map(frac).collect(),
        honest: frac(honest),
        honest_quorum_full: frac(full),
        beyond: frac(beyond),
        beyond_excluded: frac(excluded),
        honest_only: frac(honest_only),
        steered: frac(steered),
        colluding: frac(colluding),
    })
}

fn runner_up(v: &[f64], y: usize) -> usize {
    let mut best = usize::from(y == 0);
    for (i, x) in v.iter().enumerate() {
        if i != y && *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_prefers_confident_label_with_support() {
        let a = [0.9, 0.1, 0.0];
        let b = [0.2, 0.7, 0.0];
        let c = [0.1, 0.8, 0.0];
        // Label 0 is most confident but has a single vote.
        assert_eq!(ensemble_label(&[&a, &b, &c], 1), Some(1));
        assert_eq!(ensemble_label(&[&a, &b, &c], 0), Some(0));
        assert_eq!(ensemble_label(&[&a, &b], 1), None);
    }

    #[test]
    fn honest_outputs_stay_within_epsilon() {
        let cfg = AccuracyConfig {
            classes: 50,
            ..AccuracyConfig::default()
        };
        let skills = cfg.skills();
        let eps = cfg.epsilon();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (_, out) = sample(&cfg, &skills, &mut rng);
            for a in &out {
                for b in &out {
                    let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(d <= eps);
                }
            }
        }
    }

    #[test]
    fn runner_up_skips_true_label() {
        assert_eq!(runner_up(&[0.5, 0.9, 0.1], 1), 0);
        assert_eq!(runner_up(&[0.1, 0.9, 0.5], 0), 1);
        assert_eq!(runner_up(&[0.9, 0.1, 0.5], 0), 2);
    }

    #[test]
    fn rejects_too_many_faulty() {
        let cfg = AccuracyConfig {
            faulty: 2,
            ..AccuracyConfig::default()
        };
        assert!(run_accuracy(&cfg).is_err());
    }
}
