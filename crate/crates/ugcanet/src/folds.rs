//! Deterministic stratified k-fold planning.
//!
//! Samples are grouped by stratum key, each stratum is shuffled with its own
//! named substream, and members are dealt round-robin so per-stratum fold
//! sizes differ by at most one. Strata smaller than `k` are assigned
//! best-effort and recorded as warnings on the plan.

use crate::nn::heads::TaskIndicator;
use crate::rng;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum FoldError {
    #[error("fold count must be >= 2, got {0}")]
    BadK(usize),
    #[error("cannot plan folds over an empty sample list")]
    Empty,
}

/// Fold assignment for a dataset, plus the per-sample task-indicator vector.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index per sample, parallel to the input order.
    pub assignment: Vec<usize>,
    /// Task indicators per sample, copied from the input.
    pub mu: Vec<TaskIndicator>,
    /// Strata with fewer members than folds (best-effort assignment).
    pub warnings: Vec<String>,
}

impl FoldPlan {
    /// Sample indices held out by `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Plan `k` folds over `(stratum key, task indicator)` samples,
/// deterministically for a given seed.
pub fn stratified_kfold(
    samples: &[(String, TaskIndicator)],
    k: usize,
    seed: u64,
) -> Result<FoldPlan, FoldError> {
    if k < 2 {
        return Err(FoldError::BadK(k));
    }
    if samples.is_empty() {
        return Err(FoldError::Empty);
    }
    // BTreeMap fixes the stratum iteration order independent of input order.
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (key, _)) in samples.iter().enumerate() {
        strata.entry(key.as_str()).or_default().push(i);
    }
    let mut assignment = vec![0usize; samples.len()];
    let mut warnings = Vec::new();
    for (si, (key, members)) in strata.iter_mut().enumerate() {
        if members.len() < k {
            warnings.push(format!(
                "stratum {key:?} has {} samples for {k} folds; some folds will lack it",
                members.len()
            ));
        }
        let mut stream = rng::stream(seed, &format!("folds.{key}"));
        members.shuffle(&mut stream);
        // Rotate the dealing start per stratum so remainders spread across
        // folds instead of always landing in fold 0.
        let start = si % k;
        for (j, &idx) in members.iter().enumerate() {
            assignment[idx] = (start + j) % k;
        }
    }
    Ok(FoldPlan {
        k,
        assignment,
        mu: samples.iter().map(|(_, mu)| *mu).collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn keyed(counts: &[(&str, usize)]) -> Vec<(String, TaskIndicator)> {
        let mut out = Vec::new();
        for (key, n) in counts {
            for _ in 0..*n {
                out.push((key.to_string(), TaskIndicator::all()));
            }
        }
        out
    }

    fn per_stratum_fold_counts(
        samples: &[(String, TaskIndicator)],
        plan: &FoldPlan,
        key: &str,
    ) -> Vec<usize> {
        let mut counts = vec![0usize; plan.k];
        for (i, (k, _)) in samples.iter().enumerate() {
            if k == key {
                counts[plan.assignment[i]] += 1;
            }
        }
        counts
    }

    #[test]
    fn ten_samples_one_stratum_five_folds_of_two() {
        let samples = keyed(&[("a", 10)]);
        let plan = stratified_kfold(&samples, 5, 1).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2, 2, 2, 2, 2]);
        assert!(plan.warnings.is_empty());
    }

    #[test]
    fn pharynx_lighting_mode_counts() {
        // 550 samples across lighting modes 177/134/120/119; five folds must
        // hold 35-or-36 WLI images each, and the ceil/floor analogue for the
        // other modes.
        let samples = keyed(&[("wli", 177), ("fice", 134), ("bli", 120), ("lci", 119)]);
        let plan = stratified_kfold(&samples, 5, 7).unwrap();
        for (mode, total) in [("wli", 177usize), ("fice", 134), ("bli", 120), ("lci", 119)] {
            let counts = per_stratum_fold_counts(&samples, &plan, mode);
            let lo = total / 5;
            let hi = lo + usize::from(total % 5 != 0);
            for (f, &c) in counts.iter().enumerate() {
                assert!(
                    c == lo || c == hi,
                    "{mode} fold {f} holds {c}, expected {lo} or {hi}"
                );
            }
            assert_eq!(counts.iter().sum::<usize>(), total);
        }
        let wli = per_stratum_fold_counts(&samples, &plan, "wli");
        assert!(wli.iter().all(|&c| c == 35 || c == 36));
    }

    #[test]
    fn same_seed_same_plan_different_seed_differs() {
        let samples = keyed(&[("a", 20), ("b", 13)]);
        let p1 = stratified_kfold(&samples, 5, 42).unwrap();
        let p2 = stratified_kfold(&samples, 5, 42).unwrap();
        assert_eq!(p1.assignment, p2.assignment);
        let p3 = stratified_kfold(&samples, 5, 43).unwrap();
        assert_ne!(p1.assignment, p3.assignment);
    }

    #[test]
    fn small_stratum_warns_but_assigns() {
        let samples = keyed(&[("big", 12), ("tiny", 2)]);
        let plan = stratified_kfold(&samples, 5, 3).unwrap();
        assert_eq!(plan.warnings.len(), 1);
        assert!(plan.warnings[0].contains("tiny"));
        assert_eq!(plan.assignment.len(), 14);
    }

    #[test]
    fn rejects_k_below_two_and_empty_input() {
        assert!(matches!(
            stratified_kfold(&keyed(&[("a", 3)]), 1, 0),
            Err(FoldError::BadK(1))
        ));
        assert!(matches!(stratified_kfold(&[], 5, 0), Err(FoldError::Empty)));
    }

    #[test]
    fn partition_and_balance_hold_for_random_stratum_sizes() {
        let mut r = crate::rng::stream(99, "fold-prop");
        for trial in 0..100 {
            let strata: Vec<(String, usize)> = (0..r.random_range(1..6))
                .map(|i| (format!("s{i}"), r.random_range(1..40)))
                .collect();
            let samples: Vec<(String, TaskIndicator)> = strata
                .iter()
                .flat_map(|(k, n)| std::iter::repeat_n((k.clone(), TaskIndicator::all()), *n))
                .collect();
            let k = r.random_range(2..6);
            let plan = stratified_kfold(&samples, k, trial).unwrap();

            // Partition: every sample in exactly one fold.
            assert_eq!(plan.assignment.len(), samples.len());
            assert!(plan.assignment.iter().all(|&f| f < k));
            assert_eq!(plan.fold_sizes().iter().sum::<usize>(), samples.len());

            // Per-stratum balance within 1.
            for (key, _) in &strata {
                let counts = per_stratum_fold_counts(&samples, &plan, key);
                let (min, max) = (
                    counts.iter().min().unwrap(),
                    counts.iter().max().unwrap(),
                );
                assert!(max - min <= 1, "trial {trial} stratum {key}: {counts:?}");
            }
        }
    }
}
