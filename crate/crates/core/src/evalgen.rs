//! Generalization of segments to out-of-sample rows.
//!
//! Ground truth for a row is the cluster label it receives when the whole
//! dataset is segmented. Each fold segments only its training rows, matches
//! those clusters to the full-data clusters, then labels the held-out rows
//! with the fold's forest and scores them against the ground truth.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::pipeline::{self, PipelineConfig, Prepared, SegmentationResult};
use crate::seed;

/// Folds used to score each candidate constant inside a training set.
pub const INNER_FOLDS: usize = 5;

/// Default ε-constant grid: 0.02, 0.04, ..., 0.30.
pub fn default_grid() -> Vec<f64> {
    (1..=15).map(|k| f64::from(k) * 0.02).collect()
}

/// For each training cluster (by label), the matched full-data cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingPermutation {
    pub best_perm: Vec<Option<usize>>,
}

impl MatchingPermutation {
    pub fn translate(&self, train_label: usize) -> Option<usize> {
        self.best_perm.get(train_label).copied().flatten()
    }

    pub fn n_unmatched(&self) -> usize {
        self.best_perm.iter().filter(|m| m.is_none()).count()
    }
}

/// Greedy largest-intersection matching. Training clusters are visited in
/// order; each takes the not-yet-used full-data cluster it overlaps most,
/// ties going to the smaller full-data label. No overlap leaves it
/// unmatched.
pub fn match_clusters(train_clusters: &[Vec<usize>], full_clusters: &[Vec<usize>]) -> MatchingPermutation {
    let full_sets: Vec<HashSet<usize>> = full_clusters.iter().map(|c| c.iter().copied().collect()).collect();
    let mut used = vec![false; full_clusters.len()];
    let mut best_perm = Vec::with_capacity(train_clusters.len());
    for cluster in train_clusters {
        let mut best_sum = 0;
        let mut best = None;
        for (idx, set) in full_sets.iter().enumerate() {
            let this_sum = cluster.iter().filter(|r| set.contains(r)).count();
            if this_sum > best_sum && !used[idx] {
                best_sum = this_sum;
                best = Some(idx);
            }
        }
        if let Some(idx) = best {
            used[idx] = true;
        }
        best_perm.push(best);
    }
    MatchingPermutation { best_perm }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
}

impl Metrics {
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            accuracy: avg(|m| m.accuracy),
            precision_weighted: avg(|m| m.precision_weighted),
            recall_weighted: avg(|m| m.recall_weighted),
            f1_weighted: avg(|m| m.f1_weighted),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.accuracy,
            self.precision_weighted,
            self.recall_weighted,
            self.f1_weighted,
        ]
    }

    /// `accuracy & precision & recall & f1`, three decimals each.
    pub fn table_row(&self) -> String {
        self.as_array()
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

/// Accuracy plus one-vs-rest precision, recall and F1 averaged with weights
/// proportional to each true class's support. Classes that occur only in
/// the predictions carry zero weight.
pub fn weighted_metrics<T: Ord + Clone>(y_true: &[T], y_pred: &[T]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true labels, {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::InvalidDataset("metrics need at least one label".into()));
    }
    // (support, predicted, true positives)
    let mut stats: BTreeMap<&T, (usize, usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (t, p) in y_true.iter().zip(y_pred) {
        stats.entry(t).or_default().0 += 1;
        stats.entry(p).or_default().1 += 1;
        if t == p {
            stats.get_mut(t).expect("inserted").2 += 1;
            correct += 1;
        }
    }
    let n = y_true.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for &(support, predicted, tp) in stats.values() {
        if support == 0 {
            continue;
        }
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support as f64 / n;
        precision += w * p;
        recall += w * r;
        f1 += w * f;
    }
    Ok(Metrics {
        accuracy: correct as f64 / n,
        precision_weighted: precision,
        recall_weighted: recall,
        f1_weighted: f1,
    })
}

/// Result of scoring one held-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub metrics: Metrics,
    pub permutation: MatchingPermutation,
    pub n_train_clusters: usize,
    pub n_full_clusters: usize,
    pub n_test: usize,
}

/// Scores a training-rows segmentation against full-data labels on the
/// held-out rows.
pub fn score_fold(
    data: &Dataset,
    full_labels: &[usize],
    n_full_clusters: usize,
    train_idx: &[usize],
    test_idx: &[usize],
    train_seg: &SegmentationResult,
) -> Result<FoldOutcome> {
    let train_clusters: Vec<Vec<usize>> = train_seg
        .assignment
        .members()
        .into_iter()
        .map(|m| m.into_iter().map(|i| train_idx[i]).collect())
        .collect();
    let mut full_clusters = vec![Vec::new(); n_full_clusters];
    for &r in train_idx {
        full_clusters[full_labels[r]].push(r);
    }
    let permutation = match_clusters(&train_clusters, &full_clusters);
    let predicted = train_seg.predict(&data.subset(test_idx)?)?;
    let y_pred: Vec<Option<usize>> = predicted.iter().map(|&l| permutation.translate(l)).collect();
    let y_true: Vec<Option<usize>> = test_idx.iter().map(|&r| Some(full_labels[r])).collect();
    Ok(FoldOutcome {
        metrics: weighted_metrics(&y_true, &y_pred)?,
        permutation,
        n_train_clusters: train_clusters.len(),
        n_full_clusters,
        n_test: test_idx.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub epsilon_constant: f64,
    /// Clusters found on the whole tuning set at this constant.
    pub n_clusters: usize,
    pub n_non_singleton: usize,
    pub admissible: bool,
    /// Per inner fold; empty when the constant was not admissible.
    pub fold_f1: Vec<f64>,
    pub mean_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub min_clusters: usize,
    pub inner_folds: usize,
    pub candidates: Vec<CandidateScore>,
    pub chosen: f64,
}

impl TuningReport {
    pub fn chosen_score(&self) -> Option<&CandidateScore> {
        self.candidates.iter().find(|c| c.epsilon_constant == self.chosen)
    }
}

fn with_constant(cfg: &PipelineConfig, c: f64) -> crate::dbscan::DbscanConfig {
    crate::dbscan::DbscanConfig {
        epsilon_constant: c,
        ..cfg.dbscan.clone()
    }
}

/// Chooses the grid constant with the best inner cross-validated weighted
/// F1 among constants whose clustering of all of `train` has at least
/// `min_clusters` non-singleton clusters. Ties go to the smaller constant.
pub fn tune_epsilon(train: &Dataset, grid: &[f64], cfg: &PipelineConfig, min_clusters: usize) -> Result<TuningReport> {
    let prepared = pipeline::prepare(train, cfg)?;
    tune_prepared(train, &prepared, grid, cfg, min_clusters)
}

/// [`tune_epsilon`] reusing an existing embedding of `train`.
pub fn tune_prepared(
    train: &Dataset,
    prepared: &Prepared,
    grid: &[f64],
    cfg: &PipelineConfig,
    min_clusters: usize,
) -> Result<TuningReport> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("epsilon grid is empty".into()));
    }
    if let Some(c) = grid.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "epsilon constant must be positive, got {c}"
        )));
    }
    let full: Vec<_> = grid
        .iter()
        .map(|&c| prepared.cluster(&with_constant(cfg, c)))
        .collect::<Result<_>>()?;
    let admissible: Vec<bool> = full.iter().map(|a| a.n_non_singleton() >= min_clusters).collect();
    if !admissible.iter().any(|&a| a) {
        return Err(Error::NoAdmissibleEpsilon { min_clusters });
    }

    let plan = dataset::split_folds(train, INNER_FOLDS, seed::derive(cfg.tsne.seed, "inner-folds"))?;
    // Per inner fold, per admissible constant: weighted F1.
    let per_fold: Vec<Vec<Option<f64>>> = (0..INNER_FOLDS)
        .into_par_iter()
        .map(|f| -> Result<Vec<Option<f64>>> {
            let train_idx = plan.train_indices(f);
            let test_idx = plan.test_indices(f);
            let inner = pipeline::prepare(&train.subset(&train_idx)?, cfg)?;
            grid.iter()
                .zip(&full)
                .zip(&admissible)
                .map(|((&c, truth), &ok)| {
                    if !ok {
                        return Ok(None);
                    }
                    let seg = inner.finish(&with_constant(cfg, c), &cfg.forest)?;
                    let out = score_fold(train, &truth.labels, truth.n_clusters(), &train_idx, &test_idx, &seg)?;
                    Ok(Some(out.metrics.f1_weighted))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut candidates = Vec::with_capacity(grid.len());
    for (g, (&c, truth)) in grid.iter().zip(&full).enumerate() {
        let fold_f1: Vec<f64> = per_fold.iter().filter_map(|row| row[g]).collect();
        let mean_f1 = (!fold_f1.is_empty()).then(|| fold_f1.iter().sum::<f64>() / fold_f1.len() as f64);
        candidates.push(CandidateScore {
            epsilon_constant: c,
            n_clusters: truth.n_clusters(),
            n_non_singleton: truth.n_non_singleton(),
            admissible: admissible[g],
            fold_f1,
            mean_f1,
        });
    }
    let chosen = candidates
        .iter()
        .filter_map(|c| c.mean_f1.map(|f| (f, c.epsilon_constant)))
        .fold(None::<(f64, f64)>, |best, (f, c)| match best {
            Some((bf, bc)) if bf > f || (bf == f && bc <= c) => Some((bf, bc)),
            _ => Some((f, c)),
        })
        .map(|(_, c)| c)
        .expect("at least one admissible constant");
    Ok(TuningReport {
        min_clusters,
        inner_folds: INNER_FOLDS,
        candidates,
        chosen,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub epsilon_constant: f64,
    pub metrics: Metrics,
    pub permutation: MatchingPermutation,
    pub n_train_clusters: usize,
    pub n_full_clusters: usize,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub k: usize,
    pub fold_seed: u64,
    /// True when a single grid value was used without inner tuning.
    pub fixed_epsilon: bool,
    pub ground_truth_epsilon_constant: f64,
    pub ground_truth_cluster_sizes: Vec<usize>,
    pub per_fold: Vec<FoldReport>,
    pub epsilon_constants_used: Vec<f64>,
    pub mean_weighted: Metrics,
    /// Mean accuracy, precision, recall and F1 as one table row.
    pub summary_row: String,
}

/// k-fold generalization of the whole segmentation. A one-element grid is
/// used as a fixed constant everywhere; otherwise the constant is tuned by
/// inner cross validation, on the full data for the ground truth and on
/// each fold's training rows for that fold.
pub fn generalization_run(
    d: &Dataset,
    cfg: &PipelineConfig,
    k: usize,
    grid: &[f64],
    min_clusters: usize,
    fold_seed: u64,
) -> Result<GeneralizationReport> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("epsilon grid is empty".into()));
    }
    let plan = dataset::split_folds(d, k, fold_seed)?;
    let fixed = grid.len() == 1;
    let choose = |data: &Dataset, prepared: &Prepared| -> Result<f64> {
        if fixed {
            Ok(grid[0])
        } else {
            Ok(tune_prepared(data, prepared, grid, cfg, min_clusters)?.chosen)
        }
    };

    let full = pipeline::prepare(d, cfg)?;
    let gt_constant = choose(d, &full)?;
    let truth = full.cluster(&with_constant(cfg, gt_constant))?;

    let per_fold: Vec<FoldReport> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<FoldReport> {
            let train_idx = plan.train_indices(f);
            let test_idx = plan.test_indices(f);
            let train = d.subset(&train_idx)?;
            let prepared = pipeline::prepare(&train, cfg)?;
            let c = choose(&train, &prepared)?;
            let seg = prepared.finish(&with_constant(cfg, c), &cfg.forest)?;
            let out = score_fold(d, &truth.labels, truth.n_clusters(), &train_idx, &test_idx, &seg)?;
            Ok(FoldReport {
                fold: f,
                epsilon_constant: c,
                metrics: out.metrics,
                permutation: out.permutation,
                n_train_clusters: out.n_train_clusters,
                n_full_clusters: out.n_full_clusters,
                n_train: train_idx.len(),
                n_test: out.n_test,
            })
        })
        .collect::<Result<_>>()?;

    let metrics: Vec<Metrics> = per_fold.iter().map(|f| f.metrics).collect();
    let mean_weighted = Metrics::mean(&metrics);
    Ok(GeneralizationReport {
        k,
        fold_seed,
        fixed_epsilon: fixed,
        ground_truth_epsilon_constant: gt_constant,
        ground_truth_cluster_sizes: truth.cluster_sizes.clone(),
        epsilon_constants_used: per_fold.iter().map(|f| f.epsilon_constant).collect(),
        per_fold,
        summary_row: mean_weighted.table_row(),
        mean_weighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_partitions_match_identically() {
        let c = vec![vec![0, 1, 2, 3], vec![4, 5], vec![6]];
        assert_eq!(match_clusters(&c, &c).best_perm, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn swapped_labels_are_recovered() {
        let train = vec![vec![0, 1, 2], vec![3, 4]];
        let full = vec![vec![3, 4], vec![0, 1, 2]];
        assert_eq!(match_clusters(&train, &full).best_perm, vec![Some(1), Some(0)]);
    }

    #[test]
    fn extra_training_cluster_is_unmatched() {
        let train = vec![vec![0, 1, 2], vec![3, 4], vec![5]];
        let full = vec![vec![0, 1, 2, 5], vec![3, 4]];
        let m = match_clusters(&train, &full);
        assert_eq!(m.best_perm, vec![Some(0), Some(1), None]);
        assert_eq!(m.n_unmatched(), 1);
        assert_eq!(m.translate(2), None);
    }

    #[test]
    fn used_clusters_are_skipped() {
        // Both training clusters overlap full cluster 0 most; the second
        // falls back to its next-best overlap.
        let train = vec![vec![0, 1, 2, 3], vec![4, 5, 6]];
        let full = vec![vec![0, 1, 2, 3, 4, 5], vec![6]];
        assert_eq!(match_clusters(&train, &full).best_perm, vec![Some(0), Some(1)]);
    }

    #[test]
    fn overlap_ties_go_to_smaller_label() {
        let train = vec![vec![0, 1]];
        let full = vec![vec![0], vec![1]];
        assert_eq!(match_clusters(&train, &full).best_perm, vec![Some(0)]);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let m = weighted_metrics(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap();
        assert_eq!(m.as_array(), [1.0; 4]);
    }

    #[test]
    fn hand_computed_case() {
        let m = weighted_metrics(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_abs_diff_eq!(m.accuracy, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.precision_weighted, 5.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.recall_weighted, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.f1_weighted, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn unmatched_predictions_hurt_recall_not_precision() {
        let truth = [Some(0), Some(0), Some(1), Some(1)];
        let pred = [Some(0), None, Some(1), Some(1)];
        let m = weighted_metrics(&truth, &pred).unwrap();
        assert_abs_diff_eq!(m.accuracy, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(m.precision_weighted, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.recall_weighted, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn metric_errors() {
        assert!(weighted_metrics(&[0, 1], &[0]).is_err());
        assert!(weighted_metrics::<usize>(&[], &[]).is_err());
    }

    #[test]
    fn default_grid_values() {
        let g = default_grid();
        assert_eq!(g.len(), 15);
        assert_abs_diff_eq!(g[0], 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(g[14], 0.30, epsilon = 1e-15);
    }

    #[test]
    fn table_row_format() {
        let m = Metrics {
            accuracy: 1.0,
            precision_weighted: 0.9964,
            recall_weighted: 0.5,
            f1_weighted: 0.0,
        };
        assert_eq!(m.table_row(), "1.000 & 0.996 & 0.500 & 0.000");
    }
}
