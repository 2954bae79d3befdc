//! Density-based clustering of a 2-D embedding.
//!
//! The neighborhood radius is a constant times the mean pairwise distance of
//! the embedding. Final labels are ordered by cluster size so that cluster 0
//! is the largest.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tsne::Embedding;

/// What happens to points DBSCAN leaves unclustered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Each noise point becomes its own cluster.
    #[default]
    Singletons,
    /// All noise points share one cluster.
    SingleCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    /// Multiplier applied to the mean pairwise embedding distance.
    pub epsilon_constant: f64,
    pub min_pts: usize,
    /// Fewest non-singleton clusters accepted while tuning the constant.
    pub min_clusters: usize,
    #[serde(default)]
    pub noise: NoisePolicy,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self {
            epsilon_constant: 0.1,
            min_pts: 4,
            min_clusters: 1,
            noise: NoisePolicy::Singletons,
        }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_constant > 0.0) || !self.epsilon_constant.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon constant must be positive, got {}",
                self.epsilon_constant
            )));
        }
        if self.min_pts == 0 {
            return Err(Error::InvalidConfig("min_pts must be at least 1".into()));
        }
        if self.min_clusters == 0 {
            return Err(Error::InvalidConfig("min_clusters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-point labels in `0..n_clusters`, cluster 0 the largest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// Non-increasing; `cluster_sizes[k]` is the size of cluster `k`.
    pub cluster_sizes: Vec<usize>,
    pub epsilon_used: f64,
}

impl ClusterAssignment {
    pub fn n_points(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn n_non_singleton(&self) -> usize {
        self.cluster_sizes.iter().filter(|&&s| s > 1).count()
    }

    /// Row indices of every cluster, in label order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// `c` times the mean Euclidean distance over all unordered pairs.
pub fn epsilon_from_constant(e: &Embedding, c: f64) -> Result<f64> {
    epsilon_from_coords(&e.coords, c)
}

pub fn epsilon_from_coords(coords: &[[f64; 2]], c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "epsilon constant must be positive, got {c}"
        )));
    }
    Ok(c * mean_pairwise_distance(coords)?)
}

/// Mean Euclidean distance over all unordered pairs of points.
pub fn mean_pairwise_distance(coords: &[[f64; 2]]) -> Result<f64> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "mean pairwise distance needs at least 2 points, got {n}"
        )));
    }
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            coords[i + 1..]
                .iter()
                .map(|b| (coords[i][0] - b[0]).hypot(coords[i][1] - b[1]))
                .sum()
        })
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(row_sums.iter().sum::<f64>() / pairs)
}

/// Closed ε-neighborhoods, each including the point itself, in index order.
fn neighborhoods(coords: &[[f64; 2]], eps: f64) -> Vec<Vec<usize>> {
    let eps2 = eps * eps;
    (0..coords.len())
        .into_par_iter()
        .map(|i| {
            let a = coords[i];
            coords
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    let dx = a[0] - b[0];
                    let dy = a[1] - b[1];
                    dx * dx + dy * dy <= eps2
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Classic DBSCAN. Returns a raw cluster id per point, `None` for noise.
/// Clusters are numbered in the order their first core point is met while
/// scanning by index; a border point joins the first cluster that reaches
/// it.
pub fn dbscan_raw(coords: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    assert!(eps > 0.0 && min_pts >= 1, "eps must be positive and min_pts >= 1");
    let nbrs = neighborhoods(coords, eps);
    let core: Vec<bool> = nbrs.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; coords.len()];
    let mut next = 0;
    for start in 0..coords.len() {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        let id = next;
        next += 1;
        labels[start] = Some(id);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &nbrs[p] {
                if labels[q].is_none() {
                    labels[q] = Some(id);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
    }
    labels
}

/// Relabels raw DBSCAN output by size (largest first, ties to the group
/// holding the smallest point index) and turns noise into clusters
/// according to `policy`.
pub fn finalize_assignment(raw: &[Option<usize>], policy: NoisePolicy) -> ClusterAssignment {
    let n_raw = raw.iter().flatten().map(|&l| l + 1).max().unwrap_or(0);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_raw];
    let mut noise_group = Vec::new();
    for (i, l) in raw.iter().enumerate() {
        match (l, policy) {
            (Some(l), _) => groups[*l].push(i),
            (None, NoisePolicy::Singletons) => groups.push(vec![i]),
            (None, NoisePolicy::SingleCluster) => noise_group.push(i),
        }
    }
    if !noise_group.is_empty() {
        groups.push(noise_group);
    }
    groups.retain(|g| !g.is_empty());
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    let mut labels = vec![0; raw.len()];
    for (k, g) in groups.iter().enumerate() {
        for &i in g {
            labels[i] = k;
        }
    }
    ClusterAssignment {
        labels,
        cluster_sizes: groups.iter().map(Vec::len).collect(),
        epsilon_used: f64::NAN,
    }
}

pub fn cluster_embedding(e: &Embedding, cfg: &DbscanConfig) -> Result<ClusterAssignment> {
    cluster_coords(&e.coords, cfg)
}

pub fn cluster_coords(coords: &[[f64; 2]], cfg: &DbscanConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    let eps = epsilon_from_coords(coords, cfg.epsilon_constant)?;
    cluster_with_epsilon(coords, eps, cfg)
}

/// Clustering at an explicit radius, skipping the mean-distance scan.
pub(crate) fn cluster_with_epsilon(coords: &[[f64; 2]], eps: f64, cfg: &DbscanConfig) -> Result<ClusterAssignment> {
    if !(eps > 0.0) {
        // Every embedded point coincides.
        return Err(Error::Numerical("embedding collapsed to a single point".into()));
    }
    let raw = dbscan_raw(coords, eps, cfg.min_pts);
    let mut a = finalize_assignment(&raw, cfg.noise);
    a.epsilon_used = eps;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epsilon_single_pair() {
        let c = [[0.0, 0.0], [4.0, 0.0]];
        assert_eq!(epsilon_from_coords(&c, 1.0).unwrap(), 4.0);
        assert_eq!(epsilon_from_coords(&c, 0.5).unwrap(), 2.0);
    }

    #[test]
    fn epsilon_three_pairs() {
        let c = [[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
        assert!((epsilon_from_coords(&c, 1.0).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn epsilon_needs_two_points() {
        assert!(epsilon_from_coords(&[[1.0, 1.0]], 1.0).is_err());
    }

    #[test]
    fn chain_is_one_cluster() {
        let c: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 0.0]).collect();
        let raw = dbscan_raw(&c, 1.5, 2);
        assert!(raw.iter().all(|&l| l == Some(0)));
    }

    #[test]
    fn separated_blobs_give_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Vec::new();
        for center in [0.0, 100.0] {
            for _ in 0..10 {
                c.push([center + rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)]);
            }
        }
        let raw = dbscan_raw(&c, 2.0, 3);
        let a = finalize_assignment(&raw, NoisePolicy::Singletons);
        assert_eq!(a.cluster_sizes, vec![10, 10]);
        assert!(a.labels[..10].iter().all(|&l| l == 0));
        assert!(a.labels[10..].iter().all(|&l| l == 1));
    }

    #[test]
    fn border_point_joins_first_cluster() {
        // Point 4 reaches a core point of both dense groups but is not core.
        let c = [
            [0.0, 0.0],
            [0.1, 0.0],
            [0.2, 0.0],
            [0.3, 0.0],
            [0.8, 0.0],
            [1.3, 0.0],
            [1.4, 0.0],
            [1.5, 0.0],
            [1.6, 0.0],
        ];
        let raw = dbscan_raw(&c, 0.55, 4);
        assert_eq!(raw[4], raw[0]);
        assert_ne!(raw[0], raw[8]);
        assert!(raw.iter().all(Option::is_some));
    }

    #[test]
    fn size_ordering() {
        let mut raw = vec![Some(0); 10];
        raw.extend(vec![Some(1); 25]);
        let a = finalize_assignment(&raw, NoisePolicy::Singletons);
        assert_eq!(a.labels[0], 1);
        assert_eq!(a.labels[10], 0);
        assert_eq!(a.cluster_sizes, vec![25, 10]);
    }

    #[test]
    fn all_noise_becomes_singletons() {
        let a = finalize_assignment(&[None; 4], NoisePolicy::Singletons);
        assert_eq!(a.labels, vec![0, 1, 2, 3]);
        assert_eq!(a.cluster_sizes, vec![1; 4]);
    }

    #[test]
    fn noise_singletons_follow_clusters() {
        let raw = [None, Some(0), Some(0), None, Some(0), Some(0), Some(0)];
        let a = finalize_assignment(&raw, NoisePolicy::Singletons);
        assert_eq!(a.labels, vec![1, 0, 0, 2, 0, 0, 0]);
        assert_eq!(a.cluster_sizes, vec![5, 1, 1]);
        assert_eq!(a.n_non_singleton(), 1);
    }

    #[test]
    fn noise_as_one_cluster() {
        let raw = [None, Some(0), Some(0), None, Some(0), Some(0), Some(0)];
        let a = finalize_assignment(&raw, NoisePolicy::SingleCluster);
        assert_eq!(a.labels, vec![1, 0, 0, 1, 0, 0, 0]);
        assert_eq!(a.cluster_sizes, vec![5, 2]);
    }

    #[test]
    fn huge_constant_gives_one_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
            .collect();
        let cfg = DbscanConfig {
            epsilon_constant: 10.0,
            ..Default::default()
        };
        let a = cluster_coords(&c, &cfg).unwrap();
        assert_eq!(a.cluster_sizes, vec![50]);
        assert!(a.epsilon_used > 0.0);
    }

    #[test]
    fn members_follow_labels() {
        let a = finalize_assignment(&[Some(0), None, Some(0)], NoisePolicy::Singletons);
        assert_eq!(a.members(), vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn config_validation() {
        assert!(DbscanConfig::default().validate().is_ok());
        assert!(DbscanConfig {
            epsilon_constant: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DbscanConfig {
            min_pts: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn finalize_preserves_partition(raw in proptest::collection::vec(proptest::option::of(0usize..5), 1..60)) {
            let a = finalize_assignment(&raw, NoisePolicy::Singletons);
            let n = raw.len();
            for i in 0..n {
                for j in 0..n {
                    let before = i == j || (raw[i].is_some() && raw[i] == raw[j]);
                    proptest::prop_assert_eq!(before, a.labels[i] == a.labels[j]);
                }
            }
            proptest::prop_assert_eq!(a.cluster_sizes.iter().sum::<usize>(), n);
            proptest::prop_assert!(a.cluster_sizes.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn growing_eps_never_splits_core_components(
            pts in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 2..60),
            eps in 0.1f64..3.0,
            grow in 1.0f64..3.0,
            min_pts in 1usize..6,
        ) {
            let c: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let core: Vec<usize> = neighborhoods(&c, eps)
                .iter()
                .enumerate()
                .filter(|(_, nb)| nb.len() >= min_pts)
                .map(|(i, _)| i)
                .collect();
            let small = dbscan_raw(&c, eps, min_pts);
            let large = dbscan_raw(&c, eps * grow, min_pts);
            for &i in &core {
                for &j in &core {
                    if small[i] == small[j] {
                        proptest::prop_assert_eq!(large[i], large[j]);
                    }
                }
            }
            let distinct = |labels: &[Option<usize>]| {
                let mut v: Vec<usize> = core.iter().filter_map(|&i| labels[i]).collect();
                v.sort_unstable();
                v.dedup();
                v.len()
            };
            proptest::prop_assert!(distinct(&large) <= distinct(&small));
        }
    }
}
