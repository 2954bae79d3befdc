//! Random forest classifier over raw feature vectors.
//!
//! Trees use axis-aligned threshold splits chosen by Gini decrease. Feature
//! importance is mean decrease in impurity, weighted by the fraction of the
//! tree's samples reaching each node.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Identifies serialized forests; bumped on incompatible layout changes.
pub const MODEL_FORMAT: &str = "segmentor-forest";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((n_features as f64).sqrt() as usize).max(1),
            MaxFeatures::All => n_features,
            MaxFeatures::Count(k) => k,
        }
    }
}

impl std::str::FromStr for MaxFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(MaxFeatures::Sqrt),
            "all" => Ok(MaxFeatures::All),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .map(MaxFeatures::Count)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "max features must be \"sqrt\", \"all\" or a positive integer, got {other:?}"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub min_samples_leaf: usize,
    /// `None` grows until purity or the leaf-size limit.
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_features: MaxFeatures::Sqrt,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("a forest needs at least one tree".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidConfig("min_samples_leaf must be at least 1".into()));
        }
        if let MaxFeatures::Count(k) = self.max_features {
            if k == 0 || k > n_features {
                return Err(Error::InvalidConfig(format!(
                    "max_features {k} outside [1, {n_features}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class frequencies, indexed like [`ForestModel::classes`].
    Leaf { distribution: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_for(&self, row: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { distribution } => return distribution,
            }
        }
    }

    /// Index of the most frequent class at the leaf reached by `row`.
    pub fn vote(&self, row: &[f64]) -> usize {
        argmax(self.leaf_for(row))
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub config: ForestConfig,
    pub feature_names: Vec<String>,
    /// Sorted training labels; leaf distributions index into this.
    pub classes: Vec<usize>,
    pub trees: Vec<Tree>,
    pub importances: Vec<f64>,
    pub oob_available: bool,
}

/// `1 − Σ (n_k / n)²`.
pub fn gini_impurity(class_counts: &[usize]) -> Result<f64> {
    let n: usize = class_counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidDataset("gini impurity of an empty node".into()));
    }
    let n = n as f64;
    Ok(1.0 - class_counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>())
}

fn gini_of(counts: &[usize], total: usize) -> f64 {
    let sq: usize = counts.iter().map(|c| c * c).sum();
    1.0 - sq as f64 / (total * total) as f64
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
    /// Number of samples going left in the feature-sorted order.
    n_left: usize,
}

struct TreeBuilder<'a> {
    x: &'a Dataset,
    y: &'a [usize],
    n_classes: usize,
    mtry: usize,
    cfg: &'a ForestConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    root_size: f64,
}

impl TreeBuilder<'_> {
    fn counts(&self, samples: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &s in samples {
            c[self.y[s]] += 1;
        }
        c
    }

    fn leaf(&mut self, counts: &[usize], total: usize) -> usize {
        let distribution = counts.iter().map(|&c| c as f64 / total as f64).collect();
        self.nodes.push(Node::Leaf { distribution });
        self.nodes.len() - 1
    }

    fn best_split_on(&self, samples: &mut [usize], feature: usize, parent: f64) -> Option<SplitChoice> {
        let x = self.x;
        samples.sort_by(|&a, &b| x.row(a)[feature].total_cmp(&x.row(b)[feature]));
        let m = samples.len();
        let min_leaf = self.cfg.min_samples_leaf;
        let mut left = vec![0usize; self.n_classes];
        let mut right = self.counts(samples);
        // Σ c_k² for each side, kept exact in integers.
        let mut sq_left = 0usize;
        let mut sq_right: usize = right.iter().map(|c| c * c).sum();
        let mut best: Option<SplitChoice> = None;
        for t in 1..m {
            let k = self.y[samples[t - 1]];
            sq_left += 2 * left[k] + 1;
            left[k] += 1;
            sq_right -= 2 * right[k] - 1;
            right[k] -= 1;
            let lo = x.row(samples[t - 1])[feature];
            let hi = x.row(samples[t])[feature];
            if lo == hi || t < min_leaf || m - t < min_leaf {
                continue;
            }
            let child = (m as f64 - sq_left as f64 / t as f64 - sq_right as f64 / (m - t) as f64) / m as f64;
            let gain = parent - child;
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let mut threshold = 0.5 * (lo + hi);
                if threshold == hi {
                    threshold = lo;
                }
                best = Some(SplitChoice {
                    feature,
                    threshold,
                    gain,
                    n_left: t,
                });
            }
        }
        best
    }

    fn grow(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let m = samples.len();
        let counts = self.counts(samples);
        let parent = gini_of(&counts, m);
        let depth_reached = self.cfg.max_depth.is_some_and(|d| depth >= d);
        if parent == 0.0 || depth_reached || m < 2 * self.cfg.min_samples_leaf {
            return self.leaf(&counts, m);
        }

        let mut order: Vec<usize> = (0..self.x.n_features()).collect();
        order.shuffle(&mut self.rng);
        let mut visited = 0;
        let mut best: Option<SplitChoice> = None;
        for &f in &order {
            if visited >= self.mtry {
                break;
            }
            let first = self.x.row(samples[0])[f];
            if samples.iter().all(|&s| self.x.row(s)[f] == first) {
                continue;
            }
            visited += 1;
            if let Some(c) = self.best_split_on(samples, f, parent) {
                let better = match &best {
                    None => true,
                    Some(b) => c.gain > b.gain || (c.gain == b.gain && c.feature < b.feature),
                };
                if better {
                    best = Some(c);
                }
            }
        }
        let Some(split) = best else {
            return self.leaf(&counts, m);
        };

        samples.sort_by(|&a, &b| self.x.row(a)[split.feature].total_cmp(&self.x.row(b)[split.feature]));
        self.importance[split.feature] += m as f64 / self.root_size * split.gain.max(0.0);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            distribution: Vec::new(),
        });
        let (l, r) = samples.split_at_mut(split.n_left);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        at
    }
}

fn grow_tree(x: &Dataset, y: &[usize], n_classes: usize, cfg: &ForestConfig, index: usize) -> (Tree, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let n = x.n_points();
    let mut samples: Vec<usize> = if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut b = TreeBuilder {
        x,
        y,
        n_classes,
        mtry: cfg.max_features.resolve(x.n_features()),
        cfg,
        rng,
        nodes: Vec::new(),
        importance: vec![0.0; x.n_features()],
        root_size: n as f64,
    };
    b.grow(&mut samples, 0);
    (Tree { nodes: b.nodes }, b.importance)
}

/// Trains on `x` with one label per row.
pub fn train(x: &Dataset, labels: &[usize], cfg: &ForestConfig) -> Result<ForestModel> {
    if labels.len() != x.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            x.n_points()
        )));
    }
    cfg.validate(x.n_features())?;
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label in class list"))
        .collect();

    let grown: Vec<(Tree, Vec<f64>)> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| grow_tree(x, &y, classes.len(), cfg, t))
        .collect();

    let mut importances = vec![0.0; x.n_features()];
    for (_, imp) in &grown {
        for (acc, v) in importances.iter_mut().zip(imp) {
            *acc += v;
        }
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        for v in &mut importances {
            *v /= total;
        }
    }
    Ok(ForestModel {
        config: cfg.clone(),
        feature_names: x.feature_names().to_vec(),
        classes,
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        importances,
        oob_available: cfg.bootstrap,
    })
}

impl ForestModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Majority vote over trees; ties go to the smaller label.
    pub fn predict_row(&self, row: &[f64]) -> usize {
        let mut votes = vec![0usize; self.classes.len()];
        for t in &self.trees {
            votes[t.vote(row)] += 1;
        }
        let mut best = 0;
        for (k, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = k;
            }
        }
        self.classes[best]
    }

    pub fn predict(&self, x: &Dataset) -> Result<Vec<usize>> {
        if x.n_features() != self.n_features() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.n_features()
            )));
        }
        Ok(x.rows().map(|r| self.predict_row(r)).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })
        .expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s).map_err(|e| Error::Model(e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: ForestModel,
}

/// `(feature name, score)` pairs, highest score first.
pub fn feature_importances(m: &ForestModel) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..m.importances.len()).collect();
    order.sort_by(|&a, &b| m.importances[b].total_cmp(&m.importances[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| (m.feature_names[i].clone(), m.importances[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn blobs_on_feature0(seed: u64) -> (Dataset, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..120 {
            let class = i % 2;
            let x0 = class as f64 * 20.0 + noise.sample(&mut rng);
            rows.push(vec![
                x0,
                noise.sample(&mut rng),
                noise.sample(&mut rng),
                noise.sample(&mut rng),
            ]);
            labels.push(class);
        }
        (Dataset::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini_impurity(&[10, 0]).unwrap(), 0.0);
        assert_eq!(gini_impurity(&[5, 5]).unwrap(), 0.5);
        assert_abs_diff_eq!(gini_impurity(&[1, 2, 3]).unwrap(), 11.0 / 18.0, epsilon = 1e-15);
        assert!(gini_impurity(&[0, 0]).is_err());
    }

    #[test]
    fn single_class_has_no_importance() {
        let (x, _) = blobs_on_feature0(1);
        let labels = vec![3; x.n_points()];
        let m = train(
            &x,
            &labels,
            &ForestConfig {
                n_trees: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.importances.iter().all(|&v| v == 0.0));
        assert!(m.predict(&x).unwrap().iter().all(|&l| l == 3));
        assert_eq!(m.predict_row(&[1e9, -1e9, 0.0, 0.0]), 3);
    }

    #[test]
    fn importance_concentrates_on_separating_feature() {
        let (x, y) = blobs_on_feature0(2);
        let m = train(&x, &y, &ForestConfig::default()).unwrap();
        assert!(m.importances[0] > 0.9, "{:?}", m.importances);
        assert_abs_diff_eq!(m.importances.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        let ranked = feature_importances(&m);
        assert_eq!(ranked[0].0, "f0");
        assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn separable_blobs_are_recovered_in_sample() {
        let (x, y) = blobs_on_feature0(3);
        let m = train(&x, &y, &ForestConfig::default()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn unbootstrapped_full_trees_memorize_training_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..80).map(|_| rng.random_range(0..4)).collect();
        let x = Dataset::from_rows(&rows).unwrap();
        let cfg = ForestConfig {
            n_trees: 5,
            bootstrap: false,
            ..Default::default()
        };
        let m = train(&x, &labels, &cfg).unwrap();
        assert_eq!(m.predict(&x).unwrap(), labels);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs_on_feature0(5);
        let cfg = ForestConfig {
            n_trees: 20,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(train(&x, &y, &cfg).unwrap(), train(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn depth_limit_is_respected() {
        let (x, y) = blobs_on_feature0(6);
        let cfg = ForestConfig {
            n_trees: 3,
            max_depth: Some(0),
            ..Default::default()
        };
        let m = train(&x, &y, &cfg).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn errors() {
        let (x, y) = blobs_on_feature0(7);
        assert!(train(&x, &y[1..], &ForestConfig::default()).is_err());
        let cfg = ForestConfig {
            max_features: MaxFeatures::Count(5),
            ..Default::default()
        };
        assert!(train(&x, &y, &cfg).is_err());
        let m = train(
            &x,
            &y,
            &ForestConfig {
                n_trees: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let narrow = x.select_features(&[0, 1]).unwrap();
        assert!(m.predict(&narrow).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (x, y) = blobs_on_feature0(8);
        let m = train(
            &x,
            &y,
            &ForestConfig {
                n_trees: 15,
                ..Default::default()
            },
        )
        .unwrap();
        let back = ForestModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn wrong_format_is_rejected() {
        assert!(ForestModel::from_json(r#"{"format":"other","version":1,"model":null}"#).is_err());
    }

    #[test]
    fn max_features_parsing() {
        assert_eq!("sqrt".parse::<MaxFeatures>().unwrap(), MaxFeatures::Sqrt);
        assert_eq!("all".parse::<MaxFeatures>().unwrap(), MaxFeatures::All);
        assert_eq!("3".parse::<MaxFeatures>().unwrap(), MaxFeatures::Count(3));
        assert!("0".parse::<MaxFeatures>().is_err());
        assert_eq!(MaxFeatures::Sqrt.resolve(784), 28);
        assert_eq!(MaxFeatures::Sqrt.resolve(2), 1);
    }

    #[test]
    fn permuting_columns_permutes_importances() {
        let (x, y) = blobs_on_feature0(9);
        let perm = [2, 0, 3, 1];
        let xp = x.select_features(&perm).unwrap();
        let cfg = ForestConfig {
            n_trees: 30,
            max_features: MaxFeatures::All,
            bootstrap: false,
            ..Default::default()
        };
        let m = train(&x, &y, &cfg).unwrap();
        let mp = train(&xp, &y, &cfg).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_abs_diff_eq!(mp.importances[new], m.importances[old], epsilon = 1e-12);
        }
        assert_eq!(mp.predict(&xp).unwrap(), m.predict(&x).unwrap());
    }
}
