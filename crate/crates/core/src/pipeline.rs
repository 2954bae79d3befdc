//! The end-to-end segmentation: optional standardization, t-SNE, DBSCAN on
//! the embedding, then a random forest trained on the same feature matrix
//! t-SNE saw, plus per-cluster profiles.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scaler};
use crate::dbscan::{self, ClusterAssignment, DbscanConfig};
use crate::error::{Error, Result};
use crate::forest::{self, ForestConfig, ForestModel};
use crate::tsne::{self, Embedding, TsneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tsne: TsneConfig,
    pub dbscan: DbscanConfig,
    pub forest: ForestConfig,
    pub standardize_input: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tsne: TsneConfig::default(),
            dbscan: DbscanConfig::default(),
            forest: ForestConfig::default(),
            standardize_input: true,
        }
    }
}

impl PipelineConfig {
    /// Sets the t-SNE and forest seeds from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.tsne.seed = crate::seed::derive(seed, "tsne");
        self.forest.seed = crate::seed::derive(seed, "forest");
        self
    }

    pub fn validate(&self, n_points: usize, n_features: usize) -> Result<()> {
        if n_points < 4 {
            return Err(Error::InvalidDataset(format!(
                "segmentation needs at least 4 rows, got {n_points}"
            )));
        }
        self.tsne.validate(n_points)?;
        self.dbscan.validate()?;
        self.forest.validate(n_features)
    }
}

/// Five-number summary of one feature within one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub label: usize,
    pub size: usize,
    pub mean: Vec<f64>,
    pub summaries: Vec<FeatureSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfileSet {
    pub feature_names: Vec<String>,
    pub clusters: Vec<ClusterProfile>,
}

impl ClusterProfileSet {
    /// Long-format table, one line per (cluster, feature).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster,size,feature,mean,min,q1,median,q3,max,count\n");
        for c in &self.clusters {
            for (j, name) in self.feature_names.iter().enumerate() {
                let s = &c.summaries[j];
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    c.label, c.size, name, c.mean[j], s.min, s.q1, s.median, s.q3, s.max, s.count
                ));
            }
        }
        out
    }
}

/// Quantile with linear interpolation between order statistics of a
/// sorted, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn cluster_profiles(x: &Dataset, a: &ClusterAssignment) -> Result<ClusterProfileSet> {
    if x.n_points() != a.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} cluster labels",
            x.n_points(),
            a.n_points()
        )));
    }
    let clusters = a
        .members()
        .into_iter()
        .enumerate()
        .map(|(label, rows)| {
            let mut mean = Vec::with_capacity(x.n_features());
            let mut summaries = Vec::with_capacity(x.n_features());
            for j in 0..x.n_features() {
                let mut vals: Vec<f64> = rows.iter().map(|&i| x.row(i)[j]).collect();
                vals.sort_by(f64::total_cmp);
                mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
                summaries.push(FeatureSummary {
                    min: vals[0],
                    q1: quantile_sorted(&vals, 0.25),
                    median: quantile_sorted(&vals, 0.5),
                    q3: quantile_sorted(&vals, 0.75),
                    max: vals[vals.len() - 1],
                    count: vals.len(),
                });
            }
            ClusterProfile {
                label,
                size: rows.len(),
                mean,
                summaries,
            }
        })
        .collect();
    Ok(ClusterProfileSet {
        feature_names: x.feature_names().to_vec(),
        clusters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// The matrix fed to t-SNE and the forest.
    pub features: Dataset,
    /// Present when the input was standardized.
    pub scaler: Option<Scaler>,
    pub embedding: Embedding,
    pub assignment: ClusterAssignment,
    pub model: ForestModel,
    pub profiles: ClusterProfileSet,
}

impl SegmentationResult {
    /// Cluster labels for new rows given in the original input units.
    pub fn predict(&self, raw: &Dataset) -> Result<Vec<usize>> {
        match &self.scaler {
            Some(s) => self.model.predict(&s.transform(raw)?),
            None => self.model.predict(raw),
        }
    }
}

/// Standardized matrix and embedding, shared by every clustering of the
/// same rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: Dataset,
    pub scaler: Option<Scaler>,
    pub embedding: Embedding,
    pub mean_distance: f64,
}

pub fn prepare(d: &Dataset, cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate(d.n_points(), d.n_features())?;
    let (features, scaler) = if cfg.standardize_input {
        let s = Scaler::fit(d);
        (s.transform(d)?, Some(s))
    } else {
        (d.clone(), None)
    };
    let embedding = tsne::embed(&features, &cfg.tsne)?;
    let mean_distance = dbscan::mean_pairwise_distance(&embedding.coords)?;
    Ok(Prepared {
        features,
        scaler,
        embedding,
        mean_distance,
    })
}

impl Prepared {
    pub fn cluster(&self, dbscan_cfg: &DbscanConfig) -> Result<ClusterAssignment> {
        dbscan_cfg.validate()?;
        let eps = dbscan_cfg.epsilon_constant * self.mean_distance;
        dbscan::cluster_with_epsilon(&self.embedding.coords, eps, dbscan_cfg)
    }

    /// Clusters at `dbscan_cfg` and trains the forest on the result.
    pub fn finish(&self, dbscan_cfg: &DbscanConfig, forest_cfg: &ForestConfig) -> Result<SegmentationResult> {
        let assignment = self.cluster(dbscan_cfg)?;
        let model = forest::train(&self.features, &assignment.labels, forest_cfg)?;
        let profiles = cluster_profiles(&self.features, &assignment)?;
        Ok(SegmentationResult {
            features: self.features.clone(),
            scaler: self.scaler.clone(),
            embedding: self.embedding.clone(),
            assignment,
            model,
            profiles,
        })
    }
}

pub fn segment(d: &Dataset, cfg: &PipelineConfig) -> Result<SegmentationResult> {
    prepare(d, cfg)?.finish(&cfg.dbscan, &cfg.forest)
}
