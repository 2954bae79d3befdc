//! Command-line front end: `segment`, `tune` and `generalize`.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (checked
//! before any computation), 2 for failures while running.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::evalgen;
use crate::forest::{self, MaxFeatures};
use crate::pipeline::{self, PipelineConfig};
use crate::svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "segmentor",
    version,
    about = "t-SNE + DBSCAN + random forest data segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Embed, cluster and train the forest; write every artifact to --out.
    Segment(CommonArgs),
    /// Choose the epsilon constant from --eps-grid by inner cross validation.
    Tune(CommonArgs),
    /// k-fold generalization report of the whole segmentation.
    Generalize(CommonArgs),
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Numeric CSV; a header row is detected automatically.
    #[arg(long)]
    input: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 12.0)]
    early_exag: f64,
    /// Late exaggeration factor; 1 disables it.
    #[arg(long, default_value_t = 1.0)]
    late_exag: f64,
    /// Iteration where late exaggeration starts (default: 4/5 of --iters).
    #[arg(long)]
    late_exag_start: Option<usize>,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    /// DBSCAN epsilon as a multiple of the mean pairwise embedding distance.
    #[arg(long, default_value_t = 0.1)]
    eps_constant: f64,
    /// Candidate epsilon constants, comma separated (default 0.02..0.30 by 0.02).
    #[arg(long, value_delimiter = ',')]
    eps_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 4)]
    min_pts: usize,
    /// Fewest non-singleton clusters an epsilon constant must produce.
    #[arg(long, default_value_t = 1)]
    min_clusters: usize,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    /// "sqrt", "all" or a count.
    #[arg(long, default_value = "sqrt")]
    max_features: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    no_standardize: bool,
}

/// Everything needed to reproduce a run, written as run.json.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'static str,
    input: String,
    has_header: bool,
    n_points: usize,
    n_features: usize,
    seed: u64,
    pipeline: &'a PipelineConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_grid: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fold_seed: Option<u64>,
    min_clusters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Generalize(a) => cmd_generalize(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn pipeline_config(a: &CommonArgs) -> std::result::Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig {
        standardize_input: !a.no_standardize,
        ..Default::default()
    }
    .with_seed(a.seed);
    cfg.tsne = crate::tsne::TsneConfig {
        perplexity: a.perplexity,
        early_exaggeration_factor: a.early_exag,
        late_exaggeration_factor: a.late_exag,
        learning_rate: a.learning_rate,
        seed: cfg.tsne.seed,
        ..Default::default()
    }
    .with_iterations(a.iters);
    if let Some(s) = a.late_exag_start {
        cfg.tsne.late_exaggeration_start = s;
    }
    cfg.dbscan.epsilon_constant = a.eps_constant;
    cfg.dbscan.min_pts = a.min_pts;
    cfg.dbscan.min_clusters = a.min_clusters;
    cfg.forest.n_trees = a.trees;
    cfg.forest.max_features = a.max_features.parse::<MaxFeatures>().map_err(usage)?;
    Ok(cfg)
}

fn grid(a: &CommonArgs) -> std::result::Result<Vec<f64>, Failure> {
    let g = a.eps_grid.clone().unwrap_or_else(evalgen::default_grid);
    if g.is_empty() {
        return Err(Failure::Usage("--eps-grid is empty".into()));
    }
    if let Some(bad) = g.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Failure::Usage(format!("epsilon constants must be positive, got {bad}")));
    }
    Ok(g)
}

/// Loads the input and checks every flag against it.
fn setup(a: &CommonArgs) -> std::result::Result<(Dataset, bool, PipelineConfig), Failure> {
    let cfg = pipeline_config(a)?;
    if a.min_clusters == 0 {
        return Err(Failure::Usage("--min-clusters must be at least 1".into()));
    }
    let has_header = dataset::sniff_header(&a.input)?;
    let data = dataset::load_csv(&a.input, has_header)?;
    cfg.validate(data.n_points(), data.n_features()).map_err(usage)?;
    Ok((data, has_header, cfg))
}

fn record<'a>(
    command: &'static str,
    a: &CommonArgs,
    data: &Dataset,
    has_header: bool,
    cfg: &'a PipelineConfig,
) -> RunRecord<'a> {
    RunRecord {
        command,
        input: a.input.display().to_string(),
        has_header,
        n_points: data.n_points(),
        n_features: data.n_features(),
        seed: a.seed,
        pipeline: cfg,
        eps_grid: None,
        folds: None,
        fold_seed: None,
        min_clusters: a.min_clusters,
        epsilon: None,
    }
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Model(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_segment(a: &CommonArgs) -> std::result::Result<(), Failure> {
    let (data, has_header, cfg) = setup(a)?;
    create_dir(&a.out)?;
    let result = pipeline::segment(&data, &cfg)?;
    let out = &a.out;
    let ids = data.row_ids();

    let mut emb = String::from("row_id,x,y\n");
    for (id, [x, y]) in ids.iter().zip(&result.embedding.coords) {
        emb.push_str(&format!("{id},{x},{y}\n"));
    }
    write_atomic(&out.join("embedding.csv"), emb.as_bytes())?;

    let mut labels = String::from("row_id,cluster_label\n");
    for (id, l) in ids.iter().zip(&result.assignment.labels) {
        labels.push_str(&format!("{id},{l}\n"));
    }
    write_atomic(&out.join("labels.csv"), labels.as_bytes())?;

    write_atomic(&out.join("profiles.csv"), result.profiles.to_csv().as_bytes())?;
    if cfg.standardize_input {
        let raw = pipeline::cluster_profiles(&data, &result.assignment)?;
        write_atomic(&out.join("profiles_original_units.csv"), raw.to_csv().as_bytes())?;
    }

    let mut imp = String::from("feature,importance\n");
    for (name, v) in forest::feature_importances(&result.model) {
        imp.push_str(&format!("{name},{v}\n"));
    }
    write_atomic(&out.join("importances.csv"), imp.as_bytes())?;
    write_atomic(&out.join("model.json"), result.model.to_json().as_bytes())?;
    write_atomic(
        &out.join("embedding.svg"),
        svg::render(&result.embedding, &result.assignment)?.as_bytes(),
    )?;

    let mut rec = record("segment", a, &data, has_header, &cfg);
    rec.epsilon = Some(result.assignment.epsilon_used);
    write_json(&out.join("run.json"), &rec)?;

    let a = &result.assignment;
    println!(
        "{} clusters ({} non-singleton), sizes {:?}",
        a.n_clusters(),
        a.n_non_singleton(),
        &a.cluster_sizes[..a.n_clusters().min(20)]
    );
    Ok(())
}

fn cmd_tune(a: &CommonArgs) -> std::result::Result<(), Failure> {
    let grid = grid(a)?;
    let (data, has_header, cfg) = setup(a)?;
    if data.n_points() < evalgen::INNER_FOLDS {
        return Err(Failure::Usage(format!(
            "tuning uses {} inner folds and needs at least that many rows, got {}",
            evalgen::INNER_FOLDS,
            data.n_points()
        )));
    }
    create_dir(&a.out)?;
    let report = evalgen::tune_epsilon(&data, &grid, &cfg, a.min_clusters)?;
    write_json(&a.out.join("tuning.json"), &report)?;
    let mut rec = record("tune", a, &data, has_header, &cfg);
    rec.eps_grid = Some(&grid);
    write_json(&a.out.join("run.json"), &rec)?;
    let f1 = report.chosen_score().and_then(|c| c.mean_f1).unwrap_or(f64::NAN);
    println!("chosen epsilon constant {} (mean F1 {f1:.3})", report.chosen);
    Ok(())
}

#[derive(Serialize)]
struct GeneralizeOutput<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
    #[serde(flatten)]
    report: &'a evalgen::GeneralizationReport,
}

fn cmd_generalize(a: &CommonArgs) -> std::result::Result<(), Failure> {
    let grid = grid(a)?;
    let (data, has_header, cfg) = setup(a)?;
    let n = data.n_points();
    if a.folds < 2 || a.folds > n {
        return Err(Failure::Usage(format!("--folds must be in [2, {n}], got {}", a.folds)));
    }
    if grid.len() > 1 && n - n.div_ceil(a.folds) < evalgen::INNER_FOLDS {
        return Err(Failure::Usage(format!(
            "training folds are too small for {} inner folds",
            evalgen::INNER_FOLDS
        )));
    }
    create_dir(&a.out)?;
    let fold_seed = crate::seed::derive(a.seed, "folds");
    let report = evalgen::generalization_run(&data, &cfg, a.folds, &grid, a.min_clusters, fold_seed)?;
    let doc = GeneralizeOutput {
        note: report.fixed_epsilon.then_some("fixed epsilon: inner tuning skipped"),
        report: &report,
    };
    write_json(&a.out.join("report.json"), &doc)?;
    let mut rec = record("generalize", a, &data, has_header, &cfg);
    rec.eps_grid = Some(&grid);
    rec.folds = Some(a.folds);
    rec.fold_seed = Some(fold_seed);
    write_json(&a.out.join("run.json"), &rec)?;
    println!("{}", report.summary_row);
    Ok(())
}
