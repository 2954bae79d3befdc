//! Scatter plot of an embedding as a standalone SVG document.

use std::fmt::Write;

use crate::dbscan::ClusterAssignment;
use crate::error::{Error, Result};
use crate::tsne::Embedding;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 640.0;
const MARGIN: f64 = 20.0;
const LEGEND_WIDTH: f64 = 180.0;
const LEGEND_ROWS: usize = 20;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Color for a cluster label. Clusters past the palette, which are the small
/// ones under size ordering, share a neutral grey.
fn color(label: usize) -> &'static str {
    PALETTE.get(label).copied().unwrap_or("#c7c7c7")
}

/// One `<circle>` per point, colored by cluster, followed by a legend of
/// cluster sizes drawn with `<rect>` and `<text>`.
pub fn render(embedding: &Embedding, assignment: &ClusterAssignment) -> Result<String> {
    if embedding.n_points() != assignment.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "{} embedded points but {} cluster labels",
            embedding.n_points(),
            assignment.n_points()
        )));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &[x, y] in &embedding.coords {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let span = (xmax - xmin).max(ymax - ymin);
    let scale = if span > 0.0 { (WIDTH - 2.0 * MARGIN) / span } else { 1.0 };
    let radius = if embedding.n_points() > 1000 { 1.5 } else { 3.0 };

    let mut out = String::new();
    let total_w = WIDTH + LEGEND_WIDTH;
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{HEIGHT}" viewBox="0 0 {total_w} {HEIGHT}">
<rect x="0" y="0" width="{total_w}" height="{HEIGHT}" fill="white"/>
<g id="points">"#
    );
    for (i, &[x, y]) in embedding.coords.iter().enumerate() {
        let px = MARGIN + (x - xmin) * scale;
        // SVG y grows downward.
        let py = HEIGHT - MARGIN - (y - ymin) * scale;
        let label = assignment.labels[i];
        let _ = writeln!(
            out,
            r#"<circle cx="{px:.3}" cy="{py:.3}" r="{radius}" fill="{}"><title>{label}</title></circle>"#,
            color(label)
        );
    }
    out.push_str("</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let lx = WIDTH + 10.0;
    let shown = assignment.n_clusters().min(LEGEND_ROWS);
    for (label, &size) in assignment.cluster_sizes.iter().take(shown).enumerate() {
        let y = MARGIN + 18.0 * label as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">cluster {label}: {size}</text>"#,
            color(label),
            lx + 18.0,
            y + 11.0
        );
    }
    let rest = assignment.n_clusters() - shown;
    if rest > 0 {
        let rest_points: usize = assignment.cluster_sizes[shown..].iter().sum();
        let _ = writeln!(
            out,
            r#"<text x="{lx}" y="{}">+{rest} more ({rest_points} points)</text>"#,
            MARGIN + 18.0 * shown as f64 + 11.0
        );
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbscan::{finalize_assignment, NoisePolicy};
    use crate::tsne::TsneConfig;

    fn embedding(coords: Vec<[f64; 2]>) -> Embedding {
        Embedding {
            coords,
            initial_kl: 0.0,
            final_kl: 0.0,
            calibration_warnings: Vec::new(),
            config_used: TsneConfig::default(),
        }
    }

    #[test]
    fn one_circle_per_point() {
        let e = embedding(vec![[0.0, 0.0], [1.0, 0.5], [2.0, -1.0], [0.0, 3.0]]);
        let a = finalize_assignment(&[Some(0), Some(0), None, Some(1)], NoisePolicy::Singletons);
        let svg = render(&e, &a).unwrap();
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("cluster 0: 2"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn degenerate_embedding_renders() {
        let e = embedding(vec![[1.0, 1.0]; 3]);
        let a = finalize_assignment(&[Some(0); 3], NoisePolicy::Singletons);
        let svg = render(&e, &a).unwrap();
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn label_count_must_match() {
        let e = embedding(vec![[0.0, 0.0], [1.0, 1.0]]);
        let a = finalize_assignment(&[Some(0)], NoisePolicy::Singletons);
        assert!(render(&e, &a).is_err());
    }
}
