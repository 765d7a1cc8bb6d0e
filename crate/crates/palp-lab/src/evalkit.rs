//! Evaluation kit: the synthetic image world, procedural scoring oracles,
//! the denoising-belief probe, and run reporting (CSV metrics, sample grids,
//! summaries).
//!
//! Scoring is entirely procedural — rendered ground truth is compared with
//! pixel statistics, silhouette correlation, and border-ring matching — so
//! every number in a report is reproducible from the images and constants
//! alone.

pub mod oracle;
pub mod probe;
pub mod report;
pub mod world;

pub use oracle::{
    background_score, class_score, classify_background, classify_class, classify_style,
    silhouette, style_score, subject_sim, text_align, total_variation, OracleScores,
};
pub use probe::{parse_t_grid, x0hat_probe, GridParseError, ProbeError, ProbeRow};
pub use report::{
    encode_grid_pgm, encode_grid_png, grid_pixels, merge_metrics, parse_metrics_csv,
    summarize_samples, summary_json, summary_table, write_metrics_csv, CsvError, GridError,
    MetricsRow, RunSummary, METRICS_HEADER,
};
pub use world::{
    attribute_tokens, gen_dataset, render_background, render_cell, render_subject_at,
    render_subject_styled, subject_images, AttributeSpec, Background, CellLabel, DatasetItem,
    Placement, ShapeClass, Style, SubjectKind, BACKGROUNDS, CLASSES, IMAGE_PIXELS, IMAGE_SIDE,
    STYLES,
};
