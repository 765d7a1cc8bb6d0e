//! Run artifacts: the metrics CSV schema, grayscale sample grids (PGM P5 and
//! optionally PNG), and the per-run summary table.
//!
//! The CSV parser and the grid encoder are total functions: arbitrary input
//! produces either a value or a structured error, never a panic.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::tensor::Tensor;
use crate::evalkit::oracle::{subject_sim, text_align, OracleScores};

/// Column layout every metrics file starts with.
pub const METRICS_HEADER: &str = "run_id,mode,step,text_align,subject_sim,loss,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub step: u64,
    pub text_align: f64,
    pub subject_sim: f64,
    pub loss: f64,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CsvError {
    #[error("missing header line `{METRICS_HEADER}`")]
    BadHeader,
    #[error("line {line}: expected 7 fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: field {field} does not parse: `{value}`")]
    BadField { line: usize, field: &'static str, value: String },
}

fn sanitize(field: &str) -> String {
    field.replace([',', '\n', '\r'], "_")
}

/// Serialize rows with the canonical header. Empty input still produces the
/// header line, so downstream tools always see the schema.
pub fn write_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            sanitize(&r.run_id),
            sanitize(&r.mode),
            r.step,
            r.text_align,
            r.subject_sim,
            r.loss,
            r.seed
        ));
    }
    out
}

/// Parse a metrics CSV. Tolerates trailing blank lines; rejects everything
/// else that deviates from the schema.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, CsvError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == METRICS_HEADER => {}
        _ => return Err(CsvError::BadHeader),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CsvError::FieldCount { line: idx + 1, found: fields.len() });
        }
        fn num<T: std::str::FromStr>(
            line: usize,
            field: &'static str,
            value: &str,
        ) -> Result<T, CsvError> {
            value
                .parse()
                .map_err(|_| CsvError::BadField { line, field, value: value.to_owned() })
        }
        rows.push(MetricsRow {
            run_id: fields[0].to_owned(),
            mode: fields[1].to_owned(),
            step: num(idx + 1, "step", fields[2])?,
            text_align: num(idx + 1, "text_align", fields[3])?,
            subject_sim: num(idx + 1, "subject_sim", fields[4])?,
            loss: num(idx + 1, "loss", fields[5])?,
            seed: num(idx + 1, "seed", fields[6])?,
        });
    }
    Ok(rows)
}

/// Concatenate several parsed metric sets, ordered by (run_id, step).
pub fn merge_metrics(sets: Vec<Vec<MetricsRow>>) -> Vec<MetricsRow> {
    let mut all: Vec<MetricsRow> = sets.into_iter().flatten().collect();
    all.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.step.cmp(&b.step)));
    all
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("no images to lay out")]
    Empty,
    #[error("image {index} is {got:?}, expected [{side}, {side}]")]
    ShapeMismatch { index: usize, got: Vec<usize>, side: usize },
}

/// Assemble images into a row-major grid with 1-px black separators and
/// quantize to 8-bit grayscale. Returns (width, height, pixels).
pub fn grid_pixels(images: &[Tensor], cols: usize) -> Result<(usize, usize, Vec<u8>), GridError> {
    if images.is_empty() || cols == 0 {
        return Err(GridError::Empty);
    }
    let side = images[0].shape()[0];
    for (i, img) in images.iter().enumerate() {
        if img.shape() != [side, side] {
            return Err(GridError::ShapeMismatch { index: i, got: img.shape().to_vec(), side });
        }
    }
    let rows = images.len().div_ceil(cols);
    let width = cols * side + (cols - 1);
    let height = rows * side + (rows - 1);
    let mut out = vec![0u8; width * height];
    for (i, img) in images.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        let (top, left) = (gr * (side + 1), gc * (side + 1));
        for r in 0..side {
            for c in 0..side {
                let v = img.data()[r * side + c].clamp(0.0, 1.0);
                out[(top + r) * width + left + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok((width, height, out))
}

/// Encode a grid as binary PGM (P5, maxval 255).
pub fn encode_grid_pgm(images: &[Tensor], cols: usize) -> Result<Vec<u8>, GridError> {
    let (w, h, px) = grid_pixels(images, cols)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

/// Encode a grid as PNG.
pub fn encode_grid_png(images: &[Tensor], cols: usize) -> Result<Vec<u8>, GridError> {
    let (w, h, px) = grid_pixels(images, cols)?;
    let img = image::GrayImage::from_raw(w as u32, h as u32, px)
        .expect("buffer length matches dimensions");
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("in-memory PNG encode cannot fail");
    Ok(out)
}

/// One row of the summary table: mean element scores over a sample batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: String,
    /// Mean style element score, when the eval prompt named a style.
    pub style: Option<f64>,
    /// Mean class element score, when the eval prompt named a class.
    pub class: Option<f64>,
    /// Mean aggregate text alignment ("target" alignment).
    pub target: f64,
    /// Mean subject similarity, when a reference set applies.
    pub image_align: Option<f64>,
    pub samples: usize,
}

/// Score a batch of generated samples against the prompt's attribute tokens
/// and (optionally) a subject reference set.
pub fn summarize_samples(
    run_id: &str,
    mode: &str,
    images: &[Tensor],
    prompt_tokens: &[String],
    refs: Option<&[Tensor]>,
) -> RunSummary {
    let mut style_sum = (0.0, 0usize);
    let mut class_sum = (0.0, 0usize);
    let mut target_sum = 0.0;
    let mut sim_sum = (0.0, 0usize);
    for img in images {
        let scores: OracleScores = text_align(img, prompt_tokens.iter().map(String::as_str));
        if let Some(s) = scores.style {
            style_sum = (style_sum.0 + s, style_sum.1 + 1);
        }
        if let Some(c) = scores.class {
            class_sum = (class_sum.0 + c, class_sum.1 + 1);
        }
        target_sum += scores.aggregate();
        if let Some(r) = refs {
            sim_sum = (sim_sum.0 + subject_sim(img, r), sim_sum.1 + 1);
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { None } else { Some(s / n as f64) };
    RunSummary {
        run_id: run_id.to_owned(),
        mode: mode.to_owned(),
        style: mean(style_sum),
        class: mean(class_sum),
        target: if images.is_empty() { 0.0 } else { target_sum / images.len() as f64 },
        image_align: mean(sim_sum),
        samples: images.len(),
    }
}

/// Pretty-printed JSON for a set of run summaries.
pub fn summary_json(rows: &[RunSummary]) -> String {
    serde_json::to_string_pretty(rows).expect("summary serialization cannot fail")
}

/// Fixed-width text rendering of the summary table.
pub fn summary_table(rows: &[RunSummary]) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.3}"),
        None => "-".to_owned(),
    };
    let mut out = format!(
        "{:<24} {:<12} {:>7} {:>7} {:>7} {:>11}\n",
        "run_id", "mode", "style", "class", "target", "image_align"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:<12} {:>7} {:>7} {:>7.3} {:>11}\n",
            r.run_id,
            r.mode,
            fmt(r.style),
            fmt(r.class),
            r.target,
            fmt(r.image_align)
        ));
    }
    out
}
