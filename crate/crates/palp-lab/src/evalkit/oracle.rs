//! Procedural scoring oracles for the toy world.
//!
//! Each attribute gets an element scorer in [0, 1]; `text_align` averages the
//! elements a prompt mentions, and `subject_sim` measures silhouette identity
//! against a reference set. All scorers are pure functions of pixel values —
//! no learned components — so evaluation noise is zero and scores are
//! reproducible bit-for-bit.
//!
//! The decision constants below were calibrated once against the renderer
//! (held-out jittered samples, see the tests at the bottom) and are frozen;
//! they are not tuning knobs.

use std::sync::OnceLock;

use crate::diffcore::tensor::Tensor;
use crate::evalkit::world::{
    render_background, render_cell, Background, CellLabel, Placement, ShapeClass, Style,
    BACKGROUNDS, CLASSES, IMAGE_SIDE, STYLES,
};

/// Pixels below this (after clamping to [0,1]) count as shape ink.
pub const DARK_THRESHOLD: f64 = 0.5;
/// Border-ring width read by the style and background scorers.
const RING_WIDTH: usize = 2;
/// Ring-mean intensity separating photo backgrounds (≈0.8) from sketch paper
/// (1.0), with the logistic slope applied around it.
const STYLE_RING_KNEE: f64 = 0.93;
const STYLE_RING_SCALE: f64 = 0.015;
/// Total-variation gate: real renders sit well below the knee, unstructured
/// noise well above, and the gate multiplies both style scores so it never
/// flips a classification — it only drags scores toward zero on noise.
const NOISE_TV_KNEE: f64 = 0.3;
const NOISE_TV_SCALE: f64 = 0.04;
/// Class identity runs on size- and position-normalized silhouette patches:
/// the silhouette is cropped to its bounding box and resampled to this side.
const SHAPE_PATCH: usize = 12;
/// RMS patch distance is mapped through a linear ramp: at or below LO the
/// class score is 1, at or above HI it is 0. Same-class renders land near
/// 0.05–0.15; the closest wrong pair (square vs circle) sits near 0.46.
const CLASS_DIST_LO: f64 = 0.18;
const CLASS_DIST_HI: f64 = 0.42;
/// Background ring distance → score sharpness.
const BG_MSD_TAU: f64 = 0.005;
/// Template/reference alignment search radius, covering placement jitter.
const MAX_SHIFT: i64 = 3;
/// Canonical template sizes, matching the generator's size choices.
const TEMPLATE_SIZES: [f64; 3] = [8.0, 9.0, 10.0];

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn clamped(img: &Tensor) -> Vec<f64> {
    img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

fn side_of(img: &Tensor) -> usize {
    assert_eq!(img.shape(), [IMAGE_SIDE, IMAGE_SIDE], "oracle expects 16×16 images");
    IMAGE_SIDE
}

/// Values of the outer 2-px border ring, row-major order.
pub fn ring_values(img: &Tensor) -> Vec<f64> {
    let side = side_of(img);
    let px = clamped(img);
    let mut out = Vec::new();
    for r in 0..side {
        for c in 0..side {
            if r < RING_WIDTH || r >= side - RING_WIDTH || c < RING_WIDTH || c >= side - RING_WIDTH
            {
                out.push(px[r * side + c]);
            }
        }
    }
    out
}

/// Mean border-ring brightness in [0, 1] — the raw background-whiteness
/// measurement underneath the style score. Useful on its own for blurry
/// one-step x̂₀ estimates, where the logistic knee in [`style_score`]
/// saturates and hides small but real differences.
pub fn background_whiteness(img: &Tensor) -> f64 {
    let ring = ring_values(img);
    ring.iter().sum::<f64>() / ring.len() as f64
}

/// Mean absolute neighbor difference (horizontal + vertical), after clamping.
pub fn total_variation(img: &Tensor) -> f64 {
    let side = side_of(img);
    let px = clamped(img);
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..side {
        for c in 0..side {
            if c + 1 < side {
                sum += (px[r * side + c] - px[r * side + c + 1]).abs();
                count += 1;
            }
            if r + 1 < side {
                sum += (px[r * side + c] - px[(r + 1) * side + c]).abs();
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Filled silhouette as a 0/1 mask: binarize dark ink, then intersect the
/// per-row and per-column spans between the extreme dark pixels. The span
/// fill reconstructs solid silhouettes from sketch outlines, and for filled
/// shapes it is the identity.
pub fn silhouette(img: &Tensor) -> Vec<f64> {
    let side = side_of(img);
    let px = clamped(img);
    let dark: Vec<bool> = px.iter().map(|&v| v < DARK_THRESHOLD).collect();
    let mut row_fill = vec![false; side * side];
    for r in 0..side {
        let cols: Vec<usize> = (0..side).filter(|&c| dark[r * side + c]).collect();
        if let (Some(&lo), Some(&hi)) = (cols.first(), cols.last()) {
            for c in lo..=hi {
                row_fill[r * side + c] = true;
            }
        }
    }
    let mut mask = vec![0.0; side * side];
    for c in 0..side {
        let rows: Vec<usize> = (0..side).filter(|&r| dark[r * side + c]).collect();
        if let (Some(&lo), Some(&hi)) = (rows.first(), rows.last()) {
            for r in lo..=hi {
                if row_fill[r * side + c] {
                    mask[r * side + c] = 1.0;
                }
            }
        }
    }
    mask
}

/// Pearson correlation between two equal-length vectors; 0 when either side
/// is (numerically) constant.
fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-12 || vb < 1e-12 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn shift_mask(mask: &[f64], side: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for r in 0..side as i64 {
        for c in 0..side as i64 {
            let (sr, sc) = (r - dy, c - dx);
            if sr >= 0 && sr < side as i64 && sc >= 0 && sc < side as i64 {
                out[(r * side as i64 + c) as usize] = mask[(sr * side as i64 + sc) as usize];
            }
        }
    }
    out
}

/// Best correlation between `mask` and `reference` over integer shifts of the
/// reference within ±MAX_SHIFT.
fn best_shift_ncc(mask: &[f64], reference: &[f64]) -> f64 {
    let mut best = -1.0_f64;
    for dy in -MAX_SHIFT..=MAX_SHIFT {
        for dx in -MAX_SHIFT..=MAX_SHIFT {
            best = best.max(ncc(mask, &shift_mask(reference, IMAGE_SIDE, dx, dy)));
        }
    }
    best
}

fn bilinear(mask: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let get = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= side as i64 || c >= side as i64 {
            0.0
        } else {
            mask[(r * side as i64 + c) as usize]
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let (r, c) = (y0 as i64, x0 as i64);
    (1.0 - ty) * ((1.0 - tx) * get(r, c) + tx * get(r, c + 1))
        + ty * ((1.0 - tx) * get(r + 1, c) + tx * get(r + 1, c + 1))
}

/// Crop a silhouette to its bounding box and resample it to a fixed patch,
/// normalizing away position and size. The box is trimmed by mask mass —
/// rows/columns carrying under a quarter of the peak mass don't count — so
/// stray speckle (e.g. background dots grazed by a shape edge) cannot
/// inflate the crop. None when the mask is empty.
fn shape_patch(mask: &[f64], side: usize) -> Option<Vec<f64>> {
    let mass = |along_rows: bool| -> Vec<f64> {
        (0..side)
            .map(|i| {
                (0..side)
                    .map(|j| if along_rows { mask[i * side + j] } else { mask[j * side + i] })
                    .sum()
            })
            .collect()
    };
    let bounds = |m: &[f64]| -> Option<(usize, usize)> {
        let peak = m.iter().cloned().fold(0.0_f64, f64::max);
        if peak <= 0.0 {
            return None;
        }
        let cut = (0.25 * peak).max(1.0);
        let lo = m.iter().position(|&v| v >= cut)?;
        let hi = m.iter().rposition(|&v| v >= cut)?;
        Some((lo, hi))
    };
    let (rmin, rmax) = bounds(&mass(true))?;
    let (cmin, cmax) = bounds(&mass(false))?;
    let (h, w) = ((rmax - rmin + 1) as f64, (cmax - cmin + 1) as f64);
    let mut patch = Vec::with_capacity(SHAPE_PATCH * SHAPE_PATCH);
    for i in 0..SHAPE_PATCH {
        for j in 0..SHAPE_PATCH {
            let y = rmin as f64 + (i as f64 + 0.5) / SHAPE_PATCH as f64 * h - 0.5;
            let x = cmin as f64 + (j as f64 + 0.5) / SHAPE_PATCH as f64 * w - 0.5;
            patch.push(bilinear(mask, side, y, x));
        }
    }
    Some(patch)
}

fn patch_rms_distance(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Canonical silhouette patches per (class, size), each averaged over a
/// small grid of subpixel placements so the template carries the typical
/// edge raggedness the binarizer produces, not the artificially crisp
/// integer-centered render.
fn class_templates() -> &'static Vec<(ShapeClass, Vec<Vec<f64>>)> {
    static TEMPLATES: OnceLock<Vec<(ShapeClass, Vec<Vec<f64>>)>> = OnceLock::new();
    const SUBPIXEL: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
    TEMPLATES.get_or_init(|| {
        CLASSES
            .into_iter()
            .map(|class| {
                let patches = TEMPLATE_SIZES
                    .iter()
                    .map(|&size| {
                        let mut mean = vec![0.0; SHAPE_PATCH * SHAPE_PATCH];
                        let mut count = 0.0;
                        for oy in SUBPIXEL {
                            for ox in SUBPIXEL {
                                let img = render_cell(
                                    CellLabel {
                                        style: Style::Photo,
                                        class,
                                        background: Background::Plain,
                                    },
                                    Placement { size, cx: 8.0 + ox, cy: 8.0 + oy },
                                );
                                let p = shape_patch(&silhouette(&img), IMAGE_SIDE)
                                    .expect("canonical renders are never empty");
                                for (m, v) in mean.iter_mut().zip(&p) {
                                    *m += v;
                                }
                                count += 1.0;
                            }
                        }
                        for m in &mut mean {
                            *m /= count;
                        }
                        mean
                    })
                    .collect();
                (class, patches)
            })
            .collect()
    })
}

fn noise_gate(img: &Tensor) -> f64 {
    logistic((NOISE_TV_KNEE - total_variation(img)) / NOISE_TV_SCALE)
}

/// How strongly the image reads as the given style, in [0, 1].
pub fn style_score(img: &Tensor, style: Style) -> f64 {
    let mean = background_whiteness(img);
    let sketchness = logistic((mean - STYLE_RING_KNEE) / STYLE_RING_SCALE);
    let raw = match style {
        Style::Sketch => sketchness,
        Style::Photo => 1.0 - sketchness,
    };
    raw * noise_gate(img)
}

/// How strongly the image's silhouette reads as the given class, in [0, 1].
/// The noise gate keeps speckle blobs from masquerading as solid shapes.
pub fn class_score(img: &Tensor, class: ShapeClass) -> f64 {
    let Some(patch) = shape_patch(&silhouette(img), IMAGE_SIDE) else {
        return 0.0;
    };
    let templates = class_templates()
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, m)| m)
        .expect("template table covers every class");
    let nearest =
        templates.iter().map(|t| patch_rms_distance(&patch, t)).fold(f64::INFINITY, f64::min);
    let ramp = ((CLASS_DIST_HI - nearest) / (CLASS_DIST_HI - CLASS_DIST_LO)).clamp(0.0, 1.0);
    ramp * noise_gate(img)
}

/// How strongly the border ring reads as the given background, in [0, 1].
///
/// Backgrounds render with fixed phase, so the canonical ring is an exact
/// target; the score decays exponentially in mean squared ring distance.
/// Sketch renders paint the paper white regardless of the background token,
/// so background scores are only meaningful for photo-style images.
pub fn background_score(img: &Tensor, bg: Background) -> f64 {
    let ring = ring_values(img);
    let canon = ring_values(&render_background(bg));
    let msd = ring.iter().zip(&canon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        / ring.len() as f64;
    (-msd / BG_MSD_TAU).exp()
}

pub fn classify_style(img: &Tensor) -> Style {
    STYLES
        .into_iter()
        .max_by(|a, b| style_score(img, *a).total_cmp(&style_score(img, *b)))
        .unwrap()
}

pub fn classify_class(img: &Tensor) -> ShapeClass {
    CLASSES
        .into_iter()
        .max_by(|a, b| class_score(img, *a).total_cmp(&class_score(img, *b)))
        .unwrap()
}

pub fn classify_background(img: &Tensor) -> Background {
    BACKGROUNDS
        .into_iter()
        .max_by(|a, b| background_score(img, *a).total_cmp(&background_score(img, *b)))
        .unwrap()
}

/// Silhouette similarity against a reference set, in [0, 1].
///
/// Contract: a bit-identical image (or identical silhouette) scores exactly
/// 1.0; an image with no dark ink scores 0.0; otherwise the best shifted
/// correlation against any reference, clamped to [0, 1].
pub fn subject_sim(img: &Tensor, refs: &[Tensor]) -> f64 {
    assert!(!refs.is_empty(), "subject_sim needs at least one reference");
    if refs.iter().any(|r| r.data() == img.data()) {
        return 1.0;
    }
    let mask = silhouette(img);
    if mask.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut best = 0.0_f64;
    for r in refs {
        let rmask = silhouette(r);
        if rmask == mask {
            return 1.0;
        }
        best = best.max(best_shift_ncc(&mask, &rmask));
    }
    best.clamp(0.0, 1.0)
}

/// Element scores for the attributes a prompt mentions. Tokens that are not
/// attribute words (placeholders, class nouns swapped out, etc.) are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleScores {
    pub style: Option<f64>,
    pub class: Option<f64>,
    pub background: Option<f64>,
}

impl OracleScores {
    /// Mean of the elements present; 0 when the prompt named none.
    pub fn aggregate(&self) -> f64 {
        let parts: Vec<f64> =
            [self.style, self.class, self.background].into_iter().flatten().collect();
        if parts.is_empty() {
            0.0
        } else {
            parts.iter().sum::<f64>() / parts.len() as f64
        }
    }
}

/// Score one attribute token against the image, if it is an attribute token.
pub fn score_token(img: &Tensor, token: &str) -> Option<f64> {
    if let Some(s) = Style::from_token(token) {
        return Some(style_score(img, s));
    }
    if let Some(c) = ShapeClass::from_token(token) {
        return Some(class_score(img, c));
    }
    Background::from_token(token).map(|b| background_score(img, b))
}

/// Text alignment: element scores for every attribute token in the prompt.
/// When a category appears more than once the first mention wins.
pub fn text_align<'a>(img: &Tensor, tokens: impl IntoIterator<Item = &'a str>) -> OracleScores {
    let mut out = OracleScores::default();
    for tok in tokens {
        if let Some(s) = Style::from_token(tok) {
            out.style.get_or_insert_with(|| style_score(img, s));
        } else if let Some(c) = ShapeClass::from_token(tok) {
            out.class.get_or_insert_with(|| class_score(img, c));
        } else if let Some(b) = Background::from_token(tok) {
            out.background.get_or_insert_with(|| background_score(img, b));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::world::{
        gen_dataset, render_subject_at, subject_images, AttributeSpec, SubjectKind, IMAGE_PIXELS,
    };
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn noise_image(seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..IMAGE_PIXELS).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], data)
    }

    /// 1008 held-out jittered renders; every element scorer must classify its
    /// attribute at ≥99% accuracy (backgrounds judged on photo images, where
    /// the attribute is actually drawn).
    #[test]
    fn element_scorers_classify_held_out_renders() {
        let ds = gen_dataset(&AttributeSpec::default(), 42, 20_260_101);
        assert_eq!(ds.len(), 1008);
        let mut style_ok = 0;
        let mut class_ok = 0;
        let mut bg_ok = 0;
        let mut photo_count = 0;
        for item in &ds {
            if classify_style(&item.image) == item.label.style {
                style_ok += 1;
            }
            if classify_class(&item.image) == item.label.class {
                class_ok += 1;
            }
            if item.label.style == Style::Photo {
                photo_count += 1;
                if classify_background(&item.image) == item.label.background {
                    bg_ok += 1;
                }
            }
        }
        let n = ds.len() as f64;
        assert!(style_ok as f64 / n >= 0.99, "style accuracy {}/{}", style_ok, ds.len());
        assert!(class_ok as f64 / n >= 0.99, "class accuracy {}/{}", class_ok, ds.len());
        assert!(
            bg_ok as f64 / photo_count as f64 >= 0.99,
            "background accuracy {bg_ok}/{photo_count}"
        );
    }

    #[test]
    fn correct_attributes_score_high_and_wrong_style_scores_low() {
        let ds = gen_dataset(&AttributeSpec::default(), 6, 77);
        let mut style_sum = 0.0;
        let mut class_sum = 0.0;
        let mut bg_sum = 0.0;
        let mut photo_count = 0;
        for item in &ds {
            style_sum += style_score(&item.image, item.label.style);
            class_sum += class_score(&item.image, item.label.class);
            let wrong = match item.label.style {
                Style::Photo => Style::Sketch,
                Style::Sketch => Style::Photo,
            };
            assert!(
                style_score(&item.image, wrong) <= 0.2,
                "wrong-style score {} on {:?}",
                style_score(&item.image, wrong),
                item.label
            );
            if item.label.style == Style::Photo {
                photo_count += 1;
                bg_sum += background_score(&item.image, item.label.background);
            }
        }
        let n = ds.len() as f64;
        assert!(style_sum / n >= 0.85, "mean correct style score {}", style_sum / n);
        assert!(class_sum / n >= 0.9, "mean correct class score {}", class_sum / n);
        assert!(bg_sum / photo_count as f64 >= 0.9, "mean bg score {}", bg_sum / photo_count as f64);
    }

    #[test]
    fn unstructured_noise_aggregates_below_the_floor() {
        for seed in 0..50 {
            let img = noise_image(seed);
            let scores = text_align(&img, ["photo", "square", "plain"]);
            let agg = scores.aggregate();
            assert!(agg <= 0.4, "noise aggregate {agg} at seed {seed}");
        }
    }

    #[test]
    fn subject_sim_is_exactly_one_on_itself_and_zero_on_blank() {
        let refs = subject_images(SubjectKind::TexturedDiamond, 8, 5);
        assert_eq!(subject_sim(&refs[3], &refs), 1.0);
        let blank = Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], vec![0.75; IMAGE_PIXELS]);
        assert_eq!(subject_sim(&blank, &refs), 0.0);
    }

    #[test]
    fn jittered_rerenders_stay_similar_to_the_reference_set() {
        for kind in [SubjectKind::TexturedDiamond, SubjectKind::StripedEllipse] {
            let refs = subject_images(kind, 8, 5);
            // Fresh jitter draws from a different seed.
            for img in subject_images(kind, 8, 99) {
                let sim = subject_sim(&img, &refs);
                assert!(sim >= 0.8, "{:?} re-render sim {sim}", kind);
            }
        }
    }

    #[test]
    fn subject_sim_separates_subject_from_plain_class_and_noise() {
        let refs = subject_images(SubjectKind::TexturedDiamond, 8, 5);
        let square = render_cell(
            CellLabel {
                style: Style::Photo,
                class: ShapeClass::Square,
                background: Background::Dots,
            },
            Placement::centered(9.0),
        );
        let class_sim = subject_sim(&square, &refs);
        let self_sim = subject_sim(&render_subject_at(SubjectKind::TexturedDiamond, Placement::centered(9.0)), &refs);
        assert!(
            class_sim + 0.1 <= self_sim,
            "class render sim {class_sim} not separated from subject sim {self_sim}"
        );
        for seed in 0..10 {
            let sim = subject_sim(&noise_image(seed), &refs);
            assert!(sim <= 0.6, "noise sim {sim}");
        }
    }

    #[test]
    fn sketch_renders_keep_their_class_readable() {
        // The span fill must reconstruct solid silhouettes from outlines.
        for &class in &CLASSES {
            let img = render_cell(
                CellLabel { style: Style::Sketch, class, background: Background::Plain },
                Placement { size: 9.0, cx: 8.5, cy: 7.5 },
            );
            assert_eq!(classify_class(&img), class, "sketch {class:?} misread");
            assert!(class_score(&img, class) >= 0.8);
        }
    }

    #[test]
    fn text_align_skips_non_attribute_tokens() {
        let img = render_cell(
            CellLabel {
                style: Style::Photo,
                class: ShapeClass::Circle,
                background: Background::Dots,
            },
            Placement::centered(10.0),
        );
        let scores = text_align(&img, ["[V]", "photo", "dots"]);
        assert!(scores.class.is_none());
        assert!(scores.style.is_some() && scores.background.is_some());
        let agg = scores.aggregate();
        assert!(agg > 0.8, "aggregate {agg}");
        assert_eq!(text_align(&img, ["[V]"]).aggregate(), 0.0);
    }
}
