//! The synthetic toy world: 16×16 grayscale renders of attribute triples
//! (style, shape class, background), plus the two textured subjects used for
//! personalization.
//!
//! Everything renders deterministically: backgrounds have fixed phase, shapes
//! are positioned by explicit parameters, and anti-aliasing is a fixed 4×4
//! supersample per pixel. Randomness only enters through the jitter draws in
//! the dataset generators, all seeded.

use crate::diffcore::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Fill intensity of plain class shapes in photo style.
pub const SHAPE_FILL: f64 = 0.25;
/// Sketch stroke intensity.
pub const STROKE: f64 = 0.1;
/// Sketch stroke thickness (erosion depth). Thick enough that every boundary
/// pixel keeps majority ink coverage at any subpixel placement.
const STROKE_INSET: f64 = 1.3;
/// Sketch paper is pure white so the style oracle's whiteness test is exact.
pub const SKETCH_PAPER: f64 = 1.0;

// Background palette. All light (well above the shape fill) and all below
// pure white, so a 2-px border ring separates photo from sketch and the three
// photo backgrounds from each other.
const PLAIN_LEVEL: f64 = 0.82;
const STRIPE_DARK: f64 = 0.72;
const STRIPE_LIGHT: f64 = 0.86;
const DOT_BASE: f64 = 0.86;
const DOT_LEVEL: f64 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Photo,
    Sketch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Square,
    Circle,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Plain,
    Stripes,
    Dots,
}

pub const STYLES: [Style; 2] = [Style::Photo, Style::Sketch];
pub const CLASSES: [ShapeClass; 4] =
    [ShapeClass::Square, ShapeClass::Circle, ShapeClass::Triangle, ShapeClass::Cross];
pub const BACKGROUNDS: [Background; 3] =
    [Background::Plain, Background::Stripes, Background::Dots];

impl Style {
    pub fn token(self) -> &'static str {
        match self {
            Style::Photo => "photo",
            Style::Sketch => "sketch",
        }
    }

    pub fn from_token(t: &str) -> Option<Style> {
        STYLES.into_iter().find(|s| s.token() == t)
    }
}

impl ShapeClass {
    pub fn token(self) -> &'static str {
        match self {
            ShapeClass::Square => "square",
            ShapeClass::Circle => "circle",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    pub fn from_token(t: &str) -> Option<ShapeClass> {
        CLASSES.into_iter().find(|s| s.token() == t)
    }
}

impl Background {
    pub fn token(self) -> &'static str {
        match self {
            Background::Plain => "plain",
            Background::Stripes => "stripes",
            Background::Dots => "dots",
        }
    }

    pub fn from_token(t: &str) -> Option<Background> {
        BACKGROUNDS.into_iter().find(|s| s.token() == t)
    }
}

/// The full attribute vocabulary, in the order embedding tables use.
pub fn attribute_tokens() -> Vec<&'static str> {
    let mut out = Vec::new();
    out.extend(STYLES.iter().map(|s| s.token()));
    out.extend(CLASSES.iter().map(|s| s.token()));
    out.extend(BACKGROUNDS.iter().map(|s| s.token()));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellLabel {
    pub style: Style,
    pub class: ShapeClass,
    pub background: Background,
}

impl CellLabel {
    pub fn prompt_text(&self) -> String {
        format!("{} {} {}", self.style.token(), self.class.token(), self.background.token())
    }
}

/// Attribute grid plus the geometry jitter the generators draw from.
#[derive(Clone, Debug)]
pub struct AttributeSpec {
    pub styles: Vec<Style>,
    pub classes: Vec<ShapeClass>,
    pub backgrounds: Vec<Background>,
    pub image_side: usize,
    /// Shape bounding-box sizes, in pixels.
    pub size_choices: Vec<f64>,
    /// Center offset magnitude limit; sizes and offsets are chosen so shapes
    /// never reach the 2-px border ring the background oracle reads.
    pub max_offset: f64,
}

impl Default for AttributeSpec {
    fn default() -> Self {
        AttributeSpec {
            styles: STYLES.to_vec(),
            classes: CLASSES.to_vec(),
            backgrounds: BACKGROUNDS.to_vec(),
            image_side: IMAGE_SIDE,
            size_choices: vec![8.0, 9.0, 10.0],
            // Largest shape (10 px) at the extreme offset reaches exactly to
            // the edge of the 2-px border ring: 8 + 1 + 5 = 14.
            max_offset: 1.0,
        }
    }
}

/// Placement of one shape instance.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub size: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Placement {
    pub fn centered(size: f64) -> Placement {
        let c = IMAGE_SIDE as f64 / 2.0;
        Placement { size, cx: c, cy: c }
    }

    fn jittered(spec: &AttributeSpec, rng: &mut ChaCha12Rng) -> Placement {
        let size = spec.size_choices[rng.random_range(0..spec.size_choices.len())];
        let c = spec.image_side as f64 / 2.0;
        let cx = c + rng.random_range(-spec.max_offset..=spec.max_offset);
        let cy = c + rng.random_range(-spec.max_offset..=spec.max_offset);
        Placement { size, cx, cy }
    }
}

fn background_pixel(bg: Background, row: usize, col: usize) -> f64 {
    match bg {
        Background::Plain => PLAIN_LEVEL,
        Background::Stripes => {
            if col % 4 < 2 {
                STRIPE_DARK
            } else {
                STRIPE_LIGHT
            }
        }
        Background::Dots => {
            if row % 4 == 1 && col % 4 == 1 {
                DOT_LEVEL
            } else {
                DOT_BASE
            }
        }
    }
}

pub fn render_background(bg: Background) -> Tensor {
    let mut px = Vec::with_capacity(IMAGE_PIXELS);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            px.push(background_pixel(bg, r, c));
        }
    }
    Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], px)
}

/// Geometry predicate: is the point (dx, dy measured from the shape center)
/// inside the shape of bounding-box size `s`, eroded inward by `inset`?
fn inside(class: ShapeClass, dx: f64, dy: f64, s: f64, inset: f64) -> bool {
    let h = s / 2.0 - inset;
    if h <= 0.0 {
        return false;
    }
    match class {
        ShapeClass::Square => dx.abs() <= h && dy.abs() <= h,
        ShapeClass::Circle => dx * dx + dy * dy <= h * h,
        ShapeClass::Triangle => {
            // Upward isoceles triangle: apex (0, −s/2), base corners
            // (±s/2, +s/2). Erosion moves each edge inward along its own
            // normal (the slanted edges have normal slope √5/2 relative to
            // the size parameter) so outlines keep uniform thickness.
            let half = s / 2.0;
            let slant_limit = (dy + half - inset * 5.0_f64.sqrt()) / 2.0;
            dy <= half - inset && dx.abs() <= slant_limit
        }
        ShapeClass::Cross => {
            let w = s / 5.0 - inset;
            if w <= 0.0 {
                return false;
            }
            (dx.abs() <= w && dy.abs() <= h) || (dy.abs() <= w && dx.abs() <= h)
        }
    }
}

/// Subject geometry: novel shapes whose nearest vocabulary class is the
/// listed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKind {
    /// 45°-rotated square with a checkerboard texture; class token "square".
    TexturedDiamond,
    /// Wide ellipse with horizontal stripes; class token "circle".
    StripedEllipse,
}

impl SubjectKind {
    pub fn class(self) -> ShapeClass {
        match self {
            SubjectKind::TexturedDiamond => ShapeClass::Square,
            SubjectKind::StripedEllipse => ShapeClass::Circle,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubjectKind::TexturedDiamond => "textured_diamond",
            SubjectKind::StripedEllipse => "striped_ellipse",
        }
    }

    pub fn from_name(name: &str) -> Option<SubjectKind> {
        [SubjectKind::TexturedDiamond, SubjectKind::StripedEllipse]
            .into_iter()
            .find(|s| s.name() == name)
    }

    fn inside(self, dx: f64, dy: f64, s: f64, inset: f64) -> bool {
        match self {
            SubjectKind::TexturedDiamond => {
                let h = s / 2.0 - inset * std::f64::consts::SQRT_2;
                h > 0.0 && dx.abs() + dy.abs() <= h
            }
            SubjectKind::StripedEllipse => {
                let a = s / 2.0 - inset;
                let b = s / 3.0 - inset;
                a > 0.0 && b > 0.0 && (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
        }
    }

    /// Texture intensity at an offset from the shape center, so the pattern
    /// travels with the shape under jitter.
    fn texture(self, dx: f64, dy: f64) -> f64 {
        match self {
            // Both texture levels stay below the oracle's darkness threshold
            // so silhouettes extract as solid masks.
            SubjectKind::TexturedDiamond => {
                let cell = (dx / 2.0).floor() + (dy / 2.0).floor();
                if (cell as i64).rem_euclid(2) == 0 {
                    0.2
                } else {
                    0.42
                }
            }
            SubjectKind::StripedEllipse => {
                if ((dy / 1.5).floor() as i64).rem_euclid(2) == 0 {
                    0.2
                } else {
                    0.42
                }
            }
        }
    }
}

/// 4×4 supersampled coverage of a predicate over one pixel.
fn coverage(px: usize, py: usize, mut hit: impl FnMut(f64, f64) -> bool) -> f64 {
    let mut inside_count = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px as f64 + (sx as f64 + 0.5) / 4.0;
            let y = py as f64 + (sy as f64 + 0.5) / 4.0;
            if hit(x, y) {
                inside_count += 1;
            }
        }
    }
    inside_count as f64 / 16.0
}

enum Geometry {
    Class(ShapeClass),
    Subject(SubjectKind),
}

impl Geometry {
    fn hit(&self, dx: f64, dy: f64, s: f64, inset: f64) -> bool {
        match self {
            Geometry::Class(c) => inside(*c, dx, dy, s, inset),
            Geometry::Subject(k) => k.inside(dx, dy, s, inset),
        }
    }

    fn fill(&self, dx: f64, dy: f64) -> f64 {
        match self {
            Geometry::Class(_) => SHAPE_FILL,
            Geometry::Subject(k) => k.texture(dx, dy),
        }
    }
}

fn render(geom: &Geometry, style: Style, bg: Background, place: Placement) -> Tensor {
    let mut px = Vec::with_capacity(IMAGE_PIXELS);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let value = match style {
                Style::Photo => {
                    let base = background_pixel(bg, r, c);
                    let cov = coverage(c, r, |x, y| {
                        geom.hit(x - place.cx, y - place.cy, place.size, 0.0)
                    });
                    let dxc = c as f64 + 0.5 - place.cx;
                    let dyc = r as f64 + 0.5 - place.cy;
                    let fill = geom.fill(dxc, dyc);
                    base + cov * (fill - base)
                }
                Style::Sketch => {
                    // Outline band: inside the shape but not inside its
                    // eroded interior.
                    let cov = coverage(c, r, |x, y| {
                        let (dx, dy) = (x - place.cx, y - place.cy);
                        geom.hit(dx, dy, place.size, 0.0)
                            && !geom.hit(dx, dy, place.size, STROKE_INSET)
                    });
                    SKETCH_PAPER + cov * (STROKE - SKETCH_PAPER)
                }
            };
            px.push(value);
        }
    }
    Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], px)
}

/// Render one attribute cell at an explicit placement.
pub fn render_cell(label: CellLabel, place: Placement) -> Tensor {
    render(&Geometry::Class(label.class), label.style, label.background, place)
}

/// Render a personalization subject (photo style over the dots background,
/// its "home" setting) at an explicit placement.
pub fn render_subject_at(kind: SubjectKind, place: Placement) -> Tensor {
    render(&Geometry::Subject(kind), Style::Photo, Background::Dots, place)
}

/// Render a subject in an arbitrary style/background, for scoring probes.
pub fn render_subject_styled(
    kind: SubjectKind,
    style: Style,
    bg: Background,
    place: Placement,
) -> Tensor {
    render(&Geometry::Subject(kind), style, bg, place)
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub image: Tensor,
    pub label: CellLabel,
}

/// `n_per_cell` jittered renders of every (style, class, background) triple.
pub fn gen_dataset(spec: &AttributeSpec, n_per_cell: usize, seed: u64) -> Vec<DatasetItem> {
    assert!(n_per_cell >= 1, "need at least one image per cell");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut items =
        Vec::with_capacity(spec.styles.len() * spec.classes.len() * spec.backgrounds.len() * n_per_cell);
    for &style in &spec.styles {
        for &class in &spec.classes {
            for &background in &spec.backgrounds {
                let label = CellLabel { style, class, background };
                for _ in 0..n_per_cell {
                    let place = Placement::jittered(spec, &mut rng);
                    items.push(DatasetItem { image: render_cell(label, place), label });
                }
            }
        }
    }
    items
}

/// Jittered photo renders of one subject — the personalization image set.
pub fn subject_images(kind: SubjectKind, n: usize, seed: u64) -> Vec<Tensor> {
    assert!(n >= 1);
    let spec = AttributeSpec::default();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n).map(|_| render_subject_at(kind, Placement::jittered(&spec, &mut rng))).collect()
}
