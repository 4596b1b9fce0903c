//! Pseudo-handwriting page renderer.
//!
//! Pages are ink-density images: 0 is blank paper, larger values are darker ink.
//! Text is laid out on a ruled grid whose band height equals the patch size, with
//! one blank band between lines, so every writing line sits inside one row of
//! patches.

use rand::Rng;

use super::style::WriterStyle;
use crate::image::Image;
use crate::seed;

const ATLAS_SIZE: usize = 12;
const MARGIN: f64 = 4.0;

#[derive(Debug, Clone)]
struct Stroke {
    // quadratic Bézier in the unit glyph box: (u, v), v = 0 at the top
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
}

#[derive(Debug, Clone)]
struct Glyph {
    strokes: Vec<Stroke>,
}

/// Traits that follow from the writer's atlas seed rather than the public style triple.
#[derive(Debug, Clone)]
struct Atlas {
    glyphs: Vec<Glyph>,
    aspect: f64,
    ink: f64,
    word_len: (usize, usize),
}

impl Atlas {
    fn build(texture_seed: u64) -> Self {
        let mut rng = seed::rng(texture_seed);
        let curl: f64 = rng.random_range(0.2..1.0);
        let glyphs = (0..ATLAS_SIZE)
            .map(|_| {
                let n = rng.random_range(1..=3);
                let strokes = (0..n)
                    .map(|_| {
                        let p0 = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                        let p2 = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                        let mid = ((p0.0 + p2.0) / 2.0, (p0.1 + p2.1) / 2.0);
                        let p1 = (
                            (mid.0 + curl * rng.random_range(-0.8..0.8)).clamp(-0.2, 1.2),
                            (mid.1 + curl * rng.random_range(-0.8..0.8)).clamp(-0.2, 1.2),
                        );
                        Stroke { p0, p1, p2 }
                    })
                    .collect();
                Glyph { strokes }
            })
            .collect();
        let short = rng.random_range(2..5);
        Self {
            glyphs,
            aspect: rng.random_range(0.45..0.9),
            ink: rng.random_range(0.72..0.9),
            word_len: (short, short + rng.random_range(1..4)),
        }
    }
}

/// Rows (top edge) of the writing bands for a page of height `height`.
pub fn line_tops(height: usize, band: usize) -> Vec<usize> {
    let lines = (height / (2 * band)).saturating_sub(1).max(1);
    (0..lines)
        .map(|k| band * (2 * k + 1))
        .filter(|top| top + band <= height)
        .collect()
}

/// Render one page. `content_seed` controls the glyph sequence and per-sample
/// jitter; the style controls everything writer-specific.
pub fn render_page(
    style: &WriterStyle,
    height: usize,
    width: usize,
    band: usize,
    content_seed: u64,
) -> Image {
    let atlas = Atlas::build(style.texture_seed);
    let mut rng = seed::rng(content_seed);
    let mut page = Image::zeros(height, width, 1);

    let thickness = style.stroke_thickness;
    let x_height = (band as f64 - 3.0 - thickness.ceil()).max(3.0);
    let glyph_w = x_height * atlas.aspect;
    let gap = glyph_w * (1.0 / style.glyph_density - 1.0) * 0.5 + 1.0;
    let word_gap = glyph_w * 0.8;
    let shear = style.slant.tan();
    // keep slanted glyphs inside the margins
    let lean = (x_height * shear).abs();

    let tops = if band <= height {
        line_tops(height, band)
    } else {
        Vec::new()
    };
    for top in tops {
        let vpad = (band as f64 - x_height) / 2.0;
        let baseline_jitter = rng.random_range(-0.6..0.6);
        let glyph_top = top as f64 + vpad + baseline_jitter;
        let mut x = MARGIN + rng.random_range(0.0..3.0) + if shear < 0.0 { lean } else { 0.0 };
        let mut left_in_word = rng.random_range(atlas.word_len.0..=atlas.word_len.1);
        loop {
            let scale = rng.random_range(0.95..1.05);
            let w = glyph_w * scale;
            let right_extent = x + w + if shear > 0.0 { lean } else { 0.0 };
            if right_extent > width as f64 - MARGIN {
                break;
            }
            let glyph = &atlas.glyphs[rng.random_range(0..atlas.glyphs.len())];
            for stroke in &glyph.strokes {
                let mut j = || rng.random_range(-0.04..0.04);
                let s = Stroke {
                    p0: (stroke.p0.0 + j(), stroke.p0.1 + j()),
                    p1: (stroke.p1.0 + j(), stroke.p1.1 + j()),
                    p2: (stroke.p2.0 + j(), stroke.p2.1 + j()),
                };
                draw_stroke(
                    &mut page, &s, x, glyph_top, w, x_height, shear, thickness, atlas.ink,
                );
            }
            x += w + gap;
            left_in_word -= 1;
            if left_in_word == 0 {
                x += word_gap;
                left_in_word = rng.random_range(atlas.word_len.0..=atlas.word_len.1);
            }
        }
    }
    page
}

#[allow(clippy::too_many_arguments)]
fn draw_stroke(
    page: &mut Image,
    s: &Stroke,
    x0: f64,
    top: f64,
    w: f64,
    h: f64,
    shear: f64,
    thickness: f64,
    ink: f64,
) {
    let to_px = |(u, v): (f64, f64)| -> (f64, f64) {
        let v = v.clamp(0.0, 1.0);
        (
            x0 + u.clamp(0.0, 1.0) * w + (1.0 - v) * h * shear,
            top + v * h,
        )
    };
    let a = to_px(s.p0);
    let b = to_px(s.p1);
    let c = to_px(s.p2);
    let approx_len = ((b.0 - a.0).hypot(b.1 - a.1) + (c.0 - b.0).hypot(c.1 - b.1)).max(1.0);
    let n = (approx_len * 3.0).ceil() as usize;
    let radius = thickness / 2.0;
    let reach = (radius + 1.0).ceil() as isize;
    let (height, width) = (page.height() as isize, page.width() as isize);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let mt = 1.0 - t;
        let px = mt * mt * a.0 + 2.0 * mt * t * b.0 + t * t * c.0;
        let py = mt * mt * a.1 + 2.0 * mt * t * b.1 + t * t * c.1;
        let (cx, cy) = (px.floor() as isize, py.floor() as isize);
        for r in (cy - reach)..=(cy + reach) {
            if r < 0 || r >= height {
                continue;
            }
            for col in (cx - reach)..=(cx + reach) {
                if col < 0 || col >= width {
                    continue;
                }
                let d = (col as f64 + 0.5 - px).hypot(r as f64 + 0.5 - py);
                let coverage = (radius + 0.5 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let (ru, cu) = (r as usize, col as usize);
                    let v = ink * coverage;
                    if v > page.get(ru, cu, 0) {
                        page.set(ru, cu, 0, v);
                    }
                }
            }
        }
    }
}
