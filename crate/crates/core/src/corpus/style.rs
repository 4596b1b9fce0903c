use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

/// Per-writer rendering parameters.
///
/// Styles are a pure function of `(corpus_seed, writer_id)`. The three scalar
/// parameters are spread with additive low-discrepancy sequences, so distinct
/// writers never share a `(stroke_thickness, slant, glyph_density)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    pub writer_id: u32,
    /// Pen width in pixels.
    pub stroke_thickness: f64,
    /// Shear angle in radians; positive leans right.
    pub slant: f64,
    /// Fraction of horizontal space filled by glyphs, in (0, 1].
    pub glyph_density: f64,
    /// Seeds the writer's glyph atlas and secondary traits.
    pub texture_seed: u64,
}

pub(crate) const THICKNESS_RANGE: (f64, f64) = (1.0, 3.2);
pub(crate) const SLANT_RANGE: (f64, f64) = (-0.55, 0.55);
pub(crate) const DENSITY_RANGE: (f64, f64) = (0.35, 1.0);

// Fractional parts of these are badly approximable, keeping sequences well spread.
const GOLDEN: f64 = 0.618_033_988_749_894_9;
const SQRT2_FRAC: f64 = 0.414_213_562_373_095_1;
const SQRT3_FRAC: f64 = 0.732_050_807_568_877_2;

fn spread(index: u32, step: f64, offset: f64, range: (f64, f64)) -> f64 {
    let u = (offset + step * f64::from(index)).fract();
    range.0 + (range.1 - range.0) * u
}

impl WriterStyle {
    pub fn derive(corpus_seed: u64, writer_id: u32) -> Self {
        let mut rng = seed::rng_for(corpus_seed, "writer-style-offsets");
        let offsets: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        Self {
            writer_id,
            stroke_thickness: spread(writer_id, GOLDEN, offsets[0], THICKNESS_RANGE),
            slant: spread(writer_id, SQRT2_FRAC, offsets[1], SLANT_RANGE),
            glyph_density: spread(writer_id, SQRT3_FRAC, offsets[2], DENSITY_RANGE),
            texture_seed: seed::derive_indexed(
                corpus_seed,
                "writer-texture",
                &[u64::from(writer_id)],
            ),
        }
    }

    /// A copy with every scalar parameter independently scaled by a factor in
    /// `[1 - jitter, 1 + jitter]`. The atlas is kept.
    pub fn jittered(&self, jitter: f64, rng: &mut impl Rng) -> Self {
        let mut f = || 1.0 + rng.random_range(-jitter..=jitter);
        Self {
            writer_id: self.writer_id,
            stroke_thickness: self.stroke_thickness * f(),
            slant: self.slant * f(),
            glyph_density: (self.glyph_density * f()).clamp(0.05, 1.0),
            texture_seed: self.texture_seed,
        }
    }
}
