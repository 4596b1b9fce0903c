//! Damage simulation: stains, scratches, folds and crease shadows.
//!
//! Every defect is a binary mask plus an ink-density change inside it. The mask
//! is the top-k pixels of a kind-specific potential field with
//! `k = round(area_ratio * H * W)`, so its area is exact, and every pixel inside it
//! is guaranteed to change while every pixel outside is left untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    Scratch,
    Stain,
    Fold,
    CreaseShadow,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] = [
        DefectKind::Scratch,
        DefectKind::Stain,
        DefectKind::Fold,
        DefectKind::CreaseShadow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Stain => "stain",
            DefectKind::Fold => "fold",
            DefectKind::CreaseShadow => "crease-shadow",
        }
    }
}

impl std::str::FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown defect kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub area_ratio: f64,
    pub seed: u64,
}

impl DefectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.area_ratio) {
            return Err(Error::range(
                "area_ratio",
                self.area_ratio,
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// The defect mask (row-major, one flag per pixel) and per-pixel strength in [0, 1].
pub fn defect_mask(
    height: usize,
    width: usize,
    spec: &DefectSpec,
) -> Result<(Vec<bool>, Vec<f64>)> {
    spec.validate()?;
    let n = height * width;
    let k = (spec.area_ratio * n as f64).round() as usize;
    let field = potential(height, width, spec);
    let mut order: Vec<usize> = (0..n).collect();
    // descending potential, ties by index
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    let mut strength = vec![0.0; n];
    if k == 0 {
        return Ok((mask, strength));
    }
    let hi = field[order[0]];
    let lo = field[order[k - 1]];
    let span = (hi - lo).max(1e-12);
    for &i in &order[..k] {
        mask[i] = true;
        // 0 at the mask boundary, 1 at its core
        strength[i] = ((field[i] - lo) / span).clamp(0.0, 1.0);
    }
    Ok((mask, strength))
}

/// Apply a defect to an ink-density image. Multi-channel images are damaged
/// identically in every channel.
pub fn inject_defects(image: &Image, spec: &DefectSpec) -> Result<Image> {
    spec.validate()?;
    if !image.in_unit_range() {
        return Err(Error::range(
            "image",
            f64::NAN,
            "pixel values must lie in [0, 1]",
        ));
    }
    let (h, w, ch) = image.shape();
    let (mask, strength) = defect_mask(h, w, spec)?;
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if !mask[p] {
                continue;
            }
            let amount = match spec.kind {
                DefectKind::Stain => 0.2 + 0.25 * strength[p],
                DefectKind::Scratch => 0.55,
                DefectKind::Fold => 0.35,
                DefectKind::CreaseShadow => 0.12 + 0.3 * strength[p],
            };
            for k in 0..ch {
                let d = image.get(r, c, k);
                let delta = (1.0 - d) * amount;
                // near-saturated ink cannot darken visibly; lighten it instead
                let v = if delta < 1e-3 { d - 0.1 } else { d + delta };
                out.set(r, c, k, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

fn potential(height: usize, width: usize, spec: &DefectSpec) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(spec.seed, spec.kind.name()));
    let (hf, wf) = (height as f64, width as f64);
    let diag = hf.hypot(wf);
    // tiny dither so ties are rare and masks are not perfectly regular
    let mut dither_rng = seed::rng(seed::derive(spec.seed, "dither"));
    let mut field = vec![0.0; height * width];
    match spec.kind {
        DefectKind::Stain => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
                .map(|_| {
                    (
                        rng.random_range(0.0..hf),
                        rng.random_range(0.0..wf),
                        rng.random_range(0.15..0.35) * diag,
                        rng.random_range(0.6..1.0),
                    )
                })
                .collect();
            let waves: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(0.5..3.0) / hf,
                        rng.random_range(0.5..3.0) / wf,
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            for r in 0..height {
                for c in 0..width {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    let mut v = 0.0;
                    for &(cy, cx, rad, amp) in &blobs {
                        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                        v += amp * (-d2 / (2.0 * rad * rad)).exp();
                    }
                    let ripple: f64 = waves
                        .iter()
                        .map(|&(fy, fx, ph)| (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                        .sum::<f64>()
                        / waves.len() as f64;
                    field[r * width + c] = v * (1.0 + 0.25 * ripple);
                }
            }
        }
        DefectKind::Scratch => {
            let lines: Vec<((f64, f64), (f64, f64))> = (0..rng.random_range(3..=7))
                .map(|_| {
                    let a = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                    let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let len = rng.random_range(0.3..0.9) * diag;
                    (a, (a.0 + len * ang.sin(), a.1 + len * ang.cos()))
                })
                .collect();
            for r in 0..height {
                for c in 0..width {
                    let p = (r as f64 + 0.5, c as f64 + 0.5);
                    let d = lines
                        .iter()
                        .map(|&(a, b)| segment_distance(p, a, b))
                        .fold(f64::INFINITY, f64::min);
                    field[r * width + c] = -d;
                }
            }
        }
        DefectKind::Fold | DefectKind::CreaseShadow => {
            let centre = (
                rng.random_range(0.2..0.8) * hf,
                rng.random_range(0.2..0.8) * wf,
            );
            let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let normal = (ang.cos(), -ang.sin());
            for r in 0..height {
                for c in 0..width {
                    let off = (r as f64 + 0.5 - centre.0) * normal.0
                        + (c as f64 + 0.5 - centre.1) * normal.1;
                    field[r * width + c] = if spec.kind == DefectKind::Fold {
                        -off.abs()
                    } else {
                        // shadow falls on one side of the crease
                        -(off.max(0.0) + 4.0 * (-off).max(0.0))
                    };
                }
            }
        }
    }
    for v in &mut field {
        *v += dither_rng.random_range(0.0..1e-9);
    }
    field
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = (a.0 + t * ab.0, a.1 + t * ab.1);
    (p.0 - q.0).hypot(p.1 - q.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render::render_page;
    use crate::corpus::WriterStyle;

    fn page() -> Image {
        render_page(&WriterStyle::derive(11, 3), 128, 128, 16, 5)
    }

    fn changed_fraction(a: &Image, b: &Image) -> f64 {
        let n = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| x != y)
            .count();
        n as f64 / a.data().len() as f64
    }

    #[test]
    fn zero_area_is_identity() {
        let img = page();
        for kind in DefectKind::ALL {
            let out = inject_defects(
                &img,
                &DefectSpec {
                    kind,
                    area_ratio: 0.0,
                    seed: 1,
                },
            )
            .unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn ten_percent_stain_changes_about_ten_percent() {
        let img = page();
        let out = inject_defects(
            &img,
            &DefectSpec {
                kind: DefectKind::Stain,
                area_ratio: 0.10,
                seed: 77,
            },
        )
        .unwrap();
        let f = changed_fraction(&img, &out);
        assert!((0.08..=0.12).contains(&f), "changed fraction {f}");
    }

    #[test]
    fn changed_pixels_equal_mask_for_every_kind() {
        let img = page();
        for (i, kind) in DefectKind::ALL.into_iter().enumerate() {
            for ratio in [0.05, 0.1, 0.3, 0.5, 1.0] {
                let spec = DefectSpec {
                    kind,
                    area_ratio: ratio,
                    seed: 100 + i as u64,
                };
                let out = inject_defects(&img, &spec).unwrap();
                assert!(out.in_unit_range());
                let (mask, _) = defect_mask(128, 128, &spec).unwrap();
                for (p, &m) in mask.iter().enumerate() {
                    assert_eq!(
                        m,
                        img.data()[p] != out.data()[p],
                        "{kind:?} {ratio} pixel {p}"
                    );
                }
                let area = mask.iter().filter(|&&m| m).count() as f64;
                let target = ratio * 128.0 * 128.0;
                assert!((area - target).abs() <= 0.02 * target.max(1.0));
            }
        }
    }

    #[test]
    fn out_of_range_ratio_is_rejected() {
        let img = page();
        for ratio in [-0.1, 1.5] {
            let err = inject_defects(
                &img,
                &DefectSpec {
                    kind: DefectKind::Fold,
                    area_ratio: ratio,
                    seed: 0,
                },
            );
            assert!(matches!(err, Err(Error::Range { .. })));
        }
    }

    #[test]
    fn kinds_parse_from_names() {
        for kind in DefectKind::ALL {
            assert_eq!(kind.name().parse::<DefectKind>().unwrap(), kind);
        }
        assert!("smudge".parse::<DefectKind>().is_err());
    }
}
