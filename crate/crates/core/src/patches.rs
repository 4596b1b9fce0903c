//! Patch decomposition and image-level augmentation.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;
use crate::tensor::Matrix;

/// Row-major sequence of flattened `patch_size`×`patch_size` tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// One row per patch, each flattened channel-last.
    pub patches: Matrix,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub source_shape: (usize, usize, usize),
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.rows
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows == 0
    }
}

/// Number of patches `H·W/P²` for a divisible image.
pub fn patch_count(height: usize, width: usize, patch_size: usize) -> Result<usize> {
    check_divisible(height, width, patch_size)?;
    Ok(height * width / (patch_size * patch_size))
}

fn check_divisible(height: usize, width: usize, patch_size: usize) -> Result<()> {
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    for (name, dim) in [("height", height), ("width", width)] {
        if dim % patch_size != 0 || dim == 0 {
            return Err(Error::Config(format!(
                "image {name} {dim} is not divisible by patch size {patch_size}"
            )));
        }
    }
    Ok(())
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchSequence> {
    let (h, w, ch) = image.shape();
    check_divisible(h, w, patch_size)?;
    let grid = (h / patch_size, w / patch_size);
    let row_len = patch_size * ch;
    let mut patches = Matrix::zeros(grid.0 * grid.1, patch_size * row_len);
    let data = image.data();
    for gr in 0..grid.0 {
        for gc in 0..grid.1 {
            let out = patches.row_mut(gr * grid.1 + gc);
            for r in 0..patch_size {
                let src = ((gr * patch_size + r) * w + gc * patch_size) * ch;
                out[r * row_len..(r + 1) * row_len].copy_from_slice(&data[src..src + row_len]);
            }
        }
    }
    Ok(PatchSequence {
        patches,
        grid,
        patch_size,
        source_shape: (h, w, ch),
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let (h, w, ch) = seq.source_shape;
    let p = seq.patch_size;
    check_divisible(h, w, p)?;
    if seq.grid != (h / p, w / p) || seq.patches.shape() != (seq.grid.0 * seq.grid.1, p * p * ch) {
        return Err(Error::Shape(format!(
            "patch sequence {:?} with grid {:?} does not match source {h}x{w}x{ch} at patch size {p}",
            seq.patches.shape(),
            seq.grid
        )));
    }
    let row_len = p * ch;
    let mut data = vec![0.0; h * w * ch];
    for gr in 0..seq.grid.0 {
        for gc in 0..seq.grid.1 {
            let tile = seq.patches.row(gr * seq.grid.1 + gc);
            for r in 0..p {
                let dst = ((gr * p + r) * w + gc * p) * ch;
                data[dst..dst + row_len].copy_from_slice(&tile[r * row_len..(r + 1) * row_len]);
            }
        }
    }
    Image::from_vec(h, w, ch, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurPolicy {
    pub probability: f64,
    pub sigma_range: (f64, f64),
}

impl Default for BlurPolicy {
    fn default() -> Self {
        Self {
            probability: 0.5,
            sigma_range: (0.1, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupPolicy {
    pub probability: f64,
    /// Beta(alpha, alpha) parameter of the mixing coefficient.
    pub alpha: f64,
}

impl Default for MixupPolicy {
    fn default() -> Self {
        Self {
            probability: 0.2,
            alpha: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipPolicy {
    pub probability: f64,
}

impl Default for FlipPolicy {
    fn default() -> Self {
        Self { probability: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub gaussian_blur: BlurPolicy,
    pub mixup: MixupPolicy,
    pub horizontal_flip: FlipPolicy,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            gaussian_blur: BlurPolicy::default(),
            mixup: MixupPolicy::default(),
            horizontal_flip: FlipPolicy::default(),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// Policy that never changes an image.
    pub fn identity() -> Self {
        Self {
            gaussian_blur: BlurPolicy {
                probability: 0.0,
                ..BlurPolicy::default()
            },
            mixup: MixupPolicy {
                probability: 0.0,
                ..MixupPolicy::default()
            },
            horizontal_flip: FlipPolicy { probability: 0.0 },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("gaussian_blur.probability", self.gaussian_blur.probability),
            ("mixup.probability", self.mixup.probability),
            (
                "horizontal_flip.probability",
                self.horizontal_flip.probability,
            ),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::range(name, p, "must lie in [0, 1]"));
            }
        }
        let (lo, hi) = self.gaussian_blur.sigma_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::range(
                "gaussian_blur.sigma_range",
                lo,
                "must be positive and ordered",
            ));
        }
        if !(self.mixup.alpha > 0.0 && self.mixup.alpha.is_finite()) {
            return Err(Error::range("mixup.alpha", self.mixup.alpha, "must be > 0"));
        }
        Ok(())
    }
}

/// Randomly blur, mix and flip an image.
///
/// The draw is a pure function of `(policy.seed, sample_id, draw)`. `partner`
/// is only read when mixup fires; firing without one is an error.
pub fn augment(
    image: &Image,
    policy: &AugmentPolicy,
    sample_id: &str,
    draw: u64,
    partner: Option<&Image>,
) -> Result<Image> {
    policy.validate()?;
    let seed_value = seed::derive_indexed(policy.seed, &format!("augment:{sample_id}"), &[draw]);
    let mut rng = seed::rng(seed_value);
    let mut out = image.clone();
    if rng.random::<f64>() < policy.mixup.probability {
        let partner = partner.ok_or_else(|| {
            Error::State(format!(
                "mixup fired for {sample_id} without a partner image"
            ))
        })?;
        let beta = Beta::new(policy.mixup.alpha, policy.mixup.alpha)
            .map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;
        let lambda = beta.sample(&mut rng);
        out = mixup(&out, partner, lambda)?;
    }
    if rng.random::<f64>() < policy.gaussian_blur.probability {
        let (lo, hi) = policy.gaussian_blur.sigma_range;
        let sigma = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        out = gaussian_blur(&out, sigma);
    }
    if rng.random::<f64>() < policy.horizontal_flip.probability {
        out = flip_horizontal(&out);
    }
    out.clamp_unit();
    Ok(out)
}

/// `lambda·a + (1 − lambda)·b`.
pub fn mixup(a: &Image, b: &Image, lambda: f64) -> Result<Image> {
    a.ensure_same_shape(b, "mixup")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    let (h, w, c) = a.shape();
    Image::from_vec(h, w, c, data)
}

pub fn flip_horizontal(image: &Image) -> Image {
    let (h, w, ch) = image.shape();
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                out.set(r, c, k, image.get(r, w - 1 - c, k));
            }
        }
    }
    out
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, ch) = image.shape();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // reflect until inside; radius can exceed small images
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = Image::zeros(h, w, ch);
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        kv * image.get(r, mirror(c as isize + j as isize - radius, w), k)
                    })
                    .sum();
                tmp.set(r, c, k, v);
            }
        }
    }
    let mut out = Image::zeros(h, w, ch);
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp.get(mirror(r as isize + j as isize - radius, h), c, k))
                    .sum();
                out.set(r, c, k, v);
            }
        }
    }
    out
}
