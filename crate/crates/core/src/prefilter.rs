//! Spectral-energy pre-filter.
//!
//! Images are ink-density maps, so blank paper carries zero energy. The filter
//! tiles the page into `block_size` blocks and compares each block's windowed
//! (high-pass) spectral energy `E_B[t]` with the page's average energy `E_N`.
//! Blocks whose texture energy is low relative to the page average are treated
//! as damage: the ratio `clamp(E_B[t] / E_N, 0, 1)` is the gain kept, the rest is
//! the noise residual. A second pass re-inspects the residual and restores
//! blocks that look like removed strokes rather than smooth damage.
//!
//! All transforms use the unnormalized forward DFT, so the spectral energy of a
//! block equals `block_size² · Σ pixel²`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowProfile {
    RaisedCosine,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Block edge in pixels; a power of two dividing both image dimensions.
    pub block_size: usize,
    /// Smoothness weight of the regularized image used for energy estimates.
    pub lambda_reg: f64,
    pub window: WindowProfile,
    /// Residual blocks whose DC energy share is below this are restored as detail.
    pub detail_threshold: f64,
    /// Blocks whose input reaches this density contain ink and are always restored.
    pub ink_floor: f64,
    /// Quantile of the window around each restored pixel taken as the local
    /// background darkness, which is then divided out; 0 disables this.
    pub background_quantile: f64,
    /// Half-width of that window in pixels.
    pub background_radius: usize,
    /// Number of times the background estimate is redone and divided out.
    pub background_passes: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            lambda_reg: 0.1,
            window: WindowProfile::RaisedCosine,
            detail_threshold: 0.1,
            ink_floor: 0.6,
            background_quantile: 0.1,
            background_radius: 4,
            background_passes: 5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || !self.block_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "block_size = {} must be a power of two",
                self.block_size
            )));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::range("lambda_reg", self.lambda_reg, "must be >= 0"));
        }
        if !(self.detail_threshold >= 0.0) {
            return Err(Error::range(
                "detail_threshold",
                self.detail_threshold,
                "must be >= 0",
            ));
        }
        if !(self.ink_floor >= 0.0) {
            return Err(Error::range("ink_floor", self.ink_floor, "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.background_quantile) {
            return Err(Error::range(
                "background_quantile",
                self.background_quantile,
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    fn check_image(&self, image: &Image) -> Result<(usize, usize)> {
        self.validate()?;
        let bs = self.block_size;
        for (name, dim) in [("height", image.height()), ("width", image.width())] {
            if dim % bs != 0 {
                return Err(Error::Config(format!(
                    "image {name} {dim} is not divisible by block_size {bs}"
                )));
            }
        }
        Ok((image.height() / bs, image.width() / bs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub per_block_energy: Vec<f64>,
    pub block_grid: (usize, usize),
}

/// Radially symmetric high-pass window over a `size`×`size` DFT grid, summing to 1.
pub fn window_weights(size: usize, profile: WindowProfile) -> Vec<f64> {
    let half = size as f64 / 2.0;
    let r_max = (2.0 * half * half).sqrt().max(1e-12);
    let sigma = (size as f64 / 4.0).max(0.5);
    let mut w = Vec::with_capacity(size * size);
    for u in 0..size {
        let fu = u.min(size - u) as f64;
        for v in 0..size {
            let fv = v.min(size - v) as f64;
            let r = fu.hypot(fv);
            w.push(match profile {
                WindowProfile::RaisedCosine => {
                    0.5 * (1.0 - (std::f64::consts::PI * r / r_max).cos())
                }
                WindowProfile::Gaussian => 1.0 - (-r * r / (2.0 * sigma * sigma)).exp(),
            });
        }
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        // 1×1 blocks have only a DC term
        w.iter_mut().for_each(|x| *x = 1.0 / (size * size) as f64);
    }
    w
}

/// Row-column 2-D DFT of square blocks.
struct BlockFft {
    size: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl BlockFft {
    fn new(size: usize) -> Self {
        Self {
            size,
            fft: FftPlanner::new().plan_fft_forward(size),
        }
    }

    fn forward(&self, block: &[f64]) -> Vec<Complex<f64>> {
        let n = self.size;
        let mut buf: Vec<Complex<f64>> = block.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_exact_mut(n) {
            self.fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = buf[r * n + c];
            }
            self.fft.process(&mut col);
            for r in 0..n {
                buf[r * n + c] = col[r];
            }
        }
        buf
    }
}

fn extract_block(image: &Image, br: usize, bc: usize, bs: usize, channel: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bs * bs);
    for r in 0..bs {
        for c in 0..bs {
            out.push(image.get(br * bs + r, bc * bs + c, channel));
        }
    }
    out
}

/// Per-block `Σ_k weight(k) · |DFT(block)(k)|²`, summed over channels.
fn weighted_block_energy(
    image: &Image,
    bs: usize,
    grid: (usize, usize),
    weights: Option<&[f64]>,
) -> Vec<f64> {
    let fft = BlockFft::new(bs);
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for br in 0..grid.0 {
        for bc in 0..grid.1 {
            let mut e = 0.0;
            for ch in 0..image.channels() {
                let spec = fft.forward(&extract_block(image, br, bc, bs, ch));
                e += match weights {
                    Some(w) => spec
                        .iter()
                        .zip(w)
                        .map(|(z, w)| w * z.norm_sqr())
                        .sum::<f64>(),
                    None => spec.iter().map(|z| z.norm_sqr()).sum::<f64>(),
                };
            }
            out.push(e);
        }
    }
    out
}

/// Spectral energy of every block under the unnormalized forward DFT.
pub fn block_spectral_energy(image: &Image, config: &FilterConfig) -> Result<EnergyMap> {
    let grid = config.check_image(image)?;
    Ok(EnergyMap {
        per_block_energy: weighted_block_energy(image, config.block_size, grid, None),
        block_grid: grid,
    })
}

/// Minimizer of `‖u − image‖² + λ‖∇u‖²` with forward differences and reflective
/// boundaries, per channel, clamped to [0, 1].
pub fn regularized_image(image: &Image, lambda_reg: f64) -> Result<Image> {
    if !(lambda_reg >= 0.0) {
        return Err(Error::range("lambda_reg", lambda_reg, "must be >= 0"));
    }
    if lambda_reg == 0.0 {
        return Ok(image.clone());
    }
    let (h, w, ch) = image.shape();
    let mut out = image.clone();
    for k in 0..ch {
        let rhs: Vec<f64> = (0..h * w).map(|p| image.data()[p * ch + k]).collect();
        let u = conjugate_gradient(&rhs, |x, y| apply_system(x, y, h, w, lambda_reg));
        for (p, v) in u.into_iter().enumerate() {
            out.data_mut()[p * ch + k] = v;
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// y = (I + λ DᵀD) x with D the forward-difference operator on an h×w grid.
fn apply_system(x: &[f64], y: &mut [f64], h: usize, w: usize, lambda: f64) {
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let mut lap = 0.0;
            if r > 0 {
                lap += x[p] - x[p - w];
            }
            if r + 1 < h {
                lap += x[p] - x[p + w];
            }
            if c > 0 {
                lap += x[p] - x[p - 1];
            }
            if c + 1 < w {
                lap += x[p] - x[p + 1];
            }
            y[p] = x[p] + lambda * lap;
        }
    }
}

fn conjugate_gradient(b: &[f64], apply: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let n = b.len();
    let mut x = b.to_vec();
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let b_norm2: f64 = b.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut ap = vec![0.0; n];
    for _ in 0..(4 * n).max(50) {
        if rs <= 1e-28 * b_norm2 {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rs / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    x
}

/// `(E_N, E_B)` computed on the regularized image.
pub fn noise_energies(image: &Image, config: &FilterConfig) -> Result<(f64, EnergyMap)> {
    let grid = config.check_image(image)?;
    let reg = regularized_image(image, config.lambda_reg)?;
    let bs = config.block_size;
    let total: f64 = weighted_block_energy(&reg, bs, grid, None).iter().sum();
    let e_n = total / (image.height() * image.width()) as f64;
    let window = window_weights(bs, config.window);
    let e_b = weighted_block_energy(&reg, bs, grid, Some(&window));
    Ok((
        e_n,
        EnergyMap {
            per_block_energy: e_b,
            block_grid: grid,
        },
    ))
}

/// Per-block kept gain `clamp(E_B[t] / E_N, 0, 1)`; `None` when `E_N = 0`.
pub fn block_gains(image: &Image, config: &FilterConfig) -> Result<Option<Vec<f64>>> {
    let (e_n, e_b) = noise_energies(image, config)?;
    if e_n <= 0.0 {
        return Ok(None);
    }
    Ok(Some(
        e_b.per_block_energy
            .iter()
            .map(|e| (e / e_n).clamp(0.0, 1.0))
            .collect(),
    ))
}

/// Noise residual `I'` such that the denoised page is `I − I'`.
///
/// The gain scales every DFT coefficient of the block, DC included: in the
/// ink-density domain blank paper is the zero level, so attenuating the mean
/// is what pulls smooth damage back to clean paper. A uniform spectral gain is
/// a pixel-domain scale, which is how it is applied.
pub fn noise_residual(image: &Image, config: &FilterConfig) -> Result<Image> {
    let (rows, cols) = config.check_image(image)?;
    let mut residual = Image::zeros(image.height(), image.width(), image.channels());
    let Some(gains) = block_gains(image, config)? else {
        return Ok(residual);
    };
    let bs = config.block_size;
    for br in 0..rows {
        for bc in 0..cols {
            let g = gains[br * cols + bc];
            for r in br * bs..(br + 1) * bs {
                for c in bc * bs..(bc + 1) * bs {
                    for k in 0..image.channels() {
                        let x = image.get(r, c, k);
                        // residual = x − g·x, formed so that (x − residual) + residual == x
                        residual.set(r, c, k, x - g * x);
                    }
                }
            }
        }
    }
    Ok(residual)
}

/// Second look at the residual: restore blocks that look like removed strokes
/// and clear the rest.
///
/// A block is put back when the page before filtering (`denoised + residual`)
/// reaches `ink_floor` inside it, or when the residual's DC coefficient holds
/// less than `detail_threshold` of its spectral energy (thin isolated marks).
/// Any other block with a nonzero residual is smooth damage; its attenuated
/// remainder is cleared to blank paper so that filtering twice changes nothing.
/// Blocks with a zero residual are left as they are.
pub fn detail_compensation(
    denoised: &Image,
    residual: &Image,
    config: &FilterConfig,
) -> Result<Image> {
    denoised.ensure_same_shape(residual, "detail_compensation")?;
    let (rows, cols) = config.check_image(residual)?;
    let bs = config.block_size;
    let mut out = denoised.clone();
    for (v, r) in out.data_mut().iter_mut().zip(residual.data()) {
        *v += r;
    }
    // background is estimated over every damaged pixel, cleared or not
    let mut damaged = Vec::new();
    let mut cleared = Vec::new();
    for (t, verdict) in classify_blocks(denoised, residual, config, rows, cols)
        .into_iter()
        .enumerate()
    {
        let (br, bc) = (t / cols, t % cols);
        for r in br * bs..(br + 1) * bs {
            for c in bc * bs..(bc + 1) * bs {
                for k in 0..residual.channels() {
                    match verdict {
                        Verdict::Untouched => out.set(r, c, k, denoised.get(r, c, k)),
                        Verdict::Restore => damaged.push((r, c, k)),
                        Verdict::Clear => {
                            damaged.push((r, c, k));
                            cleared.push((r, c, k));
                        }
                    }
                }
            }
        }
    }
    if config.background_quantile > 0.0 {
        let radius = config.background_radius;
        let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
        let mut background = vec![0.0; damaged.len()];
        // a lower quantile underestimates a sloped background, so repeat
        for _ in 0..config.background_passes {
            for (b, &(r, c, k)) in background.iter_mut().zip(&damaged) {
                *b = local_background(&out, (r, c, k), radius, config, &mut window);
            }
            for (&b, &(r, c, k)) in background.iter().zip(&damaged) {
                // darkening by b maps d to d + (1 - d)·b; undo it
                out.set(r, c, k, ((out.get(r, c, k) - b) / (1.0 - b)).max(0.0));
            }
        }
    }
    for (r, c, k) in cleared {
        out.set(r, c, k, 0.0);
    }
    out.clamp_unit();
    Ok(out)
}

/// Lower quantile of the non-ink pixels in the window of `radius` around a
/// pixel, clipped to the image; 0 when the window holds only ink.
fn local_background(
    image: &Image,
    (r, c, k): (usize, usize, usize),
    radius: usize,
    config: &FilterConfig,
    buf: &mut Vec<f64>,
) -> f64 {
    buf.clear();
    let (h, w, _) = image.shape();
    for rr in r.saturating_sub(radius)..(r + radius + 1).min(h) {
        for cc in c.saturating_sub(radius)..(c + radius + 1).min(w) {
            let v = image.get(rr, cc, k);
            if v < config.ink_floor {
                buf.push(v);
            }
        }
    }
    if buf.is_empty() {
        return 0.0;
    }
    let idx = ((buf.len() - 1) as f64 * config.background_quantile).floor() as usize;
    *buf.select_nth_unstable_by(idx, f64::total_cmp).1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Untouched,
    Restore,
    Clear,
}

/// Indices (row-major) of blocks that detail compensation restores.
pub fn compensated_block_indices(
    denoised: &Image,
    residual: &Image,
    config: &FilterConfig,
) -> Result<Vec<usize>> {
    denoised.ensure_same_shape(residual, "compensated_block_indices")?;
    let (rows, cols) = config.check_image(residual)?;
    Ok(classify_blocks(denoised, residual, config, rows, cols)
        .into_iter()
        .enumerate()
        .filter(|&(_, v)| v == Verdict::Restore)
        .map(|(t, _)| t)
        .collect())
}

fn classify_blocks(
    denoised: &Image,
    residual: &Image,
    config: &FilterConfig,
    rows: usize,
    cols: usize,
) -> Vec<Verdict> {
    let bs = config.block_size;
    let fft = BlockFft::new(bs);
    let mut out = Vec::with_capacity(rows * cols);
    for br in 0..rows {
        for bc in 0..cols {
            let mut total = 0.0;
            let mut dc = 0.0;
            let mut peak: f64 = 0.0;
            for ch in 0..residual.channels() {
                let block = extract_block(residual, br, bc, bs, ch);
                let spec = fft.forward(&block);
                dc += spec[0].norm_sqr();
                total += spec.iter().map(|z| z.norm_sqr()).sum::<f64>();
                let before = extract_block(denoised, br, bc, bs, ch);
                peak = block
                    .iter()
                    .zip(&before)
                    .map(|(r, d)| r + d)
                    .fold(peak, f64::max);
            }
            out.push(if total == 0.0 {
                Verdict::Untouched
            } else if peak >= config.ink_floor || dc / total < config.detail_threshold {
                Verdict::Restore
            } else {
                Verdict::Clear
            });
        }
    }
    out
}

/// Full filter: regularize → residual → subtract → detail compensation.
pub fn denoise(image: &Image, config: &FilterConfig) -> Result<Image> {
    let residual = noise_residual(image, config)?;
    let mut stripped = image.clone();
    for (v, r) in stripped.data_mut().iter_mut().zip(residual.data()) {
        *v -= r;
    }
    detail_compensation(&stripped, &residual, config)
}
