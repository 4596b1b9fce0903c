//! The `Image` type: an H×W×C array of `f64` in [0, 1], stored row-major, channel-last.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Single-channel image from a function of (row, col).
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "mse on mismatched shapes");
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Peak signal-to-noise ratio in dB for unit peak.
    pub fn psnr(&self, reference: &Image) -> f64 {
        let mse = self.mse(reference);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Write as 16-bit grayscale PNG. Only single-channel images are supported.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "PNG export supports 1 channel, got {}",
                self.channels
            )));
        }
        let pixels: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, pixels)
                .expect("buffer length matches dimensions");
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // temp-then-rename so readers never observe a half-written file
        let tmp = path.with_extension("png.tmp");
        DynamicImage::ImageLuma16(buf)
            .save_with_format(&tmp, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: tmp.clone(),
                source: e,
            })?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Load an 8- or 16-bit grayscale raster, normalized to [0, 1].
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let (width, height, data) = match img {
            DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 255.0)
                    .collect();
                (w, h, data)
            }
            other => {
                let buf = other.into_luma16();
                let (w, h) = buf.dimensions();
                let data = buf
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 65535.0)
                    .collect();
                (w, h, data)
            }
        };
        Self::from_vec(height as usize, width as usize, 1, data)
    }
}
