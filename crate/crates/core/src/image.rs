//! Dense row-major `height x width x channels` images and PNG conversion.

use std::path::Path;

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
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

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return arg_err(format!(
                "image buffer holds {} values, expected {height}x{width}x{channels}",
                data.len()
            ));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn channel(&self, ch: usize) -> Image {
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    /// Sum over channels, producing a single-channel image.
    pub fn channel_sum(&self) -> Image {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum())
            .collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Loads an 8-bit PNG as RGB in `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Image> {
        let rgb = ::image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Image { height: h as usize, width: w as usize, channels: 3, data })
    }

    /// Writes 1- or 3-channel images as 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => ::image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer sized from image dims")
                .save(path)?,
            3 => ::image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer sized from image dims")
                .save(path)?,
            c => return arg_err(format!("cannot write a {c}-channel image as PNG")),
        }
        Ok(())
    }

    /// Affinely maps values to `[0, 1]`, returning the original range.
    pub fn normalized(&self) -> (Image, f64, f64) {
        let (lo, hi) = self.min_max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        let data = self.data.iter().map(|v| (v - lo) / span).collect();
        (
            Image { height: self.height, width: self.width, channels: self.channels, data },
            lo,
            hi,
        )
    }

    /// Quantizes to the 8-bit grid used by PNG storage.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect();
        Image { data, ..*self }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reflect-101 index: `-1 -> 1`, `n -> n - 2`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}
