//! Floating point rasters.
//!
//! An [`Image`] stores `height * width * channels` intensities in row-major,
//! channel-interleaved order. Values are nominally in `[0, 1]`; shading maps
//! are allowed to exceed 1 slightly, so only finiteness is enforced.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

/// Luma weights applied to RGB before gradient and similarity computations.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at index {i}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Applies `f` to every sample. The result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn clamp01(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Single channel luma; grayscale images are returned unchanged.
    pub fn luma(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect();
        Self { height: self.height, width: self.width, channels: 1, data }
    }

    /// Three channel copy; RGB images are returned unchanged.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self { height: self.height, width: self.width, channels: 3, data }
    }

    /// Planar (channel-major) copy of the samples.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * n + i] = v;
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Mean absolute difference over all samples, optionally restricted to
    /// pixels where `mask` is true.
    pub fn mean_abs_diff(&self, other: &Image, mask: Option<&[bool]>) -> Result<f64> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels {
            return Err(Error::shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.height * self.width {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            for c in 0..self.channels {
                let k = i * self.channels + c;
                sum += (self.data[k] as f64 - other.data[k] as f64).abs();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("mask selects no pixels"));
        }
        Ok(sum / n as f64)
    }

    /// Peak signal to noise ratio in dB for unit-range data.
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let mse = {
            if self.dims() != other.dims() || self.channels != other.channels {
                return Err(Error::shape("psnr operands differ in shape"));
            }
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / self.data.len() as f64
        };
        Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
    }

    /// Bilinear resize to `height x width` (pixel-center aligned).
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize to empty image"));
        }
        let planes = crate::sample::resize_planes(
            &self.to_planar(),
            self.channels,
            self.height,
            self.width,
            height,
            width,
        );
        Ok(from_planar(height, width, self.channels, &planes))
    }

    fn from_dynamic(img: DynamicImage) -> Self {
        let has_color = img.color().has_color();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if has_color {
            let rgb = img.to_rgb8();
            let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Self { height: h, width: w, channels: 3, data }
        } else {
            let g = img.to_luma8();
            let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Self { height: h, width: w, channels: 1, data }
        }
    }

    /// Decodes PNG or JPEG bytes (format sniffed from the content).
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, image::ImageError> {
        Ok(Self::from_dynamic(image::load_from_memory(bytes)?))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|source| Error::Codec { path: path.to_path_buf(), source })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// 8-bit encoding in the given format (PNG or JPEG with `quality`).
    pub fn encode(&self, format: ImageFormat, quality: u8) -> std::result::Result<Vec<u8>, image::ImageError> {
        let (w, h) = (self.width as u32, self.height as u32);
        let raw = self.to_u8();
        let dynimg = if self.channels == 3 {
            DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("sized buffer"))
        } else {
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("sized buffer"))
        };
        let mut out = Vec::new();
        match format {
            ImageFormat::Jpeg => {
                let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
                dynimg.write_with_encoder(enc)?;
            }
            other => dynimg.write_to(&mut Cursor::new(&mut out), other)?,
        }
        Ok(out)
    }

    /// Writes an 8-bit PNG.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self
            .encode(ImageFormat::Png, 100)
            .map_err(|source| Error::Codec { path: path.to_path_buf(), source })?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// 8-bit quantized copy, the value a PNG round trip would produce.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(), ..self.clone() }
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reassembles an interleaved image from planar data. The caller guarantees
/// the sizes; values are not re-validated.
pub(crate) fn from_planar(height: usize, width: usize, channels: usize, planes: &[f32]) -> Image {
    let n = height * width;
    let mut data = vec![0.0; n * channels];
    for c in 0..channels {
        for i in 0..n {
            data[i * channels + c] = planes[c * n + i];
        }
    }
    Image { height, width, channels, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_channel_counts_and_nan() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn luma_of_gray_rgb_is_gray() {
        let img = Image::filled(2, 3, 3, 0.5).unwrap();
        for v in img.luma().data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let img = Image::from_fn(5, 7, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 256) as f32 / 255.0).unwrap();
        let bytes = img.encode(ImageFormat::Png, 100).unwrap();
        let back = Image::decode(&bytes).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn planar_round_trip() {
        let img = Image::from_fn(3, 4, 3, |x, y, c| (x + 10 * y + 100 * c) as f32).unwrap();
        let p = img.to_planar();
        assert_eq!(from_planar(3, 4, 3, &p), img);
    }
}
