//! Box and Gaussian filtering, Sobel gradients.
//!
//! All filters pad by replicating the border pixel.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::{from_planar, Image};
use crate::sample::{remap_interleaved, OutOfBounds};

/// Box mean of one plane with a `k x k` window, replicate padding.
/// Separable running sums keep the cost independent of `k`.
pub fn mean_filter_plane(plane: &[f64], height: usize, width: usize, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("mean filter kernel must be odd and >= 1, got {k}")));
    }
    if plane.len() != height * width {
        return Err(Error::shape("plane does not match dimensions"));
    }
    if k == 1 {
        return Ok(plane.to_vec());
    }
    let r = (k / 2) as i64;
    let inv = 1.0 / k as f64;
    let mut tmp = vec![0.0; plane.len()];
    let mut line = Vec::new();
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        box_line(row, r, inv, &mut line);
        tmp[y * width..(y + 1) * width].copy_from_slice(&line);
    }
    let mut out = vec![0.0; plane.len()];
    let mut col = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = tmp[y * width + x];
        }
        box_line(&col, r, inv, &mut line);
        for y in 0..height {
            out[y * width + x] = line[y];
        }
    }
    Ok(out)
}

fn box_line(src: &[f64], r: i64, inv: f64, out: &mut Vec<f64>) {
    let n = src.len() as i64;
    let at = |i: i64| src[i.clamp(0, n - 1) as usize];
    out.clear();
    let mut acc: f64 = (-r..=r).map(at).sum();
    for i in 0..n {
        out.push(acc * inv);
        acc += at(i + r + 1) - at(i - r);
    }
}

/// Per-channel box mean of an image.
pub fn mean_filter(image: &Image, k: usize) -> Result<Image> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let planar = image.to_planar();
    let mut out = Vec::with_capacity(planar.len());
    for p in planar.chunks_exact(h * w) {
        let plane: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        out.extend(mean_filter_plane(&plane, h, w, k)?.into_iter().map(|v| v as f32));
    }
    Ok(from_planar(h, w, c, &out))
}

/// Per-component box mean of a flow field.
pub fn mean_filter_flow(flow: &FlowField, k: usize) -> Result<FlowField> {
    let (h, w) = flow.dims();
    let (dx, dy) = flow.planes();
    let f = |p: Vec<f32>| -> Result<Vec<f32>> {
        let plane: Vec<f64> = p.into_iter().map(|v| v as f64).collect();
        Ok(mean_filter_plane(&plane, h, w, k)?.into_iter().map(|v| v as f32).collect())
    };
    FlowField::from_planes(h, w, &f(dx)?, &f(dy)?)
}

/// Per-pixel Sobel responses `(gx, gy)` of a luma image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    height: usize,
    width: usize,
    /// Interleaved `(gx, gy)`.
    data: Vec<f32>,
}

impl GradientMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    /// Planar `[gx..., gy...]` copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let mut out: Vec<f32> = self.data.iter().step_by(2).copied().collect();
        out.extend(self.data.iter().skip(1).step_by(2));
        out
    }

    /// Backward warp of both gradient channels by `flow` (border clamped).
    pub fn warp(&self, flow: &FlowField) -> Result<GradientMap> {
        if flow.dims() != self.dims() {
            return Err(Error::shape("gradient map and flow differ in size"));
        }
        let data = remap_interleaved(&self.data, self.height, self.width, 2, flow, OutOfBounds::Border);
        Ok(GradientMap { height: self.height, width: self.width, data })
    }

    /// Mean absolute difference over pixels and both channels.
    pub fn mean_l1(&self, other: &GradientMap) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape("gradient maps differ in size"));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(s / self.data.len() as f64)
    }
}

/// 3x3 Sobel gradients of the luma of `image`, replicate padding.
/// `gx` uses `[-1 0 1; -2 0 2; -1 0 1]`, `gy` its transpose.
pub fn sobel_gradients(image: &Image) -> GradientMap {
    let luma = image.luma();
    let (h, w) = luma.dims();
    let px = |x: i64, y: i64| luma.get(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize, 0);
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            data.push(gx);
            data.push(gy);
        }
    }
    GradientMap { height: h, width: w, data }
}

/// Normalized 1-D Gaussian kernel of odd length `k`. A non-positive sigma
/// picks the conventional `0.3 * ((k - 1) / 2 - 1) + 0.8`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let sigma = if sigma > 0.0 { sigma } else { 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8 };
    let r = (k / 2) as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with an odd kernel, replicate padding.
pub fn gaussian_blur(image: &Image, k: usize, sigma: f64) -> Result<Image> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("blur kernel must be odd, got {k}")));
    }
    let kern = gaussian_kernel(k, sigma);
    let r = (k / 2) as i64;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let src = image.data();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in kern.iter().enumerate() {
                    let xx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(y * w + xx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in kern.iter().enumerate() {
                    let yy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Image::new(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_filter_constant_and_identity() {
        let img = Image::filled(9, 7, 3, 0.25).unwrap();
        let out = mean_filter(&img, 5).unwrap();
        for v in out.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
        let ramp = Image::from_fn(6, 6, 1, |x, y, _| (x * y) as f32 / 36.0).unwrap();
        assert_eq!(mean_filter(&ramp, 1).unwrap(), ramp);
    }

    #[test]
    fn mean_filter_rejects_even_kernel() {
        assert!(mean_filter(&Image::filled(4, 4, 1, 0.0).unwrap(), 4).is_err());
        assert!(mean_filter(&Image::filled(4, 4, 1, 0.0).unwrap(), 0).is_err());
    }

    #[test]
    fn mean_filter_impulse_spreads_evenly() {
        let mut plane = vec![0.0; 81];
        plane[4 * 9 + 4] = 1.0;
        let out = mean_filter_plane(&plane, 9, 9, 3).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let expected = if (3..=5).contains(&x) && (3..=5).contains(&y) { 1.0 / 9.0 } else { 0.0 };
                assert!((out[y * 9 + x] - expected).abs() < 1e-12, "({x},{y})");
            }
        }
    }

    #[test]
    fn sobel_on_ramp() {
        let img = Image::from_fn(8, 8, 1, |x, _, _| x as f32 / 255.0).unwrap();
        let g = sobel_gradients(&img);
        for y in 1..7 {
            for x in 1..7 {
                let (gx, gy) = g.get(x, y);
                assert!((gx - 8.0 / 255.0).abs() < 1e-6);
                assert_eq!(gy, 0.0);
            }
        }
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let g = sobel_gradients(&Image::filled(5, 6, 3, 0.4).unwrap());
        assert!(g.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        for k in [3, 5, 7] {
            let kern = gaussian_kernel(k, 0.0);
            assert!((kern.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(kern.len(), k);
        }
    }
}
