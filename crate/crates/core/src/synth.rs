//! Synthetic training triplets: random smooth flow fields, geometric
//! distortion of clean pages, procedural Lambertian shading, photometric
//! degradations and on-disk datasets with a JSONL manifest.
//!
//! A triplet is built as follows. A generating flow `g` distorts the clean
//! page into `D = warp(clean, g)` (white outside the page). `D` is multiplied
//! by a shading map and degraded to give the photo. The stored ground truth
//! flow lives on the clean grid and is the numerical inverse of `g`, so that
//! `warp(D, flow)` reproduces the clean page.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::ImageFormat;
use nalgebra::{SMatrix, SVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, mean_filter_plane, sobel_gradients};
use crate::flow::{invert_flow, read_flow, write_flow, FlowField};
use crate::image::Image;
use crate::sample::{warp_with, OutOfBounds};

/// Canvas size the default parameters are expressed for.
pub const REFERENCE_CANVAS: usize = 1024;
/// Fixed-point iterations used to invert generating flows.
pub const INVERSION_ITERATIONS: usize = 40;
/// Reconstruction tolerance of a triplet (mean absolute error).
pub const RECONSTRUCTION_TOLERANCE: f64 = 2.0 / 255.0;
/// Sobel magnitude (|gx| + |gy|) above which a clean pixel counts as text.
pub const TEXT_EDGE_THRESHOLD: f32 = 0.5;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadingParams {
    /// 0 disables the smooth multiplicative field, 1 spans `[low, high]`.
    pub strength: f64,
    pub low: f64,
    pub high: f64,
    /// Control grid side of the smooth field.
    pub grid: usize,
    pub max_shadows: usize,
    pub shadow_depth: [f64; 2],
    /// Soft edge width as a fraction of the canvas.
    pub shadow_softness: [f64; 2],
    /// Per-channel multiplicative shift amplitude.
    pub color_shift: f64,
    pub clip: [f64; 2],
}

impl Default for ShadingParams {
    fn default() -> Self {
        Self {
            strength: 1.0,
            low: 0.4,
            high: 1.1,
            grid: 4,
            max_shadows: 2,
            shadow_depth: [0.1, 0.4],
            shadow_softness: [0.05, 0.2],
            color_shift: 0.1,
            clip: [1e-3, 1.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeParams {
    pub blur_prob: f64,
    pub blur_kernels: Vec<usize>,
    pub noise_prob: f64,
    pub noise_sigma: [f64; 2],
    pub jpeg_prob: f64,
    pub jpeg_quality: [u8; 2],
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            blur_prob: 0.5,
            blur_kernels: vec![3, 5],
            noise_prob: 0.5,
            noise_sigma: [0.0, 0.02],
            jpeg_prob: 0.5,
            jpeg_quality: [50, 95],
        }
    }
}

impl DegradeParams {
    pub fn disabled() -> Self {
        Self { blur_prob: 0.0, noise_prob: 0.0, jpeg_prob: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub canvas: usize,
    pub raw_range: [f64; 2],
    /// Mean filter size, applied twice.
    pub kernel: usize,
    pub translation: [f64; 2],
    pub scaling: [f64; 2],
    pub center: f64,
    pub shading: ShadingParams,
    pub degrade: DegradeParams,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            canvas: REFERENCE_CANVAS,
            raw_range: [-4096.0, 4096.0],
            kernel: 91,
            translation: [-50.0, 50.0],
            scaling: [-0.05, 0.2],
            center: 512.0,
            shading: ShadingParams::default(),
            degrade: DegradeParams::default(),
            seed: 0,
        }
    }
}

impl SynthParams {
    /// Default parameters rescaled to a `canvas x canvas` canvas. Lengths
    /// scale by `s = canvas / 1024` and the kernel is rounded to the nearest
    /// odd size. The raw displacement range scales by `s^2`: the smoothed
    /// amplitude is proportional to `range / kernel`, so this keeps both the
    /// displacement amplitude proportional to the canvas and the flow
    /// gradient unchanged.
    pub fn scaled(canvas: usize) -> Self {
        Self::default().rescaled(canvas)
    }

    pub fn rescaled(&self, canvas: usize) -> Self {
        let s = canvas as f64 / self.canvas as f64;
        Self {
            canvas,
            raw_range: [self.raw_range[0] * s * s, self.raw_range[1] * s * s],
            kernel: nearest_odd(self.kernel as f64 * s),
            translation: [self.translation[0] * s, self.translation[1] * s],
            scaling: self.scaling,
            center: canvas as f64 / 2.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| -> Result<()> {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::invalid(format!("{name} range [{}, {}] is not ordered", r[0], r[1])));
            }
            Ok(())
        };
        if self.canvas < 8 {
            return Err(Error::invalid(format!("canvas must be at least 8, got {}", self.canvas)));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("smoothing kernel must be odd, got {}", self.kernel)));
        }
        if (self.center - self.canvas as f64 / 2.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("center {} must equal canvas / 2", self.center)));
        }
        ordered("raw displacement", self.raw_range)?;
        ordered("translation", self.translation)?;
        ordered("scaling", self.scaling)?;
        let sh = &self.shading;
        ordered("shading", [sh.low, sh.high])?;
        ordered("shadow depth", sh.shadow_depth)?;
        ordered("shadow softness", sh.shadow_softness)?;
        ordered("shading clip", sh.clip)?;
        if sh.clip[0] <= 0.0 || sh.grid < 2 || !(0.0..=1.0).contains(&sh.strength) || sh.shadow_softness[0] <= 0.0 {
            return Err(Error::invalid("shading parameters out of range"));
        }
        let d = &self.degrade;
        ordered("noise sigma", d.noise_sigma)?;
        for p in [d.blur_prob, d.noise_prob, d.jpeg_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        if d.blur_kernels.is_empty() || d.blur_kernels.iter().any(|&k| k % 2 == 0) {
            return Err(Error::invalid("blur kernels must be a non-empty list of odd sizes"));
        }
        if d.jpeg_quality[0] > d.jpeg_quality[1] || d.jpeg_quality[0] == 0 || d.jpeg_quality[1] > 100 {
            return Err(Error::invalid("JPEG quality range must lie in [1, 100]"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("parameters serialize");
        hex::encode(Sha256::digest(&json))
    }
}

fn nearest_odd(v: f64) -> usize {
    let k = ((v - 1.0) / 2.0).round().max(0.0) as usize;
    2 * k + 1
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

/// Seed of item `index` under `master`: one ChaCha stream per index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// The three parts of a generated flow.
#[derive(Debug, Clone)]
pub struct FlowComponents {
    /// Doubly mean-filtered random field.
    pub local: FlowField,
    pub translation: (f64, f64),
    pub scaling: (f64, f64),
    pub center: f64,
}

impl FlowComponents {
    /// `local + translation + (x - center) * scaling`.
    pub fn combine(&self) -> Result<FlowField> {
        let (tx, ty) = self.translation;
        let (sx, sy) = self.scaling;
        let c = self.center;
        FlowField::from_fn(self.local.height(), self.local.width(), |x, y| {
            let (lx, ly) = self.local.get(x, y);
            (
                (lx as f64 + tx + (x as f64 - c) * sx) as f32,
                (ly as f64 + ty + (y as f64 - c) * sy) as f32,
            )
        })
    }
}

pub fn random_flow_components(params: &SynthParams, seed: u64) -> Result<FlowComponents> {
    params.validate()?;
    let n = params.canvas;
    // The raw field extends past the canvas by the support of both filters,
    // so border padding never replicates individual noise samples.
    let pad = 2 * (params.kernel / 2);
    let m = n + 2 * pad;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut dx = Vec::with_capacity(m * m);
    let mut dy = Vec::with_capacity(m * m);
    for _ in 0..m * m {
        dx.push(uniform(&mut rng, params.raw_range));
        dy.push(uniform(&mut rng, params.raw_range));
    }
    let smooth = |p: Vec<f64>| -> Result<Vec<f32>> {
        let once = mean_filter_plane(&p, m, m, params.kernel)?;
        let twice = mean_filter_plane(&once, m, m, params.kernel)?;
        Ok((0..n * n).map(|i| twice[(i / n + pad) * m + i % n + pad] as f32).collect())
    };
    let local = FlowField::from_planes(n, n, &smooth(dx)?, &smooth(dy)?)?;
    let translation = (uniform(&mut rng, params.translation), uniform(&mut rng, params.translation));
    let scaling = (uniform(&mut rng, params.scaling), uniform(&mut rng, params.scaling));
    Ok(FlowComponents { local, translation, scaling, center: params.center })
}

/// Random smooth flow on a `canvas x canvas` grid.
pub fn random_flow(params: &SynthParams, seed: u64) -> Result<FlowField> {
    random_flow_components(params, seed)?.combine()
}

/// Geometric distortion of a clean page; regions sampled from outside the
/// page are white.
pub fn warp_clean(clean: &Image, flow: &FlowField) -> Result<Image> {
    warp_with(clean, flow, OutOfBounds::Fill(1.0))
}

/// Procedural three-channel shading map for a `canvas x canvas` image.
pub fn random_shading(params: &SynthParams, seed: u64) -> Result<Image> {
    params.validate()?;
    let sh = &params.shading;
    let n = params.canvas;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let g = sh.grid;
    let knots: Vec<f64> = (0..g * g)
        .map(|_| 1.0 + sh.strength * (uniform(&mut rng, [sh.low, sh.high]) - 1.0))
        .collect();
    let n_shadows = if sh.max_shadows == 0 { 0 } else { rng.random_range(0..=sh.max_shadows) };
    let shadows: Vec<(f64, f64, f64, f64, f64)> = (0..n_shadows)
        .map(|_| {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let offset = uniform(&mut rng, [-0.3, 0.3]) * n as f64;
            let depth = uniform(&mut rng, sh.shadow_depth);
            let soft = uniform(&mut rng, sh.shadow_softness) * n as f64;
            (theta.cos(), theta.sin(), offset, depth, soft)
        })
        .collect();
    let shift: Vec<f64> = (0..3).map(|_| 1.0 + sh.color_shift * uniform(&mut rng, [-1.0, 1.0])).collect();

    let step = (n - 1) as f64 / (g - 1) as f64;
    let half = (n as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        let gy = y as f64 / step;
        let y0 = (gy.floor() as usize).min(g - 2);
        let fy = gy - y0 as f64;
        for x in 0..n {
            let gx = x as f64 / step;
            let x0 = (gx.floor() as usize).min(g - 2);
            let fx = gx - x0 as f64;
            let k = |yy: usize, xx: usize| knots[yy * g + xx];
            let top = k(y0, x0) + (k(y0, x0 + 1) - k(y0, x0)) * fx;
            let bot = k(y0 + 1, x0) + (k(y0 + 1, x0 + 1) - k(y0 + 1, x0)) * fx;
            let mut v = top + (bot - top) * fy;
            for &(c, s, offset, depth, soft) in &shadows {
                let d = (x as f64 - half) * c + (y as f64 - half) * s - offset;
                v *= 1.0 - depth * smoothstep(d / soft);
            }
            for sc in &shift {
                data.push((v * sc).clamp(sh.clip[0], sh.clip[1]) as f32);
            }
        }
    }
    Image::new(n, n, 3, data)
}

/// 0 below -0.5, 1 above 0.5, cubic in between.
fn smoothstep(t: f64) -> f64 {
    let u = (t + 0.5).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// `I = R * S` per pixel, clipped to `[0, 1]`. A single-channel operand is
/// broadcast over the channels of the other.
pub fn compose_shading(reflectance: &Image, shading: &Image) -> Result<Image> {
    if reflectance.dims() != shading.dims() {
        return Err(Error::shape(format!(
            "reflectance {:?} vs shading {:?}",
            reflectance.dims(),
            shading.dims()
        )));
    }
    let c = reflectance.channels().max(shading.channels());
    let (h, w) = reflectance.dims();
    let pick = |img: &Image, x: usize, y: usize, ch: usize| img.get(x, y, ch.min(img.channels() - 1));
    Image::from_fn(h, w, c, |x, y, ch| (pick(reflectance, x, y, ch) * pick(shading, x, y, ch)).clamp(0.0, 1.0))
}

/// Which degradations were drawn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradeRecord {
    pub blur_kernel: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub jpeg_quality: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct Degraded {
    pub image: Image,
    /// Encoded bytes when the JPEG round trip was applied.
    pub jpeg: Option<Vec<u8>>,
    pub record: DegradeRecord,
}

/// Blur, additive Gaussian noise and a JPEG round trip, each applied with
/// its own probability. All random decisions are drawn first, in that order.
pub fn degrade(image: &Image, params: &DegradeParams, seed: u64) -> Result<Degraded> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let blur = rng.random::<f64>() < params.blur_prob;
    let kernel = params.blur_kernels[rng.random_range(0..params.blur_kernels.len())];
    let noise = rng.random::<f64>() < params.noise_prob;
    let sigma = uniform(&mut rng, params.noise_sigma);
    let jpeg = rng.random::<f64>() < params.jpeg_prob;
    let quality = rng.random_range(params.jpeg_quality[0]..=params.jpeg_quality[1]);

    let mut record = DegradeRecord::default();
    let mut out = image.clone();
    if blur {
        out = gaussian_blur(&out, kernel, 0.0)?;
        record.blur_kernel = Some(kernel);
    }
    if noise {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            out = Image::new(
                out.height(),
                out.width(),
                out.channels(),
                out.data().iter().map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect(),
            )?;
        }
        record.noise_sigma = Some(sigma);
    }
    let mut bytes = None;
    if jpeg {
        let encoded = out
            .encode(ImageFormat::Jpeg, quality)
            .map_err(|e| Error::Numerical(format!("JPEG encoding failed: {e}")))?;
        out = Image::decode(&encoded).map_err(|e| Error::Numerical(format!("JPEG decoding failed: {e}")))?;
        if image.channels() == 3 && out.channels() == 1 {
            out = out.to_rgb();
        }
        bytes = Some(encoded);
        record.jpeg_quality = Some(quality);
    }
    Ok(Degraded { image: out, jpeg: bytes, record })
}

/// Axis-aligned rectangle with fractional bounds, drawn with exact pixel
/// coverage so edges are anti-aliased.
fn fill_rect(img: &mut [f64], n: usize, rect: [f64; 4], color: [f64; 3], alpha: f64) {
    let [x0, y0, x1, y1] = rect;
    let cover = |p: usize, a: f64, b: f64| ((p as f64 + 1.0).min(b) - (p as f64).max(a)).max(0.0);
    let (xs, xe) = (x0.floor().max(0.0) as usize, (x1.ceil().max(0.0) as usize).min(n));
    let (ys, ye) = (y0.floor().max(0.0) as usize, (y1.ceil().max(0.0) as usize).min(n));
    for y in ys..ye {
        let cy = cover(y, y0, y1);
        for x in xs..xe {
            let a = alpha * cy * cover(x, x0, x1);
            for (c, col) in color.iter().enumerate() {
                let v = &mut img[(y * n + x) * 3 + c];
                *v += (col - *v) * a;
            }
        }
    }
}

/// Procedural document page: tinted paper, a title, paragraphs of word
/// blocks, an optional smooth figure and table rules.
pub fn procedural_page(size: usize, seed: u64) -> Result<Image> {
    if size < 8 {
        return Err(Error::invalid(format!("page size must be at least 8, got {size}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = size;
    let nf = n as f64;
    let paper: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, [0.93, 1.0]));
    let tilt = [uniform(&mut rng, [-0.03, 0.03]), uniform(&mut rng, [-0.03, 0.03])];
    let mut img = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let g = tilt[0] * (x as f64 / nf - 0.5) + tilt[1] * (y as f64 / nf - 0.5);
            img.extend(paper.iter().map(|p| (p + g).clamp(0.0, 1.0)));
        }
    }

    let ink: [f64; 3] = {
        let base = uniform(&mut rng, [0.05, 0.25]);
        std::array::from_fn(|_| base + uniform(&mut rng, [0.0, 0.05]))
    };
    let accent: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, [0.1, 0.6]));
    let margin = uniform(&mut rng, [0.06, 0.1]) * nf;
    let lh = (0.035 * nf).max(2.0) * uniform(&mut rng, [0.85, 1.2]);
    let pitch = lh * uniform(&mut rng, [1.7, 2.1]);
    let (left, right) = (margin, nf - margin);

    // title
    let mut y = margin;
    let th = lh * 1.6;
    let mut x = left + uniform(&mut rng, [0.0, 0.2]) * (right - left);
    let title_end = x + uniform(&mut rng, [0.3, 0.6]) * (right - left);
    while x < title_end.min(right) {
        let w = th * uniform(&mut rng, [1.5, 4.0]);
        fill_rect(&mut img, n, [x, y, (x + w).min(right), y + th], accent, 1.0);
        x += w + th * 0.6;
    }
    y += th + pitch;

    let figure = if rng.random::<f64>() < 0.7 {
        let fh = uniform(&mut rng, [0.15, 0.3]) * nf;
        let fy = uniform(&mut rng, [y, (nf - margin - fh).max(y)]);
        let fw = uniform(&mut rng, [0.35, 0.7]) * (right - left);
        let fx = left + uniform(&mut rng, [0.0, 1.0]) * (right - left - fw);
        let color: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, [0.55, 0.85]));
        let (ax, ay) = (uniform(&mut rng, [0.5, 1.5]), uniform(&mut rng, [0.5, 1.5]));
        let phase = uniform(&mut rng, [0.0, std::f64::consts::TAU]);
        Some(([fx, fy, fx + fw, fy + fh], color, ax, ay, phase))
    } else {
        None
    };

    let rules = rng.random::<f64>() < 0.4;
    while y + lh < nf - margin {
        let blocked = figure.is_some_and(|(r, ..)| y + lh > r[1] - pitch * 0.5 && y < r[3] + pitch * 0.5);
        if !blocked {
            let indent = if rng.random::<f64>() < 0.15 { lh * 2.0 } else { 0.0 };
            let end = if rng.random::<f64>() < 0.2 { left + uniform(&mut rng, [0.3, 0.8]) * (right - left) } else { right };
            let mut x = left + indent;
            while x < end - lh {
                let w = lh * uniform(&mut rng, [1.5, 6.0]);
                fill_rect(&mut img, n, [x, y, (x + w).min(end), y + lh], ink, 1.0);
                x += w + lh * uniform(&mut rng, [0.6, 1.0]);
            }
            if rules && rng.random::<f64>() < 0.3 {
                let ry = y + lh + (pitch - lh) * 0.5;
                fill_rect(&mut img, n, [left, ry - 0.35, right, ry + 0.35], ink, 0.8);
            }
        }
        y += pitch;
    }

    if let Some((r, color, ax, ay, phase)) = figure {
        let (fw, fh) = (r[2] - r[0], r[3] - r[1]);
        for py in r[1].ceil() as usize..(r[3].floor() as usize).min(n) {
            for px in r[0].ceil() as usize..(r[2].floor() as usize).min(n) {
                let u = (px as f64 - r[0]) / fw;
                let v = (py as f64 - r[1]) / fh;
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * (ax * u) + phase).sin() * (std::f64::consts::PI * ay * v).cos();
                for c in 0..3 {
                    img[(py * n + px) * 3 + c] = color[c] * (0.8 + 0.2 * t);
                }
            }
        }
    }

    Image::new(n, n, 3, img.into_iter().map(|v| v as f32).collect())
}

/// Projective map taking the corners of a `w x h` raster
/// (`(0,0), (w-1,0), (w-1,h-1), (0,h-1)`) onto `quad` (same order).
pub fn homography_to_quad(w: usize, h: usize, quad: [[f64; 2]; 4]) -> Result<[[f64; 3]; 3]> {
    let src = [[0.0, 0.0], [(w - 1) as f64, 0.0], [(w - 1) as f64, (h - 1) as f64], [0.0, (h - 1) as f64]];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (k, (s, d)) in src.iter().zip(&quad).enumerate() {
        let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
        a.set_row(2 * k, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(2 * k + 1, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    let sol = a.lu().solve(&b).ok_or_else(|| Error::Numerical("degenerate quadrilateral".into()))?;
    Ok([[sol[0], sol[1], sol[2]], [sol[3], sol[4], sol[5]], [sol[6], sol[7], 1.0]])
}

pub fn apply_homography(m: &[[f64; 3]; 3], p: [f64; 2]) -> [f64; 2] {
    let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
    [
        (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
        (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
    ]
}

fn invert3(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let mat = nalgebra::Matrix3::from_fn(|r, c| m[r][c]);
    let inv = mat.try_inverse().ok_or_else(|| Error::Numerical("singular homography".into()))?;
    Ok(std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)])))
}

/// A document photographed onto a uniform background: the page is mapped
/// projectively onto `quad` inside an `out_h x out_w` canvas. Returns the
/// composite and the known page placement mask.
pub fn composite_on_background(
    page: &Image,
    quad: [[f64; 2]; 4],
    out_h: usize,
    out_w: usize,
    background: f32,
) -> Result<(Image, Vec<bool>)> {
    let (h, w) = page.dims();
    let inv = invert3(&homography_to_quad(w, h, quad)?)?;
    let c = page.channels();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    let mut mask = Vec::with_capacity(out_h * out_w);
    let mut px = vec![0.0f32; c];
    for y in 0..out_h {
        for x in 0..out_w {
            let [u, v] = apply_homography(&inv, [x as f64, y as f64]);
            let inside = u >= -0.5 && v >= -0.5 && u <= w as f64 - 0.5 && v <= h as f64 - 0.5;
            mask.push(inside);
            if inside {
                let s = crate::sample::bilinear_sample(page, &[(u, v)], OutOfBounds::Border)?;
                px.copy_from_slice(&s);
                data.extend_from_slice(&px);
            } else {
                data.extend(std::iter::repeat_n(background, c));
            }
        }
    }
    Ok((Image::new(out_h, out_w, c, data)?, mask))
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub seed: u64,
    pub clean: Image,
    /// Geometrically distorted page before shading and degradation.
    pub distorted: Image,
    pub shading: Image,
    pub photo: Image,
    /// JPEG bytes of the photo when the JPEG degradation was drawn.
    pub photo_jpeg: Option<Vec<u8>>,
    /// Ground truth on the clean grid: `warp(distorted, flow) ~ clean`.
    pub flow: FlowField,
    /// Flow that produced `distorted` from `clean`.
    pub generating_flow: FlowField,
    pub degradation: DegradeRecord,
}

/// Seeds for the flow, shading and degradation draws of one triplet.
fn component_seeds(seed: u64) -> [u64; 4] {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    std::array::from_fn(|_| rng.next_u64())
}

/// Builds a triplet from a clean page of the canvas size.
pub fn make_triplet(clean: &Image, params: &SynthParams, seed: u64) -> Result<Triplet> {
    params.validate()?;
    if clean.dims() != (params.canvas, params.canvas) {
        return Err(Error::shape(format!(
            "clean page is {:?}, canvas is {}x{}",
            clean.dims(),
            params.canvas,
            params.canvas
        )));
    }
    let clean = clean.to_rgb();
    let [flow_seed, shading_seed, degrade_seed, _] = component_seeds(seed);
    let generating_flow = random_flow(params, flow_seed)?;
    let distorted = warp_clean(&clean, &generating_flow)?;
    let shading = random_shading(params, shading_seed)?;
    let shaded = compose_shading(&distorted, &shading)?;
    let degraded = degrade(&shaded, &params.degrade, degrade_seed)?;
    let flow = invert_flow(&generating_flow, INVERSION_ITERATIONS)?;
    Ok(Triplet {
        seed,
        clean,
        distorted,
        shading,
        photo: degraded.image,
        photo_jpeg: degraded.jpeg,
        flow,
        generating_flow,
        degradation: degraded.record,
    })
}

/// Triplet from a procedural page derived from `seed`.
pub fn make_procedural_triplet(params: &SynthParams, seed: u64) -> Result<Triplet> {
    let page_seed = component_seeds(seed)[3];
    make_triplet(&procedural_page(params.canvas, page_seed)?, params, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Mean absolute error over text-free, in-bounds pixels.
    pub mean_abs_error: f64,
    pub n_pixels: usize,
    /// Mean absolute error over every in-bounds pixel, text included.
    pub all_pixels_error: f64,
}

impl ReconstructionReport {
    pub fn passes(&self) -> bool {
        self.mean_abs_error < RECONSTRUCTION_TOLERANCE
    }
}

/// Pixels of `clean` farther than two pixels from a strong edge.
pub fn text_free_mask(clean: &Image) -> Vec<bool> {
    let g = sobel_gradients(clean);
    let (h, w) = clean.dims();
    let edge: Vec<bool> = g.data().chunks_exact(2).map(|p| p[0].abs() + p[1].abs() > TEXT_EDGE_THRESHOLD).collect();
    let mut free = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            if edge[y * w + x] {
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        free[yy * w + xx] = false;
                    }
                }
            }
        }
    }
    free
}

/// Checks `warp(distorted, flow) ~ clean` on text-free pixels whose
/// correspondence lands inside the distorted raster.
pub fn reconstruction_check(t: &Triplet) -> Result<ReconstructionReport> {
    let (h, w) = t.clean.dims();
    let rebuilt = warp_with(&t.distorted, &t.flow, OutOfBounds::Fill(1.0))?;
    let inside: Vec<bool> = (0..h * w)
        .map(|i| {
            let (dx, dy) = t.flow.get(i % w, i / w);
            let (sx, sy) = ((i % w) as f64 + dx as f64, (i / w) as f64 + dy as f64);
            sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64
        })
        .collect();
    let free = text_free_mask(&t.clean);
    let mask: Vec<bool> = inside.iter().zip(&free).map(|(a, b)| *a && *b).collect();
    let n_pixels = mask.iter().filter(|&&b| b).count();
    Ok(ReconstructionReport {
        mean_abs_error: rebuilt.mean_abs_diff(&t.clean, Some(&mask))?,
        n_pixels,
        all_pixels_error: rebuilt.mean_abs_diff(&t.clean, Some(&inside))?,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub clean: String,
    pub photo: String,
    pub flow: String,
    pub seed: u64,
    pub params_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub count: usize,
    /// Prefix of triplet ids, e.g. `train` or `test`.
    pub split: String,
    /// Directory of pre-rendered clean pages; procedural pages when absent.
    pub sources: Option<PathBuf>,
}

/// Lists PNG and JPEG files of a directory in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Schema { pointer: format!("line {}", i + 1), message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Generates `count` triplets into `out_dir/{clean,photo,flow}` and writes
/// `out_dir/manifest.jsonl`. Triplets already listed in an existing manifest
/// with the same seed and parameter hash, whose files exist, are kept
/// as they are.
pub fn generate_dataset(opts: &DatasetOptions, params: &SynthParams, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    params.validate()?;
    let sources = match &opts.sources {
        Some(dir) => {
            let files = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::invalid(format!("no PNG or JPEG pages in {}", dir.display())));
            }
            Some(files)
        }
        None => None,
    };
    for sub in ["clean", "photo", "flow"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let hash = params.sha256();
    let existing: HashSet<(String, u64, String)> = if manifest_path.exists() {
        read_manifest(&manifest_path)?
            .into_iter()
            .filter(|r| [&r.clean, &r.photo, &r.flow].iter().all(|p| out_dir.join(p).exists()))
            .map(|r| (r.id, r.seed, r.params_sha256))
            .collect()
    } else {
        HashSet::new()
    };

    let split = if opts.split.is_empty() { "train" } else { opts.split.as_str() };
    let mut records = Vec::with_capacity(opts.count);
    for index in 0..opts.count {
        let id = format!("{split}_{index:05}");
        let seed = derive_seed(params.seed, index as u64);
        let clean_rel = format!("clean/{id}.png");
        let flow_rel = format!("flow/{id}.flo");
        if existing.contains(&(id.clone(), seed, hash.clone())) {
            let previous = read_manifest(&manifest_path)?.into_iter().find(|r| r.id == id).expect("listed record");
            records.push(previous);
            continue;
        }
        let triplet = match &sources {
            Some(files) => {
                let page = Image::read(&files[index % files.len()])?.to_rgb().resize(params.canvas, params.canvas)?;
                make_triplet(&page, params, seed)?
            }
            None => make_procedural_triplet(params, seed)?,
        };
        let photo_rel = match &triplet.photo_jpeg {
            Some(bytes) => {
                let rel = format!("photo/{id}.jpg");
                write_bytes(&out_dir.join(&rel), bytes)?;
                rel
            }
            None => {
                let rel = format!("photo/{id}.png");
                triplet.photo.write_png(out_dir.join(&rel))?;
                rel
            }
        };
        triplet.clean.write_png(out_dir.join(&clean_rel))?;
        write_flow(&triplet.flow, out_dir.join(&flow_rel))?;
        records.push(ManifestRecord { id, clean: clean_rel, photo: photo_rel, flow: flow_rel, seed, params_sha256: hash.clone() });
    }

    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for r in &records {
        writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(records)
}

/// A manifest entry loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedTriplet {
    pub id: String,
    pub clean: Image,
    pub photo: Image,
    pub flow: FlowField,
}

pub fn load_record(root: &Path, rec: &ManifestRecord) -> Result<LoadedTriplet> {
    Ok(LoadedTriplet {
        id: rec.id.clone(),
        clean: Image::read(root.join(&rec.clean))?,
        photo: Image::read(root.join(&rec.photo))?,
        flow: read_flow(root.join(&rec.flow))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_parameters() {
        let p = SynthParams::scaled(256);
        assert_eq!(p.kernel, 23);
        assert_eq!(p.center, 128.0);
        assert_eq!(p.translation, [-12.5, 12.5]);
        assert_eq!(p.raw_range, [-256.0, 256.0]);
        assert_eq!(SynthParams::scaled(64).kernel, 5);
        assert_eq!(SynthParams::scaled(1024), SynthParams::default());
    }

    #[test]
    fn degenerate_ranges_give_constant_flow() {
        let mut p = SynthParams::scaled(32);
        p.raw_range = [0.0, 0.0];
        p.translation = [3.0, 3.0];
        p.scaling = [0.0, 0.0];
        let f = random_flow(&p, 5).unwrap();
        assert!(f.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn flat_shading_is_one() {
        let mut p = SynthParams::scaled(32);
        p.shading.strength = 0.0;
        p.shading.max_shadows = 0;
        p.shading.color_shift = 0.0;
        let s = random_shading(&p, 9).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn disabled_degradation_is_identity() {
        let img = procedural_page(32, 1).unwrap();
        let d = degrade(&img, &DegradeParams::disabled(), 3).unwrap();
        assert_eq!(d.image, img);
        assert!(d.jpeg.is_none());
    }

    #[test]
    fn nearest_odd_rounding() {
        assert_eq!(nearest_odd(0.2), 1);
        assert_eq!(nearest_odd(5.6875), 5);
        assert_eq!(nearest_odd(6.1), 7);
        assert_eq!(nearest_odd(91.0), 91);
    }

    #[test]
    fn homography_maps_corners() {
        let quad = [[3.0, 4.0], [50.0, 6.0], [47.0, 40.0], [5.0, 37.0]];
        let m = homography_to_quad(20, 10, quad).unwrap();
        for (s, d) in [[0.0, 0.0], [19.0, 0.0], [19.0, 9.0], [0.0, 9.0]].iter().zip(quad) {
            let p = apply_homography(&m, *s);
            assert!((p[0] - d[0]).abs() < 1e-9 && (p[1] - d[1]).abs() < 1e-9);
        }
    }
}
