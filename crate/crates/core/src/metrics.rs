//! Flow and image evaluation: end-point error, PCK, MS-SSIM and the
//! Sobel gradient alignment score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{gaussian_kernel, sobel_gradients};
use crate::flow::FlowField;
use crate::image::Image;

/// Per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Smallest side accepted by [`ms_ssim`].
pub const MS_SSIM_MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEvalReport {
    pub aepe: f64,
    /// Threshold in pixels (formatted as a key) to fraction of pixels.
    pub pck: BTreeMap<String, f64>,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEvalReport {
    pub ms_ssim: f64,
    pub gradient_l1: f64,
}

fn endpoint_errors<'a>(
    pred: &'a FlowField,
    gt: &'a FlowField,
    mask: Option<&'a [bool]>,
) -> Result<impl Iterator<Item = f64> + 'a> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let n = pred.height() * pred.width();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape(format!("mask has {} entries for {n} pixels", m.len())));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::invalid("empty mask"));
        }
    }
    Ok(pred
        .data()
        .chunks_exact(2)
        .zip(gt.data().chunks_exact(2))
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (p, g))| {
            let dx = p[0] as f64 - g[0] as f64;
            let dy = p[1] as f64 - g[1] as f64;
            (dx * dx + dy * dy).sqrt()
        }))
}

/// Average end-point error over (masked) pixels.
pub fn aepe(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    let (sum, n) = endpoint_errors(pred, gt, mask)?.fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    Ok(sum / n as f64)
}

/// Fraction of (masked) pixels whose end-point error is at most `threshold`.
/// The boundary is inclusive up to single precision rounding of the stored
/// displacements.
pub fn pck(pred: &FlowField, gt: &FlowField, threshold: f64, mask: Option<&[bool]>) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("PCK threshold must be positive, got {threshold}")));
    }
    let limit = threshold * (1.0 + 4.0 * f32::EPSILON as f64);
    let (hits, n) = endpoint_errors(pred, gt, mask)?
        .fold((0usize, 0usize), |(h, n), e| (h + usize::from(e <= limit), n + 1));
    Ok(hits as f64 / n as f64)
}

pub fn evaluate_flow(pred: &FlowField, gt: &FlowField, thresholds: &[f64], mask: Option<&[bool]>) -> Result<FlowEvalReport> {
    let mut pcks = BTreeMap::new();
    for &t in thresholds {
        pcks.insert(format!("{t}"), pck(pred, gt, t, mask)?);
    }
    let n_pixels = mask.map_or(pred.height() * pred.width(), |m| m.iter().filter(|&&b| b).count());
    Ok(FlowEvalReport { aepe: aepe(pred, gt, mask)?, pck: pcks, n_pixels })
}

/// Number of dyadic scales used for a given smallest side (1..=5).
pub fn ms_ssim_scales(min_side: usize) -> usize {
    let mut m = 1;
    while m < 5 && (min_side >> m) >= SSIM_WINDOW {
        m += 1;
    }
    m
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_image(img: &Image) -> Self {
        let l = img.luma();
        Plane { h: l.height(), w: l.width(), v: l.data().iter().map(|&x| x as f64).collect() }
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.v[2 * y * self.w + 2 * x]
                    + self.v[2 * y * self.w + 2 * x + 1]
                    + self.v[(2 * y + 1) * self.w + 2 * x]
                    + self.v[(2 * y + 1) * self.w + 2 * x + 1];
                v.push(s * 0.25);
            }
        }
        Plane { h, w, v }
    }

    /// Valid-mode separable filtering with `k`.
    fn filter_valid(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (h, w) = (self.h + 1 - n, self.w + 1 - n);
        let mut tmp = vec![0.0; self.h * w];
        for y in 0..self.h {
            for x in 0..w {
                tmp[y * w + x] = (0..n).map(|t| k[t] * self.v[y * self.w + x + t]).sum();
            }
        }
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = (0..n).map(|t| k[t] * tmp[(y + t) * w + x]).sum();
            }
        }
        Plane { h, w, v }
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect() }
    }
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mu_a = a.filter_valid(k);
    let mu_b = b.filter_valid(k);
    let saa = a.mul(a).filter_valid(k);
    let sbb = b.mul(b).filter_valid(k);
    let sab = a.mul(b).filter_valid(k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = saa.v[i] - ma * ma;
        let vb = sbb.v[i] - mb * mb;
        let cov = sab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

/// Multi-scale SSIM on luma. Uses up to five scales, fewer when the image
/// is too small for the 11-pixel window after halving; exponents are then
/// renormalized to sum to one. Negative per-scale terms are clamped to 0.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("ms_ssim operands {:?} vs {:?}", a.dims(), b.dims())));
    }
    let min_side = a.height().min(a.width());
    if min_side < MS_SSIM_MIN_SIDE {
        return Err(Error::invalid(format!(
            "ms_ssim needs images of at least {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let scales = ms_ssim_scales(min_side);
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let kern = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (mut pa, mut pb) = (Plane::from_image(a), Plane::from_image(b));
    let mut score = 1.0;
    for s in 0..scales {
        let weight = MS_SSIM_WEIGHTS[s] / wsum;
        let (ssim, cs) = ssim_terms(&pa, &pb, &kern);
        let term = if s + 1 == scales { ssim } else { cs };
        score *= term.max(0.0).powf(weight);
        if s + 1 < scales {
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(score)
}

/// Mean L1 distance between the target's Sobel gradients and the source's
/// Sobel gradients warped by `flow` (the gradients are taken first, then
/// warped).
pub fn gradient_alignment(source: &Image, target: &Image, flow: &FlowField) -> Result<f64> {
    if source.dims() != target.dims() || source.dims() != flow.dims() {
        return Err(Error::shape(format!(
            "source {:?}, target {:?}, flow {:?}",
            source.dims(),
            target.dims(),
            flow.dims()
        )));
    }
    let gs = sobel_gradients(source).warp(flow)?;
    gs.mean_l1(&sobel_gradients(target))
}

pub fn evaluate_images(warped: &Image, target: &Image, source: &Image, flow: &FlowField) -> Result<ImageEvalReport> {
    Ok(ImageEvalReport { ms_ssim: ms_ssim(warped, target)?, gradient_l1: gradient_alignment(source, target, flow)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |x, y, _| {
            let v = 0.5 + 0.3 * ((x as f32) * 0.3).sin() * ((y as f32) * 0.21).cos();
            if (x / 8 + y / 8) % 2 == 0 { v } else { v * 0.6 }
        })
        .unwrap()
    }

    #[test]
    fn offset_three_four_gives_five() {
        let gt = FlowField::from_fn(6, 7, |x, y| (x as f32 * 0.5, -(y as f32))).unwrap();
        let pred = gt.add(&FlowField::constant(6, 7, 3.0, 4.0)).unwrap();
        assert_eq!(aepe(&pred, &gt, None).unwrap(), 5.0);
        assert_eq!(aepe(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn pck_boundary_is_inclusive() {
        let gt = FlowField::zeros(4, 4);
        let pred = FlowField::constant(4, 4, 0.6, 0.8);
        assert_eq!(pck(&pred, &gt, 1.0, None).unwrap(), 1.0);
    }

    #[test]
    fn pck_half_offset() {
        let gt = FlowField::zeros(4, 4);
        let pred = FlowField::from_fn(4, 4, |x, _| if x < 2 { (2.0, 0.0) } else { (0.0, 0.0) }).unwrap();
        assert_eq!(pck(&pred, &gt, 1.0, None).unwrap(), 0.5);
        assert!(pck(&pred, &gt, 5.0, None).unwrap() >= pck(&pred, &gt, 1.0, None).unwrap());
        assert!(pck(&pred, &gt, 0.0, None).is_err());
    }

    #[test]
    fn empty_mask_is_an_error() {
        let f = FlowField::zeros(2, 2);
        assert!(aepe(&f, &f, Some(&[false; 4])).is_err());
    }

    #[test]
    fn ms_ssim_identity_and_symmetry() {
        let a = card(64, 64);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let b = a.map(|v| (v * 0.9 + 0.05).min(1.0)).unwrap();
        assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_too_small() {
        let a = card(15, 40);
        let err = ms_ssim(&a, &a).unwrap_err().to_string();
        assert!(err.contains("16"), "{err}");
    }

    #[test]
    fn scale_count() {
        assert_eq!(ms_ssim_scales(16), 1);
        assert_eq!(ms_ssim_scales(22), 2);
        assert_eq!(ms_ssim_scales(64), 3);
        assert_eq!(ms_ssim_scales(256), 5);
    }

    #[test]
    fn gradient_alignment_zero_for_identical() {
        let a = card(20, 20);
        assert_eq!(gradient_alignment(&a, &a, &FlowField::zeros(20, 20)).unwrap(), 0.0);
    }
}
