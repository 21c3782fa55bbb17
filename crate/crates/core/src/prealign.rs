//! Edge-based non-rigid pre-alignment.
//!
//! The document region of a photograph is segmented ([`extract_mask`]), its
//! boundary is traced and split at four corners into edges, equidistant
//! points along each edge are paired with points on an axis-aligned
//! reference rectangle ([`boundary_control_points`]), and a thin plate
//! spline through those pairs ([`tps_fit`]) resamples the photo onto the
//! reference canvas ([`prealign`]).
//!
//! The spline is fitted from reference coordinates to photo coordinates, so
//! it directly provides the backward-warping flow on the reference grid and
//! never needs to be inverted numerically.

use std::collections::VecDeque;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::sample::{remap, OutOfBounds};

pub const DEFAULT_POINTS_PER_EDGE: usize = 3;
pub const DEFAULT_LAMBDA: f64 = 1e-3;
/// Minimum foreground fraction for a mask to count as a document.
pub const MIN_FOREGROUND_FRACTION: f64 = 0.01;
/// Corners closer than this (pixels) are considered collapsed.
const MIN_CORNER_SEPARATION: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl DocumentMask {
    /// Accepts an externally produced mask; it is reduced to its largest
    /// connected component with holes filled.
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!("mask of {} values for {height}x{width}", data.len())));
        }
        let data = fill_holes(&largest_component(&data, height, width), height, width);
        let fg = data.iter().filter(|&&b| b).count();
        if fg == 0 {
            return Err(Error::NoDocument("mask is empty".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Mask from an image: pixels brighter than 0.5 in luma are foreground.
    pub fn from_image(img: &Image) -> Result<Self> {
        let l = img.luma();
        Self::new(l.height(), l.width(), l.data().iter().map(|&v| v > 0.5).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.data[y as usize * self.width + x as usize]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Intersection over union with another mask of the same size.
    pub fn iou(&self, other: &DocumentMask) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count();
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        inter as f64 / union.max(1) as f64
    }
}

/// Otsu threshold of values in `[0, 1]` over a 256-bin histogram. Returns
/// the upper edge of the last background bin.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / 255.0
}

fn dilate(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; m.len()];
    for y in 0..h {
        for x in 0..w {
            let mut v = false;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && m[yy as usize * w + xx as usize] {
                        v = true;
                    }
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

fn erode(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    // outside the raster counts as foreground so border-touching regions survive
    let mut out = vec![false; m.len()];
    for y in 0..h {
        for x in 0..w {
            let mut v = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && !m[yy as usize * w + xx as usize] {
                        v = false;
                    }
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

/// Labels 4-connected components of `value` pixels; returns the labels
/// (`usize::MAX` for other pixels) and each component's size.
fn components(m: &[bool], h: usize, w: usize, value: bool) -> (Vec<usize>, Vec<usize>) {
    let mut label = vec![usize::MAX; m.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..m.len() {
        if m[start] != value || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        label[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if m[q] == value && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }
    (label, sizes)
}

fn largest_component(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (label, sizes) = components(m, h, w, true);
    let Some(best) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) else {
        return vec![false; m.len()];
    };
    label.iter().map(|&l| l == best).collect()
}

/// Background components that do not touch the raster border become
/// foreground.
fn fill_holes(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (label, sizes) = components(m, h, w, false);
    let mut outside = vec![false; sizes.len()];
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !m[y * w + x] {
                outside[label[y * w + x]] = true;
            }
        }
    }
    m.iter().zip(&label).map(|(&v, &l)| v || !outside[l]).collect()
}

/// Classical document segmentation: Otsu threshold on luma, morphological
/// closing, largest connected component, hole filling.
pub fn extract_mask(image: &Image) -> Result<DocumentMask> {
    let luma = image.luma();
    let (h, w) = luma.dims();
    let t = otsu_threshold(luma.data());
    let fg: Vec<bool> = luma.data().iter().map(|&v| v > t).collect();
    let closed = erode(&dilate(&fg, h, w), h, w);
    let data = fill_holes(&largest_component(&closed, h, w), h, w);
    let frac = data.iter().filter(|&&b| b).count() as f64 / data.len() as f64;
    if frac < MIN_FOREGROUND_FRACTION {
        return Err(Error::NoDocument(format!(
            "foreground covers {:.3}% of the image (minimum {}%)",
            frac * 100.0,
            MIN_FOREGROUND_FRACTION * 100.0
        )));
    }
    Ok(DocumentMask { height: h, width: w, data })
}

/// Moore-neighbor tracing order, clockwise on screen starting west.
const RING: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn ring_index(d: (i64, i64)) -> usize {
    RING.iter().position(|&r| r == d).expect("unit step")
}

/// Outer boundary pixels of the mask in clockwise order, starting at the
/// top-most, left-most foreground pixel.
pub fn trace_boundary(mask: &DocumentMask) -> Vec<(i64, i64)> {
    let w = mask.width;
    let Some(first) = mask.data.iter().position(|&b| b) else {
        return Vec::new();
    };
    let start = ((first % w) as i64, (first / w) as i64);
    let step = |cur: (i64, i64), back: usize| -> Option<((i64, i64), usize)> {
        (1..=8).map(|k| (back + k) % 8).find_map(|d| {
            let p = (cur.0 + RING[d].0, cur.1 + RING[d].1);
            mask.get(p.0, p.1).then_some((p, d))
        })
    };
    let mut contour = vec![start];
    // the pixel west of the top-most, left-most pixel is background
    let (mut cur, mut back) = (start, 0usize);
    for _ in 0..4 * mask.data.len() + 8 {
        let Some((p, d)) = step(cur, back) else {
            break;
        };
        // Jacob's criterion: the first move repeats
        if cur == start && contour.len() > 1 && p == contour[1] {
            break;
        }
        let (prev, mv) = (RING[(d + 7) % 8], RING[d]);
        back = ring_index((prev.0 - mv.0, prev.1 - mv.1));
        cur = p;
        contour.push(cur);
    }
    if contour.len() > 1 && contour.last() == Some(&start) {
        contour.pop();
    }
    contour
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPoints {
    /// Points on the photograph.
    pub source_points: Vec<[f64; 2]>,
    /// Matching points on the reference rectangle.
    pub target_points: Vec<[f64; 2]>,
}

impl ControlPoints {
    pub fn new(source_points: Vec<[f64; 2]>, target_points: Vec<[f64; 2]>) -> Result<Self> {
        if source_points.len() != target_points.len() {
            return Err(Error::invalid(format!(
                "{} source points vs {} target points",
                source_points.len(),
                target_points.len()
            )));
        }
        if source_points.len() < 3 {
            return Err(Error::invalid("at least 3 control points are required"));
        }
        for i in 0..source_points.len() {
            for j in 0..i {
                if source_points[i] == source_points[j] {
                    return Err(Error::invalid(format!("duplicate source point {:?}", source_points[i])));
                }
            }
        }
        Ok(Self { source_points, target_points })
    }

    /// Same pairs with the roles of source and target exchanged.
    pub fn swapped(&self) -> Self {
        Self { source_points: self.target_points.clone(), target_points: self.source_points.clone() }
    }

    pub fn len(&self) -> usize {
        self.source_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_points.is_empty()
    }
}

/// Points at arc-length fractions `k / (n + 1)`, `k = 1..=n`, of a polyline.
fn equidistant(path: &[[f64; 2]], n: usize) -> Vec<[f64; 2]> {
    let mut cum = vec![0.0];
    for s in path.windows(2) {
        let d = ((s[1][0] - s[0][0]).powi(2) + (s[1][1] - s[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    (1..=n)
        .map(|k| {
            let target = total * k as f64 / (n + 1) as f64;
            let seg = cum.windows(2).position(|c| target <= c[1]).unwrap_or(path.len() - 2);
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
            [
                path[seg][0] + t * (path[seg + 1][0] - path[seg][0]),
                path[seg][1] + t * (path[seg + 1][1] - path[seg][1]),
            ]
        })
        .collect()
}

/// Four corners plus `points_per_edge` equidistant points per edge on the
/// mask boundary, paired with the corresponding points of the reference
/// rectangle spanning an `out_h x out_w` canvas. Order: top-left, top edge,
/// top-right, right edge, bottom-right, bottom edge, bottom-left, left edge.
pub fn boundary_control_points(
    mask: &DocumentMask,
    points_per_edge: usize,
    out_h: usize,
    out_w: usize,
) -> Result<ControlPoints> {
    let contour = trace_boundary(mask);
    if contour.len() < 4 {
        return Err(Error::Numerical(format!("boundary has only {} pixels", contour.len())));
    }
    let pick = |score: &dyn Fn(&(i64, i64)) -> i64, max: bool| -> usize {
        let mut best = 0;
        for (i, p) in contour.iter().enumerate() {
            let (s, b) = (score(p), score(&contour[best]));
            if (max && s > b) || (!max && s < b) {
                best = i;
            }
        }
        best
    };
    let tl = pick(&|p| p.0 + p.1, false);
    let tr = pick(&|p| p.0 - p.1, true);
    let br = pick(&|p| p.0 + p.1, true);
    let bl = pick(&|p| p.0 - p.1, false);
    let corners = [tl, tr, br, bl];
    let pts: Vec<[f64; 2]> = contour.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
    for i in 0..4 {
        for j in 0..i {
            let (a, b) = (pts[corners[i]], pts[corners[j]]);
            if ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() < MIN_CORNER_SEPARATION {
                return Err(Error::Numerical("document corners collapse; mask is degenerate".into()));
            }
        }
    }
    // the contour is clockwise, so the corners must appear in this cyclic order
    let n = pts.len();
    let offset = |i: usize| (i + n - tl) % n;
    if !(offset(tr) < offset(br) && offset(br) < offset(bl)) {
        return Err(Error::Numerical("document corners are not in clockwise order".into()));
    }
    let path = |from: usize, to: usize| -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        let mut i = from;
        loop {
            out.push(pts[i]);
            if i == to {
                break;
            }
            i = (i + 1) % n;
        }
        out
    };
    let (w1, h1) = ((out_w - 1) as f64, (out_h - 1) as f64);
    let ref_corners = [[0.0, 0.0], [w1, 0.0], [w1, h1], [0.0, h1]];
    let mut source = Vec::new();
    let mut target = Vec::new();
    for e in 0..4 {
        let (a, b) = (corners[e], corners[(e + 1) % 4]);
        source.push(pts[a]);
        target.push(ref_corners[e]);
        source.extend(equidistant(&path(a, b), points_per_edge));
        target.extend(equidistant(&[ref_corners[e], ref_corners[(e + 1) % 4]], points_per_edge));
    }
    ControlPoints::new(source, target)
}

/// Thin plate spline radial basis `U(r) = r^2 log r^2` evaluated from the
/// squared distance.
#[inline]
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 > 0.0 {
        r2 * r2.ln()
    } else {
        0.0
    }
}

/// Isotropic normalization shared by both point sets: `u = (p - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 2],
    pub scale: f64,
}

impl Normalization {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Result<Self> {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let scale = ((hi[0] - lo[0]).max(hi[1] - lo[1])) / 2.0;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Numerical("control points span no area".into()));
        }
        Ok(Self { center: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0], scale })
    }

    #[inline]
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.center[0]) / self.scale, (p[1] - self.center[1]) / self.scale]
    }

    #[inline]
    fn invert(&self, u: [f64; 2]) -> [f64; 2] {
        [u[0] * self.scale + self.center[0], u[1] * self.scale + self.center[1]]
    }
}

/// A fitted thin plate spline mapping source-point space to target-point
/// space. Coefficients are stored in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsTransform {
    pub control_points: ControlPoints,
    pub lambda: f64,
    pub normalization: Normalization,
    /// Radial weight per control point, one column per output dimension.
    pub weights: Vec<[f64; 2]>,
    /// Normalized affine part: `out_d = a[d][0] + a[d][1] * u + a[d][2] * v`.
    pub affine: [[f64; 3]; 2],
}

/// Solves the regularized thin plate spline system
/// `[[K + lambda I, P], [P^T, 0]] [w; a] = [y; 0]` for both output
/// dimensions.
pub fn tps_fit(cp: &ControlPoints, lambda: f64) -> Result<TpsTransform> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let n = cp.len();
    if n < 3 || cp.target_points.len() != n {
        return Err(Error::invalid("at least 3 matched control points are required"));
    }
    let norm = Normalization::fit(cp.source_points.iter().chain(&cp.target_points).copied())?;
    let src: Vec<[f64; 2]> = cp.source_points.iter().map(|&p| norm.apply(p)).collect();
    let dst: Vec<[f64; 2]> = cp.target_points.iter().map(|&p| norm.apply(p)).collect();

    // collinear sources leave the affine block rank deficient
    let (mx, my) = (src.iter().map(|p| p[0]).sum::<f64>() / n as f64, src.iter().map(|p| p[1]).sum::<f64>() / n as f64);
    let mut cov = Matrix2::<f64>::zeros();
    for p in &src {
        let d = [p[0] - mx, p[1] - my];
        cov[(0, 0)] += d[0] * d[0];
        cov[(0, 1)] += d[0] * d[1];
        cov[(1, 1)] += d[1] * d[1];
    }
    cov[(1, 0)] = cov[(0, 1)];
    let min_eig = cov.symmetric_eigenvalues().min() / n as f64;
    if min_eig < 1e-12 {
        return Err(Error::Numerical("control points are collinear; spline system is singular".into()));
    }

    let m = n + 3;
    let mut l = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DMatrix::<f64>::zeros(m, 2);
    for i in 0..n {
        for j in 0..n {
            let r2 = (src[i][0] - src[j][0]).powi(2) + (src[i][1] - src[j][1]).powi(2);
            l[(i, j)] = tps_kernel(r2);
        }
        l[(i, i)] += lambda;
        let row = [1.0, src[i][0], src[i][1]];
        for (k, v) in row.into_iter().enumerate() {
            l[(i, n + k)] = v;
            l[(n + k, i)] = v;
        }
        rhs[(i, 0)] = dst[i][0];
        rhs[(i, 1)] = dst[i][1];
    }
    let sol = l
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("spline system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("spline solution is not finite".into()));
    }
    let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
        [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
    ];
    Ok(TpsTransform { control_points: cp.clone(), lambda, normalization: norm, weights, affine })
}

impl TpsTransform {
    /// Maps a point from source space to target space.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let u = self.normalization.apply(p);
        let mut out = [
            self.affine[0][0] + self.affine[0][1] * u[0] + self.affine[0][2] * u[1],
            self.affine[1][0] + self.affine[1][1] * u[0] + self.affine[1][2] * u[1],
        ];
        for (c, w) in self.control_points.source_points.iter().zip(&self.weights) {
            let cu = self.normalization.apply(*c);
            let k = tps_kernel((u[0] - cu[0]).powi(2) + (u[1] - cu[1]).powi(2));
            out[0] += w[0] * k;
            out[1] += w[1] * k;
        }
        self.normalization.invert(out)
    }

    /// Affine part in pixel units: `[[a11, a12, tx], [a21, a22, ty]]`.
    pub fn affine_pixels(&self) -> [[f64; 3]; 2] {
        let Normalization { center: c, scale: s } = self.normalization;
        let a = self.affine;
        let lin = [[a[0][1], a[0][2]], [a[1][1], a[1][2]]];
        let mut out = [[0.0; 3]; 2];
        for d in 0..2 {
            out[d][0] = lin[d][0];
            out[d][1] = lin[d][1];
            out[d][2] = s * a[d][0] + c[d] - (lin[d][0] * c[0] + lin[d][1] * c[1]);
        }
        out
    }

    /// Bending energy `sum_d w_d^T K w_d` in normalized coordinates.
    pub fn bending_energy(&self) -> f64 {
        let pts: Vec<[f64; 2]> = self.control_points.source_points.iter().map(|&p| self.normalization.apply(p)).collect();
        let mut e = 0.0;
        for (i, pi) in pts.iter().enumerate() {
            for (j, pj) in pts.iter().enumerate() {
                let k = tps_kernel((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2));
                e += k * (self.weights[i][0] * self.weights[j][0] + self.weights[i][1] * self.weights[j][1]);
            }
        }
        e
    }

    /// Spline with source and target roles exchanged, refitted with the
    /// same regularization.
    pub fn refit_inverse(&self) -> Result<TpsTransform> {
        tps_fit(&self.control_points.swapped(), self.lambda)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Flow on an `out_h x out_w` grid with `f(x) = T(x) - x`, for a spline `T`
/// that maps reference coordinates to photo coordinates.
pub fn tps_to_flow(t: &TpsTransform, out_h: usize, out_w: usize) -> Result<FlowField> {
    FlowField::from_fn(out_h, out_w, |x, y| {
        let p = t.apply([x as f64, y as f64]);
        ((p[0] - x as f64) as f32, (p[1] - y as f64) as f32)
    })
}

/// Options for [`prealign_with`].
#[derive(Debug, Clone)]
pub struct PrealignOptions {
    pub points_per_edge: usize,
    pub lambda: f64,
    /// Output canvas; defaults to the photo size.
    pub out_dims: Option<(usize, usize)>,
    /// Externally produced document mask.
    pub mask: Option<DocumentMask>,
}

impl Default for PrealignOptions {
    fn default() -> Self {
        Self { points_per_edge: DEFAULT_POINTS_PER_EDGE, lambda: DEFAULT_LAMBDA, out_dims: None, mask: None }
    }
}

/// Result of pre-alignment.
#[derive(Debug, Clone)]
pub struct Prealigned {
    pub image: Image,
    /// Spline from reference (pre-aligned) coordinates to photo coordinates.
    pub transform: TpsTransform,
    pub flow: FlowField,
}

/// Pre-aligns a photo onto a reference canvas of the photo's own size.
pub fn prealign(image: &Image, points_per_edge: usize, lambda: f64) -> Result<(Image, TpsTransform)> {
    let out = prealign_with(image, &PrealignOptions { points_per_edge, lambda, ..Default::default() })?;
    Ok((out.image, out.transform))
}

pub fn prealign_with(image: &Image, opts: &PrealignOptions) -> Result<Prealigned> {
    let mask = match &opts.mask {
        Some(m) if m.dims() != image.dims() => {
            return Err(Error::shape(format!("mask {:?} vs image {:?}", m.dims(), image.dims())))
        }
        Some(m) => m.clone(),
        None => extract_mask(image)?,
    };
    let (oh, ow) = opts.out_dims.unwrap_or(image.dims());
    let cp = boundary_control_points(&mask, opts.points_per_edge, oh, ow)?;
    let transform = tps_fit(&cp.swapped(), opts.lambda)?;
    let flow = tps_to_flow(&transform, oh, ow)?;
    let image = remap(image, &flow, OutOfBounds::Border)?;
    Ok(Prealigned { image, transform, flow })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_image(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        Image::from_fn(h, w, 1, |x, y, _| if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn rectangle_mask_matches() {
        let img = rect_image(40, 50, 10, 5, 39, 30);
        let mask = extract_mask(&img).unwrap();
        let expected: Vec<bool> = img.data().iter().map(|&v| v > 0.5).collect();
        assert_eq!(mask.data(), &expected[..]);
    }

    #[test]
    fn black_image_has_no_document() {
        let img = Image::filled(20, 20, 3, 0.0).unwrap();
        assert!(matches!(extract_mask(&img), Err(Error::NoDocument(_))));
    }

    #[test]
    fn text_holes_are_filled() {
        let img = Image::from_fn(40, 40, 1, |x, y, _| {
            let inside = (5..35).contains(&x) && (5..35).contains(&y);
            let text = (10..30).contains(&x) && y % 4 == 0 && (10..30).contains(&y);
            if inside && !text { 0.95 } else { 0.05 }
        })
        .unwrap();
        let mask = extract_mask(&img).unwrap();
        assert_eq!(mask.area(), 30 * 30);
    }

    #[test]
    fn rectangle_corners_only() {
        let mask = extract_mask(&rect_image(40, 50, 10, 5, 39, 30)).unwrap();
        let cp = boundary_control_points(&mask, 0, 40, 50).unwrap();
        assert_eq!(cp.source_points, vec![[10.0, 5.0], [39.0, 5.0], [39.0, 30.0], [10.0, 30.0]]);
        assert_eq!(cp.target_points, vec![[0.0, 0.0], [49.0, 0.0], [49.0, 39.0], [0.0, 39.0]]);
    }

    #[test]
    fn rectangle_edge_points_at_quarters() {
        let mask = extract_mask(&rect_image(40, 50, 10, 6, 42, 30)).unwrap();
        let cp = boundary_control_points(&mask, 3, 40, 50).unwrap();
        assert_eq!(cp.len(), 16);
        // top edge runs x = 10..=42 at y = 6
        let top: Vec<[f64; 2]> = cp.source_points[1..4].to_vec();
        assert_eq!(top, vec![[18.0, 6.0], [26.0, 6.0], [34.0, 6.0]]);
        // right edge runs y = 6..=30 at x = 42
        let right: Vec<[f64; 2]> = cp.source_points[5..8].to_vec();
        assert_eq!(right, vec![[42.0, 12.0], [42.0, 18.0], [42.0, 24.0]]);
        assert_eq!(cp.target_points[2], [24.5, 0.0]);
    }

    #[test]
    fn tiny_mask_is_degenerate() {
        let mut data = vec![false; 100];
        data[55] = true;
        let mask = DocumentMask::new(10, 10, data).unwrap();
        assert!(boundary_control_points(&mask, 3, 10, 10).is_err());
    }

    #[test]
    fn identity_fit() {
        let pts = vec![[0.0, 0.0], [10.0, 0.0], [10.0, 8.0], [0.0, 8.0], [4.0, 3.0]];
        let t = tps_fit(&ControlPoints::new(pts.clone(), pts).unwrap(), 0.0).unwrap();
        let a = t.affine_pixels();
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        for d in 0..2 {
            for k in 0..3 {
                assert!((a[d][k] - id[d][k]).abs() < 1e-9);
            }
        }
        assert!(t.weights.iter().all(|w| w[0].abs() < 1e-9 && w[1].abs() < 1e-9));
    }

    #[test]
    fn translation_fit() {
        let src = vec![[0.0, 0.0], [20.0, 1.0], [18.0, 15.0], [2.0, 12.0], [9.0, 7.0]];
        let dst: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + 10.0, p[1] - 5.0]).collect();
        let t = tps_fit(&ControlPoints::new(src, dst).unwrap(), 0.0).unwrap();
        for &(x, y) in &[(3.0, 4.0), (-7.0, 30.0), (15.5, 2.25)] {
            let p = t.apply([x, y]);
            assert!((p[0] - x - 10.0).abs() < 1e-9 && (p[1] - y + 5.0).abs() < 1e-9);
        }
        let flow = tps_to_flow(&t, 4, 5).unwrap();
        for p in flow.data().chunks(2) {
            assert!((p[0] - 10.0).abs() < 1e-5 && (p[1] + 5.0).abs() < 1e-5);
        }
    }

    #[test]
    fn collinear_points_are_singular() {
        let src = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let cp = ControlPoints::new(src.clone(), src).unwrap();
        assert!(matches!(tps_fit(&cp, 0.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn json_round_trip() {
        let src = vec![[0.0, 0.0], [20.0, 1.0], [18.0, 15.0], [2.0, 12.0]];
        let dst = vec![[1.0, 0.5], [21.0, 2.0], [17.0, 14.0], [3.0, 13.0]];
        let t = tps_fit(&ControlPoints::new(src, dst).unwrap(), 1e-3).unwrap();
        let back = TpsTransform::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
