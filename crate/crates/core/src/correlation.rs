//! Global and local correlation (cost) volumes between feature maps.
//!
//! Feature maps are stored channel-major: element `(d, y, x)` lives at
//! `d * H * W + y * W + x`. Dot products accumulate over `d` in increasing
//! order, which makes results reproducible bit for bit.

use num_traits::Float;

use crate::error::{Error, Result};

/// Norm floor below which a feature vector is treated as zero.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f64> {
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!("feature map {depth}x{height}x{width}")));
        }
        if data.len() != depth * height * width {
            return Err(Error::shape(format!(
                "{depth}x{height}x{width} feature map needs {} values, got {}",
                depth * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { depth, height, width, data })
    }

    pub fn from_fn(depth: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(depth * height * width);
        for d in 0..depth {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(d, y, x));
                }
            }
        }
        Self::new(depth, height, width, data)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, d: usize, y: usize, x: usize) -> T {
        self.data[(d * self.height + y) * self.width + x]
    }
}

/// Which correlation produced a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    /// Dense `HrWr x HqWq` matrix, row `i` = reference position.
    Global { ref_hw: (usize, usize), query_hw: (usize, usize) },
    /// `(2R+1)^2 x H x W`, channel `(dy + R) * (2R + 1) + (dx + R)`.
    Local { radius: usize, hw: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume<T = f64> {
    pub kind: CorrelationKind,
    pub data: Vec<T>,
}

impl<T: Float> CorrelationVolume<T> {
    /// Channel count when read as a feature map over the grid.
    pub fn channels(&self) -> usize {
        match self.kind {
            CorrelationKind::Global { ref_hw, .. } => ref_hw.0 * ref_hw.1,
            CorrelationKind::Local { radius, .. } => local_channels(radius),
        }
    }

    /// Global entry `(i, j)` or local entry `(channel, pixel)`.
    pub fn at(&self, row: usize, col: usize) -> T {
        match self.kind {
            CorrelationKind::Global { query_hw, .. } => self.data[row * query_hw.0 * query_hw.1 + col],
            CorrelationKind::Local { hw, .. } => self.data[row * hw.0 * hw.1 + col],
        }
    }
}

/// Number of displacement channels of a square neighborhood of radius `r`.
pub fn local_channels(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Scales each depth vector to unit length; vectors with norm below
/// [`NORM_EPS`] are left as they are.
pub fn l2_normalize<T: Float>(features: &FeatureMap<T>) -> FeatureMap<T> {
    let n = features.height * features.width;
    let mut data = features.data.clone();
    for (i, inv) in l2_inverse_norms(&features.data, features.depth, n).into_iter().enumerate() {
        for d in 0..features.depth {
            data[d * n + i] = data[d * n + i] * inv;
        }
    }
    FeatureMap { data, ..*features }
}

/// Per-pixel inverse norms used by [`l2_normalize`] (1 for near-zero vectors).
pub fn l2_inverse_norms<T: Float>(data: &[T], depth: usize, n: usize) -> Vec<T> {
    let eps = T::from(NORM_EPS).unwrap();
    (0..n)
        .map(|i| {
            let mut s = T::zero();
            for d in 0..depth {
                s = s + data[d * n + i] * data[d * n + i];
            }
            let norm = s.sqrt();
            if norm > eps {
                T::one() / norm
            } else {
                T::one()
            }
        })
        .collect()
}

/// `C[i][j] = <reference_i, query_j>` over channel-major slices.
pub fn global_correlation_raw<T: Float>(reference: &[T], nr: usize, query: &[T], nq: usize, depth: usize) -> Vec<T> {
    let mut out = vec![T::zero(); nr * nq];
    for i in 0..nr {
        let row = &mut out[i * nq..(i + 1) * nq];
        for d in 0..depth {
            let a = reference[d * nr + i];
            let q = &query[d * nq..(d + 1) * nq];
            for (o, &b) in row.iter_mut().zip(q) {
                *o = *o + a * b;
            }
        }
    }
    out
}

/// Dense correlation of every reference vector with every query vector.
pub fn global_correlation<T: Float>(reference: &FeatureMap<T>, query: &FeatureMap<T>) -> Result<CorrelationVolume<T>> {
    if reference.depth != query.depth {
        return Err(Error::shape(format!("depth {} vs {}", reference.depth, query.depth)));
    }
    let nr = reference.height * reference.width;
    let nq = query.height * query.width;
    Ok(CorrelationVolume {
        kind: CorrelationKind::Global {
            ref_hw: (reference.height, reference.width),
            query_hw: (query.height, query.width),
        },
        data: global_correlation_raw(&reference.data, nr, &query.data, nq, reference.depth),
    })
}

/// `C[k][p] = <reference_p, query_{p + d_k}>` for all `|d|_inf <= radius`;
/// displacements that leave the grid give 0.
pub fn local_correlation_raw<T: Float>(
    reference: &[T],
    query: &[T],
    depth: usize,
    height: usize,
    width: usize,
    radius: usize,
) -> Vec<T> {
    let n = height * width;
    let side = 2 * radius + 1;
    let r = radius as i64;
    let mut out = vec![T::zero(); side * side * n];
    for dy in -r..=r {
        for dx in -r..=r {
            let k = ((dy + r) as usize) * side + (dx + r) as usize;
            let plane = &mut out[k * n..(k + 1) * n];
            let y_lo = (-dy).max(0) as usize;
            let y_hi = (height as i64 - dy.max(0)).max(0) as usize;
            let x_lo = (-dx).max(0) as usize;
            let x_hi = (width as i64 - dx.max(0)).max(0) as usize;
            for d in 0..depth {
                let a = &reference[d * n..(d + 1) * n];
                let b = &query[d * n..(d + 1) * n];
                for y in y_lo..y_hi {
                    let qy = (y as i64 + dy) as usize;
                    for x in x_lo..x_hi {
                        let qx = (x as i64 + dx) as usize;
                        let p = y * width + x;
                        plane[p] = plane[p] + a[p] * b[qy * width + qx];
                    }
                }
            }
        }
    }
    out
}

/// Correlation restricted to a square displacement window.
pub fn local_correlation<T: Float>(
    reference: &FeatureMap<T>,
    query: &FeatureMap<T>,
    radius: usize,
) -> Result<CorrelationVolume<T>> {
    if reference.depth != query.depth || reference.height != query.height || reference.width != query.width {
        return Err(Error::shape(format!(
            "local correlation needs equal shapes, got {}x{}x{} vs {}x{}x{}",
            reference.depth, reference.height, reference.width, query.depth, query.height, query.width
        )));
    }
    Ok(CorrelationVolume {
        kind: CorrelationKind::Local { radius, hw: (reference.height, reference.width) },
        data: local_correlation_raw(&reference.data, &query.data, reference.depth, reference.height, reference.width, radius),
    })
}
