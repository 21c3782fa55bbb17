//! Dense displacement fields.
//!
//! A [`FlowField`] lives on the target grid: for a target pixel `x` the
//! corresponding source location is `x + f(x)`. Every module uses this one
//! convention.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sample::{resize_planes, sample_interleaved, OutOfBounds};

/// Magic bytes of the binary flow format.
pub const FLOW_MAGIC: &[u8; 4] = b"DAFL";
/// Header size of the binary flow format: magic, width, height.
pub const FLOW_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    /// Builds a flow from interleaved `(dx, dy)` pairs.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty flow {height}x{width}")));
        }
        if data.len() != height * width * 2 {
            return Err(Error::shape(format!(
                "{height}x{width} flow needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("flow component at index {i}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 2] }
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self { height, width, data: [dx, dy].repeat(height * width) }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(x, y);
                data.push(dx);
                data.push(dy);
            }
        }
        Self::new(height, width, data)
    }

    /// Builds a flow from separate x and y planes.
    pub fn from_planes(height: usize, width: usize, dx: &[f32], dy: &[f32]) -> Result<Self> {
        if dx.len() != height * width || dy.len() != height * width {
            return Err(Error::shape("flow planes do not match the grid"));
        }
        Self::new(height, width, dx.iter().zip(dy).flat_map(|(&a, &b)| [a, b]).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

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

    /// `(dx plane, dy plane)` in row-major order.
    pub fn planes(&self) -> (Vec<f32>, Vec<f32>) {
        let dx = self.data.iter().step_by(2).copied().collect();
        let dy = self.data.iter().skip(1).step_by(2).copied().collect();
        (dx, dy)
    }

    /// Bilinear lookup of the displacement at a continuous target position
    /// (border clamped).
    pub fn sample(&self, x: f64, y: f64) -> (f32, f32) {
        let mut out = [0.0f32; 2];
        sample_interleaved(&self.data, self.height, self.width, 2, x, y, OutOfBounds::Border, &mut out);
        (out[0], out[1])
    }

    pub fn add(&self, other: &FlowField) -> Result<FlowField> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(FlowField { data, ..self.clone() })
    }

    pub fn sub(&self, other: &FlowField) -> Result<FlowField> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(FlowField { data, ..self.clone() })
    }

    pub fn scale(&self, s: f32) -> FlowField {
        FlowField { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    pub(crate) fn check_same(&self, other: &FlowField, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!("{what}: flow {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    /// Largest absolute forward difference of either component along either
    /// axis (pixels per pixel).
    pub fn max_gradient(&self) -> f64 {
        let mut m = 0.0f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let (a, b) = self.get(x, y);
                if x + 1 < self.width {
                    let (c, d) = self.get(x + 1, y);
                    m = m.max((c - a).abs() as f64).max((d - b).abs() as f64);
                }
                if y + 1 < self.height {
                    let (c, d) = self.get(x, y + 1);
                    m = m.max((c - a).abs() as f64).max((d - b).abs() as f64);
                }
            }
        }
        m
    }

    /// Mean displacement `(mean dx, mean dy)`.
    pub fn mean(&self) -> (f64, f64) {
        let n = (self.height * self.width) as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for p in self.data.chunks_exact(2) {
            sx += p[0] as f64;
            sy += p[1] as f64;
        }
        (sx / n, sy / n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FLOW_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse { offset, message };
        if bytes.len() < 4 {
            return Err(parse(bytes.len(), "truncated magic".into()));
        }
        if &bytes[..4] != FLOW_MAGIC {
            return Err(parse(0, format!("bad magic {:?}, expected \"DAFL\"", String::from_utf8_lossy(&bytes[..4]))));
        }
        if bytes.len() < FLOW_HEADER_LEN {
            return Err(parse(bytes.len(), "truncated header".into()));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if width == 0 {
            return Err(parse(4, "zero width".into()));
        }
        if height == 0 {
            return Err(parse(8, "zero height".into()));
        }
        let payload = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| parse(4, format!("dimensions {width}x{height} overflow")))?;
        let expected = FLOW_HEADER_LEN + payload;
        if bytes.len() < expected {
            return Err(parse(bytes.len(), format!("truncated payload, expected {expected} bytes")));
        }
        if bytes.len() > expected {
            return Err(parse(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        let mut data = Vec::with_capacity(width * height * 2);
        for (k, chunk) in bytes[FLOW_HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(parse(FLOW_HEADER_LEN + 4 * k, "non-finite displacement".into()));
            }
            data.push(v);
        }
        Ok(Self { height, width, data })
    }
}

pub fn write_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&flow.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FlowField::from_bytes(&bytes)
}

/// Absolute pixel coordinates of a grid: `grid(i, j) = (j, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
}

impl CoordGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    /// Coordinate `(x, y)` at row `i`, column `j`.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        (j as f64, i as f64)
    }

    /// Row-major list of all coordinates.
    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.height).flat_map(|i| (0..self.width).map(move |j| (j as f64, i as f64))).collect()
    }

    /// Coordinates displaced by a flow: `x + f(x)`.
    pub fn displaced(&self, flow: &FlowField) -> Result<Vec<(f64, f64)>> {
        if flow.dims() != (self.height, self.width) {
            return Err(Error::shape("flow does not match coordinate grid"));
        }
        Ok(self
            .points()
            .into_iter()
            .zip(flow.data.chunks_exact(2))
            .map(|((x, y), d)| (x + d[0] as f64, y + d[1] as f64))
            .collect())
    }
}

/// Composition `g(x) = outer(x) + inner(x + outer(x))`, so that warping by
/// `g` equals warping by `inner` and then by `outer`.
pub fn compose_flows(outer: &FlowField, inner: &FlowField) -> Result<FlowField> {
    outer.check_same(inner, "compose_flows")?;
    let mut data = Vec::with_capacity(outer.data.len());
    for y in 0..outer.height {
        for x in 0..outer.width {
            let (ox, oy) = outer.get(x, y);
            let (ix, iy) = inner.sample(x as f64 + ox as f64, y as f64 + oy as f64);
            data.push(ox + ix);
            data.push(oy + iy);
        }
    }
    FlowField::new(outer.height, outer.width, data)
}

/// Bilinear resampling of a flow to `new_h x new_w`. Displacements are
/// rescaled by `new_w / old_w` and `new_h / old_h` so they stay in pixels of
/// the output grid.
pub fn resize_flow(flow: &FlowField, new_h: usize, new_w: usize) -> Result<FlowField> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid(format!("resize_flow to {new_h}x{new_w}")));
    }
    let (dx, dy) = flow.planes();
    let mut planes = dx;
    planes.extend_from_slice(&dy);
    let out = resize_planes(&planes, 2, flow.height, flow.width, new_h, new_w);
    let sx = new_w as f32 / flow.width as f32;
    let sy = new_h as f32 / flow.height as f32;
    let n = new_h * new_w;
    let data = (0..n).flat_map(|i| [out[i] * sx, out[n + i] * sy]).collect();
    FlowField::new(new_h, new_w, data)
}

/// Numerically inverts a flow: for every pixel `p` finds `q` with
/// `q + f(q) = p` and returns `h(p) = q - p`. Each pixel runs a damped
/// Newton iteration on the bilinear field, starting from `q = p - f(p)`;
/// plain fixed-point iteration diverges where the flow gradient exceeds one.
pub fn invert_flow(flow: &FlowField, iterations: usize) -> Result<FlowField> {
    let (h, w) = flow.dims();
    let residual = |q: [f64; 2], p: [f64; 2]| {
        let (fx, fy) = flow.sample(q[0], q[1]);
        [q[0] + fx as f64 - p[0], q[1] + fy as f64 - p[1]]
    };
    let norm = |r: [f64; 2]| r[0].hypot(r[1]);
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let (fx, fy) = flow.get(x, y);
            let mut q = [p[0] - fx as f64, p[1] - fy as f64];
            let mut r = residual(q, p);
            for _ in 0..iterations {
                if norm(r) < 1e-6 {
                    break;
                }
                // Jacobian of q + f(q) by central differences
                let e = 0.25;
                let (ax, ay) = flow.sample(q[0] + e, q[1]);
                let (bx, by) = flow.sample(q[0] - e, q[1]);
                let (cx, cy) = flow.sample(q[0], q[1] + e);
                let (dx, dy) = flow.sample(q[0], q[1] - e);
                let j = [
                    [1.0 + (ax - bx) as f64 / (2.0 * e), (cx - dx) as f64 / (2.0 * e)],
                    [(ay - by) as f64 / (2.0 * e), 1.0 + (cy - dy) as f64 / (2.0 * e)],
                ];
                let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                let step = if det.abs() > 1e-6 {
                    [(-r[0] * j[1][1] + r[1] * j[0][1]) / det, (r[0] * j[1][0] - r[1] * j[0][0]) / det]
                } else {
                    [-r[0], -r[1]]
                };
                let mut t = 1.0;
                let mut improved = false;
                for _ in 0..8 {
                    let cand = [q[0] + t * step[0], q[1] + t * step[1]];
                    let rc = residual(cand, p);
                    if norm(rc) < norm(r) {
                        q = cand;
                        r = rc;
                        improved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !improved {
                    break;
                }
            }
            data.push((q[0] - p[0]) as f32);
            data.push((q[1] - p[1]) as f32);
        }
    }
    FlowField::new(h, w, data)
}
