//! Bilinear sampling, backward warping and bilinear resampling.
//!
//! Coordinates are absolute pixel positions: `x` is the column and `y` the
//! row, with pixel centers on the integer lattice.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::Image;

/// How samples outside the raster are produced.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum OutOfBounds {
    /// Coordinates are clamped to the nearest border pixel.
    #[default]
    Border,
    /// Every out-of-range tap reads the given constant.
    Fill(f32),
}

impl OutOfBounds {
    pub const ZERO: OutOfBounds = OutOfBounds::Fill(0.0);
}

/// The four interpolation taps around a continuous coordinate, ordered
/// `(x0,y0), (x1,y0), (x0,y1), (x1,y1)`. A `None` index is an out-of-range
/// tap under a fill policy. `dwdx`/`dwdy` are the derivatives of the weights
/// with respect to the query coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Taps<T> {
    pub idx: [Option<usize>; 4],
    pub w: [T; 4],
    pub dwdx: [T; 4],
    pub dwdy: [T; 4],
}

/// Locates one axis: returns `(i0, i1, frac, d_frac/d_coord)`.
#[inline]
fn axis<T: Float>(v: T, n: usize, border: bool) -> (i64, i64, T, T) {
    if border {
        let hi = T::from(n - 1).unwrap();
        let inside = v >= T::zero() && v <= hi;
        let vc = v.max(T::zero()).min(hi);
        let mut i0 = vc.floor().to_i64().unwrap_or(0);
        if n >= 2 && i0 as usize >= n - 1 {
            i0 = n as i64 - 2;
        }
        let i1 = (i0 + 1).min(n as i64 - 1);
        let frac = if n == 1 { T::zero() } else { vc - T::from(i0).unwrap() };
        let d = if inside && n > 1 { T::one() } else { T::zero() };
        (i0, i1, frac, d)
    } else {
        let f = v.floor();
        let i0 = f.to_i64().unwrap_or(i64::MIN / 2);
        (i0, i0.saturating_add(1), v - f, T::one())
    }
}

/// Computes bilinear taps for a coordinate on a `width x height` lattice.
#[inline]
pub fn bilinear_taps<T: Float>(x: T, y: T, width: usize, height: usize, border: bool) -> Taps<T> {
    let (x0, x1, fx, dfx) = axis(x, width, border);
    let (y0, y1, fy, dfy) = axis(y, height, border);
    let one = T::one();
    let at = |xi: i64, yi: i64| -> Option<usize> {
        if xi >= 0 && yi >= 0 && (xi as usize) < width && (yi as usize) < height {
            Some(yi as usize * width + xi as usize)
        } else {
            None
        }
    };
    Taps {
        idx: [at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1)],
        w: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        dwdx: [-(one - fy) * dfx, (one - fy) * dfx, -fy * dfx, fy * dfx],
        dwdy: [-(one - fx) * dfy, -fx * dfy, (one - fx) * dfy, fx * dfy],
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Samples all channels of an interleaved raster at `(x, y)` into `out`.
///
/// Interpolation is written in nested lerp form so that lattice points and
/// constant fields are reproduced exactly.
pub(crate) fn sample_interleaved(
    data: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    x: f64,
    y: f64,
    policy: OutOfBounds,
    out: &mut [f32],
) {
    let border = matches!(policy, OutOfBounds::Border);
    let fill = match policy {
        OutOfBounds::Fill(v) => v as f64,
        OutOfBounds::Border => 0.0,
    };
    let (x0, x1, fx, _) = axis(x, width, border);
    let (y0, y1, fy, _) = axis(y, height, border);
    let at = |xi: i64, yi: i64| -> Option<usize> {
        (xi >= 0 && yi >= 0 && (xi as usize) < width && (yi as usize) < height)
            .then(|| yi as usize * width + xi as usize)
    };
    let idx = [at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1)];
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        let v = |k: usize| idx[k].map_or(fill, |i| data[i * channels + c] as f64);
        let top = lerp(v(0), v(1), fx);
        let bot = lerp(v(2), v(3), fx);
        *o = lerp(top, bot, fy) as f32;
    }
}

/// Bilinear interpolation of `image` at each `(x, y)` query. Returns
/// `coords.len() * channels` values, interleaved per query.
pub fn bilinear_sample(image: &Image, coords: &[(f64, f64)], policy: OutOfBounds) -> Result<Vec<f32>> {
    let c = image.channels();
    let mut out = vec![0.0f32; coords.len() * c];
    for (k, &(x, y)) in coords.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite(format!("sample coordinate #{k} = ({x}, {y})")));
        }
        sample_interleaved(image.data(), image.height(), image.width(), c, x, y, policy, &mut out[k * c..(k + 1) * c]);
    }
    Ok(out)
}

/// Backward warp of an interleaved raster of any channel count:
/// `out(x) = src(x + flow(x))`. The source may have a different size from
/// the flow grid; the output lives on the flow grid.
pub fn remap_interleaved(
    data: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    flow: &FlowField,
    policy: OutOfBounds,
) -> Vec<f32> {
    let (fh, fw) = flow.dims();
    let mut out = vec![0.0f32; fh * fw * channels];
    for y in 0..fh {
        for x in 0..fw {
            let (dx, dy) = flow.get(x, y);
            let i = y * fw + x;
            sample_interleaved(
                data,
                height,
                width,
                channels,
                x as f64 + dx as f64,
                y as f64 + dy as f64,
                policy,
                &mut out[i * channels..(i + 1) * channels],
            );
        }
    }
    out
}

/// Backward warp with the default border-clamp policy.
pub fn warp(image: &Image, flow: &FlowField) -> Result<Image> {
    warp_with(image, flow, OutOfBounds::Border)
}

/// Backward warp `out(x) = image(x + flow(x))`. Image and flow must share
/// their spatial size.
pub fn warp_with(image: &Image, flow: &FlowField, policy: OutOfBounds) -> Result<Image> {
    if image.dims() != flow.dims() {
        return Err(Error::shape(format!(
            "warp: image is {:?} but flow is {:?}",
            image.dims(),
            flow.dims()
        )));
    }
    remap(image, flow, policy)
}

/// Backward warp that allows the source raster to differ in size from the
/// flow grid (used for pre-alignment onto a reference canvas).
pub fn remap(image: &Image, flow: &FlowField, policy: OutOfBounds) -> Result<Image> {
    let data = remap_interleaved(image.data(), image.height(), image.width(), image.channels(), flow, policy);
    let (h, w) = flow.dims();
    Image::new(h, w, image.channels(), data)
}

/// Bilinear resampling of planar data (pixel-center aligned, edge clamped).
pub(crate) fn resize_planes(
    planes: &[f32],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| source_axis(x, in_w, out_w)).collect();
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| source_axis(y, in_h, out_h)).collect();
    let mut out = vec![0.0f32; channels * out_h * out_w];
    for c in 0..channels {
        let p = &planes[c * in_h * in_w..(c + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = |yy: usize, xx: usize| p[yy * in_w + xx] as f64;
                let top = lerp(v(y0, x0), v(y0, x1), fx);
                let bot = lerp(v(y1, x0), v(y1, x1), fx);
                out[c * out_h * out_w + oy * out_w + ox] = lerp(top, bot, fy) as f32;
            }
        }
    }
    out
}

/// Source position for output index `o` when resampling `n_in -> n_out`
/// with centers aligned: `src = (o + 0.5) * n_in / n_out - 0.5`, clamped.
pub fn source_axis(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = (s.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}
