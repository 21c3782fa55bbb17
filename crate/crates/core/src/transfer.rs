//! Moving COCO-style annotations from a clean page onto its photograph.
//!
//! A point `p` on the clean (target) grid corresponds to `p + f(p)` in the
//! pre-aligned photo. When the photo was pre-aligned, the pre-alignment
//! transform (fitted from the reference canvas to the raw photo) takes that
//! point on to raw photo coordinates.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::prealign::TpsTransform;

/// Intermediate points inserted on every polygon edge before mapping.
pub const DEFAULT_DENSIFY: usize = 16;
/// Intermediate points inserted on every box edge before taking the hull.
pub const BOX_DENSIFY: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Polygon lists (`[[x0, y0, x1, y1, ...], ...]`) or any other encoding,
/// which is carried through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Other(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Annotation {
    /// Polygons as vertex lists; empty for non-polygon segmentations.
    pub fn polygons(&self) -> Vec<Vec<[f64; 2]>> {
        match &self.segmentation {
            Some(Segmentation::Polygons(ps)) => {
                ps.iter().map(|flat| flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()).collect()
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { pointer: pointer.into(), message: message.into() }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, at: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| schema(format!("{at}/{key}"), "missing required field"))
}

fn array<'a>(v: &'a Value, at: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(at, "expected an array"))
}

fn object<'a>(v: &'a Value, at: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| schema(at, "expected an object"))
}

fn uint(obj: &Map<String, Value>, key: &str, at: &str) -> Result<u64> {
    field(obj, key, at)?
        .as_u64()
        .ok_or_else(|| schema(format!("{at}/{key}"), "expected a non-negative integer"))
}

impl AnnotationSet {
    /// Validates a parsed JSON document and converts it. Errors carry the
    /// JSON pointer of the offending value.
    pub fn from_value(doc: Value) -> Result<Self> {
        let root = object(&doc, "")?;
        let images = array(field(root, "images", "")?, "/images")?;
        let annotations = array(field(root, "annotations", "")?, "/annotations")?;
        let categories = array(field(root, "categories", "")?, "/categories")?;

        let mut image_ids = HashSet::new();
        for (i, v) in images.iter().enumerate() {
            let at = format!("/images/{i}");
            let o = object(v, &at)?;
            image_ids.insert(uint(o, "id", &at)?);
            for key in ["width", "height"] {
                if uint(o, key, &at)? == 0 {
                    return Err(schema(format!("{at}/{key}"), "must be positive"));
                }
            }
        }
        let mut category_ids = HashSet::new();
        for (i, v) in categories.iter().enumerate() {
            let at = format!("/categories/{i}");
            let o = object(v, &at)?;
            category_ids.insert(uint(o, "id", &at)?);
            if !field(o, "name", &at)?.is_string() {
                return Err(schema(format!("{at}/name"), "expected a string"));
            }
        }
        for (i, v) in annotations.iter().enumerate() {
            let at = format!("/annotations/{i}");
            let o = object(v, &at)?;
            uint(o, "id", &at)?;
            if !image_ids.contains(&uint(o, "image_id", &at)?) {
                return Err(schema(format!("{at}/image_id"), "does not name a listed image"));
            }
            if !category_ids.contains(&uint(o, "category_id", &at)?) {
                return Err(schema(format!("{at}/category_id"), "does not name a listed category"));
            }
            let bbox = array(field(o, "bbox", &at)?, &format!("{at}/bbox"))?;
            if bbox.len() != 4 || bbox.iter().any(|b| !b.as_f64().is_some_and(f64::is_finite)) {
                return Err(schema(format!("{at}/bbox"), "expected four finite numbers"));
            }
            if bbox[2].as_f64() < Some(0.0) || bbox[3].as_f64() < Some(0.0) {
                return Err(schema(format!("{at}/bbox"), "negative box size"));
            }
            if let Some(Value::Array(polys)) = o.get("segmentation") {
                for (j, p) in polys.iter().enumerate() {
                    let pat = format!("{at}/segmentation/{j}");
                    let coords = array(p, &pat)?;
                    if coords.len() % 2 != 0 || coords.iter().any(|c| !c.as_f64().is_some_and(f64::is_finite)) {
                        return Err(schema(pat, "expected an even number of finite coordinates"));
                    }
                    if coords.len() < 6 {
                        return Err(schema(pat, "a polygon needs at least 3 vertices"));
                    }
                }
            }
        }
        Ok(serde_json::from_value(doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse { offset: e.column(), message: e.to_string() })?;
        Self::from_value(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnnotationSet::from_json(&text)
}

pub fn write_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_json()?).map_err(|e| Error::io(path, e))
}

/// Maps a clean-grid point to the photo: `p + f(p)`, then through the
/// pre-alignment transform when given. Points more than one pixel outside
/// the flow grid are rejected; points within that margin read the flow at
/// the nearest grid position.
pub fn transfer_point(p: [f64; 2], flow: &FlowField, prealign: Option<&TpsTransform>) -> Result<[f64; 2]> {
    let (h, w) = flow.dims();
    if !(p[0].is_finite() && p[1].is_finite()) {
        return Err(Error::NonFinite(format!("point ({}, {})", p[0], p[1])));
    }
    if p[0] < -1.0 || p[1] < -1.0 || p[0] > w as f64 || p[1] > h as f64 {
        return Err(Error::invalid(format!("point ({}, {}) lies outside the {w}x{h} flow grid", p[0], p[1])));
    }
    let (dx, dy) = flow.sample(p[0], p[1]);
    let q = [p[0] + dx as f64, p[1] + dy as f64];
    Ok(match prealign {
        Some(t) => t.apply(q),
        None => q,
    })
}

/// Closed polygon with `per_edge` evenly spaced points inserted on every
/// edge.
pub fn densify_polygon(poly: &[[f64; 2]], per_edge: usize) -> Vec<[f64; 2]> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n * (per_edge + 1));
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        out.push(a);
        for k in 1..=per_edge {
            let t = k as f64 / (per_edge + 1) as f64;
            out.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]);
        }
    }
    out
}

/// Drops vertices lying within `tol` of the line through their neighbors.
pub fn simplify_collinear(poly: &[[f64; 2]], tol: f64) -> Vec<[f64; 2]> {
    let mut pts = poly.to_vec();
    let mut changed = true;
    while changed && pts.len() > 3 {
        changed = false;
        let n = pts.len();
        for i in 0..n {
            let (a, p, b) = (pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = ex.hypot(ey);
            let dist = if len == 0.0 {
                (p[0] - a[0]).hypot(p[1] - a[1])
            } else {
                ((p[0] - a[0]) * ey - (p[1] - a[1]) * ex).abs() / len
            };
            if dist <= tol {
                pts.remove(i);
                changed = true;
                break;
            }
        }
    }
    pts
}

pub fn transfer_polygon(
    poly: &[[f64; 2]],
    flow: &FlowField,
    prealign: Option<&TpsTransform>,
    densify: usize,
) -> Result<Vec<[f64; 2]>> {
    if poly.len() < 3 {
        return Err(Error::invalid(format!("polygon has {} vertices, needs 3", poly.len())));
    }
    densify_polygon(poly, densify).into_iter().map(|p| transfer_point(p, flow, prealign)).collect()
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n).map(|i| poly[i][0] * poly[(i + 1) % n][1] - poly[(i + 1) % n][0] * poly[i][1]).sum();
    twice.abs() * 0.5
}

/// Even-odd point in polygon test.
pub fn polygon_contains(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Result of moving one box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTransfer {
    pub bbox: [f64; 4],
    /// The clipped hull has zero area.
    pub degenerate: bool,
}

/// Axis-aligned hull of the mapped, densified box boundary, clipped to
/// `[0, bounds.0] x [0, bounds.1]` (width, height of the photo).
pub fn transfer_box(
    bbox: [f64; 4],
    flow: &FlowField,
    prealign: Option<&TpsTransform>,
    bounds: (f64, f64),
) -> Result<BoxTransfer> {
    let [x, y, w, h] = bbox;
    if !(w >= 0.0 && h >= 0.0) {
        return Err(Error::invalid(format!("box size {w}x{h}")));
    }
    let corners = [[x, y], [x + w, y], [x + w, y + h], [x, y + h]];
    let mapped = transfer_polygon(&corners, flow, prealign, BOX_DENSIFY)?;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &mapped {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let (x0, x1) = (x0.clamp(0.0, bounds.0), x1.clamp(0.0, bounds.0));
    let (y0, y1) = (y0.clamp(0.0, bounds.1), y1.clamp(0.0, bounds.1));
    let out = [x0, y0, x1 - x0, y1 - y0];
    Ok(BoxTransfer { bbox: out, degenerate: out[2] <= 0.0 || out[3] <= 0.0 })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferSummary {
    pub transferred: usize,
    /// Ids of annotations whose box collapsed after clipping.
    pub degenerate: Vec<u64>,
}

/// Transfers every annotation of `image_id`. Others are dropped; the image
/// entry takes the photo size. Degenerate boxes are kept and flagged with
/// `"transfer_degenerate": true`.
pub fn transfer_annotations(
    set: &AnnotationSet,
    image_id: u64,
    flow: &FlowField,
    prealign: Option<&TpsTransform>,
    photo_dims: (usize, usize),
    densify: usize,
) -> Result<(AnnotationSet, TransferSummary)> {
    let mut image = set
        .images
        .iter()
        .find(|i| i.id == image_id)
        .cloned()
        .ok_or_else(|| schema("/images", format!("no image with id {image_id}")))?;
    let (ph, pw) = photo_dims;
    image.width = pw as u32;
    image.height = ph as u32;
    let mut summary = TransferSummary::default();
    let mut annotations = Vec::new();
    for a in set.annotations.iter().filter(|a| a.image_id == image_id) {
        let bt = transfer_box(a.bbox, flow, prealign, (pw as f64, ph as f64))?;
        let mut out = a.clone();
        out.bbox = bt.bbox;
        if bt.degenerate {
            summary.degenerate.push(a.id);
            out.extra.insert("transfer_degenerate".into(), Value::Bool(true));
        }
        if let Some(Segmentation::Polygons(_)) = &a.segmentation {
            let mapped = a
                .polygons()
                .iter()
                .map(|p| transfer_polygon(p, flow, prealign, densify))
                .collect::<Result<Vec<_>>>()?;
            if out.extra.contains_key("area") {
                let area: f64 = mapped.iter().map(|p| polygon_area(p)).sum();
                out.extra.insert("area".into(), serde_json::json!(area));
            }
            out.segmentation =
                Some(Segmentation::Polygons(mapped.into_iter().map(|p| p.into_iter().flatten().collect()).collect()));
        }
        annotations.push(out);
        summary.transferred += 1;
    }
    Ok((
        AnnotationSet { images: vec![image], annotations, categories: set.categories.clone(), extra: set.extra.clone() },
        summary,
    ))
}

const PALETTE: [[f32; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.6, 0.1],
    [0.1, 0.2, 0.9],
    [0.9, 0.6, 0.0],
    [0.6, 0.1, 0.7],
    [0.0, 0.6, 0.7],
];

fn draw_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], color: [f32; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    let (w, h) = (img.width() as i64, img.height() as i64);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a[0] + (b[0] - a[0]) * t).round() as i64;
        let y = (a[1] + (b[1] - a[1]) * t).round() as i64;
        if x >= 0 && y >= 0 && x < w && y < h {
            for (c, v) in color.iter().enumerate() {
                img.set(x as usize, y as usize, c, *v);
            }
        }
    }
}

/// Photo with boxes and polygon outlines burned in, one color per category.
pub fn render_overlay(photo: &Image, set: &AnnotationSet) -> Image {
    let mut img = photo.to_rgb();
    for a in &set.annotations {
        let color = PALETTE[(a.category_id as usize) % PALETTE.len()];
        let [x, y, w, h] = a.bbox;
        let corners = [[x, y], [x + w, y], [x + w, y + h], [x, y + h]];
        for i in 0..4 {
            draw_segment(&mut img, corners[i], corners[(i + 1) % 4], color);
        }
        for poly in a.polygons() {
            for i in 0..poly.len() {
                draw_segment(&mut img, poly[i], poly[(i + 1) % poly.len()], color);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "info": {"description": "fixture"},
        "images": [{"id": 1, "file_name": "p.png", "width": 40, "height": 30, "license": 3}],
        "annotations": [{"id": 7, "image_id": 1, "category_id": 2, "bbox": [4, 5, 10, 6],
                          "segmentation": [[4, 5, 14, 5, 14, 11, 4, 11]], "area": 60, "iscrowd": 0}],
        "categories": [{"id": 2, "name": "text", "supercategory": "layout"}]
    }"#;

    #[test]
    fn unknown_fields_survive_round_trip() {
        let set = AnnotationSet::from_json(DOC).unwrap();
        assert_eq!(set.images[0].extra["license"], 3);
        assert_eq!(set.annotations[0].extra["iscrowd"], 0);
        let again = AnnotationSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(again, set);
        let a: Value = serde_json::from_str(DOC).unwrap();
        let b: Value = serde_json::from_str(&set.to_json().unwrap()).unwrap();
        assert_eq!(a["info"], b["info"]);
    }

    #[test]
    fn missing_images_points_at_images() {
        let err = AnnotationSet::from_json(r#"{"annotations": [], "categories": []}"#).unwrap_err();
        assert!(matches!(err, Error::Schema { ref pointer, .. } if pointer == "/images"), "{err}");
    }

    #[test]
    fn unresolved_category_is_reported() {
        let bad = DOC.replace("\"category_id\": 2", "\"category_id\": 9");
        let err = AnnotationSet::from_json(&bad).unwrap_err();
        assert!(matches!(err, Error::Schema { ref pointer, .. } if pointer == "/annotations/0/category_id"));
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = FlowField::zeros(30, 40);
        assert_eq!(transfer_point([3.25, 7.5], &f, None).unwrap(), [3.25, 7.5]);
        let b = transfer_box([4.0, 5.0, 10.0, 6.0], &f, None, (40.0, 30.0)).unwrap();
        assert_eq!(b.bbox, [4.0, 5.0, 10.0, 6.0]);
        assert!(!b.degenerate);
    }

    #[test]
    fn far_points_are_rejected() {
        let f = FlowField::zeros(30, 40);
        assert!(transfer_point([45.0, 3.0], &f, None).is_err());
        assert!(transfer_point([40.0, 30.0], &f, None).is_ok());
    }

    #[test]
    fn simplify_restores_densified_square() {
        let sq = [[1.0, 1.0], [9.0, 1.0], [9.0, 9.0], [1.0, 9.0]];
        let d = densify_polygon(&sq, 8);
        assert_eq!(d.len(), 36);
        assert_eq!(simplify_collinear(&d, 1e-9), sq.to_vec());
    }

    #[test]
    fn containment_and_area() {
        let tri = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        assert_eq!(polygon_area(&tri), 8.0);
        assert!(polygon_contains(&tri, [1.0, 1.0]));
        assert!(!polygon_contains(&tri, [3.0, 3.0]));
    }
}
