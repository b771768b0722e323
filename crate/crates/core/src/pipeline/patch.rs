//! Overlapping patch tiling, annotation clipping and merging of per-patch detections.

use std::collections::{BTreeMap, HashMap};

use crate::error::{config_err, invalid, Error, Result};
use crate::eval::ImageDetection;
use crate::geometry::{rotated_nms, Detection, Polygon};

use super::dota::AnnotationRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: usize,
    pub overlap: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: 1024,
            overlap: 200,
        }
    }
}

impl PatchSpec {
    pub fn new(size: usize, overlap: usize) -> Result<Self> {
        if size == 0 || overlap >= size {
            return Err(config_err!(
                "patch overlap {overlap} must be smaller than size {size}"
            ));
        }
        Ok(Self { size, overlap })
    }

    pub fn stride(&self) -> usize {
        self.size - self.overlap
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Window {
    pub fn polygon(&self) -> Polygon {
        Polygon::axis_aligned(
            self.x as f64,
            self.y as f64,
            (self.x + self.w) as f64,
            (self.y + self.h) as f64,
        )
    }

    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        (self.x..self.x + self.w).contains(&px) && (self.y..self.y + self.h).contains(&py)
    }
}

/// Starts `0, s, 2s, ...` below `dim`, each clamped to `max(0, dim - size)`, deduplicated.
pub fn axis_starts(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = dim.saturating_sub(size);
    let mut starts: Vec<usize> = (0..dim)
        .step_by(stride.max(1))
        .map(|s| s.min(last))
        .collect();
    starts.dedup();
    starts
}

/// Row-major windows covering a `width x height` image.
pub fn patch_grid(width: usize, height: usize, spec: &PatchSpec) -> Result<Vec<Window>> {
    if width == 0 || height == 0 {
        return Err(invalid!(
            "image dims must be positive, got {width}x{height}"
        ));
    }
    let xs = axis_starts(width, spec.size, spec.stride());
    let ys = axis_starts(height, spec.size, spec.stride());
    Ok(ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| Window {
                x,
                y,
                w: spec.size.min(width),
                h: spec.size.min(height),
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig {
    /// Instances keeping less than this fraction of their area are dropped.
    pub keep_frac: f64,
    /// Instances keeping less than this fraction are marked difficult.
    pub difficult_below: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            keep_frac: 0.5,
            difficult_below: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClippedRecord {
    /// In window coordinates.
    pub record: AnnotationRecord,
    /// Fraction of the original area inside the window.
    pub retained: f64,
}

/// Intersects each record with `window` and translates to window coordinates.
/// A clipped outline with more than four vertices is replaced by its minimum-area rectangle.
pub fn clip_annotations_to_window(
    records: &[AnnotationRecord],
    window: &Window,
    cfg: &ClipConfig,
) -> Result<Vec<ClippedRecord>> {
    if !(0.0..=1.0).contains(&cfg.keep_frac) {
        return Err(invalid!(
            "keep_frac must lie in [0, 1], got {}",
            cfg.keep_frac
        ));
    }
    let wp = window.polygon();
    let mut out = Vec::new();
    for r in records {
        let poly = r.polygon()?;
        let area = poly.area();
        if area <= 0.0 {
            continue;
        }
        let inter = poly.clip(&wp);
        let retained = inter.area() / area;
        if retained <= 0.0 || retained < cfg.keep_frac {
            continue;
        }
        let local = inter.translated(-(window.x as f64), -(window.y as f64));
        let Some(quad) = local.to_quad() else {
            continue;
        };
        out.push(ClippedRecord {
            record: AnnotationRecord {
                quad,
                category: r.category.clone(),
                difficult: r.difficult || retained < cfg.difficult_below,
            },
            retained,
        });
    }
    Ok(out)
}

/// Name of the patch file for `window` of `image_id`.
pub fn patch_id(image_id: &str, window: &Window) -> String {
    format!("{image_id}__{}__{}", window.x, window.y)
}

/// Maps patch ids to their parent image and window.
pub type WindowIndex = HashMap<String, (String, Window)>;

/// One `patch_id image_id x y w h` line per entry, sorted by patch id.
pub fn window_index_to_text(index: &WindowIndex) -> String {
    let mut rows: Vec<_> = index.iter().collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    rows.iter()
        .map(|(pid, (image, w))| format!("{pid} {image} {} {} {} {}\n", w.x, w.y, w.w, w.h))
        .collect()
}

pub fn parse_window_index(text: &str) -> Result<WindowIndex> {
    let mut index = WindowIndex::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 6 {
            return Err(err(format!("expected 6 tokens, found {}", t.len())));
        }
        let mut n = [0usize; 4];
        for (slot, tok) in n.iter_mut().zip(&t[2..]) {
            *slot = tok
                .parse()
                .map_err(|_| err(format!("invalid window coordinate '{tok}'")))?;
        }
        let window = Window {
            x: n[0],
            y: n[1],
            w: n[2],
            h: n[3],
        };
        if index
            .insert(t[0].to_string(), (t[1].to_string(), window))
            .is_some()
        {
            return Err(err(format!("duplicate patch id '{}'", t[0])));
        }
    }
    Ok(index)
}

/// Translates patch-level detections (whose `image_id` is a patch id) back to
/// their images, then runs per-category rotated NMS within each image.
/// Output is grouped by image id in sorted order, each group in NMS order.
pub fn merge_patch_detections(
    dets: &[ImageDetection],
    windows: &WindowIndex,
    nms_thresh: f64,
) -> Result<Vec<ImageDetection>> {
    let mut per_image: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        let (image, w) = windows
            .get(&d.image_id)
            .ok_or_else(|| invalid!("detection refers to unknown patch '{}'", d.image_id))?;
        per_image
            .entry(image.as_str())
            .or_default()
            .push(Detection {
                polygon: d.polygon.translated(w.x as f64, w.y as f64),
                category: d.category.clone(),
                score: d.score,
            });
    }
    let mut out = Vec::new();
    for (image, pooled) in per_image {
        for k in rotated_nms(&pooled, nms_thresh) {
            let d = &pooled[k];
            out.push(ImageDetection {
                image_id: image.to_string(),
                polygon: d.polygon.clone(),
                category: d.category.clone(),
                score: d.score,
            });
        }
    }
    Ok(out)
}
