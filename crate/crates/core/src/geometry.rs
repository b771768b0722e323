//! Oriented boxes, convex polygon intersection, rotated IoU and greedy NMS.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{invalid, Result};
use crate::par::{self, Exec};

/// Intersections smaller than this are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

/// Wraps `theta` into `[-pi/2, pi/2)`.
///
/// A rectangle rotated by `pi` covers the same points, so reducing modulo `pi`
/// needs no side swap.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut r = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if r >= FRAC_PI_2 {
        r -= PI;
    }
    if r < -FRAC_PI_2 {
        r += PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Counter-clockwise radians in `[-pi/2, pi/2)`.
    pub theta: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(invalid!(
                "rotated box needs finite values and positive sides, got w={w} h={h}"
            ));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: normalize_angle(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners `c + R(theta) (±w/2, ±h/2)` in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(x, y)| (self.cx + c * x - s * y, self.cy + s * x + c * y))
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon {
            vertices: self.corners().to_vec(),
        }
    }
}

pub fn box_to_polygon(b: &RotatedBox) -> Polygon {
    b.to_polygon()
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn signed_area(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
}

/// Convex polygon with counter-clockwise vertices. May be degenerate (area zero).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    /// Accepts a convex vertex list in either orientation.
    pub fn new(mut vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices
            .iter()
            .any(|p| !p.0.is_finite() || !p.1.is_finite())
        {
            return Err(invalid!("polygon has non-finite vertices"));
        }
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        let scale = vertices
            .iter()
            .fold(1.0f64, |m, p| m.max(p.0.abs()).max(p.1.abs()));
        for i in 0..n {
            let c = cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if c < -1e-9 * scale * scale {
                return Err(invalid!("polygon is not convex at vertex {}", (i + 1) % n));
            }
        }
        Ok(Self { vertices })
    }

    /// Convex hull (Andrew's monotone chain), counter-clockwise, collinear points dropped.
    pub fn convex_hull(points: &[(f64, f64)]) -> Result<Self> {
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(invalid!("polygon has non-finite vertices"));
        }
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts.dedup();
        if pts.len() < 3 {
            return Ok(Self { vertices: pts });
        }
        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
                Box::new(pts.iter())
            } else {
                Box::new(pts.iter().rev())
            };
            for &p in iter {
                while hull.len() >= start + 2
                    && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
                {
                    hull.pop();
                }
                hull.push(p);
            }
            hull.pop();
        }
        Ok(Self { vertices: hull })
    }

    /// DOTA-style quadrilateral `x1 y1 ... x4 y4`; vertex order is normalised through the hull.
    pub fn from_quad(q: [f64; 8]) -> Result<Self> {
        Self::convex_hull(&[(q[0], q[1]), (q[2], q[3]), (q[4], q[5]), (q[6], q[7])])
    }

    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            vertices: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
        }
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).max(0.0)
    }

    /// `(min_x, min_y, max_x, max_y)`; `None` for an empty polygon.
    pub fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first.0, first.1, first.0, first.1), |b, p| {
                    (b.0.min(p.0), b.1.min(p.1), b.2.max(p.0), b.3.max(p.1))
                }),
        )
    }

    /// Closed containment test (boundary points count as inside).
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let n = self.vertices.len();
        n >= 3 && (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0.0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| (p.0 + dx, p.1 + dy)).collect(),
        }
    }

    /// Rotation by `angle` about the origin followed by translation.
    pub fn rigid(&self, angle: f64, dx: f64, dy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| (c * p.0 - s * p.1 + dx, s * p.0 + c * p.1 + dy))
                .collect(),
        }
    }

    /// Sutherland-Hodgman: the part of `self` inside the convex polygon `clip`.
    pub fn clip(&self, clip: &Polygon) -> Polygon {
        let mut out = self.vertices.clone();
        let m = clip.vertices.len();
        if m < 3 {
            return Polygon { vertices: vec![] };
        }
        for i in 0..m {
            if out.is_empty() {
                break;
            }
            let (a, b) = (clip.vertices[i], clip.vertices[(i + 1) % m]);
            let input = std::mem::take(&mut out);
            for j in 0..input.len() {
                let cur = input[j];
                let prev = input[(j + input.len() - 1) % input.len()];
                let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
                if dc >= 0.0 {
                    if dp < 0.0 {
                        out.push(intersect(prev, cur, dp, dc));
                    }
                    out.push(cur);
                } else if dp >= 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
            }
        }
        Polygon { vertices: out }
    }

    /// Minimum-area enclosing rectangle of the hull (rotating calipers over hull edges).
    pub fn min_area_rect(&self) -> Option<RotatedBox> {
        let hull = Polygon::convex_hull(&self.vertices).ok()?;
        let v = &hull.vertices;
        if v.len() < 3 {
            return None;
        }
        let mut best: Option<(f64, RotatedBox)> = None;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            let ang = (b.1 - a.1).atan2(b.0 - a.0);
            let (s, c) = ang.sin_cos();
            let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in v {
                let (u, w) = (c * p.0 + s * p.1, -s * p.0 + c * p.1);
                lo_u = lo_u.min(u);
                hi_u = hi_u.max(u);
                lo_v = lo_v.min(w);
                hi_v = hi_v.max(w);
            }
            let area = (hi_u - lo_u) * (hi_v - lo_v);
            if best.as_ref().is_none_or(|(a, _)| area < *a) {
                let (mu, mv) = ((lo_u + hi_u) / 2.0, (lo_v + hi_v) / 2.0);
                let rb = RotatedBox::new(
                    c * mu - s * mv,
                    s * mu + c * mv,
                    hi_u - lo_u,
                    hi_v - lo_v,
                    ang,
                )
                .ok()?;
                best = Some((area, rb));
            }
        }
        best.map(|(_, b)| b)
    }

    /// Four corners as `x1 y1 ... x4 y4`; polygons with other vertex counts use their minimum-area rectangle.
    pub fn to_quad(&self) -> Option<[f64; 8]> {
        let corners: Vec<(f64, f64)> = if self.vertices.len() == 4 {
            self.vertices.clone()
        } else {
            self.min_area_rect()?.corners().to_vec()
        };
        let mut q = [0.0; 8];
        for (k, p) in corners.iter().enumerate() {
            q[2 * k] = p.0;
            q[2 * k + 1] = p.1;
        }
        Some(q)
    }

    fn order_key(&self) -> impl Iterator<Item = f64> + '_ {
        self.vertices.iter().flat_map(|p| [p.0, p.1])
    }
}

impl From<RotatedBox> for Polygon {
    fn from(b: RotatedBox) -> Self {
        b.to_polygon()
    }
}

fn intersect(p: (f64, f64), q: (f64, f64), dp: f64, dq: f64) -> (f64, f64) {
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Orders the pair so results do not depend on argument order.
fn canonical<'a>(a: &'a Polygon, b: &'a Polygon) -> (&'a Polygon, &'a Polygon) {
    let ord = a
        .order_key()
        .zip(b.order_key())
        .map(|(x, y)| x.total_cmp(&y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.vertices.len().cmp(&b.vertices.len()));
    if ord.is_gt() {
        (b, a)
    } else {
        (a, b)
    }
}

pub fn polygon_clip_area(subject: &Polygon, clip: &Polygon) -> f64 {
    if subject.area() < AREA_EPS || clip.area() < AREA_EPS {
        return 0.0;
    }
    let (s, c) = canonical(subject, clip);
    let a = s.clip(c).area();
    if a < AREA_EPS {
        0.0
    } else {
        a
    }
}

pub fn rotated_iou(a: &Polygon, b: &Polygon) -> f64 {
    let inter = polygon_clip_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// `m[i][j] = IoU(a[i], b[j])`, rows evaluated in parallel.
pub fn iou_matrix(exec: Exec, a: &[Polygon], b: &[Polygon]) -> Vec<Vec<f64>> {
    par::map_indices(exec, a.len(), |i| {
        b.iter().map(|q| rotated_iou(&a[i], q)).collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub polygon: Polygon,
    pub category: String,
    pub score: f64,
}

/// Greedy per-category suppression. Candidates are visited by descending score
/// (ties by ascending index); one is kept iff its IoU with every kept detection
/// of its category is below `iou_thresh`. Returns kept indices in visit order.
pub fn rotated_nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].category == dets[i].category
                && rotated_iou(&dets[k].polygon, &dets[i].polygon) >= iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
