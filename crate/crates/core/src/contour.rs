//! Closed-contour tracing on edge maps and key-point sampling.
//!
//! Each 8-connected edge component that encloses background is traced with
//! Moore-neighbour tracing from its topmost-leftmost pixel, simplified with
//! Douglas-Peucker and resampled at equal arc length. Contours are ordered
//! by descending perimeter so that two masks with matching topology yield
//! index-aligned key-point lists.

use serde::{Deserialize, Serialize};

use crate::edges::EdgeMap;
use crate::error::{Error, Result};
use crate::topology::{label_where, Connectivity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointParams {
    /// Douglas-Peucker tolerance in pixels.
    pub dp_tolerance: f64,
    /// Replace samples by nearby simplified-polygon vertices.
    pub corner_snap: bool,
}

impl Default for KeypointParams {
    fn default() -> Self {
        Self {
            dp_tolerance: 0.5,
            corner_snap: false,
        }
    }
}

/// A traced closed contour after simplification.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    /// Simplified polygon; vertex 0 is the topmost-leftmost traced pixel.
    pub polygon: Vec<Point>,
    pub perimeter: f64,
}

// Clockwise (y down) starting west.
const RING: [(isize, isize); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn ring_index(dx: isize, dy: isize) -> usize {
    RING.iter()
        .position(|&d| d == (dx, dy))
        .expect("backtrack pixel must be a neighbour")
}

/// Moore-neighbour trace of the pixels where `member` holds, starting from
/// `start` (which must be the first member in raster order).
fn moore_trace(
    start: (isize, isize),
    member: impl Fn(isize, isize) -> bool,
    limit: usize,
) -> Vec<(isize, isize)> {
    let mut out = vec![start];
    let start_back = (start.0 - 1, start.1);
    let (mut cur, mut back) = (start, start_back);
    for _ in 0..limit {
        let bi = ring_index(back.0 - cur.0, back.1 - cur.1);
        let mut next = None;
        for k in 1..=8 {
            let (dx, dy) = RING[(bi + k) % 8];
            let cand = (cur.0 + dx, cur.1 + dy);
            if member(cand.0, cand.1) {
                let (px, py) = RING[(bi + k - 1) % 8];
                next = Some((cand, (cur.0 + px, cur.1 + py)));
                break;
            }
        }
        let Some((c, b)) = next else {
            break;
        };
        if c == start && b == start_back {
            break;
        }
        cur = c;
        back = b;
        out.push(cur);
    }
    out
}

/// True when the component (given by `labels == label`) encloses at least
/// one 4-connected background region.
fn encloses(labels: &[u32], w: usize, label: u32, bbox: (usize, usize, usize, usize)) -> bool {
    let (x0, y0, x1, y1) = bbox;
    // padded local window
    let lw = x1 - x0 + 3;
    let lh = y1 - y0 + 3;
    let inside = |lx: usize, ly: usize| -> bool {
        if lx == 0 || ly == 0 || lx == lw - 1 || ly == lh - 1 {
            return false;
        }
        let (gx, gy) = (x0 + lx - 1, y0 + ly - 1);
        labels[gy * w + gx] == label
    };
    let mut seen = vec![false; lw * lh];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        let (x, y) = (i % lw, i / lw);
        let nbrs = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in nbrs {
            if nx >= lw || ny >= lh {
                continue;
            }
            let j = ny * lw + nx;
            if !seen[j] && !inside(nx, ny) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    (0..lw * lh).any(|i| !seen[i] && !inside(i % lw, i / lw))
}

fn perpendicular_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return p.dist(a);
    }
    ((p.x - a.x) * dy - (p.y - a.y) * dx).abs() / len
}

/// Douglas-Peucker on an open polyline; endpoints are always kept.
pub fn simplify_open(points: &[Point], tolerance: f64) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0usize, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (mut best, mut best_d) = (lo, -1.0);
        for i in lo + 1..hi {
            let d = perpendicular_distance(points[i], points[lo], points[hi]);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d > tolerance {
            keep[best] = true;
            stack.push((lo, best));
            stack.push((best, hi));
        }
    }
    points
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

/// Douglas-Peucker on a closed polygon, split at vertex 0 and the vertex
/// farthest from it. Vertex 0 is preserved as the first output vertex.
pub fn simplify_closed(points: &[Point], tolerance: f64) -> Vec<Point> {
    if points.len() < 4 {
        return points.to_vec();
    }
    let first = points[0];
    let far = (1..points.len())
        .max_by(|&a, &b| {
            first
                .dist(points[a])
                .partial_cmp(&first.dist(points[b]))
                .unwrap()
                .then(b.cmp(&a))
        })
        .unwrap();
    let head = simplify_open(&points[..=far], tolerance);
    let mut tail_pts = points[far..].to_vec();
    tail_pts.push(first);
    let tail = simplify_open(&tail_pts, tolerance);
    let mut out = head;
    out.extend_from_slice(&tail[1..tail.len() - 1]);
    out
}

pub fn closed_perimeter(points: &[Point]) -> f64 {
    let n = points.len();
    (0..n).map(|i| points[i].dist(points[(i + 1) % n])).sum()
}

/// `count` points at equal arc-length spacing along the closed polygon,
/// starting at vertex 0.
pub fn resample_closed(polygon: &[Point], count: usize) -> Vec<Point> {
    let n = polygon.len();
    let total = closed_perimeter(polygon);
    if n == 0 || count == 0 || total == 0.0 {
        return vec![polygon.first().copied().unwrap_or(Point::new(0.0, 0.0)); count];
    }
    let step = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let (mut seg, mut seg_start) = (0usize, 0.0f64);
    for i in 0..count {
        let target = i as f64 * step;
        loop {
            let len = polygon[seg].dist(polygon[(seg + 1) % n]);
            if target <= seg_start + len || seg == n - 1 {
                let a = polygon[seg];
                let b = polygon[(seg + 1) % n];
                let t = if len > 0.0 {
                    ((target - seg_start) / len).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
                break;
            }
            seg_start += len;
            seg += 1;
        }
    }
    out
}

fn snap_to_corners(polygon: &[Point], samples: &mut [Point]) {
    let n = polygon.len();
    let total = closed_perimeter(polygon);
    let spacing = total / samples.len() as f64;
    let mut arc = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        arc.push(acc);
        acc += polygon[i].dist(polygon[(i + 1) % n]);
    }
    let mut used = vec![false; n];
    for (i, s) in samples.iter_mut().enumerate() {
        let target = i as f64 * spacing;
        let best = (0..n)
            .filter(|&v| !used[v])
            .map(|v| {
                let d = (arc[v] - target).abs();
                (v, d.min(total - d))
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if let Some((v, d)) = best {
            if d < spacing / 2.0 {
                used[v] = true;
                *s = polygon[v];
            }
        }
    }
}

/// All closed contours in `edges`, ordered by descending perimeter (ties by
/// start point, top to bottom then left to right).
pub fn trace_contours(edges: &EdgeMap, params: &KeypointParams) -> Vec<Contour> {
    let (w, h) = (edges.width(), edges.height());
    let data = edges.data();
    let (labels, count) = label_where(w, h, Connectivity::Eight, |i| data[i] != 0);
    let mut first = vec![None; count + 1];
    let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); count + 1];
    let mut sizes = vec![0usize; count + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let l = l as usize;
        let (x, y) = (i % w, i / w);
        if first[l].is_none() {
            first[l] = Some((x, y));
        }
        let b = &mut bbox[l];
        *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        sizes[l] += 1;
    }

    let mut contours = Vec::new();
    for label in 1..=count {
        if !encloses(&labels, w, label as u32, bbox[label]) {
            continue;
        }
        let (sx, sy) = first[label].unwrap();
        let member = |x: isize, y: isize| {
            x >= 0
                && y >= 0
                && x < w as isize
                && y < h as isize
                && labels[y as usize * w + x as usize] == label as u32
        };
        let trace = moore_trace((sx as isize, sy as isize), member, 4 * sizes[label] + 8);
        let pts: Vec<Point> = trace
            .iter()
            .map(|&(x, y)| Point::new(x as f64, y as f64))
            .collect();
        if pts.len() < 3 {
            log::warn!("dropping contour at ({sx},{sy}) with {} points", pts.len());
            continue;
        }
        let polygon = simplify_closed(&pts, params.dp_tolerance);
        if polygon.len() < 3 {
            log::warn!("dropping degenerate contour at ({sx},{sy})");
            continue;
        }
        let perimeter = closed_perimeter(&polygon);
        contours.push(Contour { polygon, perimeter });
    }
    contours.sort_by(|a, b| {
        b.perimeter
            .partial_cmp(&a.perimeter)
            .unwrap()
            .then(a.polygon[0].y.partial_cmp(&b.polygon[0].y).unwrap())
            .then(a.polygon[0].x.partial_cmp(&b.polygon[0].x).unwrap())
    });
    contours
}

/// Splits `total` key points across contours in proportion to perimeter,
/// with at least three per contour (largest-remainder rounding).
pub fn allocate(perimeters: &[f64], total: usize) -> Result<Vec<usize>> {
    let k = perimeters.len();
    if k == 0 {
        return Err(Error::NoContours);
    }
    if total < 3 * k {
        return Err(Error::param(format!(
            "n_v = {total} is smaller than 3 x {k} contours"
        )));
    }
    let sum: f64 = perimeters.iter().sum();
    let ideal: Vec<f64> = perimeters.iter().map(|p| total as f64 * p / sum).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|q| (q.floor() as usize).max(3)).collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned < total {
        let i = (0..k)
            .max_by(|&a, &b| {
                (ideal[a] - counts[a] as f64)
                    .partial_cmp(&(ideal[b] - counts[b] as f64))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        counts[i] += 1;
        assigned += 1;
    }
    while assigned > total {
        let i = (0..k)
            .filter(|&i| counts[i] > 3)
            .min_by(|&a, &b| {
                (ideal[a] - counts[a] as f64)
                    .partial_cmp(&(ideal[b] - counts[b] as f64))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .expect("total >= 3k leaves a contour above the minimum");
        counts[i] -= 1;
        assigned -= 1;
    }
    Ok(counts)
}

fn sample(contours: &[Contour], counts: &[usize], params: &KeypointParams) -> Vec<Vec<Point>> {
    contours
        .iter()
        .zip(counts)
        .map(|(c, &m)| {
            let mut pts = resample_closed(&c.polygon, m);
            if params.corner_snap {
                snap_to_corners(&c.polygon, &mut pts);
            }
            pts
        })
        .collect()
}

/// Key points for every closed contour, `n_v` in total.
pub fn extract_keypoints(
    edges: &EdgeMap,
    n_v: usize,
    params: &KeypointParams,
) -> Result<Vec<Vec<Point>>> {
    if n_v < 3 {
        return Err(Error::param(format!("n_v = {n_v} must be at least 3")));
    }
    let contours = trace_contours(edges, params);
    if contours.is_empty() {
        return Err(Error::NoContours);
    }
    let perims: Vec<f64> = contours.iter().map(|c| c.perimeter).collect();
    let counts = allocate(&perims, n_v)?;
    Ok(sample(&contours, &counts, params))
}

/// Key points using a fixed per-contour allocation, typically taken from
/// the source mask's graph so both graphs align index by index.
pub fn extract_keypoints_with_counts(
    edges: &EdgeMap,
    counts: &[usize],
    params: &KeypointParams,
) -> Result<Vec<Vec<Point>>> {
    let contours = trace_contours(edges, params);
    if contours.is_empty() {
        return Err(Error::NoContours);
    }
    if contours.len() != counts.len() {
        return Err(Error::IncompatibleGraphs(format!(
            "{} contours found, allocation expects {}",
            contours.len(),
            counts.len()
        )));
    }
    if let Some(c) = counts.iter().find(|&&c| c < 3) {
        return Err(Error::param(format!("contour allocation {c} is below 3")));
    }
    Ok(sample(&contours, counts, params))
}
