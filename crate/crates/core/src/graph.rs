//! Structural graphs over contour key points, the structure loss between two
//! graphs and the fixed-length feature encoding fed to the discriminator.
//!
//! Each contour becomes a cycle; an edge's weight is its length divided by
//! the contour's total length, so weights are invariant under translation,
//! rotation and uniform scaling.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::contour::{extract_keypoints, extract_keypoints_with_counts, KeypointParams, Point};
use crate::edges::{canny, CannyParams};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::topology::TopologySignature;

pub const FEATURE_DIM: usize = 35;
const HIST_BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Cycle graph over per-contour key points. Vertex and edge indices are
/// global; `contour_ranges` gives each contour's vertex span (edges use the
/// same spans since every contour has as many edges as vertices).
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralGraph {
    vertices: Vec<Point>,
    edges: Vec<GraphEdge>,
    contour_ranges: Vec<Range<usize>>,
}

impl StructuralGraph {
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn contour_count(&self) -> usize {
        self.contour_ranges.len()
    }

    pub fn contour_range(&self, c: usize) -> Range<usize> {
        self.contour_ranges[c].clone()
    }

    /// Vertex count of each contour, in contour order.
    pub fn allocation(&self) -> Vec<usize> {
        self.contour_ranges.iter().map(|r| r.len()).collect()
    }

    pub fn contour_vertices(&self, c: usize) -> &[Point] {
        &self.vertices[self.contour_range(c)]
    }

    pub fn contour_edges(&self, c: usize) -> &[GraphEdge] {
        &self.edges[self.contour_range(c)]
    }

    /// Sum of Euclidean edge lengths over every contour.
    pub fn total_length(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| self.vertices[e.i].dist(self.vertices[e.j]))
            .sum()
    }

    /// Applies `f` to every vertex and rebuilds the weights.
    pub fn map_vertices(&self, f: impl Fn(Point) -> Point) -> Result<StructuralGraph> {
        let contours: Vec<Vec<Point>> = (0..self.contour_count())
            .map(|c| self.contour_vertices(c).iter().map(|&p| f(p)).collect())
            .collect();
        build_graph(&contours)
    }

    pub fn to_dump(&self) -> GraphDump {
        GraphDump {
            contour_count: self.contour_count(),
            contours: (0..self.contour_count())
                .map(|c| {
                    let start = self.contour_ranges[c].start;
                    ContourDump {
                        vertices: self
                            .contour_vertices(c)
                            .iter()
                            .map(|p| [p.x, p.y])
                            .collect(),
                        edges: self
                            .contour_edges(c)
                            .iter()
                            .map(|e| GraphEdge {
                                i: e.i - start,
                                j: e.j - start,
                                weight: e.weight,
                            })
                            .collect(),
                    }
                })
                .collect(),
        }
    }
}

/// JSON form of a graph: per-contour vertices and locally indexed edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub contour_count: usize,
    pub contours: Vec<ContourDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourDump {
    pub vertices: Vec<[f64; 2]>,
    pub edges: Vec<GraphEdge>,
}

/// Connects consecutive points of each contour (closing the cycle) and
/// weights each edge by its share of the contour length.
pub fn build_graph(contours: &[Vec<Point>]) -> Result<StructuralGraph> {
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    let mut contour_ranges = Vec::new();
    for (c, pts) in contours.iter().enumerate() {
        if pts.len() < 3 {
            return Err(Error::DegenerateContour(format!(
                "contour {c} has {} points, need at least 3",
                pts.len()
            )));
        }
        let n = pts.len();
        let lengths: Vec<f64> = (0..n).map(|k| pts[k].dist(pts[(k + 1) % n])).collect();
        let total: f64 = lengths.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::DegenerateContour(format!(
                "contour {c} has zero length"
            )));
        }
        let base = vertices.len();
        vertices.extend_from_slice(pts);
        for (k, len) in lengths.iter().enumerate() {
            edges.push(GraphEdge {
                i: base + k,
                j: base + (k + 1) % n,
                weight: len / total,
            });
        }
        contour_ranges.push(base..base + n);
    }
    Ok(StructuralGraph {
        vertices,
        edges,
        contour_ranges,
    })
}

/// L1 distance between corresponding edge weights of two graphs with the
/// same contour decomposition.
pub fn structure_loss(g: &StructuralGraph, s: &StructuralGraph) -> Result<f64> {
    if g.contour_ranges != s.contour_ranges {
        return Err(Error::IncompatibleGraphs(format!(
            "allocations {:?} and {:?} differ",
            g.allocation(),
            s.allocation()
        )));
    }
    Ok(g.edges
        .iter()
        .zip(&s.edges)
        .map(|(a, b)| (a.weight - b.weight).abs())
        .sum())
}

/// Parameters for going from a mask to its structural graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub canny: CannyParams,
    pub keypoints: KeypointParams,
    pub n_v: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            canny: CannyParams::default(),
            keypoints: KeypointParams::default(),
            n_v: 64,
        }
    }
}

/// Canny edges, key points and graph of `mask` in one step.
pub fn mask_graph(mask: &BinaryMask, params: &GraphParams) -> Result<StructuralGraph> {
    let edges = canny(mask, &params.canny)?;
    build_graph(&extract_keypoints(&edges, params.n_v, &params.keypoints)?)
}

/// Like [`mask_graph`] but reusing a per-contour allocation, so the result
/// is comparable with the graph that produced `allocation`.
pub fn mask_graph_aligned(
    mask: &BinaryMask,
    allocation: &[usize],
    params: &GraphParams,
) -> Result<StructuralGraph> {
    let edges = canny(mask, &params.canny)?;
    build_graph(&extract_keypoints_with_counts(
        &edges,
        allocation,
        &params.keypoints,
    )?)
}

/// Fixed-length graph encoding:
///
/// | range  | content                                                   |
/// |--------|-----------------------------------------------------------|
/// | 0..16  | histogram of `weight * n` (n = contour edge count), [0, 2) |
/// | 16..32 | histogram of `turn * n / 2pi`, [-4, 4)                    |
/// | 32     | contour count                                             |
/// | 33     | hole count                                                |
/// | 34     | ln(total perimeter in pixels)                             |
///
/// Both histogram variables equal 1 for a regular polygon, so the encoding
/// separates smooth contours from cornered ones independently of scale and
/// vertex count. Out-of-range values clamp into the end bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphFeatures(#[serde(with = "feature_array")] pub [f64; FEATURE_DIM]);

mod feature_array {
    use super::FEATURE_DIM;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; FEATURE_DIM], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; FEATURE_DIM], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 35 features"))
    }
}

impl GraphFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn weight_histogram(&self) -> &[f64] {
        &self.0[0..HIST_BINS]
    }

    pub fn turning_histogram(&self) -> &[f64] {
        &self.0[HIST_BINS..2 * HIST_BINS]
    }

    pub fn perimeter_log(&self) -> f64 {
        self.0[34]
    }
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let t = (value - lo) / (hi - lo) * HIST_BINS as f64;
    if t.is_nan() {
        return 0;
    }
    (t.floor().max(0.0) as usize).min(HIST_BINS - 1)
}

pub fn graph_features(g: &StructuralGraph, topo: &TopologySignature) -> GraphFeatures {
    let mut f = [0.0; FEATURE_DIM];
    let mut samples = 0usize;
    for c in 0..g.contour_count() {
        let pts = g.contour_vertices(c);
        let edges = g.contour_edges(c);
        let n = pts.len();
        for e in edges {
            f[bin(e.weight * n as f64, 0.0, 2.0)] += 1.0;
        }
        for k in 0..n {
            let a = pts[(k + n - 1) % n];
            let b = pts[k];
            let c2 = pts[(k + 1) % n];
            let (ux, uy) = (b.x - a.x, b.y - a.y);
            let (vx, vy) = (c2.x - b.x, c2.y - b.y);
            let turn = (ux * vy - uy * vx).atan2(ux * vx + uy * vy);
            f[HIST_BINS + bin(turn * n as f64 / (2.0 * PI), -4.0, 4.0)] += 1.0;
        }
        samples += n;
    }
    if samples > 0 {
        for v in &mut f[..2 * HIST_BINS] {
            *v /= samples as f64;
        }
    }
    f[32] = g.contour_count() as f64;
    f[33] = topo.holes as f64;
    let perim = g.total_length();
    f[34] = if perim > 0.0 { perim.ln() } else { 0.0 };
    GraphFeatures(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(side: f64) -> Vec<Point> {
        vec![
            Point::new(0.0, 0.0),
            Point::new(side, 0.0),
            Point::new(side, side),
            Point::new(0.0, side),
        ]
    }

    fn polygon(n: usize, r: f64, cx: f64, cy: f64) -> Vec<Point> {
        (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                Point::new(cx + r * a.cos(), cy + r * a.sin())
            })
            .collect()
    }

    fn square_samples(n_per_side: usize, side: f64) -> Vec<Point> {
        let mut pts = Vec::new();
        let corners = square(side);
        for k in 0..4 {
            let (a, b) = (corners[k], corners[(k + 1) % 4]);
            for s in 0..n_per_side {
                let t = s as f64 / n_per_side as f64;
                pts.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
            }
        }
        pts
    }

    #[test]
    fn square_weights() {
        let g = build_graph(&[square(5.0)]).unwrap();
        assert_eq!(g.edges().len(), 4);
        for e in g.edges() {
            assert!((e.weight - 0.25).abs() < 1e-15);
        }
        assert_eq!((g.edges()[3].i, g.edges()[3].j), (3, 0));
    }

    #[test]
    fn triangle_weights() {
        let tri = polygon(3, 4.0, 1.0, 2.0);
        let g = build_graph(&[tri]).unwrap();
        for e in g.edges() {
            assert!((e.weight - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate() {
        assert!(build_graph(&[vec![Point::new(1.0, 1.0); 4]]).is_err());
        assert!(build_graph(&[vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]]).is_err());
    }

    #[test]
    fn loss_cases() {
        let sq = build_graph(&[square(4.0)]).unwrap();
        assert_eq!(structure_loss(&sq, &sq).unwrap(), 0.0);
        let moved = sq
            .map_vertices(|p| Point::new(p.x + 10.0, p.y + 7.0))
            .unwrap();
        assert!(structure_loss(&sq, &moved).unwrap() < 1e-15);
        let rect = build_graph(&[vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 1.0),
            Point::new(0.0, 1.0),
        ]])
        .unwrap();
        let l = structure_loss(&sq, &rect).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-12, "{l}");
        let tri = build_graph(&[polygon(3, 1.0, 0.0, 0.0)]).unwrap();
        assert!(matches!(
            structure_loss(&sq, &tri),
            Err(Error::IncompatibleGraphs(_))
        ));
    }

    #[test]
    fn features_deterministic_and_shape_sensitive() {
        let topo = TopologySignature::new(1, 0);
        let circle = build_graph(&[polygon(64, 10.0, 20.0, 20.0)]).unwrap();
        let sq = build_graph(&[square_samples(16, 16.0)]).unwrap();
        let fc = graph_features(&circle, &topo);
        assert_eq!(fc, graph_features(&circle, &topo));
        let fs = graph_features(&sq, &topo);
        let l1: f64 = fc
            .turning_histogram()
            .iter()
            .zip(fs.turning_histogram())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(l1 > 0.1, "{l1}");
        for f in [fc, fs] {
            assert!((f.weight_histogram().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((f.turning_histogram().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(f.as_slice().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn features_scale() {
        let topo = TopologySignature::new(1, 1);
        let g = build_graph(&[square_samples(5, 8.0), polygon(12, 2.0, 4.0, 4.0)]).unwrap();
        let g2 = g
            .map_vertices(|p| Point::new(2.0 * p.x, 2.0 * p.y))
            .unwrap();
        let (a, b) = (graph_features(&g, &topo), graph_features(&g2, &topo));
        assert_eq!(a.weight_histogram(), b.weight_histogram());
        assert_eq!(a.turning_histogram(), b.turning_histogram());
        assert!((b.perimeter_log() - a.perimeter_log() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(a.0[32], 2.0);
        assert_eq!(a.0[33], 1.0);
    }

    #[test]
    fn dump_uses_local_indices() {
        let g = build_graph(&[square(1.0), polygon(3, 1.0, 5.0, 5.0)]).unwrap();
        let d = g.to_dump();
        assert_eq!(d.contour_count, 2);
        assert_eq!(d.contours[1].edges[2].i, 2);
        assert_eq!(d.contours[1].edges[2].j, 0);
        let json = serde_json::to_string(&d).unwrap();
        let back: GraphDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    fn arb_graph() -> impl Strategy<Value = Vec<Vec<Point>>> {
        proptest::collection::vec(
            proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..20),
            1..4,
        )
        .prop_map(|cs| {
            cs.into_iter()
                .map(|c| c.into_iter().map(|(x, y)| Point::new(x, y)).collect())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn weights_normalized(cs in arb_graph()) {
            let g = build_graph(&cs).unwrap();
            for c in 0..g.contour_count() {
                let s: f64 = g.contour_edges(c).iter().map(|e| e.weight).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_similarity_invariant(cs in arb_graph(), theta in -PI..PI, scale in 0.1f64..10.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0) {
            let g = build_graph(&cs).unwrap();
            let (c, s) = (theta.cos(), theta.sin());
            let h = g.map_vertices(|p| Point::new(scale * (c * p.x - s * p.y) + tx, scale * (s * p.x + c * p.y) + ty)).unwrap();
            prop_assert!(structure_loss(&g, &h).unwrap() < 1e-9);
            prop_assert_eq!(structure_loss(&g, &h).unwrap(), structure_loss(&h, &g).unwrap());
        }
    }
}
