//! Connected components, holes and Euler characteristic of binary masks.
//!
//! Foreground is 8-connected and background 4-connected, the usual dual pair
//! that keeps a diagonal pixel chain from both connecting and separating.

use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopologySignature {
    pub components: usize,
    pub holes: usize,
    pub euler: i64,
}

impl TopologySignature {
    pub fn new(components: usize, holes: usize) -> Self {
        Self {
            components,
            holes,
            euler: components as i64 - holes as i64,
        }
    }
}

impl std::fmt::Display for TopologySignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "components={} holes={} euler={}",
            self.components, self.holes, self.euler
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

const N4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const N8: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Labels the pixels where `select(i)` holds. Returns per-pixel labels
/// (0 = unselected, components numbered from 1 in raster order) and the count.
pub fn label_where(
    width: usize,
    height: usize,
    conn: Connectivity,
    select: impl Fn(usize) -> bool,
) -> (Vec<u32>, usize) {
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &N4,
        Connectivity::Eight => &N8,
    };
    let mut labels = vec![0u32; width * height];
    let mut count = 0usize;
    let mut stack = Vec::new();
    for start in 0..width * height {
        if labels[start] != 0 || !select(start) {
            continue;
        }
        count += 1;
        let label = count as u32;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if labels[j] == 0 && select(j) {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
    }
    (labels, count)
}

/// Component, hole and Euler counts of `mask`.
///
/// A hole is a 4-connected background component that does not touch the
/// image border.
pub fn topology(mask: &BinaryMask) -> TopologySignature {
    let (w, h) = mask.dims();
    let data = mask.data();
    let (_, components) = label_where(w, h, Connectivity::Eight, |i| data[i] != 0);
    let (bg_labels, bg_count) = label_where(w, h, Connectivity::Four, |i| data[i] == 0);

    let mut touches_border = vec![false; bg_count + 1];
    for x in 0..w {
        touches_border[bg_labels[x] as usize] = true;
        touches_border[bg_labels[(h - 1) * w + x] as usize] = true;
    }
    for y in 0..h {
        touches_border[bg_labels[y * w] as usize] = true;
        touches_border[bg_labels[y * w + w - 1] as usize] = true;
    }
    let holes = (1..=bg_count).filter(|&l| !touches_border[l]).count();
    TopologySignature::new(components, holes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::invert;

    fn disk(size: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
        })
        .unwrap()
    }

    fn annulus(size: usize, r_in: f64, r_out: f64) -> BinaryMask {
        let c = (size as f64 - 1.0) / 2.0;
        BinaryMask::from_fn(size, size, |x, y| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            d <= r_out && d >= r_in
        })
        .unwrap()
    }

    // Independent recursive flood fill used as the oracle.
    fn oracle(mask: &BinaryMask) -> (usize, usize) {
        let (w, h) = mask.dims();
        let mut seen = vec![false; w * h];
        fn fill(
            mask: &BinaryMask,
            seen: &mut [bool],
            x: isize,
            y: isize,
            fg: bool,
            diag: bool,
            border: &mut bool,
        ) {
            let (w, h) = (mask.width() as isize, mask.height() as isize);
            if x < 0 || y < 0 || x >= w || y >= h {
                return;
            }
            let i = (y * w + x) as usize;
            if seen[i] || mask.get(x as usize, y as usize) != fg {
                return;
            }
            seen[i] = true;
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                *border = true;
            }
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx == 0 && dy == 0) || (!diag && dx != 0 && dy != 0) {
                        continue;
                    }
                    fill(mask, seen, x + dx, y + dy, fg, diag, border);
                }
            }
        }
        let (mut comps, mut holes) = (0, 0);
        for y in 0..h {
            for x in 0..w {
                if seen[y * w + x] {
                    continue;
                }
                let fg = mask.get(x, y);
                let mut border = false;
                fill(mask, &mut seen, x as isize, y as isize, fg, fg, &mut border);
                if fg {
                    comps += 1;
                } else if !border {
                    holes += 1;
                }
            }
        }
        (comps, holes)
    }

    #[test]
    fn disk_and_annulus() {
        assert_eq!(
            topology(&disk(32, 15.5, 15.5, 10.0)),
            TopologySignature::new(1, 0)
        );
        let ring = annulus(32, 6.0, 12.0);
        let t = topology(&ring);
        assert_eq!((t.components, t.holes, t.euler), (1, 1, 0));
    }

    #[test]
    fn two_squares_one_with_hole() {
        let m = BinaryMask::from_fn(20, 10, |x, y| {
            let a = (1..7).contains(&x)
                && (1..7).contains(&y)
                && !((3..5).contains(&x) && (3..5).contains(&y));
            let b = (10..16).contains(&x) && (2..8).contains(&y);
            a || b
        })
        .unwrap();
        let t = topology(&m);
        assert_eq!((t.components, t.holes, t.euler), (2, 1, 1));
        assert_eq!(oracle(&m), (2, 1));
    }

    #[test]
    fn empty_and_full() {
        assert_eq!(
            topology(&BinaryMask::new(5, 5).unwrap()),
            TopologySignature::new(0, 0)
        );
        let full = BinaryMask::from_fn(5, 5, |_, _| true).unwrap();
        assert_eq!(topology(&full), TopologySignature::new(1, 0));
    }

    #[test]
    fn diagonal_chain_is_one_component_and_does_not_enclose() {
        // A diamond of diagonal steps: 8-connected foreground, and the
        // 4-connected interior is enclosed.
        let m = BinaryMask::from_fn(7, 7, |x, y| {
            let (dx, dy) = ((x as i32 - 3).abs(), (y as i32 - 3).abs());
            dx + dy == 2
        })
        .unwrap();
        assert_eq!(topology(&m), TopologySignature::new(1, 1));
        assert_eq!(oracle(&m), (1, 1));
    }

    fn curated_shapes() -> Vec<BinaryMask> {
        let s = 24;
        let c = 11.5;
        vec![
            disk(s, c, c, 8.0),
            annulus(s, 4.0, 9.0),
            BinaryMask::from_fn(s, s, |x, y| (4..20).contains(&x) && (6..18).contains(&y)).unwrap(),
            // square with two separate holes
            BinaryMask::from_fn(s, s, |x, y| {
                (3..21).contains(&x)
                    && (3..21).contains(&y)
                    && !((6..9).contains(&x) && (6..9).contains(&y))
                    && !((14..18).contains(&x) && (12..17).contains(&y))
            })
            .unwrap(),
            // L shape
            BinaryMask::from_fn(s, s, |x, y| {
                ((4..10).contains(&x) && (3..20).contains(&y))
                    || ((4..19).contains(&x) && (14..20).contains(&y))
            })
            .unwrap(),
            // plus sign
            BinaryMask::from_fn(s, s, |x, y| {
                ((9..14).contains(&x) && (3..21).contains(&y))
                    || ((3..21).contains(&x) && (9..14).contains(&y))
            })
            .unwrap(),
            // frame with three holes (a "window")
            BinaryMask::from_fn(s, s, |x, y| {
                let inside = (2..22).contains(&x) && (4..20).contains(&y);
                let h1 = (4..8).contains(&x) && (6..18).contains(&y);
                let h2 = (10..14).contains(&x) && (6..18).contains(&y);
                let h3 = (16..20).contains(&x) && (6..18).contains(&y);
                inside && !(h1 || h2 || h3)
            })
            .unwrap(),
            // triangle
            BinaryMask::from_fn(s, s, |x, y| (3..21).contains(&y) && x >= 3 && x <= y).unwrap(),
            // C shape (open ring, no hole)
            BinaryMask::from_fn(s, s, |x, y| {
                let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                (5.0..=9.0).contains(&d) && !(x > 12 && (9..15).contains(&y))
            })
            .unwrap(),
            // ellipse with one hole off-center
            BinaryMask::from_fn(s, s, |x, y| {
                let e = ((x as f64 - c) / 10.0).powi(2) + ((y as f64 - c) / 6.0).powi(2) <= 1.0;
                let hole = (x as f64 - 8.0).powi(2) + (y as f64 - c).powi(2) <= 4.0;
                e && !hole
            })
            .unwrap(),
        ]
    }

    #[test]
    fn curated_shapes_match_oracle() {
        for m in curated_shapes() {
            let t = topology(&m);
            assert_eq!((t.components, t.holes), oracle(&m));
        }
    }

    #[test]
    fn inversion_swaps_components_and_holes() {
        for m in curated_shapes() {
            let t = topology(&m);
            assert_eq!(t.components, 1);
            let inv = topology(&invert(&m));
            let (oc, oh) = oracle(&invert(&m));
            assert_eq!((inv.components, inv.holes), (oc, oh));
            // outer frame plus one component per former hole; the object becomes the hole
            assert_eq!(inv.components, 1 + t.holes);
            assert_eq!(inv.holes, t.components);
        }
    }
}
