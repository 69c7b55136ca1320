//! Canny edge detection on binary masks.
//!
//! The mask is scaled to `{0, 255}`, blurred, differentiated with Sobel
//! kernels, thinned by non-maximum suppression and linked by hysteresis.
//! Thresholds apply to the gradient magnitude normalized by its maximum.

use std::collections::VecDeque;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{encode_png, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            low: 0.1,
            high: 0.3,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!(
                "canny sigma {} must be >= 0",
                self.sigma
            )));
        }
        if self.low.is_nan() || self.low < 0.0 {
            return Err(Error::param(format!("canny low {} must be >= 0", self.low)));
        }
        if self.low > self.high {
            return Err(Error::param(format!(
                "canny low threshold {} exceeds high threshold {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Binary edge indicators, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl EdgeMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = u8::from(f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        })
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(&self.to_gray_image())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Copy of `src` with `r` replicated pixels on every side.
fn pad(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let pw = w + 2 * r;
    let mut out = Vec::with_capacity(pw * (h + 2 * r));
    for py in 0..h + 2 * r {
        let row = &src[py.saturating_sub(r).min(h - 1) * w..][..w];
        out.extend(std::iter::repeat_n(row[0], r));
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(row[w - 1], r));
    }
    out
}

/// Separable convolution with replicated borders.
fn blur(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return src.to_vec();
    }
    let r = kernel.len() / 2;
    let padded = pad(src, w, h, r);
    let pw = w + 2 * r;
    // horizontal pass over padded rows, keeping the vertical margin
    let mut tmp = vec![0.0; w * (h + 2 * r)];
    for (row_out, row_in) in tmp.chunks_exact_mut(w).zip(padded.chunks_exact(pw)) {
        for (x, o) in row_out.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .zip(&row_in[x..])
                .fold(0.0, |acc, (kv, v)| acc + kv * v);
        }
    }
    let mut out = vec![0.0; w * h];
    for (y, row_out) in out.chunks_exact_mut(w).enumerate() {
        for (x, o) in row_out.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .enumerate()
                .fold(0.0, |acc, (k, kv)| acc + kv * tmp[(y + k) * w + x]);
        }
    }
    out
}

fn sobel(src: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let padded = pad(src, w, h, 1);
    let pw = w + 2;
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        let (up, mid, down) = (
            &padded[y * pw..],
            &padded[(y + 1) * pw..],
            &padded[(y + 2) * pw..],
        );
        for x in 0..w {
            let i = y * w + x;
            gx[i] = (up[x + 2] + 2.0 * mid[x + 2] + down[x + 2]) - (up[x] + 2.0 * mid[x] + down[x]);
            gy[i] =
                (down[x] + 2.0 * down[x + 1] + down[x + 2]) - (up[x] + 2.0 * up[x + 1] + up[x + 2]);
        }
    }
    (gx, gy)
}

// Unit steps for the eight gradient sectors, counter-clockwise from +x
// (with y pointing down).
const SECTOR_STEP: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Canny edges of `mask`.
///
/// Non-maximum suppression compares against both neighbours along the
/// gradient. Plateaus straddling a step edge are resolved toward the
/// brighter (foreground) side, so a straight boundary yields the one-pixel
/// inner boundary of the foreground. Surviving pixels are restricted to the
/// boundary band of the mask.
pub fn canny(mask: &BinaryMask, params: &CannyParams) -> Result<EdgeMap> {
    params.validate()?;
    let (w, h) = mask.dims();
    let src: Vec<f64> = mask.data().iter().map(|&v| f64::from(v) * 255.0).collect();
    let smoothed = blur(&src, w, h, &gaussian_kernel(params.sigma));
    let (gx, gy) = sobel(&smoothed, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut edges = EdgeMap::new(w, h);
    if max <= 0.0 {
        return Ok(edges);
    }
    let norm: Vec<f64> = mag.iter().map(|m| m / max).collect();

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            norm[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = norm[i];
            if m <= 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]);
            let sector = ((angle / std::f64::consts::FRAC_PI_4).round() as i64).rem_euclid(8);
            let (dx, dy) = SECTOR_STEP[sector as usize];
            let ahead = at(x as isize + dx, y as isize + dy);
            let behind = at(x as isize - dx, y as isize - dy);
            if m > ahead && m >= behind {
                thin[i] = m;
            }
        }
    }

    // Hysteresis: grow strong pixels through 8-connected weak ones.
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= params.high && m > 0.0 {
            edges.data[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges.data[j] == 0 && thin[j] >= params.low && thin[j] > 0.0 {
                    edges.data[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }

    for y in 0..h {
        for x in 0..w {
            if edges.data[y * w + x] != 0 && !on_boundary_band(mask, x, y) {
                edges.data[y * w + x] = 0;
            }
        }
    }
    Ok(edges)
}

/// True when the 3x3 window around `(x, y)` holds both foreground and
/// background pixels (in-frame only).
pub fn on_boundary_band(mask: &BinaryMask, x: usize, y: usize) -> bool {
    let (mut fg, mut bg) = (false, false);
    for ny in y.saturating_sub(1)..=(y + 1).min(mask.height() - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(mask.width() - 1) {
            if mask.get(nx, ny) {
                fg = true;
            } else {
                bg = true;
            }
        }
    }
    fg && bg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square16() -> BinaryMask {
        BinaryMask::from_fn(16, 16, |x, y| (4..12).contains(&x) && (4..12).contains(&y)).unwrap()
    }

    // Pixels that differ from at least one 4-neighbour.
    fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let v = mask.get(x, y);
                let differs = [(1i32, 0i32), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|&(dx, dy)| {
                        let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                        nx >= 0
                            && ny >= 0
                            && (nx as usize) < mask.width()
                            && (ny as usize) < mask.height()
                            && mask.get(nx as usize, ny as usize) != v
                    });
                if differs {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn empty_mask_has_no_edges() {
        let m = BinaryMask::new(12, 9).unwrap();
        assert_eq!(canny(&m, &CannyParams::default()).unwrap().count(), 0);
    }

    #[test]
    fn rejects_inverted_thresholds() {
        let p = CannyParams {
            low: 0.5,
            high: 0.2,
            ..Default::default()
        };
        assert!(canny(&square16(), &p).is_err());
    }

    #[test]
    fn square_gives_closed_ring() {
        let e = canny(&square16(), &CannyParams::default()).unwrap();
        let n = e.count();
        assert!((24..=32).contains(&n), "edge count {n}");
        // ring along the square boundary: every boundary-trace pixel of the
        // inner boundary is marked
        let m = square16();
        let inner: Vec<_> = boundary_pixels(&m)
            .into_iter()
            .filter(|&(x, y)| m.get(x, y))
            .collect();
        assert_eq!(inner.len(), 28);
        for (x, y) in inner {
            assert!(e.get(x, y), "missing ({x},{y})");
        }
    }

    #[test]
    fn deterministic() {
        let m = square16();
        let p = CannyParams::default();
        assert_eq!(canny(&m, &p).unwrap(), canny(&m, &p).unwrap());
    }

    #[test]
    fn edges_stay_near_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (cx, cy, r) = (
                rng.gen_range(8.0..24.0),
                rng.gen_range(8.0..24.0),
                rng.gen_range(3.0..9.0),
            );
            let blob = BinaryMask::from_fn(32, 32, |x, y| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                dx * dx / 1.5 + dy * dy <= r * r || (x + y) % 11 == 0 && dx.abs() < 4.0
            })
            .unwrap();
            let e = canny(&blob, &CannyParams::default()).unwrap();
            let boundary = boundary_pixels(&blob);
            for y in 0..32 {
                for x in 0..32 {
                    if !e.get(x, y) {
                        continue;
                    }
                    let d = boundary
                        .iter()
                        .map(|&(bx, by)| {
                            ((bx as f64 - x as f64).powi(2) + (by as f64 - y as f64).powi(2)).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!(d <= 1.0, "edge ({x},{y}) is {d} from boundary");
                    assert!(on_boundary_band(&blob, x, y));
                }
            }
        }
    }
}
