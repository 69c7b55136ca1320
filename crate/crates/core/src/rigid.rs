//! Rigid mask edits: a similarity transform with an optional small
//! perspective tilt, applied about the foreground centroid.
//!
//! The edit inverts the mask, resamples the inverted field through the
//! homography with bilinear interpolation, thresholds at 0.5 and inverts
//! back. Out-of-frame samples read as background. Non-unit scales first
//! smooth the field slightly so staircase boundaries are not magnified and
//! minified edits are not aliased; unit-scale edits are untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{invert, BinaryMask};

pub const SCALE_RANGE: (f64, f64) = (0.25, 4.0);
pub const TILT_LIMIT: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Radians, counter-clockwise on screen is negative (y points down).
    pub rotation: f64,
    pub scale: f64,
    /// Pixels.
    pub translation: [f64; 2],
    /// Per-pixel perspective terms.
    #[serde(default)]
    pub tilt: [f64; 2],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            translation: [0.0, 0.0],
            tilt: [0.0, 0.0],
        }
    }

    pub fn rotation(theta: f64) -> Self {
        Self {
            rotation: theta,
            ..Self::identity()
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self {
            scale: s,
            ..Self::identity()
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            translation: [dx, dy],
            ..Self::identity()
        }
    }

    pub fn is_affine(&self) -> bool {
        self.tilt == [0.0, 0.0]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rotation,
            self.scale,
            self.translation[0],
            self.translation[1],
            self.tilt[0],
            self.tilt[1],
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("transform has non-finite fields"));
        }
        if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale) {
            return Err(Error::param(format!(
                "scale {} outside [{}, {}]",
                self.scale, SCALE_RANGE.0, SCALE_RANGE.1
            )));
        }
        if self.rotation.abs() > std::f64::consts::PI {
            return Err(Error::param(format!(
                "|rotation| {} exceeds pi",
                self.rotation
            )));
        }
        if self.tilt.iter().any(|t| t.abs() > TILT_LIMIT) {
            return Err(Error::param(format!(
                "tilt {:?} exceeds {TILT_LIMIT}",
                self.tilt
            )));
        }
        Ok(())
    }

    /// Rotation, unit scale and no tilt where the rotation is a multiple of
    /// a quarter turn: such transforms permute the pixel lattice exactly.
    fn quarter_turn(&self) -> bool {
        if self.scale != 1.0 || !self.is_affine() {
            return false;
        }
        let q = self.rotation / std::f64::consts::FRAC_PI_2;
        (q - q.round()).abs() < 1e-12
    }
}

/// Row-major 3x3 matrix acting on homogeneous column vectors `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography =
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    pub fn mul(&self, rhs: &Homography) -> Homography {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
            }
        }
        Homography(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.0;
        let det = self.det();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::NonInvertible);
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = adj[r][c] / det;
            }
        }
        Ok(Homography(out))
    }

    /// Maps a point; `None` when it lands on or behind the horizon.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w <= 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        let mut d: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                d = d.max((self.0[r][c] - other.0[r][c]).abs());
            }
        }
        d
    }
}

// cos/sin with exact values at quarter turns.
fn clean_trig(theta: f64) -> (f64, f64) {
    let snap = |v: f64| {
        if v.abs() < 1e-12 {
            0.0
        } else if (v.abs() - 1.0).abs() < 1e-12 {
            v.signum()
        } else {
            v
        }
    };
    (snap(theta.cos()), snap(theta.sin()))
}

/// Homography of `t` about `pivot`: `p -> pivot + t + S R (p - pivot)`,
/// with the tilt entering the projective row in pivot-centred coordinates.
pub fn homography(t: &RigidTransform, pivot: (f64, f64)) -> Homography {
    let (c, s) = clean_trig(t.rotation);
    let k = t.scale;
    let core = Homography([
        [k * c, -k * s, 0.0],
        [k * s, k * c, 0.0],
        [t.tilt[0], t.tilt[1], 1.0],
    ]);
    Homography::translation(pivot.0 + t.translation[0], pivot.1 + t.translation[1])
        .mul(&core)
        .mul(&Homography::translation(-pivot.0, -pivot.1))
}

/// Nearest point of the lattice `Z^2 ∪ (Z + 1/2)^2`, about which quarter
/// turns map pixel centres onto pixel centres.
fn snap_pivot(p: (f64, f64)) -> (f64, f64) {
    let a = (p.0.round(), p.1.round());
    let b = ((p.0 - 0.5).round() + 0.5, (p.1 - 0.5).round() + 0.5);
    let da = (p.0 - a.0).powi(2) + (p.1 - a.1).powi(2);
    let db = (p.0 - b.0).powi(2) + (p.1 - b.1).powi(2);
    if db < da {
        b
    } else {
        a
    }
}

/// Warp pivot used by [`rigid_edit`]: the foreground centroid, snapped to
/// the quarter-turn lattice when `t` is an exact quarter turn.
pub fn warp_pivot(mask: &BinaryMask, t: &RigidTransform) -> Option<(f64, f64)> {
    let c = mask.centroid()?;
    Some(if t.quarter_turn() { snap_pivot(c) } else { c })
}

/// Bilinear sample of `field` at `(x, y)`; taps outside the frame read `fill`.
pub(crate) fn bilinear(field: &[f64], w: usize, h: usize, x: f64, y: f64, fill: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            fill
        } else {
            field[yi as usize * w + xi as usize]
        }
    };
    let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1, y0) * fx;
    let bottom = tap(x0, y0 + 1) * (1.0 - fx) + tap(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

const MAGNIFY_SIGMA: f64 = 0.85;
const MINIFY_SIGMA: f64 = 0.3;

/// Separable Gaussian blur with replicated borders.
fn smooth(field: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * field[y * w + clamp(x as isize + i, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp[clamp(y as isize + i, h) * w + x])
                .sum();
        }
    }
    out
}

/// Applies `t` to `mask`; output has the same dimensions.
pub fn rigid_edit(mask: &BinaryMask, t: &RigidTransform) -> Result<BinaryMask> {
    t.validate()?;
    let pivot = warp_pivot(mask, t).ok_or(Error::EmptyMask)?;
    let inverted = invert(mask);
    if !inverted.has_foreground() {
        return Err(Error::param(
            "mask covers the whole frame; its inversion is empty",
        ));
    }
    let back = homography(t, pivot).inverse()?;
    let (w, h) = mask.dims();
    let mut field = inverted.to_f64();
    if t.scale > 1.0 + 1e-9 && !t.quarter_turn() {
        field = smooth(&field, w, h, MAGNIFY_SIGMA);
    } else if t.scale < 1.0 - 1e-9 {
        field = smooth(&field, w, h, MINIFY_SIGMA / t.scale);
    }
    // background of the original is foreground of the inverted field
    let fill = 1.0;
    let warped = BinaryMask::from_fn(w, h, |x, y| match back.apply(x as f64, y as f64) {
        Some((sx, sy)) => bilinear(&field, w, h, sx, sy, fill) >= 0.5,
        None => true,
    })?;
    let out = invert(&warped);
    if !out.has_foreground() {
        return Err(Error::EmptyResult);
    }
    Ok(out)
}

/// The transform undoing `t` when applied to `rigid_edit(m, t)`.
///
/// Each edit pivots about its own input's centroid, and an affine edit moves
/// the centroid by exactly its translation, so the inverse is rotation
/// `-theta`, scale `1/s` and translation `-t`. Perspective tilts have no
/// inverse within this parameterization.
pub fn invert_transform(t: &RigidTransform) -> Result<RigidTransform> {
    t.validate()?;
    if !t.is_affine() {
        return Err(Error::param(
            "perspective-tilted transforms have no closed-form inverse",
        ));
    }
    Ok(RigidTransform {
        rotation: -t.rotation,
        scale: 1.0 / t.scale,
        translation: [-t.translation[0], -t.translation[1]],
        tilt: [0.0, 0.0],
    })
}

/// Closed intervals sampled uniformly by [`sample_rigid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigidRanges {
    pub rotation: [f64; 2],
    pub scale: [f64; 2],
    pub dx: [f64; 2],
    pub dy: [f64; 2],
    pub tilt_x: [f64; 2],
    pub tilt_y: [f64; 2],
}

impl Default for RigidRanges {
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_3;
        Self {
            rotation: [-FRAC_PI_3, FRAC_PI_3],
            scale: [0.6, 1.6],
            dx: [-4.0, 4.0],
            dy: [-4.0, 4.0],
            tilt_x: [-0.0005, 0.0005],
            tilt_y: [-0.0005, 0.0005],
        }
    }
}

impl RigidRanges {
    /// Every interval collapsed onto the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation: [0.0, 0.0],
            scale: [1.0, 1.0],
            dx: [0.0, 0.0],
            dy: [0.0, 0.0],
            tilt_x: [0.0, 0.0],
            tilt_y: [0.0, 0.0],
        }
    }

    pub fn affine(rotation: [f64; 2], scale: [f64; 2], shift: f64) -> Self {
        Self {
            rotation,
            scale,
            dx: [-shift, shift],
            dy: [-shift, shift],
            tilt_x: [0.0, 0.0],
            tilt_y: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("dx", self.dx),
            ("dy", self.dy),
            ("tilt_x", self.tilt_x),
            ("tilt_y", self.tilt_y),
        ];
        for (name, [lo, hi]) in named {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::param(format!("empty {name} range [{lo}, {hi}]")));
            }
        }
        let pi = std::f64::consts::PI;
        if self.rotation[0] < -pi || self.rotation[1] > pi {
            return Err(Error::param("rotation range exceeds [-pi, pi]"));
        }
        if self.scale[0] < SCALE_RANGE.0 || self.scale[1] > SCALE_RANGE.1 {
            return Err(Error::param("scale range exceeds [0.25, 4]"));
        }
        for [lo, hi] in [self.tilt_x, self.tilt_y] {
            if lo < -TILT_LIMIT || hi > TILT_LIMIT {
                return Err(Error::param("tilt range exceeds 0.001"));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    // always consume one value so the stream layout is range-independent
    let u: f64 = rng.gen();
    if lo == hi {
        lo
    } else {
        lo + u * (hi - lo)
    }
}

/// Uniformly samples each component of a transform; deterministic in `seed`.
pub fn sample_rigid(seed: u64, ranges: &RigidRanges) -> Result<RigidTransform> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(RigidTransform {
        rotation: draw(&mut rng, ranges.rotation),
        scale: draw(&mut rng, ranges.scale),
        translation: [draw(&mut rng, ranges.dx), draw(&mut rng, ranges.dy)],
        tilt: [draw(&mut rng, ranges.tilt_x), draw(&mut rng, ranges.tilt_y)],
    })
}
