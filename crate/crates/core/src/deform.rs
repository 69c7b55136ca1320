//! Control-grid deformation fields for non-rigid mask edits.
//!
//! A field stores one displacement per control point; displacements at
//! pixels are bilinear in the grid. Warping is backward:
//! `out(p) = in(p - d(p))`, sampled bilinearly and thresholded at 0.5.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::rigid::bilinear;
use crate::topology::topology;

pub const DEFAULT_GRID: usize = 5;
pub const DEFAULT_CAP_FRACTION: f64 = 0.15;
pub const MAX_HALVINGS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    grid_w: usize,
    grid_h: usize,
    width: usize,
    height: usize,
    cap: f64,
    displacements: Vec<[f64; 2]>,
}

impl DeformationField {
    /// Zero field over a `grid_w x grid_h` control grid for a `width x height`
    /// image. `cap` bounds every displacement's length in pixels.
    pub fn zeros(
        grid_w: usize,
        grid_h: usize,
        width: usize,
        height: usize,
        cap: f64,
    ) -> Result<Self> {
        if grid_w < 2 || grid_h < 2 {
            return Err(Error::param(format!(
                "control grid {grid_w}x{grid_h} must be at least 2x2"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions { width, height });
        }
        if !(cap.is_finite() && cap >= 0.0) {
            return Err(Error::param(format!(
                "displacement cap {cap} must be finite and >= 0"
            )));
        }
        Ok(Self {
            grid_w,
            grid_h,
            width,
            height,
            cap,
            displacements: vec![[0.0, 0.0]; grid_w * grid_h],
        })
    }

    /// Zero field with the default 5x5 grid and a cap of 0.15 * min(W, H).
    pub fn for_mask(mask: &BinaryMask) -> Self {
        let (w, h) = mask.dims();
        let cap = DEFAULT_CAP_FRACTION * w.min(h) as f64;
        Self::zeros(DEFAULT_GRID, DEFAULT_GRID, w, h, cap).expect("mask dimensions are valid")
    }

    /// Constant displacement `(dx, dy)` at every control point, clamped.
    pub fn uniform(mut self, dx: f64, dy: f64) -> Self {
        for d in &mut self.displacements {
            *d = [dx, dy];
        }
        self.clamp();
        self
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_w, self.grid_h)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.displacements
    }

    /// Number of scalar parameters (two per control point).
    pub fn param_count(&self) -> usize {
        2 * self.displacements.len()
    }

    /// Flattened parameters `[dx0, dy0, dx1, dy1, ...]`.
    pub fn params(&self) -> Vec<f64> {
        self.displacements.iter().flat_map(|d| *d).collect()
    }

    /// Replaces the parameters and clamps each control displacement to the cap.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::param(format!(
                "expected {} field parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("field parameters must be finite"));
        }
        for (d, p) in self.displacements.iter_mut().zip(params.chunks_exact(2)) {
            *d = [p[0], p[1]];
        }
        self.clamp();
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut f = self.clone();
        f.set_params(params)?;
        Ok(f)
    }

    /// Field with every displacement multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut f = self.clone();
        for d in &mut f.displacements {
            d[0] *= k;
            d[1] *= k;
        }
        f.clamp();
        f
    }

    pub fn is_zero(&self) -> bool {
        self.displacements
            .iter()
            .all(|d| d[0] == 0.0 && d[1] == 0.0)
    }

    /// Control-point displacements have length at most `cap`; bilinear
    /// blends of such vectors stay within it.
    fn clamp(&mut self) {
        for d in &mut self.displacements {
            let len = d[0].hypot(d[1]);
            if len > self.cap {
                let k = self.cap / len;
                d[0] *= k;
                d[1] *= k;
            }
        }
    }

    /// Interpolated displacement at pixel `(x, y)`.
    pub fn at(&self, x: f64, y: f64) -> [f64; 2] {
        self.interpolate(
            cell(x, self.width, self.grid_w),
            cell(y, self.height, self.grid_h),
        )
    }

    fn interpolate(
        &self,
        (i0, i1, fx): (usize, usize, f64),
        (j0, j1, fy): (usize, usize, f64),
    ) -> [f64; 2] {
        let d = |i: usize, j: usize| self.displacements[j * self.grid_w + i];
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let top = d(i0, j0)[k] * (1.0 - fx) + d(i1, j0)[k] * fx;
            let bottom = d(i0, j1)[k] * (1.0 - fx) + d(i1, j1)[k] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Largest interpolated displacement length over all pixels.
    pub fn max_displacement(&self) -> f64 {
        let mut m = 0.0f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let d = self.at(x as f64, y as f64);
                m = m.max(d[0].hypot(d[1]));
            }
        }
        m
    }
}

/// Lower and upper control indices and the blend weight along one axis.
fn cell(p: f64, size: usize, grid: usize) -> (usize, usize, f64) {
    let g = grid_coord(p, size, grid);
    let i0 = g.floor() as usize;
    (i0, (i0 + 1).min(grid - 1), g - i0 as f64)
}

fn grid_coord(p: f64, size: usize, grid: usize) -> f64 {
    if size <= 1 {
        return 0.0;
    }
    (p / (size - 1) as f64 * (grid - 1) as f64).clamp(0.0, (grid - 1) as f64)
}

/// Backward-warps `mask` through `field`. Samples outside the frame read
/// as background.
pub fn apply_deformation(mask: &BinaryMask, field: &DeformationField) -> Result<BinaryMask> {
    let (w, h) = mask.dims();
    if field.dims() != (w, h) {
        return Err(Error::DimensionMismatch {
            left: (w, h),
            right: field.dims(),
        });
    }
    if field.is_zero() {
        return Ok(mask.clone());
    }
    let src = mask.to_f64();
    let cols: Vec<_> = (0..w).map(|x| cell(x as f64, w, field.grid_w)).collect();
    let rows: Vec<_> = (0..h).map(|y| cell(y as f64, h, field.grid_h)).collect();
    BinaryMask::from_fn(w, h, |x, y| {
        let d = field.interpolate(cols[x], rows[y]);
        bilinear(&src, w, h, x as f64 - d[0], y as f64 - d[1], 0.0) >= 0.5
    })
}

/// Fraction of pixels on which `g` and `s` differ.
pub fn content_loss(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    g.same_dims(s)?;
    let diff = g
        .data()
        .iter()
        .zip(s.data())
        .filter(|(a, b)| a != b)
        .count();
    Ok(diff as f64 / g.len() as f64)
}

/// Outcome of [`project_topology`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mask: BinaryMask,
    /// The field that produced `mask` (zero after a fallback).
    pub field: DeformationField,
    pub halvings: usize,
    /// No halving restored the topology; `mask` is the source.
    pub fallback: bool,
}

/// Returns `edited` if it has the source topology; otherwise halves `field`
/// and re-warps `source` until it does, up to [`MAX_HALVINGS`] times, then
/// falls back to the undeformed source.
pub fn project_topology(
    source: &BinaryMask,
    edited: &BinaryMask,
    field: &DeformationField,
) -> Result<Projection> {
    project_topology_with(source, edited, field, MAX_HALVINGS)
}

/// [`project_topology`] with an explicit halving budget.
pub fn project_topology_with(
    source: &BinaryMask,
    edited: &BinaryMask,
    field: &DeformationField,
    max_halvings: usize,
) -> Result<Projection> {
    if !source.has_foreground() {
        return Err(Error::EmptyMask);
    }
    source.same_dims(edited)?;
    let target = topology(source);
    if topology(edited) == target {
        return Ok(Projection {
            mask: edited.clone(),
            field: field.clone(),
            halvings: 0,
            fallback: false,
        });
    }
    let mut f = field.clone();
    for k in 1..=max_halvings {
        f = f.scaled(0.5);
        let m = apply_deformation(source, &f)?;
        if topology(&m) == target {
            return Ok(Projection {
                mask: m,
                field: f,
                halvings: k,
                fallback: false,
            });
        }
    }
    Ok(Projection {
        mask: source.clone(),
        field: field.scaled(0.0),
        halvings: max_halvings,
        fallback: true,
    })
}

/// Named initial deformations selected by prompt keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Rounder,
    Squarer,
    Taller,
    Wider,
    Twist,
    Wave,
    Bulge,
    Slimmer,
    Jitter,
}

const KEYWORDS: &[(Template, &[&str])] = &[
    (Template::Rounder, &["round", "smooth", "circular", "soft"]),
    (Template::Squarer, &["square", "sharp", "angular", "boxy"]),
    (Template::Taller, &["tall", "stretch", "elongat", "long"]),
    (Template::Wider, &["wide", "flat", "broad"]),
    (Template::Twist, &["twist", "swirl", "curl", "spin"]),
    (Template::Wave, &["wav", "ripple", "bend"]),
    (
        Template::Bulge,
        &["bulge", "inflat", "bigger", "fat", "puff"],
    ),
    (Template::Slimmer, &["slim", "thin", "shrink", "narrow"]),
];

impl Template {
    /// First template whose keyword occurs in the lowercased prompt,
    /// [`Template::Jitter`] otherwise.
    pub fn from_prompt(prompt: &str) -> Self {
        let p = prompt.to_lowercase();
        KEYWORDS
            .iter()
            .find(|(_, words)| words.iter().any(|w| p.contains(w)))
            .map_or(Template::Jitter, |(t, _)| *t)
    }

    /// Displacement direction at normalized grid position `(u, v)` in
    /// [-1, 1]^2, with unit peak amplitude.
    fn direction(self, u: f64, v: f64) -> [f64; 2] {
        let r2 = u * u + v * v;
        let falloff = (1.0 - r2 / 2.0).max(0.0);
        let corner = u.abs() * v.abs();
        match self {
            // backward warp: inward displacement erodes, outward dilates
            Template::Rounder => [-u * corner, -v * corner],
            Template::Squarer => [u * corner, v * corner],
            Template::Taller => [-0.5 * u, v],
            Template::Wider => [u, -0.5 * v],
            Template::Twist => [-v * falloff, u * falloff],
            Template::Wave => [0.0, (std::f64::consts::PI * u).sin()],
            Template::Bulge => [u * falloff, v * falloff],
            Template::Slimmer => [-u * falloff, -v * falloff],
            Template::Jitter => [0.0, 0.0],
        }
    }
}

/// Initial field: `template` at `amplitude` pixels plus uniform per-control
/// point noise of `noise` pixels drawn from `seed`.
pub fn template_field(
    base: &DeformationField,
    template: Template,
    amplitude: f64,
    noise: f64,
    seed: u64,
) -> DeformationField {
    let (gw, gh) = base.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(base.param_count());
    for j in 0..gh {
        for i in 0..gw {
            let u = 2.0 * i as f64 / (gw - 1) as f64 - 1.0;
            let v = 2.0 * j as f64 / (gh - 1) as f64 - 1.0;
            let d = template.direction(u, v);
            for c in d {
                let jitter = if noise > 0.0 {
                    rng.gen_range(-noise..=noise)
                } else {
                    0.0
                };
                params.push(amplitude * c + jitter);
            }
        }
    }
    base.with_params(&params)
        .expect("template parameters are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::invert;
    use crate::topology::TopologySignature;

    fn annulus(size: usize, r_in: f64, r_out: f64) -> BinaryMask {
        let c = (size as f64 - 1.0) / 2.0;
        BinaryMask::from_fn(size, size, |x, y| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            d <= r_out && d >= r_in
        })
        .unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let m = annulus(40, 6.0, 14.0);
        let f = DeformationField::for_mask(&m);
        assert_eq!(apply_deformation(&m, &f).unwrap(), m);
    }

    #[test]
    fn uniform_field_translates() {
        let m = annulus(40, 6.0, 14.0);
        let f = DeformationField::for_mask(&m).uniform(3.0, 0.0);
        let out = apply_deformation(&m, &f).unwrap();
        let oracle = BinaryMask::from_fn(40, 40, |x, y| x >= 3 && m.get(x - 3, y)).unwrap();
        assert!(crate::mask::iou(&out, &oracle).unwrap() >= 0.99);
    }

    #[test]
    fn small_random_fields_keep_annulus_topology() {
        let m = annulus(48, 8.0, 16.0);
        let base = DeformationField::zeros(5, 5, 48, 48, 2.0).unwrap();
        for seed in 0..20 {
            let f = template_field(&base, Template::Jitter, 0.0, 2.0, seed);
            assert!(f.max_displacement() <= 2.0 + 1e-12);
            let out = apply_deformation(&m, &f).unwrap();
            assert_eq!(topology(&out).euler, 0);
        }
    }

    #[test]
    fn clamp_bounds_interpolated_displacement() {
        let base = DeformationField::zeros(5, 5, 32, 32, 1.5).unwrap();
        let params: Vec<f64> = (0..50)
            .map(|i| if i % 3 == 0 { 9.0 } else { -4.0 })
            .collect();
        let f = base.with_params(&params).unwrap();
        for d in f.displacements() {
            assert!(d[0].hypot(d[1]) <= 1.5 + 1e-12);
        }
        assert!(f.max_displacement() <= 1.5 + 1e-12);
    }

    #[test]
    fn content_loss_cases() {
        let m = annulus(16, 3.0, 6.0);
        assert_eq!(content_loss(&m, &m).unwrap(), 0.0);
        assert_eq!(content_loss(&m, &invert(&m)).unwrap(), 1.0);
        let mut k = m.clone();
        for x in 0..5 {
            k.set(x, 0, !k.get(x, 0));
        }
        assert_eq!(content_loss(&m, &k).unwrap(), 5.0 / 256.0);
        assert_eq!(content_loss(&k, &m).unwrap(), content_loss(&m, &k).unwrap());
        assert!(content_loss(&m, &BinaryMask::new(8, 8).unwrap()).is_err());
    }

    #[test]
    fn projection_keeps_valid_edits() {
        let m = annulus(40, 6.0, 14.0);
        let f = DeformationField::for_mask(&m).uniform(1.0, 1.0);
        let e = apply_deformation(&m, &f).unwrap();
        let p = project_topology(&m, &e, &f).unwrap();
        assert_eq!(p.halvings, 0);
        assert_eq!(p.mask, e);
    }

    // folds the top wall of the ring, splitting off a component
    fn pinch() -> DeformationField {
        let mut f = DeformationField::zeros(5, 5, 48, 48, 30.0).unwrap();
        let mut params = f.params();
        params[2 * 7 + 1] = -20.0;
        f.set_params(&params).unwrap();
        f
    }

    #[test]
    fn projection_undoes_folding_edit() {
        let m = annulus(48, 6.0, 9.0);
        let f = pinch();
        let e = apply_deformation(&m, &f).unwrap();
        assert_ne!(topology(&e), topology(&m));
        let p = project_topology(&m, &e, &f).unwrap();
        assert!(p.halvings >= 1 && !p.fallback);
        assert_eq!(topology(&p.mask), TopologySignature::new(1, 1));
        // the oracle sequence: every earlier halving still violates topology
        let mut g = f.clone();
        for _ in 1..p.halvings {
            g = g.scaled(0.5);
            assert_ne!(topology(&apply_deformation(&m, &g).unwrap()), topology(&m));
        }
    }

    #[test]
    fn projection_falls_back_to_source() {
        let m = annulus(48, 6.0, 9.0);
        let f = pinch();
        let e = apply_deformation(&m, &f).unwrap();
        let p = project_topology_with(&m, &e, &f, 0).unwrap();
        assert!(p.fallback);
        assert_eq!(p.mask, m);
        assert!(p.field.is_zero());
    }

    #[test]
    fn templates_from_prompts() {
        assert_eq!(Template::from_prompt("make it ROUNDER"), Template::Rounder);
        assert_eq!(
            Template::from_prompt("square edges please"),
            Template::Squarer
        );
        assert_eq!(Template::from_prompt("a cat"), Template::Jitter);
        let base = DeformationField::zeros(5, 5, 64, 64, 9.6).unwrap();
        assert!(template_field(&base, Template::Jitter, 3.0, 0.0, 1).is_zero());
        let a = template_field(&base, Template::Twist, 3.0, 0.5, 7);
        assert_eq!(a, template_field(&base, Template::Twist, 3.0, 0.5, 7));
        assert_ne!(a, template_field(&base, Template::Twist, 3.0, 0.5, 8));
    }
}
