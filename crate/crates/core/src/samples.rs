//! Ten bundled 64x64 source masks with prompts, covering zero to three holes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{save_mask, BinaryMask};

pub const SAMPLE_SIZE: usize = 64;

/// A named sample mask and its edit prompt.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: &'static str,
    pub prompt: &'static str,
    pub mask: BinaryMask,
}

const C: f64 = 31.5;

fn disk(x: usize, y: usize, cx: f64, cy: f64, r: f64) -> bool {
    (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
}

fn ellipse(x: usize, y: usize, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    ((x as f64 - cx) / a).powi(2) + ((y as f64 - cy) / b).powi(2) <= 1.0
}

fn rect(x: usize, y: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> bool {
    (x0..x1).contains(&x) && (y0..y1).contains(&y)
}

fn build(f: impl Fn(usize, usize) -> bool) -> BinaryMask {
    BinaryMask::from_fn(SAMPLE_SIZE, SAMPLE_SIZE, f).expect("sample dimensions are valid")
}

/// The bundled sample set, in a fixed order.
pub fn samples() -> Vec<Sample> {
    vec![
        Sample {
            id: "disk",
            prompt: "make the outline wavy like a cookie",
            mask: build(|x, y| disk(x, y, C, C, 18.0)),
        },
        Sample {
            id: "ellipse",
            prompt: "stretch it into a taller egg",
            mask: build(|x, y| ellipse(x, y, C, C, 22.0, 14.0)),
        },
        Sample {
            id: "ring",
            prompt: "a rounder ring",
            mask: build(|x, y| disk(x, y, C, C, 20.0) && !disk(x, y, C, C, 9.0)),
        },
        Sample {
            id: "rounded_square",
            prompt: "give it square edges",
            mask: build(|x, y| {
                let (dx, dy) = ((x as f64 - C).abs(), (y as f64 - C).abs());
                let (qx, qy) = ((dx - 10.0).max(0.0), (dy - 10.0).max(0.0));
                qx * qx + qy * qy <= 64.0
            }),
        },
        Sample {
            id: "l_shape",
            prompt: "a bracket with soft round corners",
            mask: build(|x, y| rect(x, y, 14, 28, 12, 52) || rect(x, y, 14, 50, 38, 52)),
        },
        Sample {
            id: "cross",
            prompt: "twist the cross like a pinwheel",
            mask: build(|x, y| rect(x, y, 25, 39, 10, 54) || rect(x, y, 10, 54, 25, 39)),
        },
        Sample {
            id: "plate_two_holes",
            prompt: "a wider plate",
            mask: build(|x, y| {
                ellipse(x, y, C, C, 24.0, 16.0)
                    && !disk(x, y, 21.0, C, 5.0)
                    && !disk(x, y, 42.0, C, 5.0)
            }),
        },
        Sample {
            id: "triangle",
            prompt: "puff it up into a bigger blob",
            mask: build(|x, y| {
                let (xf, yf) = (x as f64, y as f64);
                (12.0..=52.0).contains(&yf) && (xf - C).abs() <= (yf - 12.0) * 0.55
            }),
        },
        Sample {
            id: "window_three_holes",
            prompt: "a slim window frame",
            mask: build(|x, y| {
                rect(x, y, 8, 56, 14, 50)
                    && !rect(x, y, 13, 24, 20, 44)
                    && !rect(x, y, 27, 37, 20, 44)
                    && !rect(x, y, 40, 51, 20, 44)
            }),
        },
        Sample {
            id: "peanut",
            prompt: "a bean with a ripple",
            mask: build(|x, y| disk(x, y, 22.0, C, 13.0) || disk(x, y, 42.0, C, 13.0)),
        },
    ]
}

/// Writes `sources/<id>.png` and `prompts/<id>.txt` under `dir`.
pub fn write_samples(dir: &Path) -> Result<()> {
    let (sources, prompts) = (dir.join("sources"), dir.join("prompts"));
    for d in [&sources, &prompts] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples() {
        save_mask(&s.mask, sources.join(format!("{}.png", s.id)))?;
        let p = prompts.join(format!("{}.txt", s.id));
        std::fs::write(&p, format!("{}\n", s.prompt)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
