//! Binary masks, probability maps and their file I/O.
//!
//! Mask files are 8-bit single-channel images: 0 is background, 255 is
//! foreground. On load any value `>= 128` counts as foreground so that
//! anti-aliased edges binarize predictably.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, ImageReader, Luma};

use crate::error::{Error, Result};

/// Binarization threshold applied to 8-bit grayscale input.
pub const LOAD_THRESHOLD: u8 = 128;

/// A `width x height` grid of `{0, 1}` values stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    /// All-background mask.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![0; width * height],
        })
    }

    /// Builds a mask from row-major data; any non-zero value becomes 1.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::param(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false: masks have at least one pixel.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    /// Value at signed coordinates; out-of-frame reads as background.
    #[inline]
    pub fn get_or_bg(&self, x: isize, y: isize) -> bool {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            false
        } else {
            self.get(x as usize, y as usize)
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    /// Mean position of foreground pixels, in pixel-center coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Values as `0.0` / `1.0`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
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

    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        check_dims(w, h)?;
        let data = img
            .as_raw()
            .iter()
            .map(|&v| u8::from(v >= LOAD_THRESHOLD))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

/// A `width x height` grid of real values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::param(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_vec(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// `1 - p` elementwise.
    pub fn complement(&self) -> ProbMap {
        ProbMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// 8-bit grayscale normalized by 255.
    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::from_vec(img.width() as usize, img.height() as usize, data)
    }
}

impl From<&BinaryMask> for ProbMap {
    fn from(mask: &BinaryMask) -> Self {
        ProbMap {
            width: mask.width,
            height: mask.height,
            data: mask.to_f64(),
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions { width, height });
    }
    Ok(())
}

pub(crate) fn read_gray(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidDimensions {
            width: img.width() as usize,
            height: img.height() as usize,
        });
    }
    Ok(img.to_luma8())
}

/// Loads a PNG or binary PGM and binarizes it at [`LOAD_THRESHOLD`].
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    BinaryMask::from_gray_image(&read_gray(path.as_ref())?)
}

/// Loads an 8-bit grayscale prediction map, normalized to `[0, 1]`.
pub fn load_prob_map(path: impl AsRef<Path>) -> Result<ProbMap> {
    ProbMap::from_gray_image(&read_gray(path.as_ref())?)
}

/// PNG bytes of `img`. The encoder is deterministic for a given image.
pub(crate) fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Vec<u8>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

/// Writes `mask` as an 8-bit grayscale PNG with 1 -> 255.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(&mask.to_gray_image())).map_err(|e| Error::io(path, e))
}

pub fn invert(mask: &BinaryMask) -> BinaryMask {
    BinaryMask {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|&v| 1 - v).collect(),
    }
}

/// Pixels strictly above `t` become foreground.
pub fn threshold(p: &ProbMap, t: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param(format!("threshold {t} outside [0, 1]")));
    }
    Ok(BinaryMask {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|&v| u8::from(v > t)).collect(),
    })
}

/// Intersection over union. Two empty masks agree vacuously and score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x & y);
        union += usize::from(x | y);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
