//! Segmentation quality measures for a probability map against a binary
//! ground truth: MAE, max F1 over a threshold grid, weighted F-beta,
//! S-measure and E-measure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{load_mask, load_prob_map, BinaryMask, ProbMap};

/// `np.spacing(1)`, the guard constant of the reference implementations.
const EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EMeasureMode {
    /// Binarize at `min(2 * mean(pred), 1)`.
    Adaptive,
    /// Maximum over the threshold grid.
    MaxOverThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub threshold_levels: usize,
    pub beta_sq_weighted: f64,
    pub s_alpha: f64,
    pub gaussian_sigma: f64,
    /// Side of the square Gaussian kernel; odd.
    pub gaussian_kernel: usize,
    pub e_measure_mode: EMeasureMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            threshold_levels: 256,
            beta_sq_weighted: 1.0,
            s_alpha: 0.5,
            gaussian_sigma: 5.0,
            gaussian_kernel: 7,
            e_measure_mode: EMeasureMode::Adaptive,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold_levels < 2 {
            return Err(Error::param("threshold_levels must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.s_alpha) {
            return Err(Error::param(format!(
                "s_alpha {} outside [0, 1]",
                self.s_alpha
            )));
        }
        if !(self.beta_sq_weighted > 0.0 && self.beta_sq_weighted.is_finite()) {
            return Err(Error::param("beta_sq_weighted must be > 0"));
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::param("gaussian_sigma must be > 0"));
        }
        if self.gaussian_kernel.is_multiple_of(2) {
            return Err(Error::param("gaussian_kernel must be odd"));
        }
        Ok(())
    }

    /// Threshold `k` of the grid `{0, 1/(L-1), ..., 1}`.
    pub fn threshold(&self, k: usize) -> f64 {
        k as f64 / (self.threshold_levels - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub max_f1: f64,
    pub weighted_fbeta: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
}

fn check_dims(pred: &ProbMap, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    Ok(())
}

fn gt_values(gt: &BinaryMask) -> impl Iterator<Item = f64> + '_ {
    gt.data().iter().map(|&v| v as f64)
}

/// Mean absolute difference.
pub fn mae(pred: &ProbMap, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt_values(gt))
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// `2PR / (P + R)`, zero when both vanish.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Number of grid thresholds strictly below `p`, i.e. how many of the
/// binarizations `p > t_k` mark this pixel.
fn levels_below(p: f64, cfg: &MetricConfig) -> usize {
    let l = cfg.threshold_levels;
    let mut k = ((p * (l - 1) as f64).floor().max(0.0) as usize).min(l - 1);
    // settle rounding in the guess against the exact comparisons
    while k < l && p > cfg.threshold(k) {
        k += 1;
    }
    while k > 0 && p <= cfg.threshold(k - 1) {
        k -= 1;
    }
    k
}

/// Per-threshold `(tp, fp)` counts for `pred > t_k`.
fn sweep_counts(pred: &ProbMap, gt: &BinaryMask, cfg: &MetricConfig) -> Vec<(usize, usize)> {
    let l = cfg.threshold_levels;
    let mut fg_hist = vec![0usize; l + 1];
    let mut bg_hist = vec![0usize; l + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let k = levels_below(p, cfg);
        if g != 0 {
            fg_hist[k] += 1;
        } else {
            bg_hist[k] += 1;
        }
    }
    // a pixel counted in bin k is positive for thresholds 0..k
    let mut out = vec![(0, 0); l];
    let (mut tp, mut fp) = (0, 0);
    for k in (0..l).rev() {
        tp += fg_hist[k + 1];
        fp += bg_hist[k + 1];
        out[k] = (tp, fp);
    }
    out
}

/// Maximum F1 over the binarizations `pred > t` on the threshold grid.
pub fn max_f1(pred: &ProbMap, gt: &BinaryMask, cfg: &MetricConfig) -> Result<f64> {
    check_dims(pred, gt)?;
    cfg.validate()?;
    let positives = gt.area();
    if positives == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(sweep_counts(pred, gt, cfg)
        .into_iter()
        .map(|(tp, fp)| f1(tp, fp, positives - tp))
        .fold(0.0, f64::max))
}

/// Exact squared Euclidean distance to the nearest foreground pixel and
/// that pixel's index, by separable lower envelopes of parabolas.
pub fn distance_transform(mask: &BinaryMask) -> (Vec<f64>, Vec<usize>) {
    let (w, h) = mask.dims();
    const INF: f64 = 1e20;
    // columns: distance along y to the nearest foreground row
    let mut col_d = vec![INF; w * h];
    let mut col_i = vec![usize::MAX; w * h];
    let mut f = vec![0.0; w.max(h)];
    let mut d = vec![0.0; w.max(h)];
    let mut arg = vec![0usize; w.max(h)];
    for x in 0..w {
        for (y, fy) in f[..h].iter_mut().enumerate() {
            *fy = if mask.get(x, y) { 0.0 } else { INF };
        }
        envelope(&f[..h], &mut d[..h], &mut arg[..h]);
        for y in 0..h {
            col_d[y * w + x] = d[y];
            col_i[y * w + x] = arg[y] * w + x;
        }
    }
    let mut dist = vec![INF; w * h];
    let mut idx = vec![usize::MAX; w * h];
    for y in 0..h {
        f[..w].copy_from_slice(&col_d[y * w..(y + 1) * w]);
        envelope(&f[..w], &mut d[..w], &mut arg[..w]);
        for x in 0..w {
            dist[y * w + x] = d[x];
            idx[y * w + x] = col_i[y * w + arg[x]];
        }
    }
    (dist, idx)
}

/// 1-D squared distance transform of sampled function `f`, recording the
/// minimizing sample for each output position.
fn envelope(f: &[f64], d: &mut [f64], arg: &mut [usize]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: q dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = (q as f64 - p as f64).powi(2) + f[p];
        arg[q] = p;
    }
}

/// Normalized `size x size` Gaussian with standard deviation `sigma`.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .flat_map(|y| {
            (-r..=r).map(move |x| (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp())
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Correlation with zero padding, same-size output.
fn filter_zero_pad(field: &[f64], w: usize, h: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let yy = y + ky;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in -r..=r {
                    let xx = x + kx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += kernel[((ky + r) as usize) * size + (kx + r) as usize]
                        * field[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Weighted F-beta: errors on the object are smoothed by a Gaussian
/// dependency term, errors off the object weigh more near it.
pub fn weighted_fbeta(pred: &ProbMap, gt: &BinaryMask, cfg: &MetricConfig) -> Result<f64> {
    check_dims(pred, gt)?;
    cfg.validate()?;
    if gt.area() == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let (w, h) = gt.dims();
    let g = gt.data();
    let e: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt_values(gt))
        .map(|(p, v)| (p - v).abs())
        .collect();
    let (dist2, nearest) = distance_transform(gt);
    // off-object pixels take the error of their nearest object pixel
    let et: Vec<f64> = (0..w * h)
        .map(|i| if g[i] != 0 { e[i] } else { e[nearest[i]] })
        .collect();
    let kernel = gaussian_kernel(cfg.gaussian_kernel, cfg.gaussian_sigma);
    let ea = filter_zero_pad(&et, w, h, &kernel, cfg.gaussian_kernel);
    let decay = 0.5f64.ln() / 5.0;
    let (mut fp_w, mut err_fg) = (0.0, 0.0);
    let positives = gt.area() as f64;
    for i in 0..w * h {
        if g[i] != 0 {
            let v = if ea[i] < e[i] { ea[i] } else { e[i] };
            err_fg += v;
        } else {
            let importance = 2.0 - (decay * dist2[i].sqrt()).exp();
            fp_w += e[i] * importance;
        }
    }
    let tp_w = positives - err_fg;
    let r = 1.0 - err_fg / positives;
    let p = tp_w / (EPS + tp_w + fp_w);
    let b2 = cfg.beta_sq_weighted;
    Ok(((1.0 + b2) * r * p / (EPS + r + b2 * p)).clamp(0.0, 1.0))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero below two samples.
fn std_ddof1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_ddof1(values) + EPS)
}

/// SSIM-style similarity of one quadrant.
fn quadrant_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let (x, y) = (mean(pred), mean(gt));
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / denom;
    let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / denom;
    let sxy = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - x) * (g - y))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point: rounded foreground centroid plus one, as column/row counts.
fn split_point(gt: &BinaryMask) -> (usize, usize) {
    let (w, h) = gt.dims();
    let (x, y) = match gt.centroid() {
        Some((cx, cy)) => (cx.round_ties_even(), cy.round_ties_even()),
        None => (
            (w as f64 / 2.0).round_ties_even(),
            (h as f64 / 2.0).round_ties_even(),
        ),
    };
    ((x as usize + 1).min(w), (y as usize + 1).min(h))
}

fn region_score(pred: &ProbMap, gt: &BinaryMask) -> f64 {
    let (w, h) = gt.dims();
    let (sx, sy) = split_point(gt);
    let area = (w * h) as f64;
    let quads = [
        (0, sx, 0, sy),
        (sx, w, 0, sy),
        (0, sx, sy, h),
        (sx, w, sy, h),
    ];
    let weights = [
        (sx * sy) as f64 / area,
        (sy * (w - sx)) as f64 / area,
        ((h - sy) * sx) as f64 / area,
    ];
    let w4 = 1.0 - weights[0] - weights[1] - weights[2];
    let mut total = 0.0;
    for (q, &(x0, x1, y0, y1)) in quads.iter().enumerate() {
        let mut p = Vec::with_capacity((x1 - x0) * (y1 - y0));
        let mut g = Vec::with_capacity(p.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred.get(x, y));
                g.push(if gt.get(x, y) { 1.0 } else { 0.0 });
            }
        }
        let wq = if q < 3 { weights[q] } else { w4 };
        total += wq * quadrant_ssim(&p, &g);
    }
    total
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`.
///
/// An all-background ground truth scores `1 - mean(pred)`, an
/// all-foreground one `mean(pred)`.
pub fn s_measure(pred: &ProbMap, gt: &BinaryMask, cfg: &MetricConfig) -> Result<f64> {
    check_dims(pred, gt)?;
    cfg.validate()?;
    let n = gt.len() as f64;
    let y = gt.area() as f64 / n;
    let pm = mean(pred.data());
    if gt.area() == 0 {
        return Ok(1.0 - pm);
    }
    if gt.area() == gt.len() {
        return Ok(pm);
    }
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g != 0 {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let object = y * s_object(&fg) + (1.0 - y) * s_object(&bg);
    let region = region_score(pred, gt);
    let a = cfg.s_alpha;
    Ok((a * object + (1.0 - a) * region).clamp(0.0, 1.0))
}

/// Enhanced alignment of a binarized prediction with `gt`, averaged over pixels.
pub fn enhanced_alignment(fm: &[bool], gt: &BinaryMask) -> f64 {
    let n = fm.len() as f64;
    let g = gt.data();
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    if gt.area() == 0 {
        return fm.iter().map(|&b| 1.0 - on(b)).sum::<f64>() / n;
    }
    if gt.area() == gt.len() {
        return fm.iter().map(|&b| on(b)).sum::<f64>() / n;
    }
    let mf = fm.iter().map(|&b| on(b)).sum::<f64>() / n;
    let mg = gt.area() as f64 / n;
    let mut sum = 0.0;
    for (&b, &v) in fm.iter().zip(g) {
        let af = on(b) - mf;
        let ag = v as f64 - mg;
        let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
        sum += (align + 1.0).powi(2) / 4.0;
    }
    sum / n
}

/// Enhanced-alignment measure, binarized per [`MetricConfig::e_measure_mode`].
pub fn e_measure(pred: &ProbMap, gt: &BinaryMask, cfg: &MetricConfig) -> Result<f64> {
    check_dims(pred, gt)?;
    cfg.validate()?;
    let binarize =
        |t: f64| -> Vec<bool> { pred.data().iter().map(|&p| p >= t && p > 0.0).collect() };
    Ok(match cfg.e_measure_mode {
        EMeasureMode::Adaptive => {
            let t = (2.0 * mean(pred.data())).min(1.0);
            enhanced_alignment(&binarize(t), gt)
        }
        EMeasureMode::MaxOverThresholds => (0..cfg.threshold_levels)
            .map(|k| enhanced_alignment(&binarize(cfg.threshold(k)), gt))
            .fold(0.0, f64::max),
    })
}

/// All five measures.
pub fn evaluate(pred: &ProbMap, gt: &BinaryMask, cfg: &MetricConfig) -> Result<MetricReport> {
    Ok(MetricReport {
        max_f1: max_f1(pred, gt, cfg)?,
        weighted_fbeta: weighted_fbeta(pred, gt, cfg)?,
        mae: mae(pred, gt)?,
        s_measure: s_measure(pred, gt, cfg)?,
        e_measure: e_measure(pred, gt, cfg)?,
    })
}

/// Field-wise mean of `reports`.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricReport {
        max_f1: sum(|r| r.max_f1),
        weighted_fbeta: sum(|r| r.weighted_fbeta),
        mae: sum(|r| r.mae),
        s_measure: sum(|r| r.s_measure),
        e_measure: sum(|r| r.e_measure),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub config: MetricConfig,
    pub images: Vec<ImageRow>,
    pub mean: Option<MetricReport>,
    pub skipped: Vec<SkippedImage>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm"];

/// Image files in `dir` keyed by file stem.
fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Evaluates every ground truth in `gt_dir` against the prediction with the
/// same stem in `pred_dir`. Missing or failing pairs are listed as skipped.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, cfg: &MetricConfig) -> Result<BatchReport> {
    cfg.validate()?;
    let gts = images_by_stem(gt_dir)?;
    let preds = images_by_stem(pred_dir)?;
    if gts.is_empty() {
        return Err(Error::param(format!(
            "no ground-truth images in {}",
            gt_dir.display()
        )));
    }
    let results: Vec<(String, Result<MetricReport>)> = gts
        .par_iter()
        .map(|(id, gt_path)| {
            let r = match preds.get(id) {
                None => Err(Error::param("no prediction with this stem")),
                Some(p) => {
                    load_prob_map(p).and_then(|pred| evaluate(&pred, &load_mask(gt_path)?, cfg))
                }
            };
            (id.clone(), r)
        })
        .collect();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(report) => images.push(ImageRow { id, report }),
            Err(e) => skipped.push(SkippedImage {
                id,
                reason: e.to_string(),
            }),
        }
    }
    let mean = mean_report(&images.iter().map(|r| r.report).collect::<Vec<_>>());
    Ok(BatchReport {
        config: *cfg,
        images,
        mean,
        skipped,
    })
}

/// Markdown table with one row per image and a final mean row.
pub fn render_markdown(report: &BatchReport) -> String {
    let mut s = String::from(
        "| image | maxF1 ↑ | Fβw ↑ | M ↓ | Sα ↑ | Eφ ↑ |\n|---|---|---|---|---|---|\n",
    );
    let row = |name: &str, r: &MetricReport| {
        format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            name, r.max_f1, r.weighted_fbeta, r.mae, r.s_measure, r.e_measure
        )
    };
    for r in &report.images {
        s.push_str(&row(&r.id, &r.report));
    }
    if let Some(m) = &report.mean {
        s.push_str(&row("**mean**", m));
    }
    s
}
