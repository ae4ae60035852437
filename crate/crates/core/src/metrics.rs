//! Image quality measures: PSNR against a reference, MSCN natural-scene
//! statistics, a 36-feature no-reference descriptor with a pluggable scorer,
//! and a block-based perceptual distortion score.
//!
//! Every measure works on 601 luminance in the 0–255 range.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, ImageBatch};
use crate::tensor::reflect_index;

pub const PSNR_CAP: f64 = 100.0;
pub const NR_FEATURES: usize = 36;
pub const NR_MIN_SIZE: usize = 32;
pub const PIQE_MIN_SIZE: usize = 64;

const GAUSS_RADIUS: usize = 3;
const GAUSS_SIGMA: f64 = 7.0 / 6.0;

/// A single-channel image in 0–255 units.
#[derive(Clone, Debug, PartialEq)]
pub struct Luma {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Luma {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("{} samples for a {h}×{w} plane", data.len())));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Rotate by 180°.
    pub fn rotated(&self) -> Luma {
        Luma { h: self.h, w: self.w, data: self.data.iter().rev().copied().collect() }
    }

    /// 2×2 box average, dropping an odd trailing row or column.
    pub fn half(&self) -> Luma {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * y, 2 * x) + self.at(2 * y, 2 * x + 1) + self.at(2 * y + 1, 2 * x) + self.at(2 * y + 1, 2 * x + 1);
                data.push(s / 4.0);
            }
        }
        Luma { h, w, data }
    }
}

/// Luminance of image `i` of a batch.
pub fn luminance(batch: &ImageBatch, i: usize) -> Luma {
    let (_, c, h, w) = batch.dims();
    let px = batch.tensor().item_slice(i);
    let to255 = |v: f32| (v as f64 + 1.0) * 127.5;
    let data = if c >= 3 {
        (0..h * w)
            .map(|k| {
                let (r, g, b) = (to255(px[k]), to255(px[h * w + k]), to255(px[2 * h * w + k]));
                0.299 * r + 0.587 * g + 0.114 * b
            })
            .collect()
    } else {
        px[..h * w].iter().map(|&v| to255(v)).collect()
    };
    Luma { h, w, data }
}

fn single(batch: &ImageBatch) -> Result<Luma> {
    if batch.len() != 1 {
        return Err(Error::Invalid(format!("expected one image, got a batch of {}", batch.len())));
    }
    Ok(luminance(batch, 0))
}

/// PSNR in dB between two luminance planes, peak 255.
pub fn psnr_luma(test: &Luma, reference: &Luma) -> Result<f64> {
    if (test.h, test.w) != (reference.h, reference.w) {
        return Err(Error::Shape(format!(
            "psnr of {}×{} against {}×{}",
            test.h, test.w, reference.h, reference.w
        )));
    }
    let mse = test.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / test.data.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR in dB between two batches of identical shape, over all images.
pub fn psnr(test: &ImageBatch, reference: &ImageBatch) -> Result<f64> {
    if test.dims() != reference.dims() {
        return Err(Error::Shape(format!("psnr of {:?} against {:?}", test.dims(), reference.dims())));
    }
    let n = test.len();
    let cat = |b: &ImageBatch| {
        let planes: Vec<Luma> = (0..n).map(|i| luminance(b, i)).collect();
        Luma { h: planes[0].h * n, w: planes[0].w, data: planes.into_iter().flat_map(|p| p.data).collect() }
    };
    psnr_luma(&cat(test), &cat(reference))
}

fn gaussian_window() -> [f64; 2 * GAUSS_RADIUS + 1] {
    let mut g = [0.0; 2 * GAUSS_RADIUS + 1];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - GAUSS_RADIUS as f64;
        *v = (-d * d / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian blur with reflected borders.
fn smooth(p: &Luma) -> Luma {
    let g = gaussian_window();
    let r = GAUSS_RADIUS as isize;
    let mut rows = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            rows[y * p.w + x] =
                g.iter().enumerate().map(|(k, wk)| wk * p.at(y, reflect_index(x as isize + k as isize - r, p.w))).sum();
        }
    }
    let mut out = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = g
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * rows[reflect_index(y as isize + k as isize - r, p.h) * p.w + x])
                .sum();
        }
    }
    Luma { h: p.h, w: p.w, data: out }
}

/// Mean-subtracted contrast-normalized coefficients `(I − μ)/(σ + 1)`.
pub fn mscn_luma(p: &Luma) -> Luma {
    let mu = smooth(p);
    let sq = Luma { h: p.h, w: p.w, data: p.data.iter().map(|v| v * v).collect() };
    let ex2 = smooth(&sq);
    let data = p
        .data
        .iter()
        .zip(&mu.data)
        .zip(&ex2.data)
        .map(|((&v, &m), &e)| (v - m) / ((e - m * m).max(0.0).sqrt() + 1.0))
        .collect();
    Luma { h: p.h, w: p.w, data }
}

/// MSCN map of a single-channel image.
pub fn mscn(image: &ImageBatch) -> Result<Luma> {
    if image.channels() != 1 {
        return Err(Error::Invalid(format!("mscn expects one channel, got {}", image.channels())));
    }
    Ok(mscn_luma(&single(image)?))
}

/// `r(α) = Γ(2/α)² / (Γ(1/α)·Γ(3/α))`, increasing from 0 to 3/4.
fn gamma_ratio(alpha: f64) -> f64 {
    (2.0 * libm::lgamma(2.0 / alpha) - libm::lgamma(1.0 / alpha) - libm::lgamma(3.0 / alpha)).exp()
}

const ALPHA_RANGE: (f64, f64) = (0.05, 20.0);

fn solve_shape(target: f64) -> f64 {
    let (mut lo, mut hi) = (ALPHA_RANGE.0.ln(), ALPHA_RANGE.1.ln());
    if target <= gamma_ratio(ALPHA_RANGE.0) {
        return ALPHA_RANGE.0;
    }
    if target >= gamma_ratio(ALPHA_RANGE.1) {
        return ALPHA_RANGE.1;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if gamma_ratio(mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Moment-matched generalized Gaussian: `(shape, variance)`.
pub fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var <= 0.0 {
        return (0.0, 0.0);
    }
    (solve_shape(abs * abs / var), var)
}

/// Moment-matched asymmetric generalized Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggd {
    pub shape: f64,
    pub mean: f64,
    pub left_var: f64,
    pub right_var: f64,
}

pub fn fit_aggd(x: &[f64]) -> Aggd {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    let left_var = if ln > 0 { ls / ln as f64 } else { 0.0 };
    let right_var = if rn > 0 { rs / rn as f64 } else { 0.0 };
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    if ms <= 0.0 {
        return Aggd { shape: 0.0, mean: 0.0, left_var, right_var };
    }
    let abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let g = if left_var > 0.0 && right_var > 0.0 { (left_var / right_var).sqrt() } else { 1.0 };
    let r = abs * abs / ms * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let shape = solve_shape(r);
    let l1 = libm::lgamma(1.0 / shape);
    let spread = (l1 - libm::lgamma(3.0 / shape)).exp().sqrt();
    let mean = (right_var.sqrt() - left_var.sqrt()) * spread * (libm::lgamma(2.0 / shape) - l1).exp();
    Aggd { shape, mean, left_var, right_var }
}

/// Neighbour products of an MSCN map: horizontal, vertical, and the two
/// diagonals.
fn pair_products(m: &Luma) -> [Vec<f64>; 4] {
    let (h, w) = (m.h, m.w);
    let mut hz = Vec::with_capacity(h * (w - 1));
    let mut vt = Vec::with_capacity((h - 1) * w);
    let mut d1 = Vec::with_capacity((h - 1) * (w - 1));
    let mut d2 = Vec::with_capacity((h - 1) * (w - 1));
    for y in 0..h {
        for x in 0..w {
            let v = m.at(y, x);
            if x + 1 < w {
                hz.push(v * m.at(y, x + 1));
            }
            if y + 1 < h {
                vt.push(v * m.at(y + 1, x));
                if x + 1 < w {
                    d1.push(v * m.at(y + 1, x + 1));
                }
                if x > 0 {
                    d2.push(v * m.at(y + 1, x - 1));
                }
            }
        }
    }
    [hz, vt, d1, d2]
}

fn scale_features(p: &Luma, out: &mut Vec<f64>) {
    let m = mscn_luma(p);
    let (shape, var) = fit_ggd(&m.data);
    out.extend([shape, var]);
    for prod in pair_products(&m) {
        let a = fit_aggd(&prod);
        out.extend([a.shape, a.mean, a.left_var, a.right_var]);
    }
}

/// 36-dimensional natural-scene-statistics descriptor of a luminance plane:
/// 18 values at full and at half resolution.
pub fn nr_features_luma(p: &Luma) -> Result<Vec<f64>> {
    if p.h < NR_MIN_SIZE || p.w < NR_MIN_SIZE {
        return Err(Error::Invalid(format!(
            "no-reference features need at least {NR_MIN_SIZE}×{NR_MIN_SIZE}, got {}×{}",
            p.h, p.w
        )));
    }
    let mut f = Vec::with_capacity(NR_FEATURES);
    scale_features(p, &mut f);
    scale_features(&p.half(), &mut f);
    Ok(f)
}

pub fn nr_features(image: &ImageBatch) -> Result<Vec<f64>> {
    nr_features_luma(&single(image)?)
}

/// Statistics of a pristine corpus for the Mahalanobis fallback scorer.
///
/// Features are standardized per dimension and the correlation matrix is
/// ridge-regularized before inversion, since small corpora rarely give a
/// well-conditioned 36×36 covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PristineStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Row-major inverse of the regularized correlation matrix.
    pub precision: Vec<f64>,
    /// Score per unit of root-mean-square standardized distance.
    pub scale: f64,
}

pub const PRISTINE_RIDGE: f64 = 0.05;
pub const PRISTINE_SCALE: f64 = 10.0;

impl PristineStats {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Invalid(format!("pristine statistics need at least 2 samples, got {n}")));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("pristine samples must share one nonzero length".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let v = samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64;
                v.sqrt().max(1e-12)
            })
            .collect();
        let z = DMatrix::from_fn(n, d, |i, j| (samples[i][j] - mean[j]) / std[j]);
        let corr = z.transpose() * &z / (n - 1) as f64 + DMatrix::identity(d, d) * PRISTINE_RIDGE;
        let inv = corr.try_inverse().ok_or_else(|| Error::Data("singular pristine correlation".into()))?;
        let precision = (0..d * d).map(|k| inv[(k / d, k % d)]).collect();
        Ok(Self { mean, std, precision, scale: PRISTINE_SCALE })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Root-mean-square Mahalanobis distance (squared distance over `dim`,
    /// then square root), so in-distribution samples land near 1.
    pub fn distance(&self, features: &[f64]) -> Result<f64> {
        let d = self.dim();
        if features.len() != d {
            return Err(Error::Shape(format!("{} features for a {d}-feature model", features.len())));
        }
        let z = DVector::from_fn(d, |j, _| (features[j] - self.mean[j]) / self.std[j]);
        let p = DMatrix::from_row_slice(d, d, &self.precision);
        let q = (z.transpose() * p * &z)[(0, 0)];
        Ok((q.max(0.0) / d as f64).sqrt())
    }
}

/// A no-reference scoring model: an external linear regressor or pristine
/// statistics. Serialized as JSON tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NrModel {
    Linear { weights: Vec<f64>, bias: f64 },
    Pristine(PristineStats),
}

impl NrModel {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Pristine statistics of `images` (each a single image).
    pub fn from_pristine(images: &[ImageBatch]) -> Result<Self> {
        let feats = images.iter().map(nr_features).collect::<Result<Vec<_>>>()?;
        Ok(NrModel::Pristine(PristineStats::fit(&feats)?))
    }

    /// Pristine statistics of [`BUILTIN_PRISTINE_COUNT`] textured synthetic
    /// scenes, for when no model file is supplied.
    pub fn builtin() -> Result<Self> {
        let images: Vec<ImageBatch> = (0..BUILTIN_PRISTINE_COUNT)
            .map(|i| crate::synth::natural(BUILTIN_PRISTINE_SEED + i, BUILTIN_PRISTINE_SIZE, 3))
            .collect();
        Self::from_pristine(&images)
    }
}

/// Quality score in [0, 100], lower is better.
pub fn nr_score(features: &[f64], model: Option<&NrModel>) -> Result<f64> {
    let raw = match model {
        None => return Err(Error::Invalid("no-reference scoring needs a model or pristine statistics".into())),
        Some(NrModel::Linear { weights, bias }) => {
            if weights.len() != features.len() {
                return Err(Error::Shape(format!("{} features for {} weights", features.len(), weights.len())));
            }
            bias + weights.iter().zip(features).map(|(w, f)| w * f).sum::<f64>()
        }
        Some(NrModel::Pristine(stats)) => stats.scale * stats.distance(features)?,
    };
    if raw.is_nan() {
        return Err(Error::Data("no-reference score is NaN".into()));
    }
    Ok(raw.clamp(0.0, 100.0))
}

pub const PIQE_BLOCK: usize = 16;

pub const BUILTIN_PRISTINE_COUNT: u64 = 64;
pub const BUILTIN_PRISTINE_SEED: u64 = 1000;
pub const BUILTIN_PRISTINE_SIZE: usize = 128;
const PIQE_ACTIVITY: f64 = 0.1;
const PIQE_SEGMENT: usize = 6;
const PIQE_SEGMENT_STD: f64 = 0.1;
const PIQE_C: f64 = 1.0;

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Block-based perceptual distortion score in [0, 100], higher is worse.
///
/// The MSCN map is cut into 16×16 blocks. A block is active when its MSCN
/// variance exceeds 0.1. An active block is distorted when one of its edges
/// holds a 6-pixel segment with std below 0.1 (blocking or blur), scoring 1,
/// or when its center and surround spreads agree so closely that its spread
/// exceeds twice their relative difference (noise), scoring its variance.
/// The score is `100·(Σ distortion + 1)/(active + 1)`.
pub fn piqe_luma(p: &Luma) -> Result<f64> {
    if p.h < PIQE_MIN_SIZE || p.w < PIQE_MIN_SIZE {
        return Err(Error::Invalid(format!(
            "piqe needs at least {PIQE_MIN_SIZE}×{PIQE_MIN_SIZE}, got {}×{}",
            p.h, p.w
        )));
    }
    let m = mscn_luma(p);
    let (mut active, mut distortion) = (0usize, 0.0);
    let b = PIQE_BLOCK;
    for by in 0..p.h / b {
        for bx in 0..p.w / b {
            let (y0, x0) = (by * b, bx * b);
            let px = |y: usize, x: usize| m.at(y0 + y, x0 + x);
            let all = (0..b * b).map(|k| px(k / b, k % b));
            let (_, sd) = mean_std(all);
            let var = sd * sd;
            if var <= PIQE_ACTIVITY {
                continue;
            }
            active += 1;

            let edges: [Vec<f64>; 4] = [
                (0..b).map(|x| px(0, x)).collect(),
                (0..b).map(|x| px(b - 1, x)).collect(),
                (0..b).map(|y| px(y, 0)).collect(),
                (0..b).map(|y| px(y, b - 1)).collect(),
            ];
            let noticeable = edges.iter().any(|e| {
                e.windows(PIQE_SEGMENT).any(|seg| mean_std(seg.iter().copied()).1 < PIQE_SEGMENT_STD)
            });

            let (q0, q1) = (b / 4, b - b / 4);
            let inner = |y: usize, x: usize| (q0..q1).contains(&y) && (q0..q1).contains(&x);
            let cen = (0..b * b).filter(|&k| inner(k / b, k % b)).map(|k| px(k / b, k % b));
            let sur = (0..b * b).filter(|&k| !inner(k / b, k % b)).map(|k| px(k / b, k % b));
            let (sc, ss) = (mean_std(cen).1, mean_std(sur).1);
            let beta = (sc - ss).abs() / sc.max(ss).max(1e-12);
            let noisy = sd > 2.0 * beta;

            distortion += match (noticeable, noisy) {
                (true, _) => 1.0,
                (false, true) => var.min(1.0),
                (false, false) => 0.0,
            };
        }
    }
    Ok((100.0 * (distortion + PIQE_C) / (active as f64 + PIQE_C)).clamp(0.0, 100.0))
}

pub fn piqe_score(image: &ImageBatch) -> Result<f64> {
    piqe_luma(&single(image)?)
}

/// Per-image metric record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRecord {
    pub path: String,
    pub psnr: Option<f64>,
    pub nr_features: Vec<f64>,
    pub nr_score: Option<f64>,
    pub piqe: Option<f64>,
}

/// Means over the records where each value is present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub psnr: Option<f64>,
    pub nr_score: Option<f64>,
    pub piqe: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub records: Vec<ImageRecord>,
}

pub fn evaluate_image(
    path: &str,
    test: &ImageBatch,
    reference: Option<&ImageBatch>,
    model: Option<&NrModel>,
) -> Result<ImageRecord> {
    let luma = single(test)?;
    let psnr = reference.map(|r| psnr_luma(&luma, &single(r)?)).transpose()?;
    let nr_features = nr_features_luma(&luma)?;
    let nr_score = model.map(|m| nr_score(&nr_features, Some(m))).transpose()?;
    let piqe = if luma.h >= PIQE_MIN_SIZE && luma.w >= PIQE_MIN_SIZE { Some(piqe_luma(&luma)?) } else { None };
    Ok(ImageRecord { path: path.to_string(), psnr, nr_features, nr_score, piqe })
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    /// Score every image in `test_dir`; references are matched by file name.
    pub fn from_dirs(test_dir: &Path, ref_dir: Option<&Path>, model: Option<&NrModel>) -> Result<Self> {
        let mut records = Vec::new();
        for path in imaging::list_images(test_dir)? {
            let test = imaging::load_image(&path, 3, None)?;
            let reference = match ref_dir {
                Some(dir) => {
                    let name = path.file_name().expect("listed files have names");
                    let rp: PathBuf = dir.join(name);
                    if !rp.is_file() {
                        return Err(Error::Data(format!("no reference {} for {}", rp.display(), path.display())));
                    }
                    Some(imaging::load_image(&rp, 3, None)?)
                }
                None => None,
            };
            records.push(evaluate_image(&path.display().to_string(), &test, reference.as_ref(), model)?);
        }
        Ok(Self { records })
    }

    pub fn aggregate(&self) -> Aggregate {
        Aggregate {
            psnr: mean_of(self.records.iter().map(|r| r.psnr)),
            nr_score: mean_of(self.records.iter().map(|r| r.nr_score)),
            piqe: mean_of(self.records.iter().map(|r| r.piqe)),
        }
    }

    /// `path,psnr,nr_score,piqe` rows plus a trailing `mean` row; absent
    /// values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,psnr,nr_score,piqe\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.path, cell(r.psnr), cell(r.nr_score), cell(r.piqe));
        }
        let a = self.aggregate();
        let _ = writeln!(out, "mean,{},{},{}", cell(a.psnr), cell(a.nr_score), cell(a.piqe));
        out
    }

    /// `[{"path": .., "features": [..36]}, ..]`.
    pub fn features_json(&self) -> String {
        let items: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|r| serde_json::json!({ "path": r.path, "features": r.nr_features }))
            .collect();
        serde_json::to_string_pretty(&items).expect("features serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn flat(h: usize, w: usize, v: f64) -> Luma {
        Luma::new(h, w, vec![v; h * w]).unwrap()
    }

    fn noise(seed: u64, h: usize, w: usize, mean: f64, sd: f64) -> Luma {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| mean + sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        Luma::new(h, w, data).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = flat(8, 8, 100.0);
        assert_eq!(psnr_luma(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr_luma(&flat(8, 8, 101.0), &a).unwrap() - 10.0 * 65025f64.log10()).abs() < 1e-12);
        assert!(psnr_luma(&flat(8, 8, 255.0), &flat(8, 8, 0.0)).unwrap().abs() < 1e-12);
        assert!(psnr_luma(&flat(8, 8, 0.0), &flat(4, 8, 0.0)).is_err());
    }

    #[test]
    fn psnr_on_batches_uses_luminance() {
        let gray = |v: f32| ImageBatch::new(Tensor::full(&[1, 3, 4, 4], v)).unwrap();
        // one 8-bit step apart
        let p = psnr(&gray(100.0 / 127.5 - 1.0), &gray(101.0 / 127.5 - 1.0)).unwrap();
        assert!((p - 48.1308).abs() < 1e-3, "{p}");
        assert!(psnr(&gray(0.0), &ImageBatch::zeros(1, 1, 4, 4)).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_noise() {
        let clean = noise(1, 32, 32, 128.0, 20.0);
        let mut last = f64::INFINITY;
        for (k, sd) in [1.0, 2.0, 4.0, 8.0, 16.0].into_iter().enumerate() {
            let n = noise(10 + k as u64, 32, 32, 0.0, sd);
            let test = Luma::new(32, 32, clean.data.iter().zip(&n.data).map(|(a, b)| a + b).collect()).unwrap();
            let p = psnr_luma(&test, &clean).unwrap();
            assert_eq!(p, psnr_luma(&clean, &test).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn mscn_of_flat_is_zero_and_finite_elsewhere() {
        assert!(mscn_luma(&flat(16, 16, 77.0)).data.iter().all(|v| v.abs() < 1e-9));
        let m = mscn_luma(&noise(2, 40, 40, 128.0, 30.0));
        assert!(m.data.iter().all(|v| v.is_finite()));
        let mean = m.data.iter().sum::<f64>() / m.data.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
        let one = ImageBatch::new(Tensor::zeros(&[1, 1, 8, 8])).unwrap();
        assert!(mscn(&one).is_ok());
        assert!(mscn(&ImageBatch::zeros(1, 3, 8, 8)).is_err());
    }

    #[test]
    fn shape_fits_recover_known_laws() {
        let g = noise(3, 1, 200_000, 0.0, 1.0);
        let (shape, var) = fit_ggd(&g.data);
        assert!((shape - 2.0).abs() < 0.05 && (var - 1.0).abs() < 0.02, "{shape} {var}");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lap: Vec<f64> = (0..200_000)
            .map(|_| {
                let e: f64 = rand_distr::Exp1.sample(&mut rng);
                if rand::Rng::random_bool(&mut rng, 0.5) { e } else { -e }
            })
            .collect();
        assert!((fit_ggd(&lap).0 - 1.0).abs() < 0.05);
        let a = fit_aggd(&g.data);
        assert!((a.shape - 2.0).abs() < 0.05 && a.mean.abs() < 0.02);
        assert!((a.left_var - 1.0).abs() < 0.03 && (a.right_var - 1.0).abs() < 0.03);
        // one-sided samples lean the mean positive
        let pos: Vec<f64> = g.data.iter().map(|v| v.abs()).collect();
        assert!(fit_aggd(&pos).mean > 0.0);
        assert_eq!(fit_aggd(&[0.0; 8]).shape, 0.0);
    }

    #[test]
    fn gaussian_noise_mscn_shape() {
        // Below the +1 stabilizer MSCN is plain mean removal and keeps the
        // Gaussian shape.
        let f = nr_features_luma(&noise(5, 96, 96, 128.0, 0.1)).unwrap();
        assert_eq!(f.len(), NR_FEATURES);
        assert!((f[0] - 2.0).abs() < 0.3, "shape {}", f[0]);
        // At unit variance the local normalization bounds |I − μ|/σ, which
        // lightens the tails: the shape lands between 2 and the bounded limit 3.
        let f = nr_features_luma(&noise(5, 96, 96, 128.0, 1.0)).unwrap();
        assert!(f[0] > 2.0 && f[0] < 3.0, "shape {}", f[0]);
    }

    #[test]
    fn blur_shrinks_mscn_variance() {
        let sharp = crate::synth::natural(9, 64, 1);
        let k = crate::blursynth::BlurKernel::uniform(9).unwrap();
        let blurred = crate::blursynth::apply_blur(&sharp, &k).unwrap();
        let (fs, fb) = (nr_features(&sharp).unwrap(), nr_features(&blurred).unwrap());
        // variance of the MSCN fit at both scales
        for j in [1, 19] {
            assert!(fb[j] < fs[j], "feature {j}: {} vs {}", fb[j], fs[j]);
        }
    }

    #[test]
    fn features_survive_half_turn() {
        let p = noise(6, 64, 48, 128.0, 25.0);
        let (a, b) = (nr_features_luma(&p).unwrap(), nr_features_luma(&p.rotated()).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        assert!(nr_features_luma(&flat(31, 64, 0.0)).is_err());
    }

    #[test]
    fn nr_score_contracts() {
        let samples: Vec<Vec<f64>> = (0..20).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64).collect()).collect();
        let stats = PristineStats::fit(&samples).unwrap();
        let model = NrModel::Pristine(stats.clone());
        assert_eq!(nr_score(&stats.mean, Some(&model)).unwrap(), 0.0);
        assert!(nr_score(&[0.0; 4], None).is_err());
        let linear = NrModel::Linear { weights: vec![1.0, -1.0], bias: -5.0 };
        assert_eq!(nr_score(&[1.0, 2.0], Some(&linear)).unwrap(), 0.0);
        assert_eq!(nr_score(&[500.0, 2.0], Some(&linear)).unwrap(), 100.0);
        assert!(nr_score(&[1.0], Some(&linear)).is_err());
        let json = serde_json::to_string(&model).unwrap();
        assert!(json.contains("\"kind\":\"pristine\""));
        assert_eq!(serde_json::from_str::<NrModel>(&json).unwrap(), model);
        assert!(PristineStats::fit(&samples[..1]).is_err());
    }

    #[test]
    fn piqe_bounds_and_noise_order() {
        let clean = luminance(&crate::synth::natural(3, 96, 1), 0);
        let grain = noise(7, 96, 96, 0.0, 30.0);
        let noisy = Luma::new(96, 96, clean.data.iter().zip(&grain.data).map(|(a, b)| (a + b).clamp(0.0, 255.0)).collect()).unwrap();
        let (c, n) = (piqe_luma(&clean).unwrap(), piqe_luma(&noisy).unwrap());
        assert!((0.0..=100.0).contains(&c) && (0.0..=100.0).contains(&n));
        assert!(n > c, "noise {n} vs clean {c}");
        assert_eq!(piqe_luma(&clean).unwrap(), c);
        assert!(piqe_luma(&flat(63, 64, 0.0)).is_err());
    }

    #[test]
    fn report_csv_and_aggregate() {
        let a = crate::synth::natural(1, 64, 3);
        let b = crate::synth::natural(2, 64, 3);
        let r1 = evaluate_image("a.png", &a, Some(&b), None).unwrap();
        let r2 = evaluate_image("b.png", &b, None, None).unwrap();
        assert!(r1.psnr.is_some() && r2.psnr.is_none() && r1.nr_score.is_none());
        let report = MetricReport { records: vec![r1.clone(), r2] };
        let agg = report.aggregate();
        assert_eq!(agg.psnr, r1.psnr);
        assert_eq!(agg.nr_score, None);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "path,psnr,nr_score,piqe");
        assert!(lines[2].starts_with("b.png,,,"));
        assert!(lines[3].starts_with("mean,"));
        let json: serde_json::Value = serde_json::from_str(&report.features_json()).unwrap();
        assert_eq!(json[1]["features"].as_array().unwrap().len(), NR_FEATURES);
    }
}
