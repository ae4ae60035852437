//! Random motion-blur kernels and the unpaired blur/sharp corpus.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, ImageBatch};
use crate::tensor::{reflect_index, Tensor};

/// A normalized, non-negative point-spread function on an odd `k×k` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || weights.len() != size * size {
            return Err(Error::Invalid(format!(
                "kernel must be odd-sized and square, got size {size} with {} weights",
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("kernel weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("kernel weights sum to {total}, expected 1")));
        }
        Ok(Self { size, weights })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        if let Some(c) = w.get_mut(size * size / 2) {
            *c = 1.0;
        }
        Self::new(size, w)
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(size, vec![1.0 / (size * size) as f64; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of weights above `threshold`.
    pub fn support(&self, threshold: f64) -> usize {
        self.weights.iter().filter(|&&w| w > threshold).count()
    }
}

/// Sample a motion kernel from a seeded random camera trajectory.
///
/// The camera heading drifts by Gaussian increments and occasionally jumps;
/// the path length is `intensity·(size−1)` pixels, so `intensity = 1` spans
/// the whole grid and `intensity = 0` gives a centered delta.
pub fn sample_kernel(seed: u64, size: usize, intensity: f64) -> Result<BlurKernel> {
    if size % 2 == 0 || !(3..=63).contains(&size) {
        return Err(Error::Invalid(format!("kernel size must be odd and in 3..=63, got {size}")));
    }
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::Invalid(format!("blur intensity must lie in [0, 1], got {intensity}")));
    }
    let steps = (size * size).max(64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step_len = intensity * (size - 1) as f64 / steps as f64;
    let jitter = 1.5 * intensity / (steps as f64).sqrt();
    let jump_prob = 2.0 * intensity / steps as f64;

    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut path = Vec::with_capacity(steps + 1);
    let (mut x, mut y) = (0.0f64, 0.0f64);
    path.push((x, y));
    for _ in 0..steps {
        let n: f64 = StandardNormal.sample(&mut rng);
        heading += jitter * n;
        if rng.random::<f64>() < jump_prob {
            let turn = rng.random_range(std::f64::consts::FRAC_PI_2..std::f64::consts::PI);
            heading += if rng.random::<bool>() { turn } else { -turn };
        }
        x += step_len * heading.cos();
        y += step_len * heading.sin();
        path.push((x, y));
    }

    let (min_x, max_x) = path.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_y, max_y) = path.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let center = (size - 1) as f64 / 2.0;
    let (ox, oy) = (center - (min_x + max_x) / 2.0, center - (min_y + max_y) / 2.0);

    let last = (size - 1) as f64;
    let mut w = vec![0.0; size * size];
    for &(px, py) in &path {
        let (px, py) = ((px + ox).clamp(0.0, last), (py + oy).clamp(0.0, last));
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let wt = wx * wy;
                if wt > 0.0 {
                    w[(y0 + dy) * size + x0 + dx] += wt;
                }
            }
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    BlurKernel::new(size, w)
}

/// Convolve every channel with `kernel` using reflected borders; the output
/// is clamped to the normalized range.
pub fn apply_blur(image: &ImageBatch, kernel: &BlurKernel) -> Result<ImageBatch> {
    let (n, c, h, w) = image.dims();
    let k = kernel.size();
    if k > h || k > w {
        return Err(Error::Invalid(format!("{k}×{k} kernel does not fit a {h}×{w} image")));
    }
    let r = (k / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = kernel
        .weights()
        .iter()
        .enumerate()
        .filter(|(_, &wt)| wt > 0.0)
        .map(|(i, &wt)| ((i / k) as isize - r, (i % k) as isize - r, wt))
        .collect();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in image.tensor().data().chunks(h * w) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for &(dy, dx, wt) in &taps {
                    let sy = reflect_index(y - dy, h);
                    let sx = reflect_index(x - dx, w);
                    acc += wt * plane[sy * w + sx] as f64;
                }
                out.push((acc as f32).clamp(-1.0, 1.0));
            }
        }
    }
    ImageBatch::new(Tensor::new(&[n, c, h, w], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub size: usize,
    pub intensity: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { size: 15, intensity: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Blur,
    Sharp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub src: String,
    /// Relative to the corpus root.
    pub dst: String,
    pub group: Group,
    pub kernel_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// `"random_trajectory"`, or `"external blur"` when the blur half was
    /// supplied already blurred.
    pub blur_model: String,
    pub kernel_cfg: Option<KernelConfig>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLUR_DIR: &str = "blur";
pub const SHARP_DIR: &str = "sharp";

#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedCorpus {
    pub blur_group: Vec<PathBuf>,
    pub sharp_group: Vec<PathBuf>,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

/// Where the blurred half comes from.
#[derive(Clone, Debug)]
pub enum BlurSource {
    /// Blur the sources with sampled kernels.
    Synthetic(KernelConfig),
    /// Take the same-named file from this directory, already blurred.
    External(PathBuf),
}

/// Split the images in `source_dir` in half by seeded shuffle, blur one half
/// into `out_dir/blur` and copy the other into `out_dir/sharp`.
pub fn build_corpus(source_dir: &Path, out_dir: &Path, seed: u64, blur: &BlurSource) -> Result<UnpairedCorpus> {
    let mut sources = imaging::list_images(source_dir)?;
    if sources.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 source images in {}, found {}",
            source_dir.display(),
            sources.len()
        )));
    }
    if let BlurSource::Synthetic(cfg) = blur {
        sample_kernel(0, cfg.size, cfg.intensity)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sources.shuffle(&mut rng);
    let half = sources.len() / 2;

    let blur_dir = out_dir.join(BLUR_DIR);
    let sharp_dir = out_dir.join(SHARP_DIR);
    for d in [&blur_dir, &sharp_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut entries = Vec::with_capacity(sources.len());
    let mut blur_group = Vec::with_capacity(half);
    let mut sharp_group = Vec::with_capacity(sources.len() - half);
    for (i, src) in sources.iter().enumerate() {
        let file_name = src.file_name().expect("listed images have file names");
        if i < half {
            let (dst_name, kernel_seed) = match blur {
                BlurSource::Synthetic(cfg) => {
                    let kseed: u64 = rng.random();
                    let kernel = sample_kernel(kseed, cfg.size, cfg.intensity)?;
                    let img = imaging::load_image(src, 3, None)?;
                    let stem = src.file_stem().expect("file stem").to_string_lossy();
                    let name = format!("{stem}.png");
                    imaging::save_png(&apply_blur(&img, &kernel)?, 0, &blur_dir.join(&name))?;
                    (name, Some(kseed))
                }
                BlurSource::External(dir) => {
                    let counterpart = dir.join(file_name);
                    let dst = blur_dir.join(file_name);
                    fs::copy(&counterpart, &dst).map_err(|e| Error::io(&counterpart, e))?;
                    (file_name.to_string_lossy().into_owned(), None)
                }
            };
            blur_group.push(blur_dir.join(&dst_name));
            entries.push(ManifestEntry {
                src: src.to_string_lossy().into_owned(),
                dst: format!("{BLUR_DIR}/{dst_name}"),
                group: Group::Blur,
                kernel_seed,
            });
        } else {
            let dst = sharp_dir.join(file_name);
            fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
            sharp_group.push(dst);
            entries.push(ManifestEntry {
                src: src.to_string_lossy().into_owned(),
                dst: format!("{SHARP_DIR}/{}", file_name.to_string_lossy()),
                group: Group::Sharp,
                kernel_seed: None,
            });
        }
    }

    let manifest = match blur {
        BlurSource::Synthetic(cfg) => Manifest {
            seed,
            blur_model: "random_trajectory".into(),
            kernel_cfg: Some(*cfg),
            entries,
        },
        BlurSource::External(_) => Manifest { seed, blur_model: "external blur".into(), kernel_cfg: None, entries },
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(UnpairedCorpus { blur_group, sharp_group, manifest, manifest_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> ImageBatch {
        ImageBatch::new(Tensor::from_fn(&[1, 1, h, w], |i| f(i / w, i % w))).unwrap()
    }

    #[test]
    fn zero_intensity_is_a_centered_delta() {
        let k = sample_kernel(11, 9, 0.0).unwrap();
        assert_eq!(k, BlurKernel::delta(9).unwrap());
        assert_eq!(k.weights()[40], 1.0);
    }

    #[test]
    fn kernels_are_normalized_and_seeded() {
        for seed in 0..50 {
            for &(size, intensity) in &[(3, 1.0), (15, 0.5), (31, 0.9), (63, 0.2)] {
                let k = sample_kernel(seed, size, intensity).unwrap();
                let total: f64 = k.weights().iter().sum();
                assert!((total - 1.0).abs() < 1e-6);
                assert!(k.weights().iter().all(|&w| w >= 0.0));
                assert_eq!(k, sample_kernel(seed, size, intensity).unwrap());
            }
        }
        assert_ne!(sample_kernel(1, 15, 0.5).unwrap(), sample_kernel(2, 15, 0.5).unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(sample_kernel(0, 8, 0.5).is_err());
        assert!(sample_kernel(0, 1, 0.5).is_err());
        assert!(sample_kernel(0, 65, 0.5).is_err());
        assert!(sample_kernel(0, 9, 1.5).is_err());
    }

    #[test]
    fn delta_blur_is_identity() {
        let img = batch(12, 10, |y, x| ((y * 7 + x * 3) % 11) as f32 / 11.0 - 0.5);
        assert_eq!(apply_blur(&img, &BlurKernel::delta(5).unwrap()).unwrap(), img);
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = batch(16, 16, |_, _| 0.3);
        let k = sample_kernel(5, 9, 0.8).unwrap();
        for v in apply_blur(&img, &k).unwrap().tensor().data() {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_kernel_on_impulse() {
        let img = batch(11, 11, |y, x| if (y, x) == (5, 5) { 1.0 } else { 0.0 });
        let out = apply_blur(&img, &BlurKernel::uniform(5).unwrap()).unwrap();
        let d = out.tensor().data();
        for y in 0..11 {
            for x in 0..11 {
                let inside = (3..=7).contains(&y) && (3..=7).contains(&x);
                let want = if inside { 1.0 / 25.0 } else { 0.0 };
                assert!((d[y * 11 + x] - want).abs() < 1e-7, "({y},{x})");
            }
        }
    }

    #[test]
    fn asymmetric_kernel_is_convolution_not_correlation() {
        // weight at offset (0, +1): the impulse must move right
        let mut w = vec![0.0; 9];
        w[5] = 1.0;
        let k = BlurKernel::new(3, w).unwrap();
        let img = batch(5, 5, |y, x| if (y, x) == (2, 2) { 1.0 } else { 0.0 });
        let out = apply_blur(&img, &k).unwrap();
        assert_eq!(out.tensor().data()[2 * 5 + 3], 1.0);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let img = batch(8, 8, |_, _| 0.0);
        assert!(apply_blur(&img, &BlurKernel::uniform(9).unwrap()).is_err());
    }

    #[test]
    fn blur_preserves_mean() {
        let img = batch(64, 64, |y, x| {
            0.6 * ((x as f32 * 0.31).sin() * (y as f32 * 0.17).cos()) + 0.1 * (((x * 13 + y * 7) % 5) as f32 - 2.0) / 2.0
        });
        let k = sample_kernel(3, 15, 0.7).unwrap();
        let out = apply_blur(&img, &k).unwrap();
        let m0 = img.tensor().mean();
        let m1 = out.tensor().mean();
        assert!((m0 - m1).abs() < 1e-3, "{m0} vs {m1}");
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }

    #[test]
    fn support_grows_with_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for seed in 0..1000 {
            let intensity: f64 = rng.random();
            xs.push(intensity);
            ys.push(sample_kernel(seed, 21, intensity).unwrap().support(1e-4) as f64);
        }
        let (rx, ry) = (ranks(&xs), ranks(&ys));
        let mean = (xs.len() - 1) as f64 / 2.0;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
        let rho = cov / (vx * vy).sqrt();
        assert!(rho > 0.5, "spearman {rho}");
    }
}
