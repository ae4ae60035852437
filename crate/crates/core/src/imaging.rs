//! Image I/O, [-1, 1] normalization, resampling and the input pyramid.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, DynamicImage};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// `N×C×H×W` image data normalized to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor<f32>);

impl ImageBatch {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4()?;
        if c == 0 {
            return Err(Error::Shape("image batch with zero channels".into()));
        }
        Ok(Self(tensor))
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[n, c, h, w]))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    /// `(N, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked on construction")
    }

    pub fn len(&self) -> usize {
        self.dims().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    /// Single-item batch holding image `i`.
    pub fn item(&self, i: usize) -> ImageBatch {
        let (_, c, h, w) = self.dims();
        ImageBatch(Tensor::new(&[1, c, h, w], self.0.item_slice(i).to_vec()).expect("shape"))
    }

    /// Stack single images (or batches) along N.
    pub fn stack(items: &[ImageBatch]) -> Result<ImageBatch> {
        let first = items.first().ok_or_else(|| Error::Invalid("cannot stack zero images".into()))?;
        let (_, c, h, w) = first.dims();
        let mut n = 0;
        let mut data = Vec::new();
        for it in items {
            let (ni, ci, hi, wi) = it.dims();
            if (ci, hi, wi) != (c, h, w) {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", first.0.shape(), it.0.shape())));
            }
            n += ni;
            data.extend_from_slice(it.0.data());
        }
        Ok(ImageBatch(Tensor::new(&[n, c, h, w], data)?))
    }

    /// Clamp into the normalized range.
    pub fn clamped(&self) -> ImageBatch {
        ImageBatch(self.0.map(|v| v.clamp(-1.0, 1.0)))
    }
}

#[inline]
pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn denormalize(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// PNG/JPEG files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("image directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    files.sort();
    Ok(files)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// ITU-R BT.601 luma of an 8-bit RGB triple.
#[inline]
pub fn luma601(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Convert a decoded image to a `1×C×H×W` batch, resizing to `size×size`
/// when requested.
pub fn image_to_batch(img: &DynamicImage, channels: usize, size: Option<u32>) -> Result<ImageBatch> {
    if channels != 1 && channels != 3 {
        return Err(Error::Invalid(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut rgb = img.to_rgb8();
    if let Some(s) = size {
        if rgb.width() != s || rgb.height() != s {
            rgb = image::imageops::resize(&rgb, s, s, FilterType::CatmullRom);
        }
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; channels * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        if channels == 3 {
            for c in 0..3 {
                data[c * h * w + i] = normalize(px.0[c]);
            }
        } else {
            let l = luma601(px.0[0] as f32, px.0[1] as f32, px.0[2] as f32).round().clamp(0.0, 255.0);
            data[i] = normalize(l as u8);
        }
    }
    ImageBatch::new(Tensor::new(&[1, channels, h, w], data)?)
}

/// Load one image file.
pub fn load_image(path: &Path, channels: usize, size: Option<u32>) -> Result<ImageBatch> {
    image_to_batch(&decode(path)?, channels, size)
}

/// Load every decodable image of `dir` at `size×size`, ordered by file name.
///
/// Undecodable files are skipped with a warning; the call fails if nothing
/// decodable remains.
pub fn load_images(dir: &Path, channels: usize, size: u32) -> Result<ImageBatch> {
    load_images_named(dir, channels, size).map(|(_, b)| b)
}

/// [`load_images`] that also returns the path of every loaded image.
pub fn load_images_named(dir: &Path, channels: usize, size: u32) -> Result<(Vec<PathBuf>, ImageBatch)> {
    let mut names = Vec::new();
    let mut items = Vec::new();
    for path in list_images(dir)? {
        match load_image(&path, channels, Some(size)) {
            Ok(b) => {
                names.push(path);
                items.push(b);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if items.is_empty() {
        return Err(Error::Data(format!("no decodable images in {}", dir.display())));
    }
    Ok((names, ImageBatch::stack(&items)?))
}

/// 8-bit interleaved pixels of image `i` (grayscale or RGB).
pub fn to_u8(batch: &ImageBatch, i: usize) -> (usize, usize, Vec<u8>) {
    let (_, c, h, w) = batch.dims();
    let src = batch.tensor().item_slice(i);
    let mut out = vec![0u8; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[p * c + ch] = denormalize(src[ch * h * w + p]);
        }
    }
    (w, h, out)
}

/// Write image `i` of a batch as a PNG.
pub fn save_png(batch: &ImageBatch, i: usize, path: &Path) -> Result<()> {
    let (w, h, px) = to_u8(batch, i);
    let color = if batch.channels() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    if batch.channels() != 1 && batch.channels() != 3 {
        return Err(Error::Invalid(format!("cannot write {}-channel PNG", batch.channels())));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(path, &px, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        a * (((x - 5.0) * x + 8.0) * x - 4.0)
    } else {
        0.0
    }
}

/// Normalized taps `(first_index, weights)` per output sample.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    // stretching the kernel by the downscale factor low-passes before decimation
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize + 1;
            let hi = (center + support).ceil() as isize - 1;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((i as f64 - center) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Antialiased separable bicubic resampling to `out_h×out_w`, clamped to
/// the normalized range.
pub fn resample_bicubic(batch: &ImageBatch, out_h: usize, out_w: usize) -> ImageBatch {
    let (n, c, h, w) = batch.dims();
    let ty = cubic_taps(h, out_h);
    let tx = cubic_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut tmp = vec![0f64; h * out_w];
    for plane in batch.tensor().data().chunks(h * w) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (xo, taps) in tx.iter().enumerate() {
                tmp[y * out_w + xo] = taps.iter().map(|&(i, wg)| row[i] as f64 * wg).sum();
            }
        }
        for taps in &ty {
            for xo in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, wg)| tmp[i * out_w + xo] * wg).sum();
                out.push((v as f32).clamp(-1.0, 1.0));
            }
        }
    }
    ImageBatch(Tensor::new(&[n, c, out_h, out_w], out).expect("shape"))
}

/// Bilinear resampling by exactly 2 or 0.5.
pub fn resize(batch: &ImageBatch, factor: f64) -> Result<ImageBatch> {
    let t = if factor == 2.0 {
        tensor::upsample2x(batch.tensor())?
    } else if factor == 0.5 {
        tensor::downsample2x(batch.tensor())?
    } else {
        return Err(Error::Invalid(format!("resize factor must be 2 or 0.5, got {factor}")));
    };
    ImageBatch::new(t)
}

/// Multi-resolution view of one batch, coarsest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    levels: Vec<ImageBatch>,
}

impl ImagePyramid {
    pub fn levels(&self) -> &[ImageBatch] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &ImageBatch {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Build `n_scales` levels at `M/2^(n-1), …, M/2, M`; the last level is the
/// input itself and coarser levels are bicubic-antialiased reductions of it.
pub fn build_pyramid(batch: &ImageBatch, n_scales: usize) -> Result<ImagePyramid> {
    if n_scales == 0 {
        return Err(Error::Invalid("pyramid needs at least one scale".into()));
    }
    let (_, _, h, w) = batch.dims();
    let div = 1usize << (n_scales - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "{n_scales}-level pyramid needs height and width divisible by {div}, got {h}×{w}"
        )));
    }
    let mut levels: Vec<ImageBatch> = (1..n_scales)
        .rev()
        .map(|k| resample_bicubic(batch, h >> k, w >> k))
        .collect();
    levels.push(batch.clone());
    Ok(ImagePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> ImageBatch {
        ImageBatch::new(Tensor::from_fn(&[n, c, h, w], |i| {
            let x = (i % w) as f32 / w as f32;
            let y = ((i / w) % h) as f32 / h as f32;
            0.8 * (x - 0.5) + 0.6 * (y - 0.5)
        }))
        .unwrap()
    }

    #[test]
    fn normalize_roundtrips_every_byte() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
        assert_eq!(normalize(255), 1.0);
        assert_eq!(normalize(0), -1.0);
    }

    #[test]
    fn pyramid_of_256_has_64_128_256() {
        let p = build_pyramid(&ImageBatch::zeros(1, 3, 256, 256), 3).unwrap();
        let sizes: Vec<usize> = p.levels().iter().map(|l| l.dims().2).collect();
        assert_eq!(sizes, vec![64, 128, 256]);
    }

    #[test]
    fn single_level_pyramid_is_identity() {
        let b = ramp(1, 3, 64, 64);
        let p = build_pyramid(&b, 1).unwrap();
        assert_eq!(p.levels(), &[b]);
    }

    #[test]
    fn pyramid_preserves_constants() {
        let b = ImageBatch::new(Tensor::full(&[2, 3, 32, 32], 0.3)).unwrap();
        let p = build_pyramid(&b, 3).unwrap();
        for l in p.levels() {
            assert!(l.tensor().data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn pyramid_rejects_indivisible_size() {
        let err = build_pyramid(&ImageBatch::zeros(1, 3, 30, 30), 3).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn coarse_level_upsampled_matches_next_level_shape() {
        let b = ramp(1, 1, 64, 64);
        let p = build_pyramid(&b, 3).unwrap();
        let up = resize(&p.levels()[0], 2.0).unwrap();
        assert_eq!(up.dims(), p.levels()[1].dims());
    }

    #[test]
    fn pyramid_is_deterministic() {
        let b = ramp(2, 3, 32, 32);
        assert_eq!(build_pyramid(&b, 3).unwrap(), build_pyramid(&b, 3).unwrap());
    }

    #[test]
    fn resize_shapes_and_constants() {
        let b = ImageBatch::new(Tensor::full(&[1, 3, 64, 64], -0.25)).unwrap();
        let up = resize(&b, 2.0).unwrap();
        assert_eq!(up.dims(), (1, 3, 128, 128));
        assert!(up.tensor().data().iter().all(|&v| v == -0.25));
        assert!(resize(&ImageBatch::zeros(1, 1, 5, 4), 0.5).is_err());
        assert!(resize(&b, 3.0).is_err());
    }

    #[test]
    fn down_of_up_recovers_smooth_image() {
        // low-frequency cosines, flat at the borders
        let (h, w) = (32, 32);
        let b = ImageBatch::new(Tensor::from_fn(&[1, 1, h, w], |i| {
            let x = ((i % w) as f32 + 0.5) / w as f32;
            let y = ((i / w) as f32 + 0.5) / h as f32;
            0.5 * (std::f32::consts::TAU * x).cos() * (std::f32::consts::PI * y).cos()
        }))
        .unwrap();
        let back = resize(&resize(&b, 2.0).unwrap(), 0.5).unwrap();
        let worst = back
            .tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(worst < 1e-2, "max per-pixel error {worst}");
    }

    #[test]
    fn load_rejects_missing_and_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_images(&dir.path().join("nope"), 3, 8).is_err());
        assert!(load_images(dir.path(), 3, 8).is_err());
    }

    #[test]
    fn load_white_image_is_all_ones_and_skips_garbage() {
        let dir = tempfile::tempdir().unwrap();
        image::RgbImage::from_pixel(16, 16, image::Rgb([255, 255, 255]))
            .save(dir.path().join("white.png"))
            .unwrap();
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let b = load_images(dir.path(), 3, 16).unwrap();
        assert_eq!(b.dims(), (1, 3, 16, 16));
        assert!(b.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn load_resizes_and_stays_in_range() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..4u8 {
            let img = image::RgbImage::from_fn(40, 30, |x, y| {
                image::Rgb([(x * 6) as u8, (y * 8) as u8, k.wrapping_mul(60)])
            });
            img.save(dir.path().join(format!("img{k}.png"))).unwrap();
        }
        let b = load_images(dir.path(), 3, 32).unwrap();
        assert_eq!(b.dims(), (4, 3, 32, 32));
        let (lo, hi) = b.tensor().min_max();
        assert!(lo >= -1.0 && hi <= 1.0);
        let g = load_images(dir.path(), 1, 32).unwrap();
        assert_eq!(g.dims(), (4, 1, 32, 32));
    }

    #[test]
    fn png_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let b = ImageBatch::new(Tensor::from_fn(&[1, 3, 8, 8], |i| normalize((i * 37 % 256) as u8))).unwrap();
        let path = dir.path().join("x.png");
        save_png(&b, 0, &path).unwrap();
        assert_eq!(load_image(&path, 3, None).unwrap(), b);
    }
}
