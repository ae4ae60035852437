//! The demo's operations in plain Rust, so they can be tested natively.

use std::sync::OnceLock;

use usaad::blursynth::{apply_blur, sample_kernel};
use usaad::imaging::{self, ImageBatch};
use usaad::metrics::{self, nr_features, nr_score, piqe_score, NrModel, PIQE_MIN_SIZE};
use usaad::saam::attention_coefficients;
use usaad::synth;
use usaad::tensor::Tensor;
use usaad::{Error, Result};

/// Side of the kernel preview, in pixels.
pub const KERNEL_VIEW: usize = 96;

/// A synthetic scene, a sampled motion kernel and the blurred scene.
#[derive(Clone, Debug)]
pub struct BlurOutcome {
    pub size: usize,
    pub sharp: Vec<u8>,
    pub blurred: Vec<u8>,
    /// `KERNEL_VIEW²` RGBA, nearest-neighbour enlarged and scaled so the
    /// heaviest tap is white.
    pub kernel: Vec<u8>,
    pub psnr: f64,
    pub support: usize,
}

fn rgba(batch: &ImageBatch) -> Vec<u8> {
    let (_, _, rgb) = imaging::to_u8(batch, 0);
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

pub fn blur_scene(scene_seed: u64, size: usize, kernel_seed: u64, kernel_size: usize, intensity: f64) -> Result<BlurOutcome> {
    if !(16..=512).contains(&size) {
        return Err(Error::Invalid(format!("scene size must lie in 16..=512, got {size}")));
    }
    let sharp = synth::natural(scene_seed, size, 3);
    let kernel = sample_kernel(kernel_seed, kernel_size, intensity)?;
    let blurred = apply_blur(&sharp, &kernel)?;

    let k = kernel.size();
    let peak = kernel.weights().iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut view = Vec::with_capacity(KERNEL_VIEW * KERNEL_VIEW * 4);
    for y in 0..KERNEL_VIEW {
        for x in 0..KERNEL_VIEW {
            let w = kernel.weights()[(y * k / KERNEL_VIEW) * k + x * k / KERNEL_VIEW];
            let v = (255.0 * w / peak).round() as u8;
            view.extend_from_slice(&[v, v, v, 255]);
        }
    }
    Ok(BlurOutcome {
        size,
        psnr: metrics::psnr(&blurred, &sharp)?,
        sharp: rgba(&sharp),
        blurred: rgba(&blurred),
        kernel: view,
        support: kernel.support(1e-4),
    })
}

/// β for one pair of channel descriptors.
pub fn attention(v_hi: &[f64], v_lo: &[f64]) -> Result<Vec<f64>> {
    if v_hi.is_empty() {
        return Err(Error::Invalid("descriptors must not be empty".into()));
    }
    let hi = Tensor::new(&[1, v_hi.len()], v_hi.to_vec())?;
    let lo = Tensor::new(&[1, v_lo.len()], v_lo.to_vec())?;
    Ok(attention_coefficients(&hi, &lo)?.into_data())
}

/// No-reference scores of an RGBA image; PIQE is absent below its minimum size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub nr_score: f64,
    pub piqe: Option<f64>,
}

fn builtin_model() -> Result<&'static NrModel> {
    static MODEL: OnceLock<NrModel> = OnceLock::new();
    if let Some(m) = MODEL.get() {
        return Ok(m);
    }
    let model = NrModel::builtin()?;
    Ok(MODEL.get_or_init(|| model))
}

pub fn quality(rgba: &[u8], width: usize, height: usize) -> Result<Quality> {
    if rgba.len() != width * height * 4 {
        return Err(Error::Invalid(format!("expected {} RGBA bytes for {width}×{height}, got {}", width * height * 4, rgba.len())));
    }
    let plane = width * height;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgba.chunks_exact(4).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = imaging::normalize(px[c]);
        }
    }
    let image = ImageBatch::new(Tensor::new(&[1, 3, height, width], data)?)?;
    let nr = nr_score(&nr_features(&image)?, Some(builtin_model()?))?;
    let piqe = if width >= PIQE_MIN_SIZE && height >= PIQE_MIN_SIZE { Some(piqe_score(&image)?) } else { None };
    Ok(Quality { nr_score: nr, piqe })
}
