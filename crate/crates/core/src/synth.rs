//! Seeded synthetic scenes with hard edges, for smoke runs and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::imaging::ImageBatch;
use crate::tensor::Tensor;

/// A `1×channels×size×size` scene: a soft gradient background overlaid with
/// random rectangles, discs and stripe patches. Values stay within ±0.9.
pub fn scene(seed: u64, size: usize, channels: usize) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let color = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..channels).map(|_| rng.random_range(-0.85f32..0.85)).collect() };

    let base = color(&mut rng);
    let tilt = color(&mut rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = vec![0f32; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 / s - 0.5) * ca + (y as f32 / s - 0.5) * sa) * 0.3;
            for c in 0..channels {
                img[(c * size + y) * size + x] = (base[c] * 0.6 + tilt[c] * t).clamp(-0.9, 0.9);
            }
        }
    }

    let shapes = rng.random_range(4..8);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let kind = rng.random_range(0..3);
        let cx = rng.random_range(0.1..0.9) * s;
        let cy = rng.random_range(0.1..0.9) * s;
        let r = rng.random_range(0.08..0.25) * s;
        let (hw, hh) = (r * rng.random_range(0.5..1.5), r * rng.random_range(0.5..1.5));
        let period = rng.random_range(3.0f32..7.0);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = match kind {
                    0 => dx.abs() < hw && dy.abs() < hh,
                    1 => dx * dx + dy * dy < r * r,
                    _ => dx.abs() < hw && dy.abs() < hh && ((x as f32 / period) as i32) % 2 == 0,
                };
                if inside {
                    for c in 0..channels {
                        img[(c * size + y) * size + x] = col[c];
                    }
                }
            }
        }
    }
    ImageBatch::new(Tensor::new(&[1, channels, size, size], img).expect("shape")).expect("rank 4")
}

/// A [`scene`] overlaid with multi-octave value-noise texture and faint
/// sensor grain, so flat regions carry the fine detail photographs have.
/// Values stay within ±0.95.
/// Grain std of [`natural`], about 1.5 levels of 255.
const GRAIN: f32 = 0.012;

pub fn natural(seed: u64, size: usize, channels: usize) -> ImageBatch {
    let base = scene(seed, size, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut tex = vec![0f32; size * size];
    let mut amp = 0.12f32;
    let mut cells = 4usize;
    while cells <= size {
        let grid: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let step = size as f32 / cells as f32;
        for y in 0..size {
            let gy = y as f32 / step;
            let (y0, fy) = ((gy as usize).min(cells - 1), gy - (gy as usize).min(cells - 1) as f32);
            for x in 0..size {
                let gx = x as f32 / step;
                let (x0, fx) = ((gx as usize).min(cells - 1), gx - (gx as usize).min(cells - 1) as f32);
                let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                tex[y * size + x] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
        amp *= 0.75;
        cells *= 2;
    }
    let mut data = base.into_tensor().into_data();
    for c in 0..channels {
        for (v, t) in data[c * size * size..(c + 1) * size * size].iter_mut().zip(&tex) {
            let grain: f32 = GRAIN * rng.sample::<f32, _>(StandardNormal);
            *v = (*v + t + grain).clamp(-0.95, 0.95);
        }
    }
    ImageBatch::new(Tensor::new(&[1, channels, size, size], data).expect("shape")).expect("rank 4")
}

/// A text-like page: dark strokes and glyph blocks on a light background.
/// Every page shares the same two tones, so pages differ only in layout.
pub fn document(seed: u64, size: usize, channels: usize) -> ImageBatch {
    const PAPER: f32 = 0.8;
    const INK: f32 = -0.8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut page = vec![PAPER; size * size];
    let fill = |page: &mut [f32], x0: usize, y0: usize, w: usize, h: usize| {
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                page[y * size + x] = INK;
            }
        }
    };
    let line_h = (size / 8).max(4);
    let mut y = rng.random_range(1..line_h);
    while y + line_h <= size {
        let glyph_h = rng.random_range(line_h / 2..line_h);
        let mut x = rng.random_range(1..4);
        while x + 2 < size {
            let w = rng.random_range(1..=3);
            let gap = rng.random_range(1..=3);
            match rng.random_range(0..4) {
                // vertical stem
                0 | 1 => fill(&mut page, x, y, w, glyph_h),
                // bar on top, middle or bottom
                2 => {
                    let at = y + rng.random_range(0..glyph_h.max(1));
                    fill(&mut page, x, at, w + gap + 1, 1 + w / 2);
                }
                // word space
                _ => {}
            }
            x += w + gap;
        }
        y += line_h + rng.random_range(0..3);
    }
    let data = (0..channels).flat_map(|_| page.iter().copied()).collect();
    ImageBatch::new(Tensor::new(&[1, channels, size, size], data).expect("shape")).expect("rank 4")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_bounded_and_varied() {
        let a = scene(3, 32, 3);
        assert_eq!(a, scene(3, 32, 3));
        assert_ne!(a, scene(4, 32, 3));
        let (lo, hi) = a.tensor().min_max();
        assert!(lo >= -0.9 && hi <= 0.9 && hi - lo > 0.2);
        assert_eq!(scene(1, 16, 1).dims(), (1, 1, 16, 16));
    }

    #[test]
    fn natural_scenes_are_textured() {
        let n = natural(5, 64, 1);
        assert_eq!(n, natural(5, 64, 1));
        let d = n.tensor().data();
        let (lo, hi) = n.tensor().min_max();
        assert!(lo >= -0.95 && hi <= 0.95);
        // almost no pixel equals its right neighbour, unlike the flat scene
        let flat = (0..64 * 64 - 1).filter(|&i| i % 64 != 63 && d[i] == d[i + 1]).count();
        assert!(flat < 64, "{flat} flat neighbours");
    }

    #[test]
    fn documents_are_two_tone() {
        let d = document(2, 64, 3);
        assert_eq!(d, document(2, 64, 3));
        let ink = d.tensor().data().iter().filter(|&&v| v < 0.0).count();
        assert!(d.tensor().data().iter().all(|&v| v == 0.8 || v == -0.8));
        let frac = ink as f64 / d.tensor().numel() as f64;
        assert!((0.05..0.6).contains(&frac), "ink fraction {frac}");
    }
}
